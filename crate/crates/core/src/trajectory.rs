//! Matching training trajectories on an auxiliary dataset, and projecting
//! the next global model with it.
//!
//! The student `w_hat` is obtained from `w_start` by `R` full-batch gradient
//! steps of size `beta` on the auxiliary rows. The matching loss
//! `||w_hat - w_end||^2 / ||w_end - w_start||^2` is differentiated with
//! respect to the auxiliary features and `beta` by reverse accumulation
//! through the unrolled steps:
//!
//! ```text
//! a_R = 2 (w_R - w_end) / D
//! for r = R-1 .. 0:
//!     d_beta     -= <a_{r+1}, g(w_r)>
//!     d_features -= beta * d/dx <a_{r+1}, g(w_r, x)>
//!     a_r         = a_{r+1} - beta * H(w_r) a_{r+1}
//! ```
//!
//! The Hessian product and the mixed derivative come from one
//! forward-over-reverse pass of the model (see [`crate::model::second_order`]).

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AuxiliaryDataset;
use crate::error::{FedError, Result};
use crate::model::{self, Batch, ModelSpec};
use crate::params::{LayerMap, ParamVector};

/// Squared endpoint distances below this make the matching loss undefined.
pub const DEGENERATE_THRESHOLD: f64 = 1e-24;

/// The most recent global models, oldest first, at most `m + 1` of them.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryWindow {
    capacity: usize,
    entries: VecDeque<(u64, ParamVector)>,
}

impl TrajectoryWindow {
    /// Window able to serve endpoints `m` rounds apart.
    pub fn new(m: usize) -> Self {
        TrajectoryWindow {
            capacity: m + 1,
            entries: VecDeque::with_capacity(m + 1),
        }
    }

    pub fn span(&self) -> usize {
        self.capacity - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, round: u64, model: ParamVector) -> Result<()> {
        if let Some(&(last, _)) = self.entries.back() {
            if round <= last {
                return Err(FedError::RoundOrder { last, got: round });
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((round, model));
        Ok(())
    }

    pub fn get(&self, round: u64) -> Option<&ParamVector> {
        self.entries.iter().find(|(r, _)| *r == round).map(|(_, w)| w)
    }

    pub fn latest(&self) -> Option<(u64, &ParamVector)> {
        self.entries.back().map(|(r, w)| (*r, w))
    }

    pub fn rounds(&self) -> Vec<u64> {
        self.entries.iter().map(|(r, _)| *r).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, &ParamVector)> {
        self.entries.iter().map(|(r, w)| (*r, w))
    }

    /// `(w^{t-m}, w^t)` when both rounds are held.
    pub fn endpoints(&self, t: u64, m: u64) -> Option<(&ParamVector, &ParamVector)> {
        if m == 0 || m > self.span() as u64 || t < m {
            return None;
        }
        Some((self.get(t - m)?, self.get(t)?))
    }

    /// Endpoints ending at round `t`, starting at the exact round `t - m` if
    /// held, else the oldest held round no more than `m` rounds back.
    pub fn endpoints_or_oldest(&self, t: u64, m: u64) -> Option<(u64, &ParamVector, &ParamVector)> {
        let end = self.get(t)?;
        let (r, start) = self
            .entries
            .iter()
            .find(|(r, _)| *r < t && t - *r <= m)
            .map(|(r, w)| (*r, w))?;
        Some((r, start, end))
    }
}

/// `H` outer matching iterations of `R` inner steps each, with plain
/// gradient steps of size `aux_lr` on the auxiliary features and `beta_lr`
/// (default: `aux_lr`) on `log beta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MttConfig {
    pub outer_steps: usize,
    pub inner_steps: usize,
    pub aux_lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_lr: Option<f64>,
}

impl Default for MttConfig {
    fn default() -> Self {
        MttConfig {
            outer_steps: 20,
            inner_steps: 10,
            aux_lr: 0.1,
            beta_lr: None,
        }
    }
}

impl MttConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_steps == 0 || self.inner_steps == 0 {
            return Err(FedError::InvalidArgument(
                "trajectory matching needs at least one outer and one inner step".into(),
            ));
        }
        if !(self.aux_lr > 0.0 && self.aux_lr.is_finite()) {
            return Err(FedError::InvalidArgument(format!(
                "aux_lr must be positive, got {}",
                self.aux_lr
            )));
        }
        if let Some(b) = self.beta_lr {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(FedError::InvalidArgument(format!(
                    "beta_lr must be nonnegative, got {b}"
                )));
            }
        }
        Ok(())
    }

    pub fn beta_step(&self) -> f64 {
        self.beta_lr.unwrap_or(self.aux_lr)
    }
}

/// `steps` iterations of `w <- w - step * grad(w)`, checking finiteness.
pub(crate) fn descend<G>(
    start: &ParamVector,
    steps: usize,
    step: f64,
    phase: &'static str,
    mut grad: G,
) -> Result<ParamVector>
where
    G: FnMut(&ParamVector) -> Result<ParamVector>,
{
    let mut w = start.clone();
    for k in 0..steps {
        let g = grad(&w)?;
        w.axpy(-step, &g);
        if !w.is_finite() {
            return Err(FedError::NonFiniteStep { phase, step: k });
        }
    }
    Ok(w)
}

fn check_aux(spec: &ModelSpec, aux: &AuxiliaryDataset) -> Result<()> {
    if aux.dim() != spec.input_dim() {
        return Err(FedError::DimensionMismatch {
            what: "auxiliary features vs model input",
            expected: spec.input_dim(),
            found: aux.dim(),
        });
    }
    Ok(())
}

/// `w_hat` after `r` full-batch steps of size `aux.beta()` from `w_start`.
pub fn unroll_inner(
    spec: &ModelSpec,
    aux: &AuxiliaryDataset,
    w_start: &ParamVector,
    r: usize,
) -> Result<ParamVector> {
    check_aux(spec, aux)?;
    let batch = aux.batch();
    descend(w_start, r, aux.beta(), "auxiliary unroll", |w| {
        model::grad(spec, w, &batch)
    })
}

fn trajectory_scale(w_start: &ParamVector, w_end: &ParamVector) -> Result<f64> {
    w_start.ensure_same_layout(w_end)?;
    let d = w_end.dist_sq(w_start);
    if d < DEGENERATE_THRESHOLD {
        return Err(FedError::DegenerateTrajectory(d));
    }
    Ok(d)
}

pub fn mtt_loss(w_hat: &ParamVector, w_start: &ParamVector, w_end: &ParamVector) -> Result<f64> {
    let d = trajectory_scale(w_start, w_end)?;
    w_hat.ensure_same_layout(w_end)?;
    Ok(w_hat.dist_sq(w_end) / d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaGradient {
    /// Matching loss at the current auxiliary dataset.
    pub loss: f64,
    /// Row-major, same shape as the auxiliary features.
    pub d_features: Vec<f64>,
    pub d_beta: f64,
}

pub fn meta_gradient(
    spec: &ModelSpec,
    aux: &AuxiliaryDataset,
    w_start: &ParamVector,
    w_end: &ParamVector,
    r: usize,
) -> Result<MetaGradient> {
    check_aux(spec, aux)?;
    let scale = trajectory_scale(w_start, w_end)?;
    let batch = aux.batch();
    let beta = aux.beta();

    let mut states = Vec::with_capacity(r + 1);
    let mut grads = Vec::with_capacity(r);
    states.push(w_start.clone());
    for k in 0..r {
        let g = model::grad(spec, &states[k], &batch)?;
        let mut next = states[k].clone();
        next.axpy(-beta, &g);
        if !next.is_finite() {
            return Err(FedError::NonFiniteStep {
                phase: "auxiliary unroll",
                step: k,
            });
        }
        grads.push(g);
        states.push(next);
    }
    let w_hat = &states[r];
    let loss = w_hat.dist_sq(w_end) / scale;

    let mut adjoint = w_hat.sub(w_end);
    adjoint.scale(2.0 / scale);
    let mut d_features = vec![0.0; aux.features().len()];
    let mut d_beta = 0.0;
    for k in (0..r).rev() {
        d_beta -= adjoint.dot(&grads[k]);
        let so = model::second_order(spec, &states[k], &batch, &adjoint)?;
        for (df, m) in d_features.iter_mut().zip(&so.mixed_features) {
            *df -= beta * m;
        }
        adjoint.axpy(-beta, &so.hvp);
    }
    Ok(MetaGradient {
        loss,
        d_features,
        d_beta,
    })
}

#[derive(Clone, Debug)]
pub struct MttOutcome {
    pub aux: AuxiliaryDataset,
    /// Matching loss before each of the `H` updates.
    pub losses: Vec<f64>,
    /// Matching loss after the last update.
    pub final_loss: Option<f64>,
    /// Set when the trajectory was degenerate and nothing was updated.
    pub skipped: bool,
}

/// Runs the outer matching loop. `beta` is updated through `log beta`
/// (`d/d log_beta = beta * d/d beta`).
pub fn mtt_update(
    spec: &ModelSpec,
    aux: &AuxiliaryDataset,
    w_start: &ParamVector,
    w_end: &ParamVector,
    cfg: &MttConfig,
) -> Result<MttOutcome> {
    if trajectory_scale(w_start, w_end).is_err() {
        return Ok(MttOutcome {
            aux: aux.clone(),
            losses: Vec::new(),
            final_loss: None,
            skipped: true,
        });
    }
    let mut cur = aux.clone();
    let mut losses = Vec::with_capacity(cfg.outer_steps);
    for _ in 0..cfg.outer_steps {
        let mg = meta_gradient(spec, &cur, w_start, w_end, cfg.inner_steps)?;
        losses.push(mg.loss);
        let beta = cur.beta();
        for (x, g) in cur.features_mut().iter_mut().zip(&mg.d_features) {
            *x -= cfg.aux_lr * g;
        }
        let log_beta = cur.log_beta() - cfg.beta_step() * beta * mg.d_beta;
        cur.set_log_beta(log_beta);
        if !cur.is_finite() {
            return Err(FedError::NonFinite("auxiliary dataset after matching update"));
        }
    }
    let w_hat = unroll_inner(spec, &cur, w_start, cfg.inner_steps)?;
    let final_loss = Some(mtt_loss(&w_hat, w_start, w_end)?);
    Ok(MttOutcome {
        aux: cur,
        losses,
        final_loss,
        skipped: false,
    })
}

/// `K` full-batch steps of size `eta` on the auxiliary rows from `w_t`.
pub fn project_trajectory(
    spec: &ModelSpec,
    w_t: &ParamVector,
    aux: &AuxiliaryDataset,
    k: usize,
    eta: f64,
) -> Result<ParamVector> {
    check_aux(spec, aux)?;
    let batch: Batch = aux.batch();
    descend(w_t, k, eta, "trajectory projection", |w| {
        model::grad(spec, w, &batch)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxSidecar {
    pub labels: Vec<usize>,
    pub beta: f64,
    pub log_beta: f64,
    pub dim: usize,
    pub num_classes: usize,
    pub round: Option<u64>,
}

fn write_rows(path: &Path, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| FedError::io(path, e))?;
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|_| FedError::MalformedRow {
                    line,
                    reason: format!("cannot parse `{s}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn snapshot_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.csv")), dir.join(format!("{stem}.json")))
}

/// Writes `<stem>.csv` (one feature row per auxiliary sample) and
/// `<stem>.json` (labels, beta, round).
pub fn write_aux_snapshot(
    dir: &Path,
    stem: &str,
    aux: &AuxiliaryDataset,
    round: Option<u64>,
) -> Result<()> {
    let (csv_path, json_path) = snapshot_paths(dir, stem);
    write_rows(&csv_path, aux.features().chunks(aux.dim()).map(<[f64]>::to_vec))?;
    let sidecar = AuxSidecar {
        labels: aux.labels().to_vec(),
        beta: aux.beta(),
        log_beta: aux.log_beta(),
        dim: aux.dim(),
        num_classes: aux.num_classes(),
        round,
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(&json_path, json).map_err(|e| FedError::io(&json_path, e))
}

pub fn read_aux_snapshot(dir: &Path, stem: &str) -> Result<(AuxiliaryDataset, Option<u64>)> {
    let (csv_path, json_path) = snapshot_paths(dir, stem);
    let text = std::fs::read_to_string(&json_path).map_err(|e| FedError::io(&json_path, e))?;
    let side: AuxSidecar = serde_json::from_str(&text)?;
    let features: Vec<f64> = read_rows(&csv_path)?.concat();
    let mut aux = AuxiliaryDataset::new(features, side.labels, side.dim, side.num_classes, 1.0)?;
    aux.set_log_beta(side.log_beta);
    Ok((aux, side.round))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct WindowSidecar {
    span: usize,
    rounds: Vec<u64>,
    layer_map: LayerMap,
}

/// One CSV row of parameters per held model, round stamps in the sidecar.
pub fn write_window_snapshot(dir: &Path, stem: &str, window: &TrajectoryWindow) -> Result<()> {
    let (csv_path, json_path) = snapshot_paths(dir, stem);
    write_rows(&csv_path, window.entries().map(|(_, w)| w.values().to_vec()))?;
    let layer_map = window
        .latest()
        .map(|(_, w)| w.layer_map().clone())
        .ok_or_else(|| FedError::InvalidArgument("cannot snapshot an empty window".into()))?;
    let side = WindowSidecar {
        span: window.span(),
        rounds: window.rounds(),
        layer_map,
    };
    let json = serde_json::to_string_pretty(&side)?;
    std::fs::write(&json_path, json).map_err(|e| FedError::io(&json_path, e))
}

pub fn read_window_snapshot(dir: &Path, stem: &str) -> Result<TrajectoryWindow> {
    let (csv_path, json_path) = snapshot_paths(dir, stem);
    let text = std::fs::read_to_string(&json_path).map_err(|e| FedError::io(&json_path, e))?;
    let side: WindowSidecar = serde_json::from_str(&text)?;
    let rows = read_rows(&csv_path)?;
    if rows.len() != side.rounds.len() {
        return Err(FedError::DimensionMismatch {
            what: "window snapshot rows vs round stamps",
            expected: side.rounds.len(),
            found: rows.len(),
        });
    }
    let mut window = TrajectoryWindow::new(side.span);
    for (round, row) in side.rounds.into_iter().zip(rows) {
        window.push(round, ParamVector::new(row, side.layer_map.clone())?)?;
    }
    Ok(window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{init_auxiliary, AuxMode};

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn identity_gradient_recursion() {
        // g(w) = w: each step multiplies by (1 - step).
        let w = descend(&pv(&[1.0]), 2, 0.1, "t", |w| Ok(w.clone())).unwrap();
        assert!((w.values()[0] - 0.81).abs() < 1e-15);
        let w = descend(&pv(&[1.0]), 5, 0.01, "t", |w| Ok(w.clone())).unwrap();
        assert!((w.values()[0] - 0.99f64.powi(5)).abs() < 1e-15);
        assert!((w.values()[0] - 0.95099).abs() < 1e-5);
    }

    #[test]
    fn zero_step_size_leaves_start() {
        let start = pv(&[0.3, -2.0]);
        let w = descend(&start, 7, 0.0, "t", |w| Ok(w.clone())).unwrap();
        assert_eq!(w, start);
    }

    #[test]
    fn divergence_reports_step() {
        let err = descend(&pv(&[1.0]), 10, -1e200, "t", |w| {
            let mut g = w.clone();
            g.scale(1e200);
            Ok(g)
        })
        .unwrap_err();
        assert!(matches!(err, FedError::NonFiniteStep { step: 0, .. }));
    }

    #[test]
    fn mtt_loss_formula() {
        let s = pv(&[0.0, 0.0]);
        let e = pv(&[2.0, 0.0]);
        assert_eq!(mtt_loss(&e, &s, &e).unwrap(), 0.0);
        assert_eq!(mtt_loss(&s, &s, &e).unwrap(), 1.0);
        assert_eq!(mtt_loss(&pv(&[1.0, 1.0]), &s, &e).unwrap(), 0.5);
        assert!(matches!(
            mtt_loss(&s, &s, &pv(&[1e-13, 0.0])),
            Err(FedError::DegenerateTrajectory(_))
        ));
    }

    #[test]
    fn window_serves_only_held_rounds() {
        let mut win = TrajectoryWindow::new(2);
        for t in 0..5u64 {
            win.push(t, pv(&[t as f64])).unwrap();
        }
        assert_eq!(win.rounds(), vec![2, 3, 4]);
        assert!(win.endpoints(4, 3).is_none());
        let (a, b) = win.endpoints(4, 2).unwrap();
        assert_eq!((a.values()[0], b.values()[0]), (2.0, 4.0));
        assert!(win.push(4, pv(&[0.0])).is_err());
        assert!(win.push(1, pv(&[0.0])).is_err());
    }

    #[test]
    fn fallback_endpoints_stay_within_span() {
        let mut win = TrajectoryWindow::new(2);
        win.push(3, pv(&[3.0])).unwrap();
        win.push(6, pv(&[6.0])).unwrap();
        win.push(7, pv(&[7.0])).unwrap();
        let (r, s, _) = win.endpoints_or_oldest(7, 2).unwrap();
        assert_eq!((r, s.values()[0]), (6, 6.0));
        assert!(win.endpoints_or_oldest(7, 0).is_none());
        assert!(win.endpoints_or_oldest(8, 2).is_none());
    }

    #[test]
    fn zero_inner_steps_give_zero_meta_gradient() {
        let spec = ModelSpec::softmax_regression(2, 2).unwrap();
        let aux = init_auxiliary(None, 2, 2, 2, AuxMode::Server, 4).unwrap();
        let s = spec.init_params(1);
        let e = spec.init_params(2);
        let mg = meta_gradient(&spec, &aux, &s, &e, 0).unwrap();
        assert_eq!(mg.loss, 1.0);
        assert!(mg.d_features.iter().all(|&g| g == 0.0));
        assert_eq!(mg.d_beta, 0.0);
    }

    #[test]
    fn degenerate_trajectory_skips_update() {
        let spec = ModelSpec::softmax_regression(2, 2).unwrap();
        let aux = init_auxiliary(None, 2, 2, 2, AuxMode::Server, 4).unwrap();
        let s = spec.init_params(1);
        let out = mtt_update(&spec, &aux, &s, &s, &MttConfig::default()).unwrap();
        assert!(out.skipped);
        assert_eq!(out.aux, aux);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn aux_snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let aux = init_auxiliary(None, 3, 2, 4, AuxMode::Server, 11).unwrap();
        write_aux_snapshot(dir.path(), "server", &aux, Some(7)).unwrap();
        let (back, round) = read_aux_snapshot(dir.path(), "server").unwrap();
        assert_eq!(back, aux);
        assert_eq!(round, Some(7));
    }

    #[test]
    fn window_snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::mlp(3, &[2], 2, crate::Activation::Tanh).unwrap();
        let mut win = TrajectoryWindow::new(1);
        win.push(4, spec.init_params(1)).unwrap();
        win.push(5, spec.init_params(2)).unwrap();
        write_window_snapshot(dir.path(), "global", &win).unwrap();
        assert_eq!(read_window_snapshot(dir.path(), "global").unwrap(), win);
    }
}
