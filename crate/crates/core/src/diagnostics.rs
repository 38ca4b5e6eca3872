//! Measurement helpers: gradient cosines, per-layer distances and empirical
//! heterogeneity constants.

use crate::data::{AuxiliaryDataset, ClientPartition, Dataset};
use crate::error::{FedError, Result};
use crate::model::{self, Batch, ModelSpec};
use crate::params::ParamVector;

/// Cosine of the angle between `a` and `b`, or `None` if either is zero.
pub fn cosine_similarity(a: &ParamVector, b: &ParamVector) -> Option<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 || a.len() != b.len() {
        return None;
    }
    Some((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityProbe {
    pub cos_aux: Option<f64>,
    pub cos_local: Option<f64>,
}

/// Compares the projected step `w_t - w_proj` and the local step
/// `w_t - w_local` against the realized global step `w_t - w_next`.
pub fn similarity_probe(
    w_t: &ParamVector,
    w_proj: &ParamVector,
    w_local: &ParamVector,
    w_next: &ParamVector,
) -> SimilarityProbe {
    let global = w_t.sub(w_next);
    SimilarityProbe {
        cos_aux: cosine_similarity(&w_t.sub(w_proj), &global),
        cos_local: cosine_similarity(&w_t.sub(w_local), &global),
    }
}

/// `|w_[j] - ref_[j]|` for every layer.
pub fn layer_norms(w: &ParamVector, reference: &ParamVector) -> Result<Vec<f64>> {
    w.ensure_same_layout(reference)?;
    Ok((0..w.layer_map().num_layers())
        .map(|j| w.layer_dist_sq(reference, j).sqrt())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dissimilarity {
    Value(f64),
    /// The global gradient vanishes, so no finite constant certifies the bound.
    Unbounded,
}

/// Gradient of the size-weighted global objective plus each non-empty
/// client's local gradient.
pub fn client_gradients(
    spec: &ModelSpec,
    partition: &ClientPartition,
    data: &Dataset,
    w: &ParamVector,
) -> Result<(ParamVector, Vec<ParamVector>)> {
    let total = partition.total_assigned();
    if total == 0 {
        return Err(FedError::EmptyDataset);
    }
    let mut global = w.zeros_like();
    let mut locals = Vec::new();
    for idx in partition.clients() {
        if idx.is_empty() {
            continue;
        }
        let batch = data.batch().gather(idx)?;
        let g = model::grad(spec, w, &batch)?;
        global.axpy(idx.len() as f64 / total as f64, &g);
        locals.push(g);
    }
    Ok((global, locals))
}

/// `sqrt(mean_i |grad L_i(w)|^2 / |grad L(w)|^2)` over clients holding data.
pub fn estimate_b(
    spec: &ModelSpec,
    partition: &ClientPartition,
    data: &Dataset,
    w: &ParamVector,
) -> Result<Dissimilarity> {
    let (global, locals) = client_gradients(spec, partition, data, w)?;
    let gn = global.norm_sq();
    if gn.sqrt() < 1e-20 {
        return Ok(Dissimilarity::Unbounded);
    }
    let mean = locals.iter().map(|g| g.norm_sq()).sum::<f64>() / locals.len() as f64;
    Ok(Dissimilarity::Value((mean / gn).sqrt()))
}

/// Largest `|grad L(w; data) - grad L(w; aux)|` over the probe points.
pub fn estimate_sigma_d(
    spec: &ModelSpec,
    aux: &AuxiliaryDataset,
    data: &Batch,
    probes: &[ParamVector],
) -> Result<f64> {
    if probes.is_empty() {
        return Err(FedError::InvalidArgument("sigma_d needs at least one probe point".into()));
    }
    let aux_batch = aux.batch();
    let mut worst: f64 = 0.0;
    for w in probes {
        let g = model::grad(spec, w, data)?;
        let ga = model::grad(spec, w, &aux_batch)?;
        worst = worst.max(g.sub(&ga).norm());
    }
    Ok(worst)
}
