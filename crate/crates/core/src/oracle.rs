//! Finite-difference oracles.
//!
//! These treat the functions they check as black boxes: they only evaluate
//! scalar losses (or gradients, for Hessian checks) at perturbed points and
//! never touch the analytic backward passes.

/// Central differences of `f` at `point`.
pub fn central_diff<F>(f: F, point: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + eps;
            let up = f(&x);
            x[i] = point[i] - eps;
            let down = f(&x);
            x[i] = point[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `(g(x + eps v) - g(x - eps v)) / 2eps` for a vector-valued `g`.
pub fn directional_diff<G>(g: G, point: &[f64], v: &[f64], eps: f64) -> Vec<f64>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    let up: Vec<f64> = point.iter().zip(v).map(|(x, d)| x + eps * d).collect();
    let down: Vec<f64> = point.iter().zip(v).map(|(x, d)| x - eps * d).collect();
    g(&up)
        .iter()
        .zip(g(&down))
        .map(|(a, b)| (a - b) / (2.0 * eps))
        .collect()
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_of_quadratic() {
        let g = central_diff(|v| v[0] * v[0] + 3.0 * v[0] * v[1], &[1.0, 2.0], 1e-5);
        assert!((g[0] - 8.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn directional_diff_of_linear_map() {
        let g = |x: &[f64]| vec![2.0 * x[0], x[0] + x[1]];
        let d = directional_diff(g, &[0.3, 0.1], &[1.0, -1.0], 1e-4);
        assert!((d[0] - 2.0).abs() < 1e-10);
        assert!(d[1].abs() < 1e-10);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(&[0.0], &[0.0], 1e-12), 0.0);
        assert!((relative_error(&[1.0], &[1.1], 1e-12) - 0.1 / 1.1).abs() < 1e-12);
    }
}
