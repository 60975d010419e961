//! Central finite-difference utilities used by the gradient oracles.

use super::adapter::AdapterState;
use super::ModelWeights;

/// Relative error between an analytic and a finite-difference gradient entry.
/// Near-zero pairs compare against a 1e-6 floor so FD noise on vanishing
/// gradients does not dominate.
pub fn rel_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
}

/// Central finite differences of `f` with respect to the model parameters at
/// `indices`.
pub fn fd_model_gradient(
    weights: &ModelWeights,
    indices: &[usize],
    h: f64,
    f: impl Fn(&ModelWeights) -> f64,
) -> Vec<f64> {
    let mut probe = weights.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = f(&probe);
        probe.data[i] = orig - h;
        let minus = f(&probe);
        probe.data[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

/// Central finite differences of `f` with respect to entries of one adapted
/// layer's `B_online`.
pub fn fd_adapter_b_gradient(
    adapters: &AdapterState,
    slot: usize,
    indices: &[usize],
    h: f64,
    f: impl Fn(&AdapterState) -> f64,
) -> Vec<f64> {
    let mut probe = adapters.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.layers[slot].b_online[i];
        probe.layers[slot].b_online[i] = orig + h;
        let plus = f(&probe);
        probe.layers[slot].b_online[i] = orig - h;
        let minus = f(&probe);
        probe.layers[slot].b_online[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

/// Central finite differences with respect to entries of one adapted layer's
/// `A_online`.
pub fn fd_adapter_a_gradient(
    adapters: &AdapterState,
    slot: usize,
    indices: &[usize],
    h: f64,
    f: impl Fn(&AdapterState) -> f64,
) -> Vec<f64> {
    let mut probe = adapters.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.layers[slot].a_online[i];
        probe.layers[slot].a_online[i] = orig + h;
        let plus = f(&probe);
        probe.layers[slot].a_online[i] = orig - h;
        let minus = f(&probe);
        probe.layers[slot].a_online[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    out
}
