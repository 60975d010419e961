//! Dense-layer arithmetic on flat row-major buffers. Everything is written
//! for a fixed evaluation order so training is bitwise reproducible.

/// out = W x (W is rows x cols, row-major).
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        out[r] = acc;
    }
}

/// out = W^T dy.
pub fn matvec_t(w: &[f64], rows: usize, cols: usize, dy: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(dy.len(), rows);
    debug_assert_eq!(out.len(), cols);
    out.fill(0.0);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let d = dy[r];
        for c in 0..cols {
            out[c] += row[c] * d;
        }
    }
}

/// dW += dy (outer) x.
pub fn outer_acc(dw: &mut [f64], rows: usize, cols: usize, dy: &[f64], x: &[f64]) {
    debug_assert_eq!(dw.len(), rows * cols);
    for r in 0..rows {
        let d = dy[r];
        let row = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            row[c] += d * x[c];
        }
    }
}

/// y += a * x.
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * xi;
    }
}

/// C += A (rows x inner) * B (inner x cols), all row-major.
pub fn matmul_acc(
    c: &mut [f64],
    a: &[f64],
    b: &[f64],
    rows: usize,
    inner: usize,
    cols: usize,
) {
    debug_assert_eq!(a.len(), rows * inner);
    debug_assert_eq!(b.len(), inner * cols);
    debug_assert_eq!(c.len(), rows * cols);
    for r in 0..rows {
        for k in 0..inner {
            let av = a[r * inner + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b[k * cols..(k + 1) * cols];
            let crow = &mut c[r * cols..(r + 1) * cols];
            for j in 0..cols {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Apply tanh in place.
pub fn tanh_inplace(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = x.tanh();
    }
}

/// dy *= (1 - y^2) where y = tanh(pre-activation).
pub fn tanh_backprop(dy: &mut [f64], y: &[f64]) {
    debug_assert_eq!(dy.len(), y.len());
    for (d, &a) in dy.iter_mut().zip(y.iter()) {
        *d *= 1.0 - a * a;
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

/// Cross-entropy of `logits` against class `target`; returns the loss and
/// writes `softmax(logits) - onehot(target)` into `dlogits`.
pub fn cross_entropy(logits: &[f64], target: usize, dlogits: &mut [f64]) -> f64 {
    debug_assert!(target < logits.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &l in logits {
        sum += (l - max).exp();
    }
    let log_z = max + sum.ln();
    for (i, d) in dlogits.iter_mut().enumerate() {
        *d = ((logits[i] - max).exp() / sum) - if i == target { 1.0 } else { 0.0 };
    }
    log_z - logits[target]
}

/// Standard normal draw via Box-Muller on the given stream.
pub fn gaussian(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
