//! Softmax, cross-entropy and KL divergence, plus their gradients with
//! respect to logits.

use alloc::vec;
use alloc::vec::Vec;

use super::matrix::Matrix;
use super::scalar::Scalar;

/// Floor applied to probabilities before [`kl_divergence`] takes logarithms.
/// The training losses work from logits and need no floor.
pub const EPS_PROB: f64 = 1e-12;

/// Row-wise softmax with max-shift.
pub(crate) fn softmax_rows<T: Scalar>(logits: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (z, p) in logits.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let m = z.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
        let shift = T::from_f64(m);
        let mut sum = T::zero();
        for (pi, &zi) in p.iter_mut().zip(z) {
            *pi = (zi - shift).exp();
            sum += *pi;
        }
        for pi in p.iter_mut() {
            *pi = *pi / sum;
        }
    }
    out
}

/// Mean cross-entropy over rows and its gradient w.r.t. the logits. The
/// value goes through log-sum-exp, so it stays exact (and consistent with
/// the gradient) however confident the model is.
pub(crate) fn cross_entropy_grad<T: Scalar>(logits: &[T], labels: &[usize], cols: usize) -> (T, Vec<T>) {
    let n = labels.len();
    let inv = 1.0 / n as f64;
    let mut d = vec![T::zero(); logits.len()];
    let mut loss = T::zero();
    for (r, &y) in labels.iter().enumerate() {
        let z = &logits[r * cols..(r + 1) * cols];
        let row = &mut d[r * cols..(r + 1) * cols];
        let shift = T::from_f64(z.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max));
        let mut sum = T::zero();
        for (e, &zi) in row.iter_mut().zip(z) {
            *e = (zi - shift).exp();
            sum += *e;
        }
        loss += shift + sum.ln() - z[y];
        for v in row.iter_mut() {
            *v = *v / sum;
        }
        row[y] = row[y] - T::from_f64(1.0);
        for v in row.iter_mut() {
            *v = v.scale(inv);
        }
    }
    (loss.scale(inv), d)
}

/// Mean over rows of `Σ p·(ln p − ln q)`, with `0·ln 0 = 0` and both
/// arguments of the logarithm clamped to [`EPS_PROB`].
fn kl_rows(p: &[f64], q: &[f64], cols: usize) -> f64 {
    let rows = p.len() / cols;
    let mut total = 0.0;
    for (pr, qr) in p.chunks_exact(cols).zip(q.chunks_exact(cols)) {
        for (&pi, &qi) in pr.iter().zip(qr) {
            if pi > 0.0 {
                total += pi * (libm::log(pi.max(EPS_PROB)) - libm::log(qi.max(EPS_PROB)));
            }
        }
    }
    total / rows as f64
}

fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + libm::log(z.iter().map(|&v| libm::exp(v - m)).sum::<f64>());
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

/// `KL(target ‖ softmax(logits))` averaged over rows; gradient w.r.t. the
/// logits only (the target is a constant).
pub(crate) fn soft_target_grad(target: &[f64], logits: &[f64], cols: usize) -> (f64, Vec<f64>) {
    let rows = logits.len() / cols;
    let inv = 1.0 / rows as f64;
    let q = softmax_rows(logits, cols);
    let mut lq = vec![0.0; cols];
    let mut value = 0.0;
    for (t, z) in target.chunks_exact(cols).zip(logits.chunks_exact(cols)) {
        log_softmax_row(z, &mut lq);
        for (&ti, &l) in t.iter().zip(&lq) {
            if ti > 0.0 {
                value += ti * (libm::log(ti) - l);
            }
        }
    }
    let d = q.iter().zip(target).map(|(qi, ti)| (qi - ti) * inv).collect();
    (value * inv, d)
}

/// `KL(softmax(a) ‖ softmax(b))` averaged over rows, with the gradient
/// w.r.t. `b` only. Identical logits give exactly zero.
pub(crate) fn logit_kl_grad(a: &[f64], b: &[f64], cols: usize) -> (f64, Vec<f64>) {
    let rows = a.len() / cols;
    let inv = 1.0 / rows as f64;
    let p = softmax_rows(a, cols);
    let q = softmax_rows(b, cols);
    let mut la = vec![0.0; cols];
    let mut lb = vec![0.0; cols];
    let mut value = 0.0;
    for (r, (za, zb)) in a.chunks_exact(cols).zip(b.chunks_exact(cols)).enumerate() {
        log_softmax_row(za, &mut la);
        log_softmax_row(zb, &mut lb);
        value += p[r * cols..(r + 1) * cols].iter().zip(la.iter().zip(&lb)).map(|(pi, (x, y))| pi * (x - y)).sum::<f64>();
    }
    let d = q.iter().zip(&p).map(|(qi, pi)| (qi - pi) * inv).collect();
    (value * inv, d)
}

/// `KL(softmax(a) ‖ softmax(b))` averaged over rows, with gradients w.r.t.
/// both logit blocks.
pub(crate) fn pair_kl_grad(a: &[f64], b: &[f64], cols: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let rows = a.len() / cols;
    let inv = 1.0 / rows as f64;
    let p = softmax_rows(a, cols);
    let q = softmax_rows(b, cols);
    let mut value = 0.0;
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    let mut la = vec![0.0; cols];
    let mut lb = vec![0.0; cols];
    for r in 0..rows {
        let s = r * cols..(r + 1) * cols;
        log_softmax_row(&a[s.clone()], &mut la);
        log_softmax_row(&b[s.clone()], &mut lb);
        let pr = &p[s.clone()];
        let qr = &q[s.clone()];
        let row_kl: f64 = pr.iter().zip(la.iter().zip(&lb)).map(|(pi, (x, y))| pi * (x - y)).sum();
        value += row_kl;
        for j in 0..cols {
            da[r * cols + j] = pr[j] * ((la[j] - lb[j]) - row_kl) * inv;
            db[r * cols + j] = (qr[j] - pr[j]) * inv;
        }
    }
    (value * inv, da, db)
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_probs(logits: &Matrix) -> Matrix {
    Matrix::from_vec(logits.rows(), logits.cols(), softmax_rows(logits.as_slice(), logits.cols()))
}

/// Mean over rows of `D_KL(p_row ‖ q_row)`. Rows must be probability
/// vectors; `q` is clamped below by [`EPS_PROB`].
pub fn kl_divergence(p: &Matrix, q: &Matrix) -> f64 {
    assert_eq!((p.rows(), p.cols()), (q.rows(), q.cols()), "kl_divergence shape mismatch");
    kl_rows(p.as_slice(), q.as_slice(), p.cols())
}
