//! Dense kernels shared by forward and backward passes.

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is
/// `k x n`. With `a_t` set, `a` is stored as `k x m`; with `b_t` set, `b` is
/// stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable log-sum-exp of a row, also writing softmax into `probs`.
pub(crate) fn softmax_row(row: &[f64], probs: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &x) in probs.iter_mut().zip(row) {
        *p = (x - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    max + sum.ln()
}

/// Segment of consecutive rows that attend only to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Multi-head scaled dot-product attention within segments. Returns the
/// output and the attention probabilities (per segment, per head, `len x len`).
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dim: usize,
    heads: usize,
    segments: &[Segment],
) -> (Vec<f64>, Vec<f64>) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let probs_len: usize = segments.iter().map(|s| s.len * s.len * heads).sum();
    let mut probs = vec![0.0; probs_len];
    let mut p_off = 0;
    let mut scores = Vec::new();
    for seg in segments {
        let len = seg.len;
        for h in 0..heads {
            let col = h * dh;
            let block = &mut probs[p_off..p_off + len * len];
            scores.resize(len, 0.0);
            for i in 0..len {
                let qi = &q[(seg.start + i) * dim + col..][..dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &k[(seg.start + j) * dim + col..][..dh];
                    *s = scale * dot(qi, kj);
                }
                softmax_row(&scores, &mut block[i * len..(i + 1) * len]);
                let oi = (seg.start + i) * dim + col;
                for j in 0..len {
                    let p = block[i * len + j];
                    let vj = &v[(seg.start + j) * dim + col..][..dh];
                    for (o, &vv) in out[oi..oi + dh].iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
            p_off += len * len;
        }
    }
    (out, probs)
}

/// Gradients of [`attention_forward`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    d_out: &[f64],
    dim: usize,
    heads: usize,
    segments: &[Segment],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut p_off = 0;
    let mut dp = Vec::new();
    for seg in segments {
        let len = seg.len;
        for h in 0..heads {
            let col = h * dh;
            let block = &probs[p_off..p_off + len * len];
            dp.resize(len, 0.0);
            for i in 0..len {
                let doi = &d_out[(seg.start + i) * dim + col..][..dh];
                let prow = &block[i * len..(i + 1) * len];
                for j in 0..len {
                    let vrow = (seg.start + j) * dim + col;
                    dp[j] = dot(doi, &v[vrow..vrow + dh]);
                    let p = prow[j];
                    for (dvv, &g) in dv[vrow..vrow + dh].iter_mut().zip(doi) {
                        *dvv += p * g;
                    }
                }
                let inner: f64 = prow.iter().zip(&dp).map(|(p, d)| p * d).sum();
                let qrow = (seg.start + i) * dim + col;
                for j in 0..len {
                    let ds = prow[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = (seg.start + j) * dim + col;
                    for c in 0..dh {
                        dq[qrow + c] += ds * k[krow + c];
                        dk[krow + c] += ds * q[qrow + c];
                    }
                }
            }
            p_off += len * len;
        }
    }
    (dq, dk, dv)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
