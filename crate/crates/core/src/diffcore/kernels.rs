//! Dense kernels shared by the forward and backward passes.

/// Strided read-only view of a matrix stored in a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn rowmajor(data: &'a [f64], cols: usize) -> Self {
        Self { data, off: 0, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `[rows, cols]` buffer.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, off: 0, rs: 1, cs: cols }
    }

    pub fn at(self, off: usize) -> Self {
        Self { off: self.off + off, ..self }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.off + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "strided view out of bounds");
        }
    }
}

/// `c = alpha * a[m,k] * b[k,n] + beta * c`, `c` strided by `(rsc, csc)` from `c_off`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    let last = c_off + (m - 1) * rsc + (n - 1) * csc;
    assert!(last < c.len(), "gemm output out of bounds");
    // SAFETY: all three operands were bounds-checked above for the given
    // extents and strides; `c` is exclusively borrowed and does not alias
    // `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}

/// In-place softmax over each row of a `[rows, cols]` buffer.
pub(crate) fn softmax_rows(buf: &mut [f64], cols: usize) {
    for row in buf.chunks_exact_mut(cols) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        let inv = 1.0 / s;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Query rows processed per block in attention, bounding the score buffer.
const ATTN_BLOCK: usize = 256;

/// Attention weights are kept for the backward pass when they number at
/// most this many; larger problems recompute them.
pub(crate) const ATTN_KEEP_LIMIT: usize = 1 << 22;

/// Multi-head scaled dot-product attention.
///
/// `q: [nq, c]`, `k, v: [nk, c]`; channel group `h` forms head `h`. With
/// `keep` set, the weights are returned as `[heads, nq, nk]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    nk: usize,
    c: usize,
    heads: usize,
    keep: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * c];
    let mut scores = vec![0.0; ATTN_BLOCK.min(nq) * nk];
    let mut kept = if keep { Vec::with_capacity(heads * nq * nk) } else { Vec::new() };
    for h in 0..heads {
        let hoff = h * dh;
        for start in (0..nq).step_by(ATTN_BLOCK) {
            let rows = ATTN_BLOCK.min(nq - start);
            let s = &mut scores[..rows * nk];
            gemm(
                rows,
                dh,
                nk,
                scale,
                View::rowmajor(q, c).at(start * c + hoff),
                View::transposed(k, c).at(hoff),
                0.0,
                s,
                0,
                nk,
                1,
            );
            softmax_rows(s, nk);
            if keep {
                kept.extend_from_slice(s);
            }
            gemm(
                rows,
                nk,
                dh,
                1.0,
                View::rowmajor(s, nk),
                View::rowmajor(v, c).at(hoff),
                0.0,
                &mut out,
                start * c + hoff,
                c,
                1,
            );
        }
    }
    (out, keep.then_some(kept))
}

pub(crate) struct AttentionGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
}

/// Backward pass of [`attention_forward`]. Without `probs` the attention
/// weights are recomputed block by block.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: Option<&[f64]>,
    dout: &[f64],
    nq: usize,
    nk: usize,
    c: usize,
    heads: usize,
) -> AttentionGrads {
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; nq * c];
    let mut dk = vec![0.0; nk * c];
    let mut dv = vec![0.0; nk * c];
    let block = ATTN_BLOCK.min(nq);
    let mut p = vec![0.0; block * nk];
    let mut dp = vec![0.0; block * nk];
    for h in 0..heads {
        let hoff = h * dh;
        for start in (0..nq).step_by(ATTN_BLOCK) {
            let rows = ATTN_BLOCK.min(nq - start);
            let p = &mut p[..rows * nk];
            let dp = &mut dp[..rows * nk];
            if let Some(kept) = probs {
                let off = (h * nq + start) * nk;
                p.copy_from_slice(&kept[off..off + rows * nk]);
            } else {
                gemm(
                    rows,
                    dh,
                    nk,
                    scale,
                    View::rowmajor(q, c).at(start * c + hoff),
                    View::transposed(k, c).at(hoff),
                    0.0,
                    p,
                    0,
                    nk,
                    1,
                );
                softmax_rows(p, nk);
            }
            // dV += P^T dO
            gemm(
                nk,
                rows,
                dh,
                1.0,
                View::transposed(p, nk),
                View::rowmajor(dout, c).at(start * c + hoff),
                1.0,
                &mut dv,
                hoff,
                c,
                1,
            );
            // dP = dO V^T
            gemm(
                rows,
                dh,
                nk,
                1.0,
                View::rowmajor(dout, c).at(start * c + hoff),
                View::transposed(v, c).at(hoff),
                0.0,
                dp,
                0,
                nk,
                1,
            );
            // dS = P * (dP - rowsum(P * dP)), stored in dp
            for (prow, dprow) in p.chunks_exact(nk).zip(dp.chunks_exact_mut(nk)) {
                let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                for (d, &pv) in dprow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            // dQ = scale * dS K
            gemm(
                rows,
                nk,
                dh,
                scale,
                View::rowmajor(dp, nk),
                View::rowmajor(k, c).at(hoff),
                0.0,
                &mut dq,
                start * c + hoff,
                c,
                1,
            );
            // dK += scale * dS^T Q
            gemm(
                nk,
                rows,
                dh,
                scale,
                View::transposed(dp, nk),
                View::rowmajor(q, c).at(start * c + hoff),
                1.0,
                &mut dk,
                hoff,
                c,
                1,
            );
        }
    }
    AttentionGrads { dq, dk, dv }
}
