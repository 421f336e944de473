//! Fused multi-head scaled dot-product attention. Query rows are processed in
//! blocks so the score matrix never exceeds `BLOCK × n_kv` values; the backward
//! pass recomputes the probabilities block by block.

use super::graph::softmax_in_place;
use super::tensor::Real;

const BLOCK: usize = 64;

/// Strided view of a matrix inside a slice.
#[derive(Clone, Copy)]
struct View {
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn dense(rows: usize, cols: usize) -> View {
        View {
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Columns `c0..c0 + cols` of rows `r0..r0 + rows` of a dense `? × ld` matrix.
    fn block(ld: usize, r0: usize, rows: usize, c0: usize, cols: usize) -> View {
        View {
            offset: r0 * ld + c0,
            rows,
            cols,
            rs: ld,
            cs: 1,
        }
    }

    fn t(self) -> View {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn fits(&self, len: usize) -> bool {
        self.rows == 0
            || self.cols == 0
            || self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < len
    }
}

/// `c = alpha · a · b + beta · c` on strided views.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(alpha: T, a: &[T], av: View, b: &[T], bv: View, beta: T, c: &mut [T], cv: View) {
    assert!(av.cols == bv.rows && av.rows == cv.rows && bv.cols == cv.cols);
    assert!(av.fits(a.len()) && bv.fits(b.len()) && cv.fits(c.len()));
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: every view was checked to lie inside its slice.
    unsafe {
        T::gemm(
            cv.rows,
            av.cols,
            cv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

pub(crate) struct AttnShape {
    pub nq: usize,
    pub nk: usize,
    pub dim: usize,
    pub heads: usize,
    pub scale: f64,
}

impl AttnShape {
    fn dh(&self) -> usize {
        self.dim / self.heads
    }
}

fn probs<T: Real>(s: &AttnShape, q: &[T], k: &[T], h: usize, r0: usize, rows: usize, p: &mut [T]) {
    let dh = s.dh();
    gemm(
        T::from_f64(s.scale),
        q,
        View::block(s.dim, r0, rows, h * dh, dh),
        k,
        View::block(s.dim, 0, s.nk, h * dh, dh).t(),
        T::zero(),
        p,
        View::dense(rows, s.nk),
    );
    for row in p.chunks_exact_mut(s.nk) {
        softmax_in_place(row);
    }
}

/// `q: [nq, dim]`, `k, v: [nk, dim]` → `[nq, dim]`; head `h` uses columns
/// `h·dh .. (h+1)·dh`.
pub(crate) fn forward<T: Real>(s: &AttnShape, q: &[T], k: &[T], v: &[T]) -> Vec<T> {
    let dh = s.dh();
    let mut out = vec![T::zero(); s.nq * s.dim];
    let mut p = vec![T::zero(); BLOCK.min(s.nq.max(1)) * s.nk];
    for h in 0..s.heads {
        for r0 in (0..s.nq).step_by(BLOCK) {
            let rows = BLOCK.min(s.nq - r0);
            let p = &mut p[..rows * s.nk];
            probs(s, q, k, h, r0, rows, p);
            gemm(
                T::one(),
                p,
                View::dense(rows, s.nk),
                v,
                View::block(s.dim, 0, s.nk, h * dh, dh),
                T::zero(),
                &mut out,
                View::block(s.dim, r0, rows, h * dh, dh),
            );
        }
    }
    out
}

/// Accumulates gradients into `dq`, `dk`, `dv` given the output gradient `dout`
/// and the forward output `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    s: &AttnShape,
    q: &[T],
    k: &[T],
    v: &[T],
    out: &[T],
    dout: &[T],
    mut dq: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut dv: Option<&mut [T]>,
) {
    let dh = s.dh();
    let scale = T::from_f64(s.scale);
    let cap = BLOCK.min(s.nq.max(1)) * s.nk;
    let mut p = vec![T::zero(); cap];
    let mut dp = vec![T::zero(); cap];
    for h in 0..s.heads {
        for r0 in (0..s.nq).step_by(BLOCK) {
            let rows = BLOCK.min(s.nq - r0);
            let p = &mut p[..rows * s.nk];
            let dp = &mut dp[..rows * s.nk];
            probs(s, q, k, h, r0, rows, p);
            let blk = View::block(s.dim, r0, rows, h * dh, dh);
            let kv_h = View::block(s.dim, 0, s.nk, h * dh, dh);
            if let Some(dv) = dv.as_deref_mut() {
                gemm(T::one(), p, View::dense(rows, s.nk).t(), dout, blk, T::one(), dv, kv_h);
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            gemm(T::one(), dout, blk, v, kv_h.t(), T::zero(), dp, View::dense(rows, s.nk));
            for i in 0..rows {
                let o = (r0 + i) * s.dim + h * dh;
                let dot: T = (0..dh).map(|j| dout[o + j] * out[o + j]).sum();
                let pr = &p[i * s.nk..(i + 1) * s.nk];
                let dr = &mut dp[i * s.nk..(i + 1) * s.nk];
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot);
                }
            }
            if let Some(dq) = dq.as_deref_mut() {
                gemm(scale, dp, View::dense(rows, s.nk), k, kv_h, T::one(), dq, blk);
            }
            if let Some(dk) = dk.as_deref_mut() {
                gemm(scale, dp, View::dense(rows, s.nk).t(), q, blk, T::one(), dk, kv_h);
            }
        }
    }
}
