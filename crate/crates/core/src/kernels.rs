//! Raw forward/backward kernels over flat row-major buffers.
//!
//! These are the hot loops of training. Each kernel partitions its output
//! into independent chunks (one output plane, one matrix row) and hands them
//! to [`for_each_chunk`], which runs them on rayon when enabled.

use crate::exec::{for_each_chunk, Exec};

/// Geometry of a 2-D cross-correlation over an `N×C×H×W` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad.0 - self.kh) / self.stride.0 + 1,
            (self.w + 2 * self.pad.1 - self.kw) / self.stride.1 + 1,
        )
    }

    pub fn out_len(&self) -> usize {
        let (oh, ow) = self.out_hw();
        self.n * self.cout * oh * ow
    }
}

// Output index range along one axis for which `o * stride + k - pad` lands inside [0, extent).
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, extent: usize, out: usize) -> (usize, usize) {
    // o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o*stride + k - pad <= extent - 1
    let hi = if extent + pad > k {
        ((extent + pad - 1 - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub fn conv2d_forward(
    exec: Exec,
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let mut out = vec![0.0; g.out_len()];
    for_each_chunk(exec, &mut out, plane, |idx, dst| {
        let (n, co) = (idx / g.cout, idx % g.cout);
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.cin {
            let src = &x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
            let wk = &weight[(co * g.cin + ci) * g.kh * g.kw..][..g.kh * g.kw];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(ky, g.pad.0, g.stride.0, g.h, oh);
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    let (ox0, ox1) = valid_range(kx, g.pad.1, g.stride.1, g.w, ow);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride.0 + ky - g.pad.0;
                        let row = &src[iy * g.w..][..g.w];
                        let drow = &mut dst[oy * ow..][..ow];
                        for ox in ox0..ox1 {
                            drow[ox] += wv * row[ox * g.stride.1 + kx - g.pad.1];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient w.r.t. the input.
pub fn conv2d_backward_input(exec: Exec, g: &ConvGeom, dy: &[f64], weight: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let mut dx = vec![0.0; g.n * g.cin * g.h * g.w];
    for_each_chunk(exec, &mut dx, g.h * g.w, |idx, dst| {
        let (n, ci) = (idx / g.cin, idx % g.cin);
        for co in 0..g.cout {
            let dplane = &dy[(n * g.cout + co) * oh * ow..][..oh * ow];
            let wk = &weight[(co * g.cin + ci) * g.kh * g.kw..][..g.kh * g.kw];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(ky, g.pad.0, g.stride.0, g.h, oh);
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    let (ox0, ox1) = valid_range(kx, g.pad.1, g.stride.1, g.w, ow);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride.0 + ky - g.pad.0;
                        let drow = &dplane[oy * ow..][..ow];
                        let xrow = &mut dst[iy * g.w..][..g.w];
                        for ox in ox0..ox1 {
                            xrow[ox * g.stride.1 + kx - g.pad.1] += wv * drow[ox];
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradient w.r.t. the kernel weights.
pub fn conv2d_backward_weight(exec: Exec, g: &ConvGeom, dy: &[f64], x: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let per_out = g.cin * g.kh * g.kw;
    let mut dw = vec![0.0; g.cout * per_out];
    for_each_chunk(exec, &mut dw, per_out, |co, dst| {
        for n in 0..g.n {
            let dplane = &dy[(n * g.cout + co) * oh * ow..][..oh * ow];
            for ci in 0..g.cin {
                let src = &x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(ky, g.pad.0, g.stride.0, g.h, oh);
                    for kx in 0..g.kw {
                        let (ox0, ox1) = valid_range(kx, g.pad.1, g.stride.1, g.w, ow);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride.0 + ky - g.pad.0;
                            let row = &src[iy * g.w..][..g.w];
                            let drow = &dplane[oy * ow..][..ow];
                            for ox in ox0..ox1 {
                                acc += drow[ox] * row[ox * g.stride.1 + kx - g.pad.1];
                            }
                        }
                        dst[(ci * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    });
    dw
}

/// Gradient w.r.t. the per-channel bias.
pub fn conv2d_backward_bias(g: &ConvGeom, dy: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let mut db = vec![0.0; g.cout];
    for n in 0..g.n {
        for (co, d) in db.iter_mut().enumerate() {
            *d += dy[(n * g.cout + co) * plane..][..plane].iter().sum::<f64>();
        }
    }
    db
}

/// Geometry of an unpadded 2-D pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub window: (usize, usize),
    pub stride: (usize, usize),
}

impl PoolGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h - self.window.0) / self.stride.0 + 1,
            (self.w - self.window.1) / self.stride.1 + 1,
        )
    }
}

/// Max pooling; also returns, per output element, the flat input index of
/// the winning element (first maximum in row-major window order).
pub fn max_pool_forward(g: &PoolGeom, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = g.out_hw();
    let mut out = Vec::with_capacity(g.planes * oh * ow);
    let mut arg = Vec::with_capacity(g.planes * oh * ow);
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base;
                for wy in 0..g.window.0 {
                    for wx in 0..g.window.1 {
                        let i = base + (oy * g.stride.0 + wy) * g.w + ox * g.stride.1 + wx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub fn avg_pool_forward(g: &PoolGeom, x: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let inv = 1.0 / (g.window.0 * g.window.1) as f64;
    let mut out = Vec::with_capacity(g.planes * oh * ow);
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for wy in 0..g.window.0 {
                    for wx in 0..g.window.1 {
                        acc += x[base + (oy * g.stride.0 + wy) * g.w + ox * g.stride.1 + wx];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub fn avg_pool_backward(g: &PoolGeom, dy: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let inv = 1.0 / (g.window.0 * g.window.1) as f64;
    let mut dx = vec![0.0; g.planes * g.h * g.w];
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let d = dy[(p * oh + oy) * ow + ox] * inv;
                for wy in 0..g.window.0 {
                    for wx in 0..g.window.1 {
                        dx[base + (oy * g.stride.0 + wy) * g.w + ox * g.stride.1 + wx] += d;
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling of `planes` maps of size `h×w`.
pub fn upsample2x_forward(planes: usize, h: usize, w: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; planes * 4 * h * w];
    for p in 0..planes {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(p * 2 * h + y) * 2 * w + xx] = x[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward(planes: usize, h: usize, w: usize, dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dx[(p * h + y / 2) * w + xx / 2] += dy[(p * 2 * h + y) * 2 * w + xx];
            }
        }
    }
    dx
}

/// `C[m×n] = A[m×k] · B[k×n]`.
pub fn matmul(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if n == 0 {
        return c;
    }
    if n == 1 {
        for_each_chunk(exec, &mut c, ROW_BLOCK, |blk, out| {
            for (r, cv) in out.iter_mut().enumerate() {
                *cv = dot(&a[(blk * ROW_BLOCK + r) * k..][..k], b);
            }
        });
        return c;
    }
    for_each_chunk(exec, &mut c, n, |i, row| {
        let arow = &a[i * k..][..k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..][..n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    });
    c
}

/// Dot product with eight interleaved partial sums (vectorizable; the
/// summation order is fixed, so results are reproducible).
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).fold(0.0, |s, v| s + v);
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

// Output rows handled per parallel task by the vector kernels.
const ROW_BLOCK: usize = 64;
const VEC_BLOCK: usize = 256;

/// `dst[m×k] += a[m] · b[k]ᵀ`.
pub fn outer_accumulate(exec: Exec, dst: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize) {
    assert_eq!(dst.len(), m * k, "outer product size");
    for_each_chunk(exec, dst, k, |i, row| {
        let av = a[i];
        for (d, &bv) in row.iter_mut().zip(b) {
            *d += av * bv;
        }
    });
}

/// `C[m×k] = A[m×n] · B[k×n]ᵀ`.
pub fn matmul_nt(exec: Exec, a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    if k == 0 {
        return c;
    }
    if n == 1 {
        // Outer product.
        for_each_chunk(exec, &mut c, k, |i, row| {
            let av = a[i];
            for (cv, &bv) in row.iter_mut().zip(b) {
                *cv = 0.0 + av * bv;
            }
        });
        return c;
    }
    for_each_chunk(exec, &mut c, k, |i, row| {
        let arow = &a[i * n..][..n];
        for (p, cv) in row.iter_mut().enumerate() {
            let brow = &b[p * n..][..n];
            *cv = dot(arow, brow);
        }
    });
    c
}

/// `C[k×n] = A[m×k]ᵀ · B[m×n]`.
pub fn matmul_tn(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    if n == 0 {
        return c;
    }
    if n == 1 {
        for_each_chunk(exec, &mut c, VEC_BLOCK, |blk, out| {
            let p0 = blk * VEC_BLOCK;
            for (i, &bv) in b.iter().enumerate().take(m) {
                let arow = &a[i * k + p0..][..out.len()];
                for (cv, &av) in out.iter_mut().zip(arow) {
                    *cv += av * bv;
                }
            }
        });
        return c;
    }
    // Blocks of output rows; within a block, walk A row by row so reads are
    // contiguous. Each element still sums over i in ascending order.
    let rows = ROW_BLOCK.min(k);
    for_each_chunk(exec, &mut c, rows * n, |blk, out| {
        let p0 = blk * rows;
        let nrows = out.len() / n;
        for i in 0..m {
            let arow = &a[i * k + p0..][..nrows];
            let brow = &b[i * n..][..n];
            for (r, &av) in arow.iter().enumerate() {
                let crow = &mut out[r * n..][..n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    });
    c
}
