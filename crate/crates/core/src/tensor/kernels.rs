//! Forward and backward kernels on raw buffers.
//!
//! Convolutions go through im2col + GEMM. Every reduction runs in a fixed
//! sequential order, so results are bit-reproducible.

use super::Scalar;
use crate::error::{Error, Result};

/// Geometry of one convolution call. 2D convolutions use a unit depth axis
/// with unit kernel depth, unit stride and zero padding along it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        cin: usize,
        cout: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 {
                return Err(Error::config("convolution stride must be positive"));
            }
            let padded = input[a] + 2 * pad[a];
            if padded < kernel[a] {
                return Err(Error::config(format!(
                    "kernel extent {} exceeds padded input extent {padded} on axis {a}",
                    kernel[a]
                )));
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(ConvGeom {
            batch,
            cin,
            cout,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_len(&self) -> usize {
        self.input.iter().product()
    }
}

fn im2col<S: Scalar>(g: &ConvGeom, x: &[S], cols: &mut [S]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let n = g.out_len();
    for c in 0..g.cin {
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kd + kz) * kh + ky) * kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let mut o = 0;
                    for oz in 0..od {
                        let iz = (oz * g.stride[0] + kz) as isize - g.pad[0] as isize;
                        for oy in 0..oh {
                            let iy = (oy * g.stride[1] + ky) as isize - g.pad[1] as isize;
                            for ox in 0..ow {
                                let ix = (ox * g.stride[2] + kx) as isize - g.pad[2] as isize;
                                dst[o] = if iz >= 0
                                    && iy >= 0
                                    && ix >= 0
                                    && (iz as usize) < id
                                    && (iy as usize) < ih
                                    && (ix as usize) < iw
                                {
                                    x[((c * id + iz as usize) * ih + iy as usize) * iw + ix as usize]
                                } else {
                                    S::zero()
                                };
                                o += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(g: &ConvGeom, cols: &[S], dx: &mut [S]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let n = g.out_len();
    for c in 0..g.cin {
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kd + kz) * kh + ky) * kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    let mut o = 0;
                    for oz in 0..od {
                        let iz = (oz * g.stride[0] + kz) as isize - g.pad[0] as isize;
                        for oy in 0..oh {
                            let iy = (oy * g.stride[1] + ky) as isize - g.pad[1] as isize;
                            for ox in 0..ow {
                                let ix = (ox * g.stride[2] + kx) as isize - g.pad[2] as isize;
                                if iz >= 0
                                    && iy >= 0
                                    && ix >= 0
                                    && (iz as usize) < id
                                    && (iy as usize) < ih
                                    && (ix as usize) < iw
                                {
                                    dx[((c * id + iz as usize) * ih + iy as usize) * iw + ix as usize] += src[o];
                                }
                                o += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S], b: &[S]) -> Vec<S> {
    let k = g.patch_len();
    let n = g.out_len();
    let in_len = g.cin * g.in_len();
    let mut cols = vec![S::zero(); k * n];
    let mut out = vec![S::zero(); g.batch * g.cout * n];
    for bi in 0..g.batch {
        im2col(g, &x[bi * in_len..(bi + 1) * in_len], &mut cols);
        let ob = &mut out[bi * g.cout * n..(bi + 1) * g.cout * n];
        for (co, row) in ob.chunks_mut(n).enumerate() {
            row.fill(b[co]);
        }
        S::gemm(
            g.cout,
            k,
            n,
            S::one(),
            w,
            k as isize,
            1,
            &cols,
            n as isize,
            1,
            S::one(),
            ob,
            n as isize,
            1,
        );
    }
    out
}

/// Returns `(dx, dw, db)` for upstream gradient `dy`.
pub fn conv_backward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S], dy: &[S]) -> (Vec<S>, Vec<S>, Vec<S>) {
    let k = g.patch_len();
    let n = g.out_len();
    let in_len = g.cin * g.in_len();
    let mut cols = vec![S::zero(); k * n];
    let mut dcols = vec![S::zero(); k * n];
    let mut dx = vec![S::zero(); g.batch * in_len];
    let mut dw = vec![S::zero(); g.cout * k];
    let mut db = vec![S::zero(); g.cout];
    for bi in 0..g.batch {
        let dyb = &dy[bi * g.cout * n..(bi + 1) * g.cout * n];
        for (co, row) in dyb.chunks(n).enumerate() {
            db[co] += row.iter().copied().sum::<S>();
        }
        im2col(g, &x[bi * in_len..(bi + 1) * in_len], &mut cols);
        // dw += dy_b [cout x n] * cols^T [n x k]
        S::gemm(
            g.cout,
            n,
            k,
            S::one(),
            dyb,
            n as isize,
            1,
            &cols,
            1,
            n as isize,
            S::one(),
            &mut dw,
            k as isize,
            1,
        );
        // dcols = w^T [k x cout] * dy_b [cout x n]
        S::gemm(
            k,
            g.cout,
            n,
            S::one(),
            w,
            1,
            k as isize,
            dyb,
            n as isize,
            1,
            S::zero(),
            &mut dcols,
            n as isize,
            1,
        );
        col2im(g, &dcols, &mut dx[bi * in_len..(bi + 1) * in_len]);
    }
    (dx, dw, db)
}

/// Nearest-neighbour upsampling of `[batch*channels, d, h, w]` by `factor`.
pub fn upsample_forward<S: Scalar>(planes: usize, sp: [usize; 3], factor: [usize; 3], x: &[S]) -> Vec<S> {
    let out_sp = [sp[0] * factor[0], sp[1] * factor[1], sp[2] * factor[2]];
    let plane_in = sp.iter().product::<usize>();
    let plane_out = out_sp.iter().product::<usize>();
    let mut out = vec![S::zero(); planes * plane_out];
    for p in 0..planes {
        let src = &x[p * plane_in..(p + 1) * plane_in];
        let dst = &mut out[p * plane_out..(p + 1) * plane_out];
        let mut o = 0;
        for z in 0..out_sp[0] {
            let sz = z / factor[0];
            for y in 0..out_sp[1] {
                let sy = y / factor[1];
                let base = (sz * sp[1] + sy) * sp[2];
                for xx in 0..out_sp[2] {
                    dst[o] = src[base + xx / factor[2]];
                    o += 1;
                }
            }
        }
    }
    out
}

pub fn upsample_backward<S: Scalar>(planes: usize, sp: [usize; 3], factor: [usize; 3], dy: &[S]) -> Vec<S> {
    let out_sp = [sp[0] * factor[0], sp[1] * factor[1], sp[2] * factor[2]];
    let plane_in = sp.iter().product::<usize>();
    let plane_out = out_sp.iter().product::<usize>();
    let mut dx = vec![S::zero(); planes * plane_in];
    for p in 0..planes {
        let src = &dy[p * plane_out..(p + 1) * plane_out];
        let dst = &mut dx[p * plane_in..(p + 1) * plane_in];
        let mut o = 0;
        for z in 0..out_sp[0] {
            let sz = z / factor[0];
            for y in 0..out_sp[1] {
                let sy = y / factor[1];
                let base = (sz * sp[1] + sy) * sp[2];
                for xx in 0..out_sp[2] {
                    dst[base + xx / factor[2]] += src[o];
                    o += 1;
                }
            }
        }
    }
    dx
}

/// `y = x w^T + b` for `x: [batch, fin]`, `w: [fout, fin]`.
pub fn dense_forward<S: Scalar>(batch: usize, fin: usize, fout: usize, x: &[S], w: &[S], b: &[S]) -> Vec<S> {
    let mut out = Vec::with_capacity(batch * fout);
    for _ in 0..batch {
        out.extend_from_slice(b);
    }
    S::gemm(
        batch,
        fin,
        fout,
        S::one(),
        x,
        fin as isize,
        1,
        w,
        1,
        fin as isize,
        S::one(),
        &mut out,
        fout as isize,
        1,
    );
    out
}

pub fn dense_backward<S: Scalar>(
    batch: usize,
    fin: usize,
    fout: usize,
    x: &[S],
    w: &[S],
    dy: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut dx = vec![S::zero(); batch * fin];
    S::gemm(
        batch,
        fout,
        fin,
        S::one(),
        dy,
        fout as isize,
        1,
        w,
        fin as isize,
        1,
        S::zero(),
        &mut dx,
        fin as isize,
        1,
    );
    let mut dw = vec![S::zero(); fout * fin];
    S::gemm(
        fout,
        batch,
        fin,
        S::one(),
        dy,
        1,
        fout as isize,
        x,
        fin as isize,
        1,
        S::zero(),
        &mut dw,
        fin as isize,
        1,
    );
    let mut db = vec![S::zero(); fout];
    for row in dy.chunks(fout) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    (dx, dw, db)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(cols: usize, x: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = src.iter().copied().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - m).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
}

pub fn softmax_rows_backward<S: Scalar>(cols: usize, y: &[S], dy: &[S]) -> Vec<S> {
    let mut dx = vec![S::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    dx
}
