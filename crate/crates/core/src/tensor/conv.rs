// Convolution and pooling kernels over NCHW buffers. Square kernels, stride 1,
// "same" zero padding of k/2.

use super::{matmul_acc, matmul_nt_acc, matmul_tn_acc};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds one image into a `(Cin·k·k) × (H·W)` column matrix.
fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    let pad = (k / 2) as isize;
    let hw = g.positions();
    for ci in 0..g.in_channels {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    let out_row = &mut out[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    for (x_, o) in out_row.iter_mut().enumerate() {
                        let sx = x_ as isize + dx;
                        *o = if sx < 0 || sx >= w { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_acc(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    let pad = (k / 2) as isize;
    let hw = g.positions();
    for ci in 0..g.in_channels {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x_ in 0..w {
                        let sx = x_ + dxo;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        plane[(sy * w + sx) as usize] += src[(y * w + x_) as usize];
                    }
                }
            }
        }
    }
}

/// Returns the output buffer and the per-image column matrices needed by the
/// backward pass (empty when `keep_cols` is false).
pub(crate) fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    g: &ConvGeometry,
    keep_cols: bool,
) -> (Vec<f64>, Vec<f64>) {
    let hw = g.positions();
    let plen = g.patch_len();
    let in_stride = g.in_channels * hw;
    let out_stride = g.out_channels * hw;
    let mut out = vec![0.0; g.batch * out_stride];
    let mut kept = if keep_cols {
        vec![0.0; g.batch * plen * hw]
    } else {
        Vec::new()
    };
    let mut scratch = vec![0.0; plen * hw];
    for b in 0..g.batch {
        let cols = if keep_cols {
            &mut kept[b * plen * hw..(b + 1) * plen * hw]
        } else {
            &mut scratch[..]
        };
        im2col(&x[b * in_stride..(b + 1) * in_stride], g, cols);
        let o = &mut out[b * out_stride..(b + 1) * out_stride];
        for (co, chunk) in o.chunks_mut(hw).enumerate() {
            chunk.fill(bias[co]);
        }
        matmul_acc(weight, cols, g.out_channels, plen, hw, o);
    }
    (out, kept)
}

/// Accumulates input, weight and bias gradients. Any of the outputs may be
/// `None` when that operand does not require a gradient.
pub(crate) fn conv2d_backward(
    dy: &[f64],
    weight: &[f64],
    cols: &[f64],
    g: &ConvGeometry,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let hw = g.positions();
    let plen = g.patch_len();
    let in_stride = g.in_channels * hw;
    let out_stride = g.out_channels * hw;
    let mut dcols = vec![0.0; plen * hw];
    for b in 0..g.batch {
        let dyb = &dy[b * out_stride..(b + 1) * out_stride];
        let colsb = &cols[b * plen * hw..(b + 1) * plen * hw];
        if let Some(dw) = dw.as_deref_mut() {
            matmul_nt_acc(dyb, colsb, g.out_channels, hw, plen, dw);
        }
        if let Some(db) = db.as_deref_mut() {
            for (co, chunk) in dyb.chunks(hw).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcols.fill(0.0);
            matmul_tn_acc(weight, dyb, g.out_channels, plen, hw, &mut dcols);
            col2im_acc(&dcols, g, &mut dx[b * in_stride..(b + 1) * in_stride]);
        }
    }
}

/// 2×2 max pooling with stride 2 (floor). Returns output and the flat input
/// index each output was taken from.
pub(crate) fn maxpool2_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x_ in 0..ow {
                let mut best = base + (2 * y) * w + 2 * x_;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * x_ + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}
