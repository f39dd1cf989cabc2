use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::LayerSpec;

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub grad_weights: Tensor,
    pub grad_input: Tensor,
    pub grad_bias: Vec<f64>,
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    in_per_group: usize,
    out_per_group: usize,
}

fn check_shapes(input: &Tensor, weights: &Tensor, spec: &LayerSpec) -> Result<Geometry> {
    spec.validate()?;
    let (n, c, h, w) = input.dims4()?;
    if c != spec.in_channels {
        return Err(Error::shape("input channels (dim 1)", spec.in_channels, c));
    }
    let expected = spec.weight_shape();
    if weights.shape() != expected {
        return Err(Error::shape(
            "weights (OIHW)",
            format!("{expected:?}"),
            format!("{:?}", weights.shape()),
        ));
    }
    let (oh, ow) = spec.output_hw(h, w)?;
    Ok(Geometry {
        n,
        h,
        w,
        oh,
        ow,
        in_per_group: spec.in_channels / spec.groups,
        out_per_group: spec.out_channels / spec.groups,
    })
}

/// Gather plan for the im2col layout: for every kernel tap and output
/// pixel, the offset of the corresponding element in a zero-padded input
/// plane of size `(h + 2p) x (w + 2p)`.
struct Unfold {
    offsets: Vec<usize>,
    padded_w: usize,
    padded_len: usize,
    pad: usize,
    plane: usize,
    taps: usize,
}

impl Unfold {
    fn new(g: &Geometry, spec: &LayerSpec) -> Self {
        let (s, p, kh, kw) = (spec.stride, spec.padding, spec.kernel_h, spec.kernel_w);
        let padded_w = g.w + 2 * p;
        let plane = g.oh * g.ow;
        let mut offsets = Vec::with_capacity(kh * kw * plane);
        for ky in 0..kh {
            for kx in 0..kw {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        offsets.push((oy * s + ky) * padded_w + ox * s + kx);
                    }
                }
            }
        }
        Self {
            offsets,
            padded_w,
            padded_len: (g.h + 2 * p) * padded_w,
            pad: p,
            plane,
            taps: kh * kw,
        }
    }

    /// Writes rows indexed by `(icg, ky, kx)`, one value per output pixel,
    /// into `cols` at column `col` of a row-major matrix with row length
    /// `stride`.
    fn im2col(&self, x: &[f64], g: &Geometry, padded: &mut [f64], cols: &mut [f64], stride: usize, col: usize) {
        let in_plane = g.h * g.w;
        for icg in 0..g.in_per_group {
            let xc = &x[icg * in_plane..(icg + 1) * in_plane];
            for (y, row) in xc.chunks_exact(g.w).enumerate() {
                let o = (y + self.pad) * self.padded_w + self.pad;
                padded[o..o + g.w].copy_from_slice(row);
            }
            for t in 0..self.taps {
                let r = icg * self.taps + t;
                let dst = &mut cols[r * stride + col..r * stride + col + self.plane];
                for (c, &off) in dst.iter_mut().zip(&self.offsets[t * self.plane..(t + 1) * self.plane]) {
                    *c = padded[off];
                }
            }
        }
    }

    /// Adjoint of [`Unfold::im2col`]: accumulates column gradients onto `gx`.
    fn col2im(&self, cols: &[f64], g: &Geometry, padded: &mut [f64], gx: &mut [f64], stride: usize, col: usize) {
        let in_plane = g.h * g.w;
        for icg in 0..g.in_per_group {
            padded.fill(0.0);
            for t in 0..self.taps {
                let r = icg * self.taps + t;
                let src = &cols[r * stride + col..r * stride + col + self.plane];
                for (&c, &off) in src.iter().zip(&self.offsets[t * self.plane..(t + 1) * self.plane]) {
                    padded[off] += c;
                }
            }
            let gc = &mut gx[icg * in_plane..(icg + 1) * in_plane];
            for (y, row) in gc.chunks_exact_mut(g.w).enumerate() {
                let o = (y + self.pad) * self.padded_w + self.pad;
                for (d, v) in row.iter_mut().zip(&padded[o..o + g.w]) {
                    *d += v;
                }
            }
        }
    }
}

/// Dot product with independent partial sums, so the additions pipeline.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Samples unfolded together, so the inner loops run over
/// `CHUNK * out_pixels` columns.
const CHUNK: usize = 32;

/// Grouped 2-D cross-correlation with zero padding.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &[f64], spec: &LayerSpec) -> Result<Tensor> {
    let g = check_shapes(input, weights, spec)?;
    if bias.len() != spec.out_channels {
        return Err(Error::shape("bias length", spec.out_channels, bias.len()));
    }
    let taps = g.in_per_group * spec.kernel_h * spec.kernel_w;
    let cin = spec.in_channels;
    let cout = spec.out_channels;
    let x = input.data();
    let wt = weights.data();
    let mut out = Tensor::zeros(&[g.n, cout, g.oh, g.ow]);
    let y = out.data_mut();
    let in_plane = g.h * g.w;
    let plane = g.oh * g.ow;
    let unfold = Unfold::new(&g, spec);
    let mut padded = vec![0.0; unfold.padded_len];
    let chunk = CHUNK.min(g.n);
    let mut cols = vec![0.0; taps * chunk * plane];
    let mut acc = vec![0.0; chunk * plane];

    for b0 in (0..g.n).step_by(chunk) {
        let nb = chunk.min(g.n - b0);
        let width = nb * plane;
        for grp in 0..spec.groups {
            for bb in 0..nb {
                let xi = ((b0 + bb) * cin + grp * g.in_per_group) * in_plane;
                unfold.im2col(&x[xi..xi + g.in_per_group * in_plane], &g, &mut padded, &mut cols, width, bb * plane);
            }
            for oc in grp * g.out_per_group..(grp + 1) * g.out_per_group {
                let acc = &mut acc[..width];
                acc.fill(bias[oc]);
                for (r, &wv) in wt[oc * taps..(oc + 1) * taps].iter().enumerate() {
                    for (a, cv) in acc.iter_mut().zip(&cols[r * width..(r + 1) * width]) {
                        *a += wv * cv;
                    }
                }
                for bb in 0..nb {
                    let yo = ((b0 + bb) * cout + oc) * plane;
                    y[yo..yo + plane].copy_from_slice(&acc[bb * plane..(bb + 1) * plane]);
                }
            }
        }
    }
    Ok(out)
}

/// Exact gradients of [`conv2d_forward`] with respect to weights, input and bias.
pub fn conv2d_backward(input: &Tensor, weights: &Tensor, grad_output: &Tensor, spec: &LayerSpec) -> Result<ConvGrads> {
    let g = check_shapes(input, weights, spec)?;
    let expected = [g.n, spec.out_channels, g.oh, g.ow];
    if grad_output.shape() != expected {
        return Err(Error::shape(
            "grad_output",
            format!("{expected:?}"),
            format!("{:?}", grad_output.shape()),
        ));
    }
    let taps = g.in_per_group * spec.kernel_h * spec.kernel_w;
    let cin = spec.in_channels;
    let cout = spec.out_channels;
    let x = input.data();
    let wt = weights.data();
    let gy = grad_output.data();
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weights = Tensor::zeros(weights.shape());
    let mut grad_bias = vec![0.0; cout];
    let gx = grad_input.data_mut();
    let gw = grad_weights.data_mut();
    let in_plane = g.h * g.w;
    let plane = g.oh * g.ow;
    let unfold = Unfold::new(&g, spec);
    let mut padded = vec![0.0; unfold.padded_len];
    let mut grad_padded = vec![0.0; unfold.padded_len];
    let chunk = CHUNK.min(g.n);
    let mut cols = vec![0.0; taps * chunk * plane];
    let mut gcols = vec![0.0; taps * chunk * plane];
    let mut gyc = vec![0.0; chunk * plane];

    for b0 in (0..g.n).step_by(chunk) {
        let nb = chunk.min(g.n - b0);
        let width = nb * plane;
        for grp in 0..spec.groups {
            for bb in 0..nb {
                let xi = ((b0 + bb) * cin + grp * g.in_per_group) * in_plane;
                unfold.im2col(&x[xi..xi + g.in_per_group * in_plane], &g, &mut padded, &mut cols, width, bb * plane);
            }
            let gcols = &mut gcols[..taps * width];
            gcols.fill(0.0);
            for oc in grp * g.out_per_group..(grp + 1) * g.out_per_group {
                let gyc = &mut gyc[..width];
                for bb in 0..nb {
                    let yo = ((b0 + bb) * cout + oc) * plane;
                    gyc[bb * plane..(bb + 1) * plane].copy_from_slice(&gy[yo..yo + plane]);
                }
                grad_bias[oc] += gyc.iter().sum::<f64>();
                let wrow = &wt[oc * taps..(oc + 1) * taps];
                let gwrow = &mut gw[oc * taps..(oc + 1) * taps];
                for r in 0..taps {
                    let crow = &cols[r * width..(r + 1) * width];
                    gwrow[r] += dot(gyc, crow);
                    let wv = wrow[r];
                    for (gc, gv) in gcols[r * width..(r + 1) * width].iter_mut().zip(gyc.iter()) {
                        *gc += wv * gv;
                    }
                }
            }
            for bb in 0..nb {
                let xi = ((b0 + bb) * cin + grp * g.in_per_group) * in_plane;
                unfold.col2im(
                    gcols,
                    &g,
                    &mut grad_padded,
                    &mut gx[xi..xi + g.in_per_group * in_plane],
                    width,
                    bb * plane,
                );
            }
        }
    }
    Ok(ConvGrads {
        grad_weights,
        grad_input,
        grad_bias,
    })
}
