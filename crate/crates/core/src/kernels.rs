//! Raw forward/backward kernels for the convolution-style primitives.
//!
//! Everything here works on flat slices; [`crate::graph`] wraps them into
//! recorded operations.

use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Geometry of one 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dShape {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_y: usize,
    pub pad_x: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl Conv2dShape {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [height, width, in_channels] = *input else {
            return Err(dim_err!("conv2d input must be H×W×C, got {input:?}"));
        };
        let [kh, kw, kin, out_channels] = *kernel else {
            return Err(dim_err!("conv2d kernel must be kh×kw×Cin×Cout, got {kernel:?}"));
        };
        if kin != in_channels {
            return Err(dim_err!(
                "kernel expects {kin} input channels, input has {in_channels}"
            ));
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(dim_err!("zero stride or kernel extent"));
        }
        let (pad_y, pad_x) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(dim_err!("same padding needs odd kernel, got {kh}×{kw}"));
                }
                ((kh - 1) / 2, (kw - 1) / 2)
            }
            Padding::Valid => (0, 0),
        };
        if kh > height + 2 * pad_y || kw > width + 2 * pad_x {
            return Err(dim_err!(
                "kernel {kh}×{kw} larger than padded input {}×{}",
                height + 2 * pad_y,
                width + 2 * pad_x
            ));
        }
        Ok(Self {
            height,
            width,
            in_channels,
            out_channels,
            kh,
            kw,
            stride,
            pad_y,
            pad_x,
            out_height: (height + 2 * pad_y - kh) / stride + 1,
            out_width: (width + 2 * pad_x - kw) / stride + 1,
        })
    }

    #[inline]
    fn source(&self, out: usize, tap: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + tap) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub fn conv2d_forward(x: &[f64], kernel: &[f64], bias: Option<&[f64]>, s: &Conv2dShape) -> Vec<f64> {
    let (cin, cout) = (s.in_channels, s.out_channels);
    let mut out = vec![0.0; s.out_height * s.out_width * cout];
    for oy in 0..s.out_height {
        for ox in 0..s.out_width {
            let o = &mut out[(oy * s.out_width + ox) * cout..][..cout];
            if let Some(b) = bias {
                o.copy_from_slice(b);
            }
            for ky in 0..s.kh {
                let Some(iy) = s.source(oy, ky, s.pad_y, s.height) else {
                    continue;
                };
                for kx in 0..s.kw {
                    let Some(ix) = s.source(ox, kx, s.pad_x, s.width) else {
                        continue;
                    };
                    let xin = &x[(iy * s.width + ix) * cin..][..cin];
                    let k = &kernel[(ky * s.kw + kx) * cin * cout..][..cin * cout];
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (ov, &kv) in o.iter_mut().zip(&k[ci * cout..(ci + 1) * cout]) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dkernel, dbias)`; `dx` only when `want_input`.
pub fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    s: &Conv2dShape,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (cin, cout) = (s.in_channels, s.out_channels);
    let mut dx = want_input.then(|| vec![0.0; x.len()]);
    let mut dk = want_kernel.then(|| vec![0.0; kernel.len()]);
    let mut db = vec![0.0; cout];
    for oy in 0..s.out_height {
        for ox in 0..s.out_width {
            let g = &grad_out[(oy * s.out_width + ox) * cout..][..cout];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (b, &gv) in db.iter_mut().zip(g) {
                *b += gv;
            }
            for ky in 0..s.kh {
                let Some(iy) = s.source(oy, ky, s.pad_y, s.height) else {
                    continue;
                };
                for kx in 0..s.kw {
                    let Some(ix) = s.source(ox, kx, s.pad_x, s.width) else {
                        continue;
                    };
                    let base = (iy * s.width + ix) * cin;
                    let koff = (ky * s.kw + kx) * cin * cout;
                    if let Some(dk) = dk.as_mut() {
                        let xin = &x[base..base + cin];
                        for (ci, &xv) in xin.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let row = &mut dk[koff + ci * cout..][..cout];
                            for (d, &gv) in row.iter_mut().zip(g) {
                                *d += xv * gv;
                            }
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let k = &kernel[koff..koff + cin * cout];
                        for ci in 0..cin {
                            let krow = &k[ci * cout..(ci + 1) * cout];
                            dx[base + ci] += krow.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

/// Geometry of a transposed convolution along the point axis.
///
/// With kernel length `K`, rate `τ` and padding `p = (K - τ) / 2`, an input
/// of `n` rows yields exactly `τ·n` output rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PointDeconvShape {
    pub points: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub taps: usize,
    pub rate: usize,
    pub pad: usize,
}

impl PointDeconvShape {
    pub fn out_points(&self) -> usize {
        self.points * self.rate
    }

    /// Output row fed by input row `i` through tap `t`.
    #[inline]
    fn target(&self, i: usize, t: usize) -> Option<usize> {
        let o = (i * self.rate + t) as isize - self.pad as isize;
        (o >= 0 && (o as usize) < self.out_points()).then_some(o as usize)
    }
}

pub fn point_deconv_forward(
    x: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    s: &PointDeconvShape,
) -> Vec<f64> {
    let (cin, cout) = (s.in_channels, s.out_channels);
    let mut out = vec![0.0; s.out_points() * cout];
    if let Some(b) = bias {
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(b);
        }
    }
    for i in 0..s.points {
        let xin = &x[i * cin..(i + 1) * cin];
        for t in 0..s.taps {
            let Some(o) = s.target(i, t) else { continue };
            let orow = &mut out[o * cout..(o + 1) * cout];
            let k = &kernel[t * cin * cout..(t + 1) * cin * cout];
            for (ci, &xv) in xin.iter().enumerate() {
                for (ov, &kv) in orow.iter_mut().zip(&k[ci * cout..(ci + 1) * cout]) {
                    *ov += xv * kv;
                }
            }
        }
    }
    out
}

pub fn point_deconv_backward(
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    s: &PointDeconvShape,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (cin, cout) = (s.in_channels, s.out_channels);
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; cout];
    for g in grad_out.chunks(cout) {
        for (b, &gv) in db.iter_mut().zip(g) {
            *b += gv;
        }
    }
    for i in 0..s.points {
        for t in 0..s.taps {
            let Some(o) = s.target(i, t) else { continue };
            let g = &grad_out[o * cout..(o + 1) * cout];
            let koff = t * cin * cout;
            for ci in 0..cin {
                let xv = x[i * cin + ci];
                let krow = &kernel[koff + ci * cout..][..cout];
                dx[i * cin + ci] += krow.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                for (d, &gv) in dk[koff + ci * cout..][..cout].iter_mut().zip(g) {
                    *d += xv * gv;
                }
            }
        }
    }
    (dx, dk, db)
}
