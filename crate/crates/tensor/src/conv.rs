//! im2col-based 2D convolution kernels (no padding, square stride).

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_sample(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    pub fn out_sample(&self) -> usize {
        self.out_ch * self.positions()
    }
}

/// Output extent of a valid (unpadded) convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || kernel > input {
        return None;
    }
    Some((input - kernel) / stride + 1)
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                let mut q = 0;
                for oy in 0..g.out_h {
                    let src = &plane[(oy * g.stride + dy) * g.width..];
                    for ox in 0..g.out_w {
                        dst[q] = src[ox * g.stride + dx];
                        q += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx_out: &mut [f64]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &mut dx_out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                let mut q = 0;
                for oy in 0..g.out_h {
                    let base = (oy * g.stride + dy) * g.width;
                    for ox in 0..g.out_w {
                        plane[base + ox * g.stride + dx] += src[q];
                        q += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn forward(x: &[f64], kernels: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let ckk = g.patch_len();
    let mut out = vec![0.0; g.batch * g.out_sample()];
    let mut cols = vec![0.0; ckk * p];
    for n in 0..g.batch {
        im2col(&x[n * g.in_sample()..(n + 1) * g.in_sample()], g, &mut cols);
        let o = &mut out[n * g.out_sample()..(n + 1) * g.out_sample()];
        for k in 0..g.out_ch {
            let orow = &mut o[k * p..(k + 1) * p];
            let wrow = &kernels[k * ckk..(k + 1) * ckk];
            for (q, &w) in wrow.iter().enumerate() {
                let crow = &cols[q * p..(q + 1) * p];
                for (acc, &v) in orow.iter_mut().zip(crow) {
                    *acc += w * v;
                }
            }
        }
    }
    out
}

/// Accumulates input and kernel gradients; either target may be skipped.
pub(crate) fn backward(
    x: &[f64],
    kernels: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
) {
    let p = g.positions();
    let ckk = g.patch_len();
    let mut cols = vec![0.0; ckk * p];
    let mut dcols = vec![0.0; ckk * p];
    for n in 0..g.batch {
        let go = &gout[n * g.out_sample()..(n + 1) * g.out_sample()];
        if let Some(dk) = dk.as_deref_mut() {
            im2col(&x[n * g.in_sample()..(n + 1) * g.in_sample()], g, &mut cols);
            for k in 0..g.out_ch {
                let grow = &go[k * p..(k + 1) * p];
                for q in 0..ckk {
                    let crow = &cols[q * p..(q + 1) * p];
                    let dot: f64 = grow.iter().zip(crow).map(|(a, b)| a * b).sum();
                    dk[k * ckk + q] += dot;
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcols.iter_mut().for_each(|v| *v = 0.0);
            for q in 0..ckk {
                let drow = &mut dcols[q * p..(q + 1) * p];
                for k in 0..g.out_ch {
                    let w = kernels[k * ckk + q];
                    let grow = &go[k * p..(k + 1) * p];
                    for (acc, &v) in drow.iter_mut().zip(grow) {
                        *acc += w * v;
                    }
                }
            }
            col2im_add(
                &dcols,
                g,
                &mut dx[n * g.in_sample()..(n + 1) * g.in_sample()],
            );
        }
    }
}
