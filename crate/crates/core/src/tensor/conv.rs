//! im2col lowering for single-image 2-D cross-correlation.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// `None` for even kernels, zero stride, or a kernel larger than the padded input.
    /// Output extents follow the usual floor rule, so a trailing partial window is dropped.
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        let out = |extent: usize| {
            let span = (extent + 2 * pad).checked_sub(k)?;
            Some(span / stride + 1)
        };
        if k.is_multiple_of(2) || stride == 0 {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            out_h: out(h)?,
            out_w: out(w)?,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate read by output `(o, tap)` along one axis, if inside the image.
    #[inline]
    fn source(&self, o: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + tap).checked_sub(self.pad)?;
        (pos < extent).then_some(pos)
    }

    /// Column matrix of shape `[c_in·k·k, out_h·out_w]`.
    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let n_out = self.out_len();
        let mut cols = vec![0.0; self.patch_len() * n_out];
        for ci in 0..self.c_in {
            let plane = &input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * n_out..(row + 1) * n_out];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ky, self.h) else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                dst[oy * self.out_w + ox] = plane[iy * self.w + ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates columns back into `grad_input`.
    pub fn col2im(&self, cols: &[f64], grad_input: &mut [f64]) {
        let n_out = self.out_len();
        for ci in 0..self.c_in {
            let plane = &mut grad_input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ky, self.h) else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                plane[iy * self.w + ix] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
