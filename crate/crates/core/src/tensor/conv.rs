//! 2-D cross-correlation via im2col + GEMM, processed in image chunks.

use super::gemm::{gemm, Layout};
use super::{Float, Result, TensorError};

/// Upper bound on the im2col scratch buffer, in elements.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

fn out_extent(len: usize, k: usize, stride: usize, padding: usize, axis: &str) -> Result<usize> {
    let padded = len + 2 * padding;
    if padded < k || !(padded - k).is_multiple_of(stride) {
        return Err(TensorError::Config {
            op: "conv2d",
            detail: format!("{axis}: ({len} + 2·{padding} − {k}) / {stride} is not a non-negative integer"),
        });
    }
    Ok((padded - k) / stride + 1)
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], bias: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let shape_err = |detail: String| TensorError::Shape { op: "conv2d", detail };
        if input.len() != 4 {
            return Err(shape_err(format!("input must be [N,Cin,H,W], got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(shape_err(format!("kernel must be [Cout,Cin,kh,kw], got {kernel:?}")));
        }
        if input[1] != kernel[1] {
            return Err(shape_err(format!("input has {} channels but kernel expects {}", input[1], kernel[1])));
        }
        if bias != [kernel[0]] {
            return Err(shape_err(format!("bias must be [{}], got {bias:?}", kernel[0])));
        }
        if stride == 0 {
            return Err(TensorError::Config { op: "conv2d", detail: "stride must be positive".into() });
        }
        let oh = out_extent(input[2], kernel[2], stride, padding, "height")?;
        let ow = out_extent(input[3], kernel[3], stride, padding, "width")?;
        Ok(Self {
            n: input[0],
            cin: input[1],
            h: input[2],
            w: input[3],
            cout: kernel[0],
            kh: kernel[2],
            kw: kernel[3],
            stride,
            padding,
            oh,
            ow,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.oh, self.ow]
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn opix(&self) -> usize {
        self.oh * self.ow
    }

    fn chunk(&self) -> usize {
        (COLS_BUDGET / (self.patch() * self.opix()).max(1)).clamp(1, self.n.max(1))
    }

    /// Source pixel for output (oy, ox) and kernel tap (ky, kx), if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    /// Unfold images `[first, first+count)` into a `patch × count·opix` matrix.
    fn im2col(&self, input: &[Float], first: usize, count: usize, cols: &mut [Float]) {
        let ld = count * self.opix();
        let img_len = self.cin * self.h * self.w;
        for i in 0..count {
            let img = &input[(first + i) * img_len..(first + i + 1) * img_len];
            for ci in 0..self.cin {
                let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let q = (ci * self.kh + ky) * self.kw + kx;
                        let row = &mut cols[q * ld + i * self.opix()..q * ld + (i + 1) * self.opix()];
                        for oy in 0..self.oh {
                            for ox in 0..self.ow {
                                row[oy * self.ow + ox] = match self.source(oy, ox, ky, kx) {
                                    Some((y, x)) => plane[y * self.w + x],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Inverse of `im2col`: scatter-add columns back into image gradients.
    fn col2im(&self, cols: &[Float], first: usize, count: usize, grad_input: &mut [Float]) {
        let ld = count * self.opix();
        let img_len = self.cin * self.h * self.w;
        for i in 0..count {
            let img = &mut grad_input[(first + i) * img_len..(first + i + 1) * img_len];
            for ci in 0..self.cin {
                let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let q = (ci * self.kh + ky) * self.kw + kx;
                        let row = &cols[q * ld + i * self.opix()..q * ld + (i + 1) * self.opix()];
                        for oy in 0..self.oh {
                            for ox in 0..self.ow {
                                if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                    plane[y * self.w + x] += row[oy * self.ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &[Float], kernel: &[Float], bias: &[Float]) -> Vec<Float> {
        let (patch, opix) = (self.patch(), self.opix());
        let mut out = vec![0.0; self.n * self.cout * opix];
        let chunk = self.chunk();
        let mut cols = vec![0.0; patch * chunk * opix];
        let mut tmp = vec![0.0; self.cout * chunk * opix];
        let mut first = 0;
        while first < self.n {
            let count = chunk.min(self.n - first);
            let ld = count * opix;
            self.im2col(input, first, count, &mut cols[..patch * ld]);
            gemm(
                1.0,
                kernel,
                Layout::row_major(self.cout, patch),
                &cols[..patch * ld],
                Layout::row_major(patch, ld),
                0.0,
                &mut tmp[..self.cout * ld],
                Layout::row_major(self.cout, ld),
            );
            for i in 0..count {
                for co in 0..self.cout {
                    let src = &tmp[co * ld + i * opix..co * ld + (i + 1) * opix];
                    let base = ((first + i) * self.cout + co) * opix;
                    for (o, s) in out[base..base + opix].iter_mut().zip(src) {
                        *o = s + bias[co];
                    }
                }
            }
            first += count;
        }
        out
    }

    /// Accumulates kernel and bias gradients; also the input gradient when requested.
    pub fn backward(
        &self,
        input: &[Float],
        kernel: &[Float],
        grad_out: &[Float],
        grad_kernel: Option<&mut [Float]>,
        grad_bias: Option<&mut [Float]>,
        grad_input: Option<&mut [Float]>,
    ) {
        let (patch, opix) = (self.patch(), self.opix());
        let chunk = self.chunk();
        let mut cols = vec![0.0; patch * chunk * opix];
        let mut gtmp = vec![0.0; self.cout * chunk * opix];
        let (mut grad_kernel, mut grad_bias, mut grad_input) = (grad_kernel, grad_bias, grad_input);
        let mut first = 0;
        while first < self.n {
            let count = chunk.min(self.n - first);
            let ld = count * opix;
            for i in 0..count {
                for co in 0..self.cout {
                    let base = ((first + i) * self.cout + co) * opix;
                    gtmp[co * ld + i * opix..co * ld + (i + 1) * opix].copy_from_slice(&grad_out[base..base + opix]);
                }
            }
            let gview = &gtmp[..self.cout * ld];
            if let Some(gb) = grad_bias.as_deref_mut() {
                for (co, g) in gb.iter_mut().enumerate() {
                    *g += gview[co * ld..(co + 1) * ld].iter().sum::<Float>();
                }
            }
            if let Some(gk) = grad_kernel.as_deref_mut() {
                self.im2col(input, first, count, &mut cols[..patch * ld]);
                gemm(
                    1.0,
                    gview,
                    Layout::row_major(self.cout, ld),
                    &cols[..patch * ld],
                    Layout::transposed(ld, patch),
                    1.0,
                    gk,
                    Layout::row_major(self.cout, patch),
                );
            }
            if let Some(gi) = grad_input.as_deref_mut() {
                gemm(
                    1.0,
                    kernel,
                    Layout::transposed(patch, self.cout),
                    gview,
                    Layout::row_major(self.cout, ld),
                    0.0,
                    &mut cols[..patch * ld],
                    Layout::row_major(patch, ld),
                );
                self.col2im(&cols[..patch * ld], first, count, gi);
            }
            first += count;
        }
    }
}
