//! im2col-based 2-D convolution kernels shared by the graph op and graph-free
//! forward paths.

use super::gemm::{gemm, MatRef};
use super::AutogradError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Output extent along one axis: `floor((n + 2·padding − k) / stride) + 1`.
pub fn conv_output_extent(
    n: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize, AutogradError> {
    if stride == 0 {
        return Err(AutogradError::InvalidStride);
    }
    let padded = n + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(AutogradError::KernelTooLarge {
            kernel,
            padded_extent: padded,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn validate(&self) -> Result<(), AutogradError> {
        conv_output_extent(self.height, self.kernel, self.stride, self.padding)?;
        conv_output_extent(self.width, self.kernel, self.stride, self.padding)?;
        Ok(())
    }

    /// Unfold `input` (`Cin×H×W`) into a `(Cin·k·k) × (H'·W')` matrix.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let mut cols = vec![0.0; self.patch_len() * oh * ow];
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane = &input[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let y = (oy * self.stride + ky) as isize - pad;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let src = &plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for ox in 0..ow {
                            let x = (ox * self.stride + kx) as isize - pad;
                            if x >= 0 && x < self.width as isize {
                                dst[oy * ow + ox] = src[x as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane = &mut out[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let y = (oy * self.stride + ky) as isize - pad;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let x = (ox * self.stride + kx) as isize - pad;
                            if x >= 0 && x < self.width as isize {
                                plane[y as usize * self.width + x as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let positions = self.out_positions();
        let mut out = vec![0.0; self.out_channels * positions];
        if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            gemm(
                MatRef::new(kernel, self.out_channels, self.patch_len()),
                MatRef::new(input, self.in_channels, positions),
                0.0,
                &mut out,
            );
            return out;
        }
        let cols = self.im2col(input);
        gemm(
            MatRef::new(kernel, self.out_channels, self.patch_len()),
            MatRef::new(&cols, self.patch_len(), positions),
            0.0,
            &mut out,
        );
        out
    }

    /// Returns `(grad_input, grad_kernel)`.
    pub fn backward(
        &self,
        input: &[f64],
        kernel: &[f64],
        grad_out: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let positions = self.out_positions();
        let patch = self.patch_len();
        let cols = self.im2col(input);
        let mut grad_kernel = vec![0.0; self.out_channels * patch];
        gemm(
            MatRef::new(grad_out, self.out_channels, positions),
            MatRef::new(&cols, patch, positions).t(),
            0.0,
            &mut grad_kernel,
        );
        let mut grad_cols = vec![0.0; patch * positions];
        gemm(
            MatRef::new(kernel, self.out_channels, patch).t(),
            MatRef::new(grad_out, self.out_channels, positions),
            0.0,
            &mut grad_cols,
        );
        let mut grad_input = vec![0.0; input.len()];
        self.col2im(&grad_cols, &mut grad_input);
        (grad_input, grad_kernel)
    }
}
