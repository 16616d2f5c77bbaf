//! Forward and backward kernels on raw `[N, C, H, W]` buffers.

mod conv;
mod norm;
mod pool;

pub use conv::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward,
    ConvGrads,
};
pub use norm::{batch_norm_backward, batch_norm_forward, NormGrads, NormStats};
pub use pool::{avg_pool2x2_backward, avg_pool2x2_forward, max_pool2x2_backward, max_pool2x2_forward};

use crate::error::{Error, Result};

/// Stride, zero padding, dilation and (transposed only) output padding, each
/// as `(height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub output_padding: (usize, usize),
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            output_padding: (0, 0),
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry {
            stride: (stride, stride),
            padding: (padding, padding),
            ..Default::default()
        }
    }

    pub fn with_padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn with_dilation(mut self, dh: usize, dw: usize) -> Self {
        self.dilation = (dh, dw);
        self
    }

    pub fn with_output_padding(mut self, oh: usize, ow: usize) -> Self {
        self.output_padding = (oh, ow);
        self
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::invalid(op, "stride must be >= 1"));
        }
        if self.dilation.0 == 0 || self.dilation.1 == 0 {
            return Err(Error::invalid(op, "dilation must be >= 1"));
        }
        Ok(())
    }

    /// Spatial output size of a forward convolution.
    pub fn conv_output(
        &self,
        op: &'static str,
        input: (usize, usize),
        kernel: (usize, usize),
    ) -> Result<(usize, usize)> {
        self.validate(op)?;
        let axis = |name: &str, n: usize, k: usize, s: usize, p: usize, d: usize| {
            let span = d * (k - 1) + 1;
            if n + 2 * p < span {
                return Err(Error::shape(
                    op,
                    format!(
                        "{name}: dilated kernel span {span} exceeds padded input {}",
                        n + 2 * p
                    ),
                ));
            }
            Ok((n + 2 * p - span) / s + 1)
        };
        Ok((
            axis("height", input.0, kernel.0, self.stride.0, self.padding.0, self.dilation.0)?,
            axis("width", input.1, kernel.1, self.stride.1, self.padding.1, self.dilation.1)?,
        ))
    }

    /// Spatial output size of a transposed convolution.
    pub fn transposed_output(
        &self,
        op: &'static str,
        input: (usize, usize),
        kernel: (usize, usize),
    ) -> Result<(usize, usize)> {
        self.validate(op)?;
        let axis = |name: &str, n: usize, k: usize, s: usize, p: usize, d: usize, o: usize| {
            if o >= s.max(d) {
                return Err(Error::invalid(
                    op,
                    format!("{name}: output padding {o} must be smaller than stride or dilation"),
                ));
            }
            let full = (n - 1) * s + d * (k - 1) + o + 1;
            if full <= 2 * p {
                return Err(Error::shape(op, format!("{name}: padding {p} consumes the output")));
            }
            Ok(full - 2 * p)
        };
        Ok((
            axis(
                "height",
                input.0,
                kernel.0,
                self.stride.0,
                self.padding.0,
                self.dilation.0,
                self.output_padding.0,
            )?,
            axis(
                "width",
                input.1,
                kernel.1,
                self.stride.1,
                self.padding.1,
                self.dilation.1,
                self.output_padding.1,
            )?,
        ))
    }
}
