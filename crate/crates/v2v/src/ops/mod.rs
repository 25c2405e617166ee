//! Layer primitives: 3D convolution, transposed convolution, max pooling,
//! ReLU, channel concatenation, trilinear upsampling, and a finite-difference
//! gradient checker.
//!
//! All ops are pure functions over `[C, L, H, W]` tensors. Inner-loop
//! accumulation order is fixed (channel-major, then kL, kH, kW) so repeated
//! runs are bit-identical.

mod conv;
mod deconv;
mod gradcheck;
mod misc;
mod pool;
#[cfg(test)]
pub(crate) mod testutil;

pub use conv::{conv3d_backward, conv3d_forward};
pub use deconv::{deconv3d_backward, deconv3d_forward};
pub use gradcheck::{gradcheck, gradcheck_sampled};
pub use misc::{
    concat_backward, concat_channels, relu_backward, relu_forward, trilinear_upsample,
    trilinear_upsample_backward,
};
pub use pool::{maxpool3d_backward, maxpool3d_forward};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OpError {
    #[error("channel mismatch: input has {found} channels, op expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("op requires a rank-4 [C,L,H,W] tensor, found dims {0:?}")]
    NotRank4(Vec<usize>),
    #[error("non-positive output shape for input {input:?} with kernel {kernel:?} stride {stride:?} pad {pad:?}")]
    NonPositiveOutputShape {
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    },
    #[error("spatial mismatch: {0:?} vs {1:?}")]
    SpatialMismatch([usize; 3], [usize; 3]),
    #[error("trilinear upsample cannot downsample: in {0:?}, requested {1:?}")]
    DownsampleRequested([usize; 3], [usize; 3]),
}

/// Geometry shared by convolution and transposed convolution.
///
/// Kernel/stride/pad components are ordered (L, H, W). Convolution weights
/// are `[out_ch, in_ch, kL, kH, kW]`; deconvolution weights are
/// `[in_ch, out_ch, kL, kH, kW]`, mirroring the adjoint relationship.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvGeom {
    /// Output extents of a convolution: floor((in + 2p - k)/s) + 1 per axis.
    pub fn conv_out_dims(&self, input: [usize; 3]) -> Result<[usize; 3], OpError> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let padded = input[a] as i64 + 2 * self.pad[a] as i64 - self.kernel[a] as i64;
            if padded < 0 {
                return Err(self.bad_shape(input));
            }
            out[a] = (padded / self.stride[a] as i64) as usize + 1;
        }
        Ok(out)
    }

    /// Output extents of a transposed convolution: s·(in − 1) + k − 2p.
    pub fn deconv_out_dims(&self, input: [usize; 3]) -> Result<[usize; 3], OpError> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let v = self.stride[a] as i64 * (input[a] as i64 - 1) + self.kernel[a] as i64
                - 2 * self.pad[a] as i64;
            if v < 1 {
                return Err(self.bad_shape(input));
            }
            out[a] = v as usize;
        }
        Ok(out)
    }

    pub fn conv_weight_dims(&self) -> [usize; 5] {
        [
            self.out_ch,
            self.in_ch,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    pub fn deconv_weight_dims(&self) -> [usize; 5] {
        [
            self.in_ch,
            self.out_ch,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    fn bad_shape(&self, input: [usize; 3]) -> OpError {
        OpError::NonPositiveOutputShape {
            input,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

pub(crate) fn split_chw(dims: &[usize]) -> Result<(usize, [usize; 3]), OpError> {
    if dims.len() != 4 {
        return Err(OpError::NotRank4(dims.to_vec()));
    }
    Ok((dims[0], [dims[1], dims[2], dims[3]]))
}

/// Inclusive range `lo..=hi` of indices `i` in `[0, len_a)` such that
/// `i*s + off` lands in `[0, len_b)`; `None` when empty.
pub(crate) fn axis_range(
    len_a: usize,
    len_b: usize,
    s: usize,
    off: i64,
) -> Option<(usize, usize)> {
    let s = s as i64;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let max = len_b as i64 - 1 - off;
    if max < 0 {
        return None;
    }
    let hi = (max / s).min(len_a as i64 - 1);
    if lo > hi {
        return None;
    }
    Some((lo as usize, hi as usize))
}
