//! 3D max pooling with an argmax cache for the backward pass.

use super::{split_chw, OpError};
use crate::tensor::Tensor;

/// Windowed max over each channel. Returns the pooled tensor plus, for each
/// output element, the flat index of the winning input element. Ties break
/// toward the smallest flat index.
pub fn maxpool3d_forward(
    x: &Tensor,
    kernel: [usize; 3],
    stride: [usize; 3],
) -> Result<(Tensor, Vec<u32>), OpError> {
    let (ch, [il, ih, iw]) = split_chw(x.dims())?;
    let mut out = [0usize; 3];
    for a in 0..3 {
        let i = [il, ih, iw][a];
        if i < kernel[a] {
            return Err(OpError::NonPositiveOutputShape {
                input: [il, ih, iw],
                kernel,
                stride,
                pad: [0; 3],
            });
        }
        out[a] = (i - kernel[a]) / stride[a] + 1;
    }
    let [ol, oh, ow] = out;
    let mut y = Tensor::zeros(&[ch, ol, oh, ow]).expect("dims");
    let mut argmax = vec![0u32; ch * ol * oh * ow];
    let xd = x.data();
    let yd = y.data_mut();

    let mut oi = 0usize;
    for c in 0..ch {
        for l in 0..ol {
            for h in 0..oh {
                for w in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for kl in 0..kernel[0] {
                        for kh in 0..kernel[1] {
                            for kw in 0..kernel[2] {
                                let idx = ((c * il + l * stride[0] + kl) * ih
                                    + h * stride[1]
                                    + kh)
                                    * iw
                                    + w * stride[2]
                                    + kw;
                                let v = xd[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    yd[oi] = best;
                    argmax[oi] = best_idx as u32;
                    oi += 1;
                }
            }
        }
    }
    Ok((y, argmax))
}

/// Routes each upstream gradient element to its cached argmax position,
/// accumulating where windows overlap.
pub fn maxpool3d_backward(
    argmax: &[u32],
    dy: &Tensor,
    in_dims: &[usize],
) -> Result<Tensor, OpError> {
    if argmax.len() != dy.len() {
        return Err(OpError::ShapeMismatch {
            expected: vec![argmax.len()],
            found: vec![dy.len()],
        });
    }
    let mut dx = Tensor::zeros(in_dims).expect("dims");
    let dxd = dx.data_mut();
    for (i, &d) in dy.data().iter().enumerate() {
        dxd[argmax[i] as usize] += d;
    }
    Ok(dx)
}
