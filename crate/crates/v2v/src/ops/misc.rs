//! ReLU, channel concatenation, and trilinear upsampling.

use super::{split_chw, OpError};
use crate::tensor::Tensor;

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(x.dims(), data).expect("dims preserved")
}

/// Subgradient 0 at x == 0.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor, OpError> {
    if x.dims() != dy.dims() {
        return Err(OpError::ShapeMismatch {
            expected: x.dims().to_vec(),
            found: dy.dims().to_vec(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &d)| if xv > 0.0 { d } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(x.dims(), data).expect("dims preserved"))
}

/// Stacks b's channels after a's; spatial extents must agree.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor, OpError> {
    let (ca, lhw_a) = split_chw(a.dims())?;
    let (cb, lhw_b) = split_chw(b.dims())?;
    if lhw_a != lhw_b {
        return Err(OpError::SpatialMismatch(lhw_a, lhw_b));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, lhw_a[0], lhw_a[1], lhw_a[2]], data).map_err(|_| {
        OpError::ShapeMismatch {
            expected: vec![ca + cb],
            found: vec![],
        }
    })
}

/// Splits the upstream gradient back into the two concatenated slices.
pub fn concat_backward(dy: &Tensor, ca: usize, cb: usize) -> Result<(Tensor, Tensor), OpError> {
    let (c, lhw) = split_chw(dy.dims())?;
    if c != ca + cb {
        return Err(OpError::ChannelMismatch {
            expected: ca + cb,
            found: c,
        });
    }
    let per_ch = lhw[0] * lhw[1] * lhw[2];
    let da = Tensor::from_vec(
        &[ca, lhw[0], lhw[1], lhw[2]],
        dy.data()[..ca * per_ch].to_vec(),
    )
    .expect("dims");
    let db = Tensor::from_vec(
        &[cb, lhw[0], lhw[1], lhw[2]],
        dy.data()[ca * per_ch..].to_vec(),
    )
    .expect("dims");
    Ok((da, db))
}

/// Per-axis table of (lower index, upper index, upper weight) under
/// half-pixel-center mapping: src = (dst + 0.5)·(in/out) − 0.5, clamped.
fn axis_table(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, in_len as f64 - 1.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Separable linear interpolation up to the requested (L, H, W).
pub fn trilinear_upsample(x: &Tensor, out_lhw: [usize; 3]) -> Result<Tensor, OpError> {
    let (ch, in_lhw) = split_chw(x.dims())?;
    for a in 0..3 {
        if out_lhw[a] < in_lhw[a] {
            return Err(OpError::DownsampleRequested(in_lhw, out_lhw));
        }
    }
    let [il, ih, iw] = in_lhw;
    let [ol, oh, ow] = out_lhw;
    let tl = axis_table(il, ol);
    let th = axis_table(ih, oh);
    let tw = axis_table(iw, ow);
    let mut y = Tensor::zeros(&[ch, ol, oh, ow]).expect("dims");
    let xd = x.data();
    let yd = y.data_mut();
    for c in 0..ch {
        let x_ch = &xd[c * il * ih * iw..(c + 1) * il * ih * iw];
        for (l, &(l0, l1, fl)) in tl.iter().enumerate() {
            for (h, &(h0, h1, fh)) in th.iter().enumerate() {
                let row = ((c * ol + l) * oh + h) * ow;
                for (w, &(w0, w1, fw)) in tw.iter().enumerate() {
                    let g = |a: usize, b: usize, cc: usize| x_ch[(a * ih + b) * iw + cc];
                    let c00 = g(l0, h0, w0) * (1.0 - fw) + g(l0, h0, w1) * fw;
                    let c01 = g(l0, h1, w0) * (1.0 - fw) + g(l0, h1, w1) * fw;
                    let c10 = g(l1, h0, w0) * (1.0 - fw) + g(l1, h0, w1) * fw;
                    let c11 = g(l1, h1, w0) * (1.0 - fw) + g(l1, h1, w1) * fw;
                    let c0 = c00 * (1.0 - fh) + c01 * fh;
                    let c1 = c10 * (1.0 - fh) + c11 * fh;
                    yd[row + w] = c0 * (1.0 - fl) + c1 * fl;
                }
            }
        }
    }
    Ok(y)
}

/// Adjoint of `trilinear_upsample`: scatters each upstream element onto its
/// eight interpolation corners.
pub fn trilinear_upsample_backward(
    dy: &Tensor,
    in_dims: &[usize],
) -> Result<Tensor, OpError> {
    let (ch, out_lhw) = split_chw(dy.dims())?;
    let (ch_in, in_lhw) = split_chw(in_dims)?;
    if ch != ch_in {
        return Err(OpError::ChannelMismatch {
            expected: ch_in,
            found: ch,
        });
    }
    let [il, ih, iw] = in_lhw;
    let [ol, oh, ow] = out_lhw;
    let tl = axis_table(il, ol);
    let th = axis_table(ih, oh);
    let tw = axis_table(iw, ow);
    let mut dx = Tensor::zeros(in_dims).expect("dims");
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for c in 0..ch {
        let dx_ch = &mut dxd[c * il * ih * iw..(c + 1) * il * ih * iw];
        for (l, &(l0, l1, fl)) in tl.iter().enumerate() {
            for (h, &(h0, h1, fh)) in th.iter().enumerate() {
                let row = ((c * ol + l) * oh + h) * ow;
                for (w, &(w0, w1, fw)) in tw.iter().enumerate() {
                    let d = dyd[row + w];
                    let mut add = |a: usize, b: usize, cc: usize, wgt: f32| {
                        dx_ch[(a * ih + b) * iw + cc] += d * wgt;
                    };
                    add(l0, h0, w0, (1.0 - fl) * (1.0 - fh) * (1.0 - fw));
                    add(l0, h0, w1, (1.0 - fl) * (1.0 - fh) * fw);
                    add(l0, h1, w0, (1.0 - fl) * fh * (1.0 - fw));
                    add(l0, h1, w1, (1.0 - fl) * fh * fw);
                    add(l1, h0, w0, fl * (1.0 - fh) * (1.0 - fw));
                    add(l1, h0, w1, fl * (1.0 - fh) * fw);
                    add(l1, h1, w0, fl * fh * (1.0 - fw));
                    add(l1, h1, w1, fl * fh * fw);
                }
            }
        }
    }
    Ok(dx)
}
