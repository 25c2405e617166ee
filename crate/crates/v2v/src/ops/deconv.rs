//! 3D transposed convolution (deconvolution) with scatter-accumulate
//! semantics: the adjoint of `conv3d_forward` with the same geometry.

use super::{axis_range, split_chw, ConvGeom, OpError};
use crate::tensor::Tensor;

fn check_inputs(x: &Tensor, g: &ConvGeom, w: &Tensor) -> Result<[usize; 3], OpError> {
    let (cin, in_lhw) = split_chw(x.dims())?;
    if cin != g.in_ch {
        return Err(OpError::ChannelMismatch {
            expected: g.in_ch,
            found: cin,
        });
    }
    let wd = g.deconv_weight_dims();
    if w.dims() != wd {
        return Err(OpError::ShapeMismatch {
            expected: wd.to_vec(),
            found: w.dims().to_vec(),
        });
    }
    Ok(in_lhw)
}

/// Each input value multiplies the kernel and is added into the output window
/// anchored at (l·sL−pL, h·sH−pH, w·sW−pW); out-of-bounds contributions drop.
pub fn deconv3d_forward(
    x: &Tensor,
    g: &ConvGeom,
    w: &Tensor,
    b: &Tensor,
) -> Result<Tensor, OpError> {
    let in_lhw = check_inputs(x, g, w)?;
    if b.dims() != [g.out_ch] {
        return Err(OpError::ShapeMismatch {
            expected: vec![g.out_ch],
            found: b.dims().to_vec(),
        });
    }
    let out = g.deconv_out_dims(in_lhw)?;
    let [il, ih, iw] = in_lhw;
    let [ol, oh, ow] = out;
    let [sl, sh, sw] = g.stride;
    let [kl_n, kh_n, kw_n] = g.kernel;

    let mut y = Tensor::zeros(&[g.out_ch, ol, oh, ow]).expect("valid out dims");
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let yd = y.data_mut();

    let out_ch_stride = ol * oh * ow;
    let in_ch_stride = il * ih * iw;
    for o in 0..g.out_ch {
        yd[o * out_ch_stride..(o + 1) * out_ch_stride].fill(bd[o]);
    }
    for c in 0..g.in_ch {
        let x_ch = &xd[c * in_ch_stride..(c + 1) * in_ch_stride];
        for o in 0..g.out_ch {
            let y_ch = &mut yd[o * out_ch_stride..(o + 1) * out_ch_stride];
            for kl in 0..kl_n {
                let off_l = kl as i64 - g.pad[0] as i64;
                let Some((llo, lhi)) = axis_range(il, ol, sl, off_l) else {
                    continue;
                };
                for kh in 0..kh_n {
                    let off_h = kh as i64 - g.pad[1] as i64;
                    let Some((hlo, hhi)) = axis_range(ih, oh, sh, off_h) else {
                        continue;
                    };
                    for kw in 0..kw_n {
                        let off_w = kw as i64 - g.pad[2] as i64;
                        let Some((wlo, whi)) = axis_range(iw, ow, sw, off_w) else {
                            continue;
                        };
                        let wv = wd[(((c * g.out_ch + o) * kl_n + kl) * kh_n + kh) * kw_n + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        for l in llo..=lhi {
                            let yl = ((l * sl) as i64 + off_l) as usize;
                            for h in hlo..=hhi {
                                let yh = ((h * sh) as i64 + off_h) as usize;
                                let x_row = (l * ih + h) * iw;
                                let y_row = (yl * oh + yh) * ow;
                                if sw == 1 {
                                    let ys = (y_row as i64 + wlo as i64 + off_w) as usize;
                                    let n = whi - wlo + 1;
                                    let src = &x_ch[x_row + wlo..x_row + wlo + n];
                                    let dst = &mut y_ch[ys..ys + n];
                                    for (d, s) in dst.iter_mut().zip(src) {
                                        *d += wv * s;
                                    }
                                } else {
                                    for wi in wlo..=whi {
                                        let yw = ((wi * sw) as i64 + off_w) as usize;
                                        y_ch[y_row + yw] += wv * x_ch[x_row + wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Analytic gradients. dx is itself a convolution of dy with the same
/// weights (adjoint of the adjoint), which the implementation reuses.
pub fn deconv3d_backward(
    x: &Tensor,
    g: &ConvGeom,
    w: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), OpError> {
    let in_lhw = check_inputs(x, g, w)?;
    let out = g.deconv_out_dims(in_lhw)?;
    let expected_dy = [g.out_ch, out[0], out[1], out[2]];
    if dy.dims() != expected_dy {
        return Err(OpError::ShapeMismatch {
            expected: expected_dy.to_vec(),
            found: dy.dims().to_vec(),
        });
    }

    // dx: a forward convolution of dy. The deconv weight layout
    // [in, out, k...] already matches the conv layout [out', in', k...]
    // with out' = in and in' = out.
    let conv_g = ConvGeom {
        kernel: g.kernel,
        stride: g.stride,
        pad: g.pad,
        in_ch: g.out_ch,
        out_ch: g.in_ch,
    };
    let zero_bias = Tensor::zeros(&[g.in_ch]).expect("dims");
    let dx = super::conv::conv3d_forward(dy, &conv_g, w, &zero_bias)?;
    debug_assert_eq!(dx.dims(), x.dims());

    // dw and db by direct accumulation.
    let [il, ih, iw] = in_lhw;
    let [ol, oh, ow] = out;
    let [sl, sh, sw] = g.stride;
    let [kl_n, kh_n, kw_n] = g.kernel;
    let mut dw = Tensor::zeros(&g.deconv_weight_dims()).expect("dims");
    let mut db = Tensor::zeros(&[g.out_ch]).expect("dims");
    let xd = x.data();
    let dyd = dy.data();
    let dwd = dw.data_mut();
    let dbd = db.data_mut();
    let out_ch_stride = ol * oh * ow;
    let in_ch_stride = il * ih * iw;

    for o in 0..g.out_ch {
        let mut s = 0.0f32;
        for v in &dyd[o * out_ch_stride..(o + 1) * out_ch_stride] {
            s += v;
        }
        dbd[o] = s;
    }
    for c in 0..g.in_ch {
        let x_ch = &xd[c * in_ch_stride..(c + 1) * in_ch_stride];
        for o in 0..g.out_ch {
            let dy_ch = &dyd[o * out_ch_stride..(o + 1) * out_ch_stride];
            for kl in 0..kl_n {
                let off_l = kl as i64 - g.pad[0] as i64;
                let Some((llo, lhi)) = axis_range(il, ol, sl, off_l) else {
                    continue;
                };
                for kh in 0..kh_n {
                    let off_h = kh as i64 - g.pad[1] as i64;
                    let Some((hlo, hhi)) = axis_range(ih, oh, sh, off_h) else {
                        continue;
                    };
                    for kw in 0..kw_n {
                        let off_w = kw as i64 - g.pad[2] as i64;
                        let Some((wlo, whi)) = axis_range(iw, ow, sw, off_w) else {
                            continue;
                        };
                        let mut grad_w = 0.0f32;
                        for l in llo..=lhi {
                            let yl = ((l * sl) as i64 + off_l) as usize;
                            for h in hlo..=hhi {
                                let yh = ((h * sh) as i64 + off_h) as usize;
                                let x_row = (l * ih + h) * iw;
                                let y_row = (yl * oh + yh) * ow;
                                if sw == 1 {
                                    let ys = (y_row as i64 + wlo as i64 + off_w) as usize;
                                    let n = whi - wlo + 1;
                                    let xs = &x_ch[x_row + wlo..x_row + wlo + n];
                                    let dys = &dy_ch[ys..ys + n];
                                    for i in 0..n {
                                        grad_w += xs[i] * dys[i];
                                    }
                                } else {
                                    for wi in wlo..=whi {
                                        let yw = ((wi * sw) as i64 + off_w) as usize;
                                        grad_w += x_ch[x_row + wi] * dy_ch[y_row + yw];
                                    }
                                }
                            }
                        }
                        dwd[(((c * g.out_ch + o) * kl_n + kl) * kh_n + kh) * kw_n + kw] = grad_w;
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}
