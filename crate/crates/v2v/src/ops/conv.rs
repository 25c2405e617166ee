//! 3D convolution (cross-correlation convention, zero padding).

use super::{axis_range, split_chw, ConvGeom, OpError};
use crate::tensor::Tensor;

fn check_inputs(x: &Tensor, g: &ConvGeom, w: &Tensor, b: &Tensor) -> Result<[usize; 3], OpError> {
    let (cin, in_lhw) = split_chw(x.dims())?;
    if cin != g.in_ch {
        return Err(OpError::ChannelMismatch {
            expected: g.in_ch,
            found: cin,
        });
    }
    let wd = g.conv_weight_dims();
    if w.dims() != wd {
        return Err(OpError::ShapeMismatch {
            expected: wd.to_vec(),
            found: w.dims().to_vec(),
        });
    }
    if b.dims() != [g.out_ch] {
        return Err(OpError::ShapeMismatch {
            expected: vec![g.out_ch],
            found: b.dims().to_vec(),
        });
    }
    Ok(in_lhw)
}

/// y[o,l,h,w] = b[o] + Σ_{c,kl,kh,kw} x[c, l·sL+kl−pL, …] · w[o,c,kl,kh,kw],
/// with x treated as zero outside bounds.
pub fn conv3d_forward(
    x: &Tensor,
    g: &ConvGeom,
    w: &Tensor,
    b: &Tensor,
) -> Result<Tensor, OpError> {
    let in_lhw = check_inputs(x, g, w, b)?;
    let out = g.conv_out_dims(in_lhw)?;
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
        let y_ch = &mut yd[o * out_ch_stride..(o + 1) * out_ch_stride];
        y_ch.fill(bd[o]);
        for c in 0..g.in_ch {
            let x_ch = &xd[c * in_ch_stride..(c + 1) * in_ch_stride];
            for kl in 0..kl_n {
                let off_l = kl as i64 - g.pad[0] as i64;
                let Some((llo, lhi)) = axis_range(ol, il, sl, off_l) else {
                    continue;
                };
                for kh in 0..kh_n {
                    let off_h = kh as i64 - g.pad[1] as i64;
                    let Some((hlo, hhi)) = axis_range(oh, ih, sh, off_h) else {
                        continue;
                    };
                    for kw in 0..kw_n {
                        let off_w = kw as i64 - g.pad[2] as i64;
                        let Some((wlo, whi)) = axis_range(ow, iw, sw, off_w) else {
                            continue;
                        };
                        let wv = wd[(((o * g.in_ch + c) * kl_n + kl) * kh_n + kh) * kw_n + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        for l in llo..=lhi {
                            let xl = (l * sl) as i64 + off_l;
                            for h in hlo..=hhi {
                                let xh = (h * sh) as i64 + off_h;
                                let y_row = (l * oh + h) * ow;
                                let x_row = (xl as usize * ih + xh as usize) * iw;
                                if sw == 1 {
                                    let xs = x_row as i64 + wlo as i64 + off_w;
                                    let n = whi - wlo + 1;
                                    let dst = &mut y_ch[y_row + wlo..y_row + wlo + n];
                                    let src = &x_ch[xs as usize..xs as usize + n];
                                    for (d, s) in dst.iter_mut().zip(src) {
                                        *d += wv * s;
                                    }
                                } else {
                                    for wi in wlo..=whi {
                                        let xw = (wi * sw) as i64 + off_w;
                                        y_ch[y_row + wi] += wv * x_ch[x_row + xw as usize];
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

/// Gradients of Σ(y ⊙ dy) w.r.t. input, weights, and bias.
pub fn conv3d_backward(
    x: &Tensor,
    g: &ConvGeom,
    w: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), OpError> {
    let (cin, in_lhw) = split_chw(x.dims())?;
    if cin != g.in_ch {
        return Err(OpError::ChannelMismatch {
            expected: g.in_ch,
            found: cin,
        });
    }
    let wdims = g.conv_weight_dims();
    if w.dims() != wdims {
        return Err(OpError::ShapeMismatch {
            expected: wdims.to_vec(),
            found: w.dims().to_vec(),
        });
    }
    let out = g.conv_out_dims(in_lhw)?;
    let expected_dy = [g.out_ch, out[0], out[1], out[2]];
    if dy.dims() != expected_dy {
        return Err(OpError::ShapeMismatch {
            expected: expected_dy.to_vec(),
            found: dy.dims().to_vec(),
        });
    }

    let [il, ih, iw] = in_lhw;
    let [ol, oh, ow] = out;
    let [sl, sh, sw] = g.stride;
    let [kl_n, kh_n, kw_n] = g.kernel;

    let mut dx = Tensor::zeros(x.dims()).expect("dims");
    let mut dw = Tensor::zeros(&wdims).expect("dims");
    let mut db = Tensor::zeros(&[g.out_ch]).expect("dims");

    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    let dbd = db.data_mut();

    let out_ch_stride = ol * oh * ow;
    let in_ch_stride = il * ih * iw;

    for o in 0..g.out_ch {
        let dy_ch = &dyd[o * out_ch_stride..(o + 1) * out_ch_stride];
        let mut s = 0.0f32;
        for v in dy_ch {
            s += v;
        }
        dbd[o] = s;
        for c in 0..g.in_ch {
            let x_ch = &xd[c * in_ch_stride..(c + 1) * in_ch_stride];
            let dx_ch = &mut dxd[c * in_ch_stride..(c + 1) * in_ch_stride];
            for kl in 0..kl_n {
                let off_l = kl as i64 - g.pad[0] as i64;
                let Some((llo, lhi)) = axis_range(ol, il, sl, off_l) else {
                    continue;
                };
                for kh in 0..kh_n {
                    let off_h = kh as i64 - g.pad[1] as i64;
                    let Some((hlo, hhi)) = axis_range(oh, ih, sh, off_h) else {
                        continue;
                    };
                    for kw in 0..kw_n {
                        let off_w = kw as i64 - g.pad[2] as i64;
                        let Some((wlo, whi)) = axis_range(ow, iw, sw, off_w) else {
                            continue;
                        };
                        let widx = (((o * g.in_ch + c) * kl_n + kl) * kh_n + kh) * kw_n + kw;
                        let wv = wd[widx];
                        let mut grad_w = 0.0f32;
                        for l in llo..=lhi {
                            let xl = ((l * sl) as i64 + off_l) as usize;
                            for h in hlo..=hhi {
                                let xh = ((h * sh) as i64 + off_h) as usize;
                                let y_row = (l * oh + h) * ow;
                                let x_row = (xl * ih + xh) * iw;
                                if sw == 1 {
                                    let xs = (x_row as i64 + wlo as i64 + off_w) as usize;
                                    let n = whi - wlo + 1;
                                    let dy_s = &dy_ch[y_row + wlo..y_row + wlo + n];
                                    let x_s = &x_ch[xs..xs + n];
                                    let dx_s = &mut dx_ch[xs..xs + n];
                                    for i in 0..n {
                                        grad_w += x_s[i] * dy_s[i];
                                        dx_s[i] += wv * dy_s[i];
                                    }
                                } else {
                                    for wi in wlo..=whi {
                                        let xw = ((wi * sw) as i64 + off_w) as usize;
                                        let d = dy_ch[y_row + wi];
                                        grad_w += x_ch[x_row + xw] * d;
                                        dx_ch[x_row + xw] += wv * d;
                                    }
                                }
                            }
                        }
                        dwd[widx] += grad_w;
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}
