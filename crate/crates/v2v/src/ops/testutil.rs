//! Shared helpers for op-level tests.

use super::ConvGeom;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::from_vec(dims, data).unwrap()
}

/// Six-nested-loop reference convolution, independent of the fast path.
pub(crate) fn conv3d_oracle(x: &Tensor, g: &ConvGeom, w: &Tensor, b: &Tensor) -> Tensor {
    let d = x.dims();
    let (il, ih, iw) = (d[1], d[2], d[3]);
    let out = g.conv_out_dims([il, ih, iw]).unwrap();
    let mut y = Tensor::zeros(&[g.out_ch, out[0], out[1], out[2]]).unwrap();
    for o in 0..g.out_ch {
        for l in 0..out[0] {
            for h in 0..out[1] {
                for wi in 0..out[2] {
                    let mut acc = b.data()[o] as f64;
                    for c in 0..g.in_ch {
                        for kl in 0..g.kernel[0] {
                            for kh in 0..g.kernel[1] {
                                for kw in 0..g.kernel[2] {
                                    let xl = (l * g.stride[0] + kl) as i64 - g.pad[0] as i64;
                                    let xh = (h * g.stride[1] + kh) as i64 - g.pad[1] as i64;
                                    let xw = (wi * g.stride[2] + kw) as i64 - g.pad[2] as i64;
                                    if xl < 0
                                        || xh < 0
                                        || xw < 0
                                        || xl >= il as i64
                                        || xh >= ih as i64
                                        || xw >= iw as i64
                                    {
                                        continue;
                                    }
                                    let xv = x.at(&[c, xl as usize, xh as usize, xw as usize]);
                                    let wv = w.at(&[o, c, kl, kh, kw]);
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                    }
                    y.set(&[o, l, h, wi], acc as f32);
                }
            }
        }
    }
    y
}
