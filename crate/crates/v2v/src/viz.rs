//! PPM renderings: Middlebury-style flow color wheel, segmentation maps, and
//! first-layer filter grids.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum VizError {
    #[error("expected {what} dims, got {found:?}")]
    BadDims { what: &'static str, found: Vec<usize> },
    #[error("frame {frame} out of range, clip has {frames}")]
    FrameOutOfRange { frame: usize, frames: usize },
    #[error("payload length {found} does not match 3*{w}*{h}")]
    BadPayload { found: usize, w: usize, h: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Binary PPM ("P6") image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    /// RGB triplets, row-major.
    pub data: Vec<u8>,
}

impl PpmImage {
    pub fn new(width: usize, height: usize) -> PpmImage {
        PpmImage {
            width,
            height,
            data: vec![0; 3 * width * height],
        }
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn write(&self, path: &Path) -> Result<(), VizError> {
        if self.data.len() != 3 * self.width * self.height {
            return Err(VizError::BadPayload {
                found: self.data.len(),
                w: self.width,
                h: self.height,
            });
        }
        let mut f = std::fs::File::create(path)?;
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.data)?;
        Ok(())
    }

    /// Integer upscale by pixel replication.
    pub fn upscale(&self, factor: usize) -> PpmImage {
        let mut out = PpmImage::new(self.width * factor, self.height * factor);
        for y in 0..out.height {
            for x in 0..out.width {
                let i = 3 * ((y / factor) * self.width + x / factor);
                out.set(x, y, [self.data[i], self.data[i + 1], self.data[i + 2]]);
            }
        }
        out
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |f: f32| ((f + m).clamp(0.0, 1.0) * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

/// Color-wheel rendering of one frame of a [2,L,H,W] flow tensor: hue from
/// atan2(v,u), saturation from magnitude over `max_flow` (per-image max when
/// None). Zero flow is white.
pub fn flow_to_image(
    flow: &Tensor,
    frame: usize,
    max_flow: Option<f32>,
) -> Result<PpmImage, VizError> {
    let d = flow.dims();
    if d.len() != 4 || d[0] != 2 {
        return Err(VizError::BadDims {
            what: "[2,L,H,W] flow",
            found: d.to_vec(),
        });
    }
    let (l, h, w) = (d[1], d[2], d[3]);
    if frame >= l {
        return Err(VizError::FrameOutOfRange { frame, frames: l });
    }
    let plane = h * w;
    let vol = l * plane;
    let u = &flow.data()[frame * plane..(frame + 1) * plane];
    let v = &flow.data()[vol + frame * plane..vol + (frame + 1) * plane];
    let max_mag = max_flow.unwrap_or_else(|| {
        u.iter()
            .zip(v)
            .map(|(&a, &b)| a.hypot(b))
            .fold(0.0f32, f32::max)
    });
    let mut img = PpmImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (fu, fv) = (u[y * w + x], v[y * w + x]);
            let mag = fu.hypot(fv);
            let rgb = if mag == 0.0 || max_mag == 0.0 {
                [255, 255, 255]
            } else {
                let hue = fv.atan2(fu).to_degrees();
                let sat = (mag / max_mag).min(1.0);
                hsv_to_rgb(hue, sat, 1.0)
            };
            img.set(x, y, rgb);
        }
    }
    Ok(img)
}

/// Fixed 8-color class palette; class ids beyond 8 wrap around.
pub const SEG_PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

/// Argmax map of one frame of [K,L,H,W] logits in the fixed palette, or a
/// single class's softmax probability as a blue-to-red heat map.
pub fn seg_to_image(
    logits: &Tensor,
    frame: usize,
    heat_class: Option<usize>,
) -> Result<PpmImage, VizError> {
    let d = logits.dims();
    if d.len() != 4 || d[0] == 0 {
        return Err(VizError::BadDims {
            what: "[K,L,H,W] logits",
            found: d.to_vec(),
        });
    }
    let (k, l, h, w) = (d[0], d[1], d[2], d[3]);
    if frame >= l {
        return Err(VizError::FrameOutOfRange { frame, frames: l });
    }
    if let Some(c) = heat_class {
        if c >= k {
            return Err(VizError::BadDims {
                what: "class < K",
                found: vec![c, k],
            });
        }
    }
    let plane = h * w;
    let vol = l * plane;
    let xd = logits.data();
    let mut img = PpmImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let at = frame * plane + y * w + x;
            let rgb = match heat_class {
                None => {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_c = 0;
                    for c in 0..k {
                        let val = xd[c * vol + at];
                        if val > best {
                            best = val;
                            best_c = c;
                        }
                    }
                    SEG_PALETTE[best_c % 8]
                }
                Some(cls) => {
                    let m = (0..k).map(|c| xd[c * vol + at]).fold(f32::MIN, f32::max);
                    let denom: f32 = (0..k).map(|c| (xd[c * vol + at] - m).exp()).sum();
                    let p = (xd[cls * vol + at] - m).exp() / denom;
                    let q = |f: f32| (f.clamp(0.0, 1.0) * 255.0).round() as u8;
                    [q(p), 0, q(1.0 - p)]
                }
            };
            img.set(x, y, rgb);
        }
    }
    Ok(img)
}

/// Tiles a [out,in,3,kh,kw] first-layer weight tensor: each filter's three
/// temporal slices side by side (RGB when in == 3, channel mean otherwise),
/// min-max normalized per filter with a mid-gray fallback for constant
/// filters, upscaled by `scale` with 1-pixel black separators.
pub fn filters_to_image(weights: &Tensor, scale: usize) -> Result<PpmImage, VizError> {
    let d = weights.dims();
    if d.len() != 5 || d[2] == 0 {
        return Err(VizError::BadDims {
            what: "[out,in,kL,kH,kW] weights",
            found: d.to_vec(),
        });
    }
    let (out_ch, in_ch, kl, kh, kw) = (d[0], d[1], d[2], d[3], d[4]);
    let cols = (out_ch as f32).sqrt().ceil() as usize;
    let rows = out_ch.div_ceil(cols);
    let tile_w = kl * kw + (kl - 1) + 1;
    let tile_h = kh + 1;
    let mut img = PpmImage::new(cols * tile_w + 1, rows * tile_h + 1);
    let wd = weights.data();
    let fvol = in_ch * kl * kh * kw;
    for o in 0..out_ch {
        let f = &wd[o * fvol..(o + 1) * fvol];
        let lo = f.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = f.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let norm = |v: f32| {
            if hi > lo {
                (v - lo) / (hi - lo)
            } else {
                0.5
            }
        };
        let (gx0, gy0) = ((o % cols) * tile_w + 1, (o / cols) * tile_h + 1);
        for t in 0..kl {
            for y in 0..kh {
                for x in 0..kw {
                    let sample = |c: usize| f[((c * kl + t) * kh + y) * kw + x];
                    let rgb = if in_ch == 3 {
                        [norm(sample(0)), norm(sample(1)), norm(sample(2))]
                    } else {
                        let mean =
                            (0..in_ch).map(sample).sum::<f32>() / in_ch as f32;
                        let g = norm(mean);
                        [g, g, g]
                    };
                    img.set(
                        gx0 + t * (kw + 1) + x,
                        gy0 + y,
                        [
                            (rgb[0] * 255.0).round() as u8,
                            (rgb[1] * 255.0).round() as u8,
                            (rgb[2] * 255.0).round() as u8,
                        ],
                    );
                }
            }
        }
    }
    Ok(img.upscale(scale.max(1)))
}
