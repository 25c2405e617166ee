//! Horn-Schunck optical flow, used as the hand-designed teacher that
//! fabricates per-clip flow labels from unlabeled video.

use thiserror::Error;

use crate::synth::to_grayscale;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("frame dims mismatch: {0:?} vs {1:?}")]
    DimsMismatch(Vec<usize>, Vec<usize>),
    #[error("frames must be rank 2 [H,W], got {0:?}")]
    NotAFrame(Vec<usize>),
    #[error("clip must be rank 4 [C,L,H,W] with C in {{1,3}} and L >= 2, got {0:?}")]
    BadClip(Vec<usize>),
    #[error("smoothness must be > 0 and iterations/pyramid levels >= 1")]
    BadParams,
}

/// Dense displacement for one frame transition, pixels per frame.
#[derive(Debug, Clone)]
pub struct FlowField {
    /// Horizontal component, [H,W].
    pub u: Tensor,
    /// Vertical component, [H,W].
    pub v: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct HSParams {
    /// Regularizer weight lambda; larger favors smoother fields.
    pub smoothness: f32,
    pub iterations: usize,
    pub pyramid_levels: usize,
}

impl Default for HSParams {
    fn default() -> HSParams {
        HSParams {
            smoothness: 1.0,
            iterations: 100,
            pyramid_levels: 1,
        }
    }
}

fn clampi(i: i64, len: usize) -> usize {
    i.clamp(0, len as i64 - 1) as usize
}

/// Spatial central differences on the frame average, forward difference in
/// time. Returns (Ix, Iy, It) as flat row-major [H,W] buffers.
fn derivatives(a: &[f32], b: &[f32], h: usize, w: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let n = h * w;
    let mut ix = vec![0.0f32; n];
    let mut iy = vec![0.0f32; n];
    let mut it = vec![0.0f32; n];
    let avg = |i: usize| 0.5 * (a[i] + b[i]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let xm = y * w + clampi(x as i64 - 1, w);
            let xp = y * w + clampi(x as i64 + 1, w);
            let ym = clampi(y as i64 - 1, h) * w + x;
            let yp = clampi(y as i64 + 1, h) * w + x;
            ix[i] = 0.5 * (avg(xp) - avg(xm));
            iy[i] = 0.5 * (avg(yp) - avg(ym));
            it[i] = b[i] - a[i];
        }
    }
    (ix, iy, it)
}

fn four_neighbor_mean(f: &[f32], h: usize, w: usize, out: &mut [f32]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            out[i] = 0.25
                * (f[y * w + clampi(x as i64 - 1, w)]
                    + f[y * w + clampi(x as i64 + 1, w)]
                    + f[clampi(y as i64 - 1, h) * w + x]
                    + f[clampi(y as i64 + 1, h) * w + x]);
        }
    }
}

/// 2x box-filter downsample (odd trailing row/column folded into the edge
/// cell's average).
fn downsample2(f: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = vec![0.0f32; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0f32;
            let mut cnt = 0.0f32;
            for dy in 0..2 {
                for dx in 0..2 {
                    let sy = 2 * y + dy;
                    let sx = 2 * x + dx;
                    if sy < h && sx < w {
                        acc += f[sy * w + sx];
                        cnt += 1.0;
                    }
                }
            }
            out[y * ow + x] = acc / cnt;
        }
    }
    (out, oh, ow)
}

/// Nearest-neighbor upsample of a coarse field to (h, w), values doubled to
/// account for the resolution change.
fn upsample_flow(f: &[f32], ch: usize, cw: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = (y / 2).min(ch - 1);
            let sx = (x / 2).min(cw - 1);
            out[y * w + x] = 2.0 * f[sy * cw + sx];
        }
    }
    out
}

fn hs_iterate(
    a: &[f32],
    b: &[f32],
    h: usize,
    w: usize,
    p: &HSParams,
    u: &mut Vec<f32>,
    v: &mut Vec<f32>,
) {
    let (ix, iy, it) = derivatives(a, b, h, w);
    let lam2 = p.smoothness * p.smoothness;
    let n = h * w;
    let mut ubar = vec![0.0f32; n];
    let mut vbar = vec![0.0f32; n];
    let mut un = vec![0.0f32; n];
    let mut vn = vec![0.0f32; n];
    for _ in 0..p.iterations {
        four_neighbor_mean(u, h, w, &mut ubar);
        four_neighbor_mean(v, h, w, &mut vbar);
        for i in 0..n {
            let num = ix[i] * ubar[i] + iy[i] * vbar[i] + it[i];
            let den = lam2 + ix[i] * ix[i] + iy[i] * iy[i];
            un[i] = ubar[i] - ix[i] * num / den;
            vn[i] = vbar[i] - iy[i] * num / den;
        }
        std::mem::swap(u, &mut un);
        std::mem::swap(v, &mut vn);
    }
}

/// Jacobi iteration u <- ubar - Ix(Ix ubar + Iy vbar + It)/(lambda^2+Ix^2+Iy^2)
/// from zero init, with an averaging pyramid for larger motion when
/// `pyramid_levels > 1` (coarse flow seeds the finer level).
pub fn horn_schunck(
    frame_a: &Tensor,
    frame_b: &Tensor,
    p: &HSParams,
) -> Result<FlowField, TeacherError> {
    if frame_a.dims().len() != 2 {
        return Err(TeacherError::NotAFrame(frame_a.dims().to_vec()));
    }
    if frame_a.dims() != frame_b.dims() {
        return Err(TeacherError::DimsMismatch(
            frame_a.dims().to_vec(),
            frame_b.dims().to_vec(),
        ));
    }
    if p.smoothness <= 0.0 || p.iterations == 0 || p.pyramid_levels == 0 {
        return Err(TeacherError::BadParams);
    }
    let (h, w) = (frame_a.dims()[0], frame_a.dims()[1]);

    // pyramid[0] is full resolution
    let mut pyramid = vec![(frame_a.data().to_vec(), frame_b.data().to_vec(), h, w)];
    for lvl in 1..p.pyramid_levels {
        let (pa, pb, ph, pw) = &pyramid[lvl - 1];
        if *ph < 4 || *pw < 4 {
            break;
        }
        let (da, dh, dw) = downsample2(pa, *ph, *pw);
        let (db, _, _) = downsample2(pb, *ph, *pw);
        pyramid.push((da, db, dh, dw));
    }

    let mut u: Vec<f32> = Vec::new();
    let mut v: Vec<f32> = Vec::new();
    for lvl in (0..pyramid.len()).rev() {
        let (pa, pb, ph, pw) = &pyramid[lvl];
        if u.is_empty() {
            u = vec![0.0; ph * pw];
            v = vec![0.0; ph * pw];
        } else {
            let (ch, cw) = (pyramid[lvl + 1].2, pyramid[lvl + 1].3);
            u = upsample_flow(&u, ch, cw, *ph, *pw);
            v = upsample_flow(&v, ch, cw, *ph, *pw);
        }
        hs_iterate(pa, pb, *ph, *pw, p, &mut u, &mut v);
    }

    Ok(FlowField {
        u: Tensor::from_vec(&[h, w], u).expect("dims"),
        v: Tensor::from_vec(&[h, w], v).expect("dims"),
    })
}

/// Labels a whole clip: grayscale conversion, one flow field per consecutive
/// frame pair stored at the earlier index, and the last frame copying index
/// L-2 so the output spans all L frames as a [2,L,H,W] tensor.
pub fn teacher_label_clip(clip: &Tensor, p: &HSParams) -> Result<Tensor, TeacherError> {
    let d = clip.dims().to_vec();
    if d.len() != 4 || (d[0] != 1 && d[0] != 3) || d[1] < 2 {
        return Err(TeacherError::BadClip(d));
    }
    let gray = if d[0] == 3 {
        to_grayscale(clip).map_err(|_| TeacherError::BadClip(d.clone()))?
    } else {
        clip.clone()
    };
    let (l, h, w) = (d[1], d[2], d[3]);
    let plane = h * w;
    let frame = |t: usize| {
        Tensor::from_vec(&[h, w], gray.data()[t * plane..(t + 1) * plane].to_vec())
            .expect("dims")
    };
    let vol = l * plane;
    let mut out = Tensor::zeros(&[2, l, h, w]).expect("dims");
    for t in 0..l - 1 {
        let f = horn_schunck(&frame(t), &frame(t + 1), p)?;
        out.data_mut()[t * plane..(t + 1) * plane].copy_from_slice(f.u.data());
        out.data_mut()[vol + t * plane..vol + (t + 1) * plane].copy_from_slice(f.v.data());
    }
    let (last, prev) = (l - 1, l - 2);
    for c in 0..2 {
        let src = c * vol + prev * plane;
        let dst = c * vol + last * plane;
        let copy: Vec<f32> = out.data()[src..src + plane].to_vec();
        out.data_mut()[dst..dst + plane].copy_from_slice(&copy);
    }
    Ok(out)
}
