//! Procedural clip generator with exact per-voxel ground truth for all three
//! tasks: flow (the velocity of the topmost covering object), segmentation
//! (its class), and color (the clean render before noise).

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("object {index} (size {size}) cannot stay inside a {h}x{w} canvas over {frames} frames at velocity ({vx},{vy})")]
    ObjectDoesNotFit {
        index: usize,
        size: usize,
        h: usize,
        w: usize,
        frames: usize,
        vx: i32,
        vy: i32,
    },
    #[error("class id {class} out of range for {classes} classes")]
    ClassOutOfRange { class: u32, classes: usize },
    #[error("velocity ({vx},{vy}) exceeds the 4 px/frame bound")]
    VelocityTooLarge { vx: i32, vy: i32 },
    #[error("canvas or frame count is zero")]
    EmptyScene,
    #[error("texture contrast {0} outside [0, 1]")]
    BadTextureContrast(f32),
    #[error("expected an RGB clip [3,L,H,W], got {0:?}")]
    NotRgb(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Rect,
    Disk,
}

#[derive(Debug, Clone)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// Bounding-box side in pixels (disk diameter for `Disk`).
    pub size: usize,
    /// Pixels per frame, integer so ground-truth flow is exact.
    pub velocity: (i32, i32),
    pub class: u32,
    pub color: [f32; 3],
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub classes: usize,
    pub background_class: u32,
    pub texture_seed: u64,
    pub objects: Vec<ObjectSpec>,
    pub noise_std: f32,
    /// Per-pixel texture amplitude in [0, 1]; 0 renders flat regions.
    pub texture_contrast: f32,
}

impl SceneSpec {
    /// A two-object scene (one rect, one disk) sized for the given canvas.
    pub fn default_scene(height: usize, width: usize, frames: usize, classes: usize) -> SceneSpec {
        let side = (height.min(width) / 4).max(4);
        SceneSpec {
            height,
            width,
            frames,
            classes,
            background_class: 0,
            texture_seed: 7,
            objects: vec![
                ObjectSpec {
                    shape: Shape::Rect,
                    size: side,
                    velocity: (1, 0),
                    class: 1 % classes as u32,
                    color: [0.9, 0.2, 0.2],
                },
                ObjectSpec {
                    shape: Shape::Disk,
                    size: side,
                    velocity: (0, 1),
                    class: 2 % classes as u32,
                    color: [0.2, 0.4, 0.9],
                },
            ],
            noise_std: 0.01,
            texture_contrast: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClipSample {
    /// RGB render in [0,1] with noise applied.
    pub clip: Tensor,
    /// (u,v) px/frame of the topmost covering object, 0 on background.
    pub gt_flow: Tensor,
    /// Class id of the topmost covering object, stored as f32.
    pub gt_seg: Tensor,
    /// The render before noise.
    pub gt_color: Tensor,
    pub id: String,
}

fn validate(spec: &SceneSpec) -> Result<(), SynthError> {
    if spec.height == 0 || spec.width == 0 || spec.frames == 0 {
        return Err(SynthError::EmptyScene);
    }
    if !(0.0..=1.0).contains(&spec.texture_contrast) {
        return Err(SynthError::BadTextureContrast(spec.texture_contrast));
    }
    if spec.background_class as usize >= spec.classes {
        return Err(SynthError::ClassOutOfRange {
            class: spec.background_class,
            classes: spec.classes,
        });
    }
    for (i, o) in spec.objects.iter().enumerate() {
        if o.class as usize >= spec.classes {
            return Err(SynthError::ClassOutOfRange {
                class: o.class,
                classes: spec.classes,
            });
        }
        if o.velocity.0.abs() > 4 || o.velocity.1.abs() > 4 {
            return Err(SynthError::VelocityTooLarge {
                vx: o.velocity.0,
                vy: o.velocity.1,
            });
        }
        let travel_x = o.velocity.0.unsigned_abs() as usize * (spec.frames - 1);
        let travel_y = o.velocity.1.unsigned_abs() as usize * (spec.frames - 1);
        if o.size + travel_x > spec.width || o.size + travel_y > spec.height {
            return Err(SynthError::ObjectDoesNotFit {
                index: i,
                size: o.size,
                h: spec.height,
                w: spec.width,
                frames: spec.frames,
                vx: o.velocity.0,
                vy: o.velocity.1,
            });
        }
    }
    Ok(())
}

fn covers(shape: Shape, size: usize, dy: usize, dx: usize) -> bool {
    match shape {
        Shape::Rect => true,
        Shape::Disk => {
            let r = size as f32 / 2.0;
            let cy = dy as f32 + 0.5 - r;
            let cx = dx as f32 + 0.5 - r;
            cy * cy + cx * cx <= r * r
        }
    }
}

/// Deterministic render. Objects are drawn back-to-front in list order, so
/// later objects occlude earlier ones. Each object carries a texture anchored
/// to its own coordinates; it translates rigidly with the object, which keeps
/// the flow ground truth exact on covered voxels.
pub fn gen_clip(spec: &SceneSpec, seed: u64) -> Result<ClipSample, SynthError> {
    validate(spec)?;
    let (h, w, l) = (spec.height, spec.width, spec.frames);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // contrast scales each draw toward the band's midpoint, so contrast 1
    // reproduces the plain ranges and contrast 0 renders flat regions
    let contrast = spec.texture_contrast;
    let mut bg_rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    let background: Vec<[f32; 3]> = (0..h * w)
        .map(|_| {
            let v = 0.4 + (bg_rng.gen_range(0.25f32..0.55) - 0.4) * contrast;
            [v, v, v]
        })
        .collect();

    struct Placed {
        shape: Shape,
        size: usize,
        x0: i64,
        y0: i64,
        vx: i32,
        vy: i32,
        class: u32,
        texture: Vec<f32>,
    }
    let placed: Vec<Placed> = spec
        .objects
        .iter()
        .map(|o| {
            let travel_x = o.velocity.0 as i64 * (l as i64 - 1);
            let travel_y = o.velocity.1 as i64 * (l as i64 - 1);
            let (x_lo, x_hi) = if travel_x >= 0 {
                (0, w as i64 - o.size as i64 - travel_x)
            } else {
                (-travel_x, w as i64 - o.size as i64)
            };
            let (y_lo, y_hi) = if travel_y >= 0 {
                (0, h as i64 - o.size as i64 - travel_y)
            } else {
                (-travel_y, h as i64 - o.size as i64)
            };
            let x0 = rng.gen_range(x_lo..=x_hi);
            let y0 = rng.gen_range(y_lo..=y_hi);
            let texture = (0..o.size * o.size)
                .map(|_| 0.8 + (rng.gen_range(0.6f32..1.0) - 0.8) * contrast)
                .collect();
            Placed {
                shape: o.shape,
                size: o.size,
                x0,
                y0,
                vx: o.velocity.0,
                vy: o.velocity.1,
                class: o.class,
                texture,
            }
        })
        .collect();

    let colors: Vec<[f32; 3]> = spec.objects.iter().map(|o| o.color).collect();

    let mut clean = Tensor::zeros(&[3, l, h, w])?;
    let mut gt_flow = Tensor::zeros(&[2, l, h, w])?;
    let mut gt_seg = Tensor::new(&[l, h, w], spec.background_class as f32)?;
    let plane = h * w;
    let vol = l * plane;
    {
        let cd = clean.data_mut();
        for t in 0..l {
            for y in 0..h {
                for x in 0..w {
                    let px = background[y * w + x];
                    for c in 0..3 {
                        cd[c * vol + t * plane + y * w + x] = px[c];
                    }
                }
            }
        }
    }
    for (oi, p) in placed.iter().enumerate() {
        for t in 0..l {
            let ox = p.x0 + p.vx as i64 * t as i64;
            let oy = p.y0 + p.vy as i64 * t as i64;
            for dy in 0..p.size {
                for dx in 0..p.size {
                    if !covers(p.shape, p.size, dy, dx) {
                        continue;
                    }
                    let y = (oy + dy as i64) as usize;
                    let x = (ox + dx as i64) as usize;
                    let shade = p.texture[dy * p.size + dx];
                    let at = t * plane + y * w + x;
                    for c in 0..3 {
                        clean.data_mut()[c * vol + at] = colors[oi][c] * shade;
                    }
                    gt_flow.data_mut()[at] = p.vx as f32;
                    gt_flow.data_mut()[vol + at] = p.vy as f32;
                    gt_seg.data_mut()[at] = p.class as f32;
                }
            }
        }
    }

    let mut clip = clean.clone();
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_std).expect("positive stddev");
        for v in clip.data_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    Ok(ClipSample {
        clip,
        gt_flow,
        gt_seg,
        gt_color: clean,
        id: format!("clip_s{seed}"),
    })
}

/// y = 0.299 R + 0.587 G + 0.114 B (Rec. 601 luma) per voxel.
pub fn to_grayscale(clip: &Tensor) -> Result<Tensor, SynthError> {
    let d = clip.dims();
    if d.len() != 4 || d[0] != 3 {
        return Err(SynthError::NotRgb(d.to_vec()));
    }
    let vol = d[1] * d[2] * d[3];
    let xd = clip.data();
    let data = (0..vol)
        .map(|i| 0.299 * xd[i] + 0.587 * xd[vol + i] + 0.114 * xd[2 * vol + i])
        .collect();
    Ok(Tensor::from_vec(&[1, d[1], d[2], d[3]], data)?)
}

/// One dataset sample on disk: four TensorFiles referenced by a manifest line.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub clip: PathBuf,
    pub flow: PathBuf,
    pub seg: PathBuf,
    pub color: PathBuf,
}

fn sample_seed(base: u64, i: usize) -> u64 {
    base ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Generates `n` samples from the template. Per-sample object velocities are
/// jittered by up to +-1 px/frame around the template values (clamped to the
/// 4 px bound) so motion varies across the dataset. Writes TensorFiles plus a
/// tab-separated manifest and returns the manifest path.
pub fn make_dataset(
    n: usize,
    template: &SceneSpec,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf, SynthError> {
    fs::create_dir_all(out_dir)?;
    let manifest_path = out_dir.join("manifest.txt");
    let mut manifest = String::new();
    for i in 0..n {
        let s = sample_seed(seed, i);
        let mut spec = template.clone();
        let mut vel_rng = ChaCha8Rng::seed_from_u64(s ^ 0x5eed);
        for o in &mut spec.objects {
            // largest speed that keeps the object inside the canvas
            let span = spec.frames.max(2) - 1;
            let vx_max = (((spec.width.saturating_sub(o.size)) / span) as i32).min(4);
            let vy_max = (((spec.height.saturating_sub(o.size)) / span) as i32).min(4);
            o.velocity.0 = (o.velocity.0 + vel_rng.gen_range(-1i32..=1)).clamp(-vx_max, vx_max);
            o.velocity.1 = (o.velocity.1 + vel_rng.gen_range(-1i32..=1)).clamp(-vy_max, vy_max);
        }
        let mut sample = gen_clip(&spec, s)?;
        sample.id = format!("s{seed}_{i:04}");
        let stem = sample.id.clone();
        let files = [
            (format!("{stem}_clip.tensor"), &sample.clip),
            (format!("{stem}_flow.tensor"), &sample.gt_flow),
            (format!("{stem}_seg.tensor"), &sample.gt_seg),
            (format!("{stem}_color.tensor"), &sample.gt_color),
        ];
        for (name, t) in &files {
            t.write(&out_dir.join(name))?;
        }
        let _ = writeln!(
            manifest,
            "{}\t{}\t{}\t{}\t{}",
            sample.id, files[0].0, files[1].0, files[2].0, files[3].0
        );
    }
    let mut f = fs::File::create(&manifest_path)?;
    f.write_all(manifest.as_bytes())?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            height: 24,
            width: 24,
            frames: 8,
            classes: 3,
            background_class: 0,
            texture_seed: 3,
            objects: vec![ObjectSpec {
                shape: Shape::Rect,
                size: 8,
                velocity: (2, 0),
                class: 1,
                color: [0.9, 0.1, 0.1],
            }],
            noise_std: 0.0,
            texture_contrast: 1.0,
        }
    }

    #[test]
    fn empty_scene_ground_truth() {
        let mut spec = small_spec();
        spec.objects.clear();
        let s = gen_clip(&spec, 1).unwrap();
        assert!(s.gt_flow.data().iter().all(|&v| v == 0.0));
        assert!(s.gt_seg.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.clip, s.gt_color);
    }

    #[test]
    fn moving_rect_flow_is_exact() {
        let spec = small_spec();
        let s = gen_clip(&spec, 5).unwrap();
        let [_, l, h, w] = [2, spec.frames, spec.height, spec.width];
        let plane = h * w;
        let vol = l * plane;
        for t in 0..l {
            for y in 0..h {
                for x in 0..w {
                    let at = t * plane + y * w + x;
                    let u = s.gt_flow.data()[at];
                    let v = s.gt_flow.data()[vol + at];
                    let seg = s.gt_seg.data()[at];
                    if seg == 1.0 {
                        assert_eq!((u, v), (2.0, 0.0));
                    } else {
                        assert_eq!((u, v), (0.0, 0.0));
                    }
                }
            }
        }
        let covered = s.gt_seg.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(covered, 8 * 8 * l);
    }

    #[test]
    fn warp_consistency_on_object_voxels() {
        // frame t+1 equals frame t displaced by the object velocity wherever
        // both voxels belong to the object (noise off)
        let spec = small_spec();
        let s = gen_clip(&spec, 9).unwrap();
        let (l, h, w) = (spec.frames, spec.height, spec.width);
        let plane = h * w;
        let vol = l * plane;
        let mut checked = 0;
        for t in 0..l - 1 {
            for y in 0..h {
                for x in 0..w {
                    let at = t * plane + y * w + x;
                    if s.gt_seg.data()[at] != 1.0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + 2, y as i64);
                    let nat = (t + 1) * plane + ny as usize * w + nx as usize;
                    assert_eq!(s.gt_seg.data()[nat], 1.0);
                    for c in 0..3 {
                        assert_eq!(s.clip.data()[c * vol + at], s.clip.data()[c * vol + nat]);
                    }
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let spec = small_spec();
        let a = gen_clip(&spec, 11).unwrap();
        let b = gen_clip(&spec, 11).unwrap();
        assert_eq!(a.clip, b.clip);
        assert_eq!(a.gt_flow, b.gt_flow);
        let c = gen_clip(&spec, 12).unwrap();
        assert_ne!(a.clip, c.clip);
    }

    #[test]
    fn noise_stays_near_clean_render() {
        let mut spec = small_spec();
        spec.noise_std = 0.02;
        let s = gen_clip(&spec, 13).unwrap();
        let mut exceed = 0usize;
        for (a, b) in s.clip.data().iter().zip(s.gt_color.data()) {
            if (a - b).abs() > 5.0 * 0.02 {
                exceed += 1;
            }
        }
        // 5 sigma exceedance probability is ~6e-7 per voxel
        assert!(exceed <= 2, "{exceed} voxels beyond 5 sigma");
        for &v in s.clip.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn object_that_cannot_fit_is_rejected() {
        let mut spec = small_spec();
        spec.objects[0].size = 20;
        assert!(matches!(
            gen_clip(&spec, 1),
            Err(SynthError::ObjectDoesNotFit { .. })
        ));
        let mut fast = small_spec();
        fast.objects[0].velocity = (5, 0);
        assert!(matches!(
            gen_clip(&fast, 1),
            Err(SynthError::VelocityTooLarge { .. })
        ));
    }

    #[test]
    fn grayscale_weights() {
        let white = Tensor::new(&[3, 1, 1, 1], 1.0).unwrap();
        assert!((to_grayscale(&white).unwrap().data()[0] - 1.0).abs() < 1e-6);
        let red = Tensor::from_vec(&[3, 1, 1, 1], vec![1.0, 0.0, 0.0]).unwrap();
        assert!((to_grayscale(&red).unwrap().data()[0] - 0.299).abs() < 1e-6);
        let gray = Tensor::new(&[3, 2, 2, 2], 0.4).unwrap();
        for &v in to_grayscale(&gray).unwrap().data() {
            assert!((v - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn dataset_counts_and_disjoint_ids() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let m = make_dataset(5, &spec, 100, dir.path()).unwrap();
        let text = std::fs::read_to_string(&m).unwrap();
        assert_eq!(text.lines().count(), 5);
        let tensors = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .path()
                    .extension()
                    .is_some_and(|x| x == "tensor")
            })
            .count();
        assert_eq!(tensors, 20);

        let dir2 = tempfile::tempdir().unwrap();
        let m2 = make_dataset(5, &spec, 200, dir2.path()).unwrap();
        let text2 = std::fs::read_to_string(&m2).unwrap();
        let ids: std::collections::HashSet<&str> =
            text.lines().map(|l| l.split('\t').next().unwrap()).collect();
        for line in text2.lines() {
            assert!(!ids.contains(line.split('\t').next().unwrap()));
        }
    }
}
