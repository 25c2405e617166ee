//! SGD training loop with step-decay schedules, clip sampling, evaluation,
//! and train-from-scratch vs fine-tune-from-checkpoint workflows.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{build_v2v, GraphError, InitScheme, NetGraph, TaskHead};
use crate::loss::{
    flow_descale, flow_scale, huber_loss, l2_loss, softmax_ce_loss, ConfusionMatrix, FlowScaling,
    LossError,
};
use crate::synth::to_grayscale;
use crate::tensor::{checkpoint_load, checkpoint_save, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("manifest line {line}: expected 5 tab-separated fields")]
    ManifestParse { line: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("video has {video_len} frames, need at least {clip_len}")]
    ClipTooShort { video_len: usize, clip_len: usize },
    #[error("sample {id}: {what} dims {found:?} do not fit input shape {expected:?}")]
    SampleShape {
        id: String,
        what: &'static str,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Canonical clip length; training and eval windows default to 16 frames.
pub const CLIP_LEN: usize = 16;

#[derive(Debug, Clone, Copy)]
pub struct ClipSampler {
    pub video_len: usize,
    pub clip_len: usize,
    pub stride: usize,
}

impl ClipSampler {
    /// All windows [start, start+clip_len) fully inside the video.
    pub fn windows(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if self.clip_len == 0 || self.stride == 0 || self.video_len < self.clip_len {
            return out;
        }
        let mut start = 0;
        while start + self.clip_len <= self.video_len {
            out.push((start, start + self.clip_len));
            start += self.stride;
        }
        out
    }
}

pub fn sample_clips(video_len: usize, stride: usize) -> Vec<(usize, usize)> {
    ClipSampler {
        video_len,
        clip_len: CLIP_LEN,
        stride,
    }
    .windows()
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub task: TaskHead,
    pub base_lr: f32,
    pub decay_every: usize,
    pub decay_factor: f32,
    pub max_iters: usize,
    pub momentum: f32,
    pub seed: u64,
    pub init_checkpoint: Option<PathBuf>,
    pub clip_stride_train: usize,
    pub clip_stride_eval: usize,
    pub width_mult: f32,
    /// (C, L, H, W) consumed by the network; frames are center-cropped to
    /// (H, W) when the stored canvas is larger.
    pub input_shape: [usize; 4],
    /// 0 writes a checkpoint only at max_iters.
    pub checkpoint_every: usize,
    pub weight_decay: f32,
    pub grad_clip: f32,
    /// Continuous-value Huber variant for the flow loss.
    pub huber_smooth: bool,
    /// Stop once the iteration loss drops below this value.
    pub stop_loss: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            task: TaskHead::Segmentation { classes: 8 },
            base_lr: 1e-4,
            decay_every: 30_000,
            decay_factor: 10.0,
            max_iters: 100_000,
            momentum: 0.9,
            seed: 0,
            init_checkpoint: None,
            clip_stride_train: 1,
            clip_stride_eval: 16,
            width_mult: 1.0,
            input_shape: [3, 16, 112, 112],
            checkpoint_every: 0,
            weight_decay: 0.0,
            grad_clip: 0.0,
            huber_smooth: false,
            stop_loss: None,
        }
    }
}

fn cfg_err(line: usize, msg: impl Into<String>) -> TrainError {
    TrainError::Config {
        line,
        msg: msg.into(),
    }
}

impl TrainConfig {
    /// Applies one `key = value` pair; line is for error reporting.
    pub fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), TrainError> {
        fn num<T: std::str::FromStr>(v: &str, line: usize, key: &str) -> Result<T, TrainError> {
            v.parse()
                .map_err(|_| cfg_err(line, format!("bad value {v:?} for {key}")))
        }
        match key {
            "task" => {
                self.task = match value {
                    "seg" => TaskHead::Segmentation {
                        classes: match self.task {
                            TaskHead::Segmentation { classes } => classes,
                            _ => 8,
                        },
                    },
                    "flow" => TaskHead::Flow {
                        alpha: match self.task {
                            TaskHead::Flow { alpha } => alpha,
                            _ => 15.0,
                        },
                    },
                    "color" => TaskHead::Color,
                    other => return Err(cfg_err(line, format!("unknown task {other:?}"))),
                }
            }
            "classes" => {
                let k: usize = num(value, line, key)?;
                match &mut self.task {
                    TaskHead::Segmentation { classes } => *classes = k,
                    _ => return Err(cfg_err(line, "classes only applies to the seg task")),
                }
            }
            "alpha" => {
                let a: f32 = num(value, line, key)?;
                match &mut self.task {
                    TaskHead::Flow { alpha } => *alpha = a,
                    _ => return Err(cfg_err(line, "alpha only applies to the flow task")),
                }
            }
            "base_lr" => self.base_lr = num(value, line, key)?,
            "decay_every" => self.decay_every = num(value, line, key)?,
            "decay_factor" => self.decay_factor = num(value, line, key)?,
            "max_iters" => self.max_iters = num(value, line, key)?,
            "momentum" => self.momentum = num(value, line, key)?,
            "seed" => self.seed = num(value, line, key)?,
            "init_checkpoint" => self.init_checkpoint = Some(PathBuf::from(value)),
            "clip_stride_train" => self.clip_stride_train = num(value, line, key)?,
            "clip_stride_eval" => self.clip_stride_eval = num(value, line, key)?,
            "width_mult" => self.width_mult = num(value, line, key)?,
            "input_shape" => {
                let parts: Vec<usize> = value
                    .split('x')
                    .map(|p| num(p.trim(), line, key))
                    .collect::<Result<_, _>>()?;
                if parts.len() != 4 {
                    return Err(cfg_err(line, "input_shape must be CxLxHxW"));
                }
                self.input_shape = [parts[0], parts[1], parts[2], parts[3]];
            }
            "checkpoint_every" => self.checkpoint_every = num(value, line, key)?,
            "weight_decay" => self.weight_decay = num(value, line, key)?,
            "grad_clip" => self.grad_clip = num(value, line, key)?,
            "huber_smooth" => self.huber_smooth = num(value, line, key)?,
            "stop_loss" => self.stop_loss = Some(num(value, line, key)?),
            "crop" => {
                if value != "center" {
                    return Err(cfg_err(line, format!("unsupported crop policy {value:?}")));
                }
            }
            other => return Err(cfg_err(line, format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys are rejected. `task` lines apply before the rest
    /// so task-scoped keys (classes, alpha) are order-independent.
    pub fn parse(text: &str) -> Result<TrainConfig, TrainError> {
        let mut cfg = TrainConfig::default();
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(cfg_err(line, "expected key = value"));
            };
            pairs.push((key.trim().to_string(), value.trim().to_string(), line));
        }
        for (k, v, line) in pairs.iter().filter(|(k, _, _)| k == "task") {
            cfg.apply(k, v, *line)?;
        }
        for (k, v, line) in pairs.iter().filter(|(k, _, _)| k != "task") {
            cfg.apply(k, v, *line)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(cfg_err(0, msg));
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be > 0");
        }
        if self.decay_every == 0 || self.max_iters == 0 {
            return bad("decay_every and max_iters must be > 0");
        }
        if self.clip_stride_train == 0 || self.clip_stride_eval == 0 {
            return bad("clip strides must be >= 1");
        }
        let want_c = match self.task {
            TaskHead::Color => 1,
            _ => 3,
        };
        if self.input_shape[0] != want_c {
            return bad("input channels must be 1 for color, 3 otherwise");
        }
        Ok(())
    }
}

/// base_lr / decay_factor^floor(iter / decay_every), evaluated in f64 so the
/// schedule values land on the nearest f32 exactly.
pub fn lr_at(cfg: &TrainConfig, iter: usize) -> f32 {
    let k = (iter / cfg.decay_every) as i32;
    (cfg.base_lr as f64 / (cfg.decay_factor as f64).powi(k)) as f32
}

/// v <- momentum v - lr g; p <- p + v, per parameter tensor.
pub fn sgd_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    lr: f32,
    momentum: f32,
    velocity: &mut BTreeMap<String, Tensor>,
) {
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let v = velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.dims()).expect("dims"));
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv - lr * *gv;
            *pv += *vv;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub entries: Vec<crate::synth::ManifestEntry>,
}

impl Manifest {
    /// Relative paths in the file resolve against the manifest's directory.
    pub fn load(path: &Path) -> Result<Manifest, TrainError> {
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(TrainError::ManifestParse { line: i + 1 });
            }
            let resolve = |c: &str| {
                let p = PathBuf::from(c);
                if p.is_absolute() {
                    p
                } else {
                    dir.join(p)
                }
            };
            entries.push(crate::synth::ManifestEntry {
                id: cols[0].to_string(),
                clip: resolve(cols[1]),
                flow: resolve(cols[2]),
                seg: resolve(cols[3]),
                color: resolve(cols[4]),
            });
        }
        Ok(Manifest { entries })
    }
}

fn crop_center(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor, TrainError> {
    let d = t.dims().to_vec();
    let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
    if h == out_h && w == out_w {
        return Ok(t.clone());
    }
    if h < out_h || w < out_w {
        return Err(TrainError::SampleShape {
            id: String::new(),
            what: "frame",
            found: d,
            expected: vec![out_h, out_w],
        });
    }
    let (y0, x0) = ((h - out_h) / 2, (w - out_w) / 2);
    let lead: usize = d[..d.len() - 2].iter().product();
    let mut out_dims = d.clone();
    out_dims[d.len() - 2] = out_h;
    out_dims[d.len() - 1] = out_w;
    let mut out = Tensor::zeros(&out_dims)?;
    for p in 0..lead {
        for y in 0..out_h {
            let src = (p * h + y0 + y) * w + x0;
            let dst = (p * out_h + y) * out_w;
            out.data_mut()[dst..dst + out_w].copy_from_slice(&t.data()[src..src + out_w]);
        }
    }
    Ok(out)
}

fn slice_frames(t: &Tensor, start: usize, len: usize) -> Tensor {
    let d = t.dims();
    let (chans, l, plane) = if d.len() == 4 {
        (d[0], d[1], d[2] * d[3])
    } else {
        (1, d[0], d[1] * d[2])
    };
    let vol = l * plane;
    let mut data = Vec::with_capacity(chans * len * plane);
    for c in 0..chans {
        let off = c * vol + start * plane;
        data.extend_from_slice(&t.data()[off..off + len * plane]);
    }
    let dims: Vec<usize> = if d.len() == 4 {
        vec![d[0], len, d[2], d[3]]
    } else {
        vec![len, d[1], d[2]]
    };
    Tensor::from_vec(&dims, data).expect("dims")
}

/// One training/eval item: network input plus loss target, already windowed,
/// cropped, and (for flow) scaled by 1/alpha.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub input: Tensor,
    pub target: Tensor,
}

fn shape_err(id: &str, what: &'static str, found: &[usize], expected: &[usize]) -> TrainError {
    TrainError::SampleShape {
        id: id.to_string(),
        what,
        found: found.to_vec(),
        expected: expected.to_vec(),
    }
}

/// Loads every window of every manifest entry for the configured task.
pub fn load_samples(
    cfg: &TrainConfig,
    manifest: &Manifest,
    stride: usize,
) -> Result<Vec<LoadedSample>, TrainError> {
    if manifest.entries.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let [_, want_l, want_h, want_w] = cfg.input_shape;
    let mut out = Vec::new();
    for e in &manifest.entries {
        let clip = Tensor::read(&e.clip)?;
        let cd = clip.dims().to_vec();
        if cd.len() != 4 || cd[0] != 3 {
            return Err(shape_err(&e.id, "clip", &cd, &[3, want_l, want_h, want_w]));
        }
        let video_len = cd[1];
        if video_len < want_l {
            return Err(TrainError::ClipTooShort {
                video_len,
                clip_len: want_l,
            });
        }
        let target_full = match cfg.task {
            TaskHead::Segmentation { .. } => {
                let seg = Tensor::read(&e.seg)?;
                if seg.dims() != &cd[1..] {
                    return Err(shape_err(&e.id, "seg", seg.dims(), &cd[1..]));
                }
                seg
            }
            TaskHead::Flow { alpha } => {
                let flow = Tensor::read(&e.flow)?;
                if flow.dims().len() != 4 || flow.dims()[0] != 2 || flow.dims()[1..] != cd[1..] {
                    return Err(shape_err(&e.id, "flow", flow.dims(), &cd));
                }
                flow_scale(&flow, FlowScaling { alpha })
            }
            TaskHead::Color => {
                let color = Tensor::read(&e.color)?;
                if color.dims() != clip.dims() {
                    return Err(shape_err(&e.id, "color", color.dims(), clip.dims()));
                }
                color
            }
        };
        let input_full = match cfg.task {
            TaskHead::Color => to_grayscale(&clip).map_err(|_| {
                shape_err(&e.id, "clip", &cd, &[3, want_l, want_h, want_w])
            })?,
            _ => clip,
        };
        let sampler = ClipSampler {
            video_len,
            clip_len: want_l,
            stride,
        };
        for (start, _) in sampler.windows() {
            let input = crop_center(&slice_frames(&input_full, start, want_l), want_h, want_w)?;
            let target = crop_center(&slice_frames(&target_full, start, want_l), want_h, want_w)?;
            out.push(LoadedSample {
                id: format!("{}@{start}", e.id),
                input,
                target,
            });
        }
    }
    if out.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(out)
}

fn task_loss(
    task: TaskHead,
    pred: &Tensor,
    target: &Tensor,
    huber_smooth: bool,
) -> Result<(f32, Tensor), LossError> {
    match task {
        TaskHead::Segmentation { .. } => softmax_ce_loss(pred, target),
        TaskHead::Flow { .. } => huber_loss(pred, target, huber_smooth),
        TaskHead::Color => l2_loss(pred, target),
    }
}

#[derive(Debug)]
pub struct TrainResult {
    pub graph: NetGraph,
    pub first_loss: f32,
    pub final_loss: f32,
    pub iters_run: usize,
}

/// Runs the loop: seeded per-epoch shuffle over all clip windows, one clip
/// per iteration, CSV log lines "iter,lr,loss", checkpoint written at the end
/// and every `checkpoint_every` iterations when a path is given.
pub fn train(
    cfg: &TrainConfig,
    manifest: &Manifest,
    log: &mut dyn Write,
    ckpt_path: Option<&Path>,
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    let samples = load_samples(cfg, manifest, cfg.clip_stride_train)?;

    let mut graph = build_v2v(cfg.task, cfg.input_shape, cfg.width_mult)?;
    graph.init_params(cfg.seed, InitScheme::HeTrilinearDeconv);
    if let Some(p) = &cfg.init_checkpoint {
        let entries = checkpoint_load(p)?;
        graph.bind_checkpoint(&entries)?;
    }

    let mut velocity: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x0bad_5eed));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut pos = samples.len();

    writeln!(log, "iter,lr,loss")?;
    let mut first_loss = f32::NAN;
    let mut final_loss = f32::NAN;
    let mut iters_run = 0;
    for iter in 0..cfg.max_iters {
        if pos == samples.len() {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let sample = &samples[order[pos]];
        pos += 1;

        let (pred, cache) = graph.forward(&sample.input)?;
        let (loss, dpred) = task_loss(cfg.task, &pred, &sample.target, cfg.huber_smooth)?;
        let mut grads = graph.backward(&cache, &dpred)?;
        if cfg.weight_decay > 0.0 {
            for (name, g) in grads.iter_mut() {
                let p = &graph.params[name];
                for (gv, pv) in g.data_mut().iter_mut().zip(p.data()) {
                    *gv += cfg.weight_decay * *pv;
                }
            }
        }
        if cfg.grad_clip > 0.0 {
            let norm: f64 = grads
                .values()
                .flat_map(|g| g.data())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if norm > cfg.grad_clip as f64 {
                let scale = (cfg.grad_clip as f64 / norm) as f32;
                for g in grads.values_mut() {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                }
            }
        }
        let lr = lr_at(cfg, iter);
        sgd_step(&mut graph.params, &grads, lr, cfg.momentum, &mut velocity);

        writeln!(log, "{iter},{lr},{loss}")?;
        if iter == 0 {
            first_loss = loss;
        }
        final_loss = loss;
        iters_run = iter + 1;
        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            if let Some(p) = ckpt_path {
                checkpoint_save(&graph.params, p)?;
            }
        }
        if cfg.stop_loss.is_some_and(|s| loss < s) {
            break;
        }
    }
    if let Some(p) = ckpt_path {
        checkpoint_save(&graph.params, p)?;
    }
    Ok(TrainResult {
        graph,
        first_loss,
        final_loss,
        iters_run,
    })
}

#[derive(Debug)]
pub struct EvalReport {
    pub metric: &'static str,
    pub value: f32,
    pub clips: usize,
    pub voxels: u64,
    pub confusion: Option<ConfusionMatrix>,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{} = {} over {} clips ({} voxels)",
            self.metric, self.value, self.clips, self.voxels
        )?;
        if let Some(cm) = &self.confusion {
            writeln!(f, "confusion (rows = truth):")?;
            for t in 0..cm.classes {
                let row: Vec<String> = (0..cm.classes)
                    .map(|p| cm.counts[t * cm.classes + p].to_string())
                    .collect();
                writeln!(f, "  {}", row.join(" "))?;
            }
        }
        Ok(())
    }
}

/// Stride-`clip_stride_eval` windows over every manifest entry; the metric is
/// aggregated over all scored voxels (flow predictions are descaled by alpha
/// and measured against the stored, unscaled flow targets).
pub fn evaluate(
    graph: &NetGraph,
    cfg: &TrainConfig,
    manifest: &Manifest,
) -> Result<EvalReport, TrainError> {
    let samples = load_samples(cfg, manifest, cfg.clip_stride_eval)?;
    let mut clips = 0usize;
    let mut voxels = 0u64;
    let mut dist_sum = 0.0f64;
    let mut confusion: Option<ConfusionMatrix> = None;
    for s in &samples {
        let (pred, _) = graph.forward(&s.input)?;
        clips += 1;
        match cfg.task {
            TaskHead::Segmentation { .. } => {
                let (_, cm) = crate::loss::seg_accuracy(&pred, &s.target)?;
                match &mut confusion {
                    Some(acc) => acc.merge(&cm),
                    None => confusion = Some(cm),
                }
            }
            TaskHead::Flow { alpha } => {
                let scaling = FlowScaling { alpha };
                let pred_px = flow_descale(&pred, scaling);
                let gt_px = flow_descale(&s.target, scaling);
                let n = (pred.len() / 2) as u64;
                let e = crate::loss::epe(&pred_px, &gt_px)?;
                dist_sum += e as f64 * n as f64;
                voxels += n;
            }
            TaskHead::Color => {
                let n = (pred.len() / 3) as u64;
                let e = crate::loss::ade(&pred, &s.target)?;
                dist_sum += e as f64 * n as f64;
                voxels += n;
            }
        }
    }
    Ok(match cfg.task {
        TaskHead::Segmentation { .. } => {
            let cm = confusion.expect("at least one clip");
            EvalReport {
                metric: "accuracy",
                value: cm.accuracy(),
                clips,
                voxels: cm.total(),
                confusion: Some(cm),
            }
        }
        TaskHead::Flow { .. } => EvalReport {
            metric: "epe",
            value: (dist_sum / voxels as f64) as f32,
            clips,
            voxels,
            confusion: None,
        },
        TaskHead::Color => EvalReport {
            metric: "ade",
            value: (dist_sum / voxels as f64) as f32,
            clips,
            voxels,
            confusion: None,
        },
    })
}
