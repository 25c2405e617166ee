//! Task losses with analytic gradients and evaluation metrics.
//!
//! Segmentation uses voxelwise softmax cross-entropy, flow uses the Huber
//! loss on alpha-scaled targets, coloring uses L2. Metrics: per-voxel
//! accuracy with a confusion matrix, endpoint error, average color distance.

use thiserror::Error;

use crate::tensor::Tensor;

/// Label value excluded from segmentation loss and scoring.
pub const IGNORE_LABEL: u32 = 255;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("label {label} out of range for {classes} classes at voxel {index}")]
    LabelOutOfRange {
        label: u32,
        classes: usize,
        index: usize,
    },
    #[error("no scored voxels (all labels ignored)")]
    NothingScored,
}

/// Divisor applied to flow targets before the loss; multiplier applied to
/// predictions at inference.
#[derive(Debug, Clone, Copy)]
pub struct FlowScaling {
    pub alpha: f32,
}

impl Default for FlowScaling {
    fn default() -> Self {
        FlowScaling { alpha: 15.0 }
    }
}

pub fn flow_scale(flow: &Tensor, s: FlowScaling) -> Tensor {
    let data = flow.data().iter().map(|v| v / s.alpha).collect();
    Tensor::from_vec(flow.dims(), data).expect("dims preserved")
}

pub fn flow_descale(pred: &Tensor, s: FlowScaling) -> Tensor {
    let data = pred.data().iter().map(|v| v * s.alpha).collect();
    Tensor::from_vec(pred.dims(), data).expect("dims preserved")
}

/// KxK counts, rows = ground truth, cols = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f32 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..self.classes)
            .map(|i| self.counts[i * self.classes + i])
            .sum();
        trace as f32 / total as f32
    }
}

fn label_at(labels: &Tensor, i: usize) -> u32 {
    labels.data()[i] as u32
}

/// Mean over non-ignored voxels of -log softmax(logits)[label], with
/// max-subtraction for stability. dlogits = (softmax - onehot)/N at scored
/// voxels, zero at ignored ones.
pub fn softmax_ce_loss(logits: &Tensor, labels: &Tensor) -> Result<(f32, Tensor), LossError> {
    let ld = logits.dims();
    if ld.len() != 4 || labels.dims() != &ld[1..] {
        return Err(LossError::ShapeMismatch(
            ld.to_vec(),
            labels.dims().to_vec(),
        ));
    }
    let k = ld[0];
    let voxels = ld[1] * ld[2] * ld[3];
    let mut dlogits = Tensor::zeros(ld).expect("dims");
    let xd = logits.data();
    let gd = dlogits.data_mut();

    let mut scored = 0usize;
    for v in 0..voxels {
        if label_at(labels, v) != IGNORE_LABEL {
            scored += 1;
        }
    }
    if scored == 0 {
        return Err(LossError::NothingScored);
    }

    let inv_n = 1.0f32 / scored as f32;
    let mut loss = 0.0f64;
    let mut probs = vec![0.0f32; k];
    for v in 0..voxels {
        let label = label_at(labels, v);
        if label == IGNORE_LABEL {
            continue;
        }
        if label as usize >= k {
            return Err(LossError::LabelOutOfRange {
                label,
                classes: k,
                index: v,
            });
        }
        let mut maxv = f32::NEG_INFINITY;
        for c in 0..k {
            maxv = maxv.max(xd[c * voxels + v]);
        }
        let mut denom = 0.0f32;
        for c in 0..k {
            let e = (xd[c * voxels + v] - maxv).exp();
            probs[c] = e;
            denom += e;
        }
        let p_true = probs[label as usize] / denom;
        loss += -(p_true.max(f32::MIN_POSITIVE) as f64).ln();
        for c in 0..k {
            let p = probs[c] / denom;
            let onehot = if c == label as usize { 1.0 } else { 0.0 };
            gd[c * voxels + v] = (p - onehot) * inv_n;
        }
    }
    Ok(((loss / scored as f64) as f32, dlogits))
}

/// Per-element Huber on the residual x = pred - target:
/// x²/2 for |x| <= 1, |x| otherwise (the literal piecewise form, which is
/// discontinuous in value at |x| = 1 but has a continuous gradient).
/// `smooth` switches the linear branch to |x| - 1/2, the continuous variant.
pub fn huber_loss(
    pred: &Tensor,
    target_scaled: &Tensor,
    smooth: bool,
) -> Result<(f32, Tensor), LossError> {
    if pred.dims() != target_scaled.dims() {
        return Err(LossError::ShapeMismatch(
            pred.dims().to_vec(),
            target_scaled.dims().to_vec(),
        ));
    }
    let n = pred.len();
    let inv_n = 1.0f32 / n as f32;
    let mut dpred = Tensor::zeros(pred.dims()).expect("dims");
    let gd = dpred.data_mut();
    let mut loss = 0.0f64;
    for i in 0..n {
        let x = pred.data()[i] - target_scaled.data()[i];
        if x.abs() <= 1.0 {
            loss += (0.5 * x * x) as f64;
            gd[i] = x * inv_n;
        } else {
            loss += if smooth { x.abs() - 0.5 } else { x.abs() } as f64;
            gd[i] = x.signum() * inv_n;
        }
    }
    Ok(((loss / n as f64) as f32, dpred))
}

/// loss = mean((pred - target)²/2), gradient (pred - target)/N.
pub fn l2_loss(pred: &Tensor, target: &Tensor) -> Result<(f32, Tensor), LossError> {
    if pred.dims() != target.dims() {
        return Err(LossError::ShapeMismatch(
            pred.dims().to_vec(),
            target.dims().to_vec(),
        ));
    }
    let n = pred.len();
    let inv_n = 1.0f32 / n as f32;
    let mut dpred = Tensor::zeros(pred.dims()).expect("dims");
    let gd = dpred.data_mut();
    let mut loss = 0.0f64;
    for i in 0..n {
        let x = pred.data()[i] - target.data()[i];
        loss += (0.5 * x * x) as f64;
        gd[i] = x * inv_n;
    }
    Ok(((loss / n as f64) as f32, dpred))
}

/// Mean endpoint error sqrt(du² + dv²) over voxels, in unscaled flow units.
pub fn epe(pred_flow: &Tensor, gt_flow: &Tensor) -> Result<f32, LossError> {
    let d = pred_flow.dims();
    if d != gt_flow.dims() || d.len() != 4 || d[0] != 2 {
        return Err(LossError::ShapeMismatch(
            d.to_vec(),
            gt_flow.dims().to_vec(),
        ));
    }
    let voxels = d[1] * d[2] * d[3];
    let pu = &pred_flow.data()[..voxels];
    let pv = &pred_flow.data()[voxels..];
    let gu = &gt_flow.data()[..voxels];
    let gv = &gt_flow.data()[voxels..];
    let mut acc = 0.0f64;
    for i in 0..voxels {
        let du = (pu[i] - gu[i]) as f64;
        let dv = (pv[i] - gv[i]) as f64;
        acc += (du * du + dv * dv).sqrt();
    }
    Ok((acc / voxels as f64) as f32)
}

/// Mean RGB-space Euclidean distance; both inputs clamped to [0,1].
pub fn ade(pred_rgb: &Tensor, gt_rgb: &Tensor) -> Result<f32, LossError> {
    let d = pred_rgb.dims();
    if d != gt_rgb.dims() || d.len() != 4 || d[0] != 3 {
        return Err(LossError::ShapeMismatch(d.to_vec(), gt_rgb.dims().to_vec()));
    }
    let voxels = d[1] * d[2] * d[3];
    let mut acc = 0.0f64;
    for i in 0..voxels {
        let mut sq = 0.0f64;
        for c in 0..3 {
            let p = pred_rgb.data()[c * voxels + i].clamp(0.0, 1.0);
            let g = gt_rgb.data()[c * voxels + i].clamp(0.0, 1.0);
            sq += ((p - g) as f64).powi(2);
        }
        acc += sq.sqrt();
    }
    Ok((acc / voxels as f64) as f32)
}

/// Per-voxel argmax (ties toward the lowest class index) against labels;
/// ignored voxels excluded.
pub fn seg_accuracy(
    pred_logits: &Tensor,
    labels: &Tensor,
) -> Result<(f32, ConfusionMatrix), LossError> {
    let d = pred_logits.dims();
    if d.len() != 4 || labels.dims() != &d[1..] {
        return Err(LossError::ShapeMismatch(
            d.to_vec(),
            labels.dims().to_vec(),
        ));
    }
    let k = d[0];
    let voxels = d[1] * d[2] * d[3];
    let xd = pred_logits.data();
    let mut cm = ConfusionMatrix::new(k);
    for v in 0..voxels {
        let label = label_at(labels, v);
        if label == IGNORE_LABEL {
            continue;
        }
        if label as usize >= k {
            return Err(LossError::LabelOutOfRange {
                label,
                classes: k,
                index: v,
            });
        }
        let mut best = f32::NEG_INFINITY;
        let mut best_c = 0usize;
        for c in 0..k {
            let val = xd[c * voxels + v];
            if val > best {
                best = val;
                best_c = c;
            }
        }
        cm.record(label as usize, best_c);
    }
    if cm.total() == 0 {
        return Err(LossError::NothingScored);
    }
    Ok((cm.accuracy(), cm))
}
