//! Layer graph assembly: the C3D-style encoder, the V2V decoder with skip
//! concatenations, the bilinear-upsampling baselines, and the per-frame 2D
//! ablation. Owns parameter initialization, forward/backward orchestration,
//! and checkpoint binding.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::ops::{
    concat_backward, concat_channels, conv3d_backward, conv3d_forward, deconv3d_backward,
    deconv3d_forward, maxpool3d_backward, maxpool3d_forward, relu_backward, relu_forward,
    trilinear_upsample, trilinear_upsample_backward, ConvGeom, OpError,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("duplicate layer name {0:?}")]
    DuplicateLayerName(String),
    #[error("layer {layer:?} references unknown input {input:?}")]
    UnknownInput { layer: String, input: String },
    #[error("input shape {0:?} not admissible: {1}")]
    IndivisibleInputShape([usize; 4], String),
    #[error("shape propagation failed at layer {layer:?}: {source}")]
    ShapePropagation { layer: String, source: OpError },
    #[error("forward input has dims {found:?}, graph expects {expected:?}")]
    InputShapeMismatch {
        expected: [usize; 4],
        found: Vec<usize>,
    },
    #[error("op failed at layer {layer:?}: {source}")]
    Op { layer: String, source: OpError },
    #[error(
        "checkpoint entry {name:?} has dims {file_dims:?} but graph parameter expects {expected:?}"
    )]
    BindShapeMismatch {
        name: String,
        file_dims: Vec<usize>,
        expected: Vec<usize>,
    },
}

/// Task descriptor fixing the prediction channel count and the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskHead {
    Segmentation { classes: usize },
    Flow { alpha: f32 },
    Color,
}

impl TaskHead {
    pub fn out_channels(&self) -> usize {
        match *self {
            TaskHead::Segmentation { classes } => classes,
            TaskHead::Flow { .. } => 2,
            TaskHead::Color => 3,
        }
    }

    pub fn flow() -> TaskHead {
        TaskHead::Flow { alpha: 15.0 }
    }
}

#[derive(Debug, Clone)]
pub enum LayerKind {
    Conv(ConvGeom),
    Deconv(ConvGeom),
    Pool {
        kernel: [usize; 3],
        stride: [usize; 3],
    },
    Relu,
    Concat,
    Upsample {
        out: [usize; 3],
    },
}

#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Indices into the value array: slot 0 is the graph input, slot i+1 is
    /// the output of layer i. Topological by construction.
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    He,
    /// He for convolutions, separable linear-interpolation filters for
    /// deconvolutions (so the decoder starts as an upsampler).
    HeTrilinearDeconv,
}

#[derive(Debug, Clone)]
pub struct NetGraph {
    pub layers: Vec<LayerSpec>,
    pub params: BTreeMap<String, Tensor>,
    pub head: TaskHead,
    pub input_shape: [usize; 4],
    /// Symbolic shape of every value slot (input + each layer output).
    pub shapes: Vec<[usize; 4]>,
}

pub struct Cache {
    /// values[0] is the input; values[i+1] the output of layer i.
    pub values: Vec<Tensor>,
    pub argmax: Vec<Option<Vec<u32>>>,
}

/// Which parameters a checkpoint load actually touched.
#[derive(Debug, Default)]
pub struct BindReport {
    pub loaded: Vec<String>,
    /// Graph parameters with no file entry; left at their initialized values.
    pub missing_in_file: Vec<String>,
    /// File entries that matched no graph parameter.
    pub unused_in_file: Vec<String>,
}

struct GraphBuilder {
    layers: Vec<LayerSpec>,
    shapes: Vec<[usize; 4]>,
    names: BTreeMap<String, usize>,
}

impl GraphBuilder {
    fn new(input_shape: [usize; 4]) -> GraphBuilder {
        GraphBuilder {
            layers: Vec::new(),
            shapes: vec![input_shape],
            names: BTreeMap::new(),
        }
    }

    fn slot(&self, name: &str, layer: &str) -> Result<usize, GraphError> {
        if name == "input" {
            return Ok(0);
        }
        self.names
            .get(name)
            .map(|&i| i + 1)
            .ok_or_else(|| GraphError::UnknownInput {
                layer: layer.to_string(),
                input: name.to_string(),
            })
    }

    fn add(
        &mut self,
        name: &str,
        kind: LayerKind,
        inputs: &[&str],
    ) -> Result<(), GraphError> {
        if self.names.contains_key(name) {
            return Err(GraphError::DuplicateLayerName(name.to_string()));
        }
        let slots: Vec<usize> = inputs
            .iter()
            .map(|n| self.slot(n, name))
            .collect::<Result<_, _>>()?;
        let out = self.propagate(name, &kind, &slots)?;
        self.names.insert(name.to_string(), self.layers.len());
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind,
            inputs: slots,
        });
        self.shapes.push(out);
        Ok(())
    }

    fn propagate(
        &self,
        name: &str,
        kind: &LayerKind,
        slots: &[usize],
    ) -> Result<[usize; 4], GraphError> {
        let wrap = |source| GraphError::ShapePropagation {
            layer: name.to_string(),
            source,
        };
        let in0 = self.shapes[slots[0]];
        let lhw = [in0[1], in0[2], in0[3]];
        match kind {
            LayerKind::Conv(g) => {
                if in0[0] != g.in_ch {
                    return Err(wrap(OpError::ChannelMismatch {
                        expected: g.in_ch,
                        found: in0[0],
                    }));
                }
                let o = g.conv_out_dims(lhw).map_err(wrap)?;
                Ok([g.out_ch, o[0], o[1], o[2]])
            }
            LayerKind::Deconv(g) => {
                if in0[0] != g.in_ch {
                    return Err(wrap(OpError::ChannelMismatch {
                        expected: g.in_ch,
                        found: in0[0],
                    }));
                }
                let o = g.deconv_out_dims(lhw).map_err(wrap)?;
                Ok([g.out_ch, o[0], o[1], o[2]])
            }
            LayerKind::Pool { kernel, stride } => {
                let mut o = [0usize; 3];
                for a in 0..3 {
                    if lhw[a] < kernel[a] {
                        return Err(wrap(OpError::NonPositiveOutputShape {
                            input: lhw,
                            kernel: *kernel,
                            stride: *stride,
                            pad: [0; 3],
                        }));
                    }
                    o[a] = (lhw[a] - kernel[a]) / stride[a] + 1;
                }
                Ok([in0[0], o[0], o[1], o[2]])
            }
            LayerKind::Relu => Ok(in0),
            LayerKind::Concat => {
                let in1 = self.shapes[slots[1]];
                if [in1[1], in1[2], in1[3]] != lhw {
                    return Err(wrap(OpError::SpatialMismatch(
                        lhw,
                        [in1[1], in1[2], in1[3]],
                    )));
                }
                Ok([in0[0] + in1[0], in0[1], in0[2], in0[3]])
            }
            LayerKind::Upsample { out } => {
                for a in 0..3 {
                    if out[a] < lhw[a] {
                        return Err(wrap(OpError::DownsampleRequested(lhw, *out)));
                    }
                }
                Ok([in0[0], out[0], out[1], out[2]])
            }
        }
    }
}

fn scaled(base: usize, width_mult: f32) -> usize {
    ((base as f64 * width_mult as f64).ceil() as usize).max(1)
}

fn conv3(name_in: usize, out: usize) -> ConvGeom {
    ConvGeom {
        kernel: [3, 3, 3],
        stride: [1, 1, 1],
        pad: [1, 1, 1],
        in_ch: name_in,
        out_ch: out,
    }
}

fn conv2d(in_ch: usize, out: usize) -> ConvGeom {
    ConvGeom {
        kernel: [1, 3, 3],
        stride: [1, 1, 1],
        pad: [0, 1, 1],
        in_ch,
        out_ch: out,
    }
}

struct EncoderWidths {
    c1: usize,
    c2: usize,
    c3: usize,
    c4: usize,
    c5: usize,
}

fn encoder_widths(width_mult: f32) -> EncoderWidths {
    EncoderWidths {
        c1: scaled(64, width_mult),
        c2: scaled(128, width_mult),
        c3: scaled(256, width_mult),
        c4: scaled(512, width_mult),
        c5: scaled(512, width_mult),
    }
}

/// Adds conv1a..conv5b (+ ReLUs and pools). `two_d` forces temporal
/// kernel/stride to 1 (per-frame processing). Returns the encoder widths.
fn add_encoder(
    b: &mut GraphBuilder,
    in_ch: usize,
    width_mult: f32,
    two_d: bool,
) -> Result<EncoderWidths, GraphError> {
    let w = encoder_widths(width_mult);
    let conv = |i, o| if two_d { conv2d(i, o) } else { conv3(i, o) };
    let pool_t = |k: usize| if two_d { 1 } else { k };

    b.add("conv1a", LayerKind::Conv(conv(in_ch, w.c1)), &["input"])?;
    b.add("relu1a", LayerKind::Relu, &["conv1a"])?;
    b.add(
        "pool1",
        LayerKind::Pool {
            kernel: [1, 2, 2],
            stride: [1, 2, 2],
        },
        &["relu1a"],
    )?;
    b.add("conv2a", LayerKind::Conv(conv(w.c1, w.c2)), &["pool1"])?;
    b.add("relu2a", LayerKind::Relu, &["conv2a"])?;
    b.add(
        "pool2",
        LayerKind::Pool {
            kernel: [pool_t(2), 2, 2],
            stride: [pool_t(2), 2, 2],
        },
        &["relu2a"],
    )?;
    b.add("conv3a", LayerKind::Conv(conv(w.c2, w.c3)), &["pool2"])?;
    b.add("relu3a", LayerKind::Relu, &["conv3a"])?;
    b.add("conv3b", LayerKind::Conv(conv(w.c3, w.c3)), &["relu3a"])?;
    b.add("relu3b", LayerKind::Relu, &["conv3b"])?;
    b.add(
        "pool3",
        LayerKind::Pool {
            kernel: [pool_t(2), 2, 2],
            stride: [pool_t(2), 2, 2],
        },
        &["relu3b"],
    )?;
    b.add("conv4a", LayerKind::Conv(conv(w.c3, w.c4)), &["pool3"])?;
    b.add("relu4a", LayerKind::Relu, &["conv4a"])?;
    b.add("conv4b", LayerKind::Conv(conv(w.c4, w.c4)), &["relu4a"])?;
    b.add("relu4b", LayerKind::Relu, &["conv4b"])?;
    b.add(
        "pool4",
        LayerKind::Pool {
            kernel: [pool_t(2), 2, 2],
            stride: [pool_t(2), 2, 2],
        },
        &["relu4b"],
    )?;
    b.add("conv5a", LayerKind::Conv(conv(w.c4, w.c5)), &["pool4"])?;
    b.add("relu5a", LayerKind::Relu, &["conv5a"])?;
    b.add("conv5b", LayerKind::Conv(conv(w.c5, w.c5)), &["relu5a"])?;
    b.add("relu5b", LayerKind::Relu, &["conv5b"])?;
    Ok(w)
}

fn check_input_shape(input_shape: [usize; 4], two_d: bool) -> Result<(), GraphError> {
    let [_, l, h, w] = input_shape;
    if !two_d && l % 8 != 0 {
        return Err(GraphError::IndivisibleInputShape(
            input_shape,
            "L must be divisible by 8".into(),
        ));
    }
    if h % 16 != 0 || w % 16 != 0 {
        return Err(GraphError::IndivisibleInputShape(
            input_shape,
            "H and W must be divisible by 16".into(),
        ));
    }
    Ok(())
}

fn finish(
    b: GraphBuilder,
    head: TaskHead,
    input_shape: [usize; 4],
) -> Result<NetGraph, GraphError> {
    let mut params = BTreeMap::new();
    for layer in &b.layers {
        match &layer.kind {
            LayerKind::Conv(g) => {
                params.insert(
                    format!("{}.w", layer.name),
                    Tensor::zeros(&g.conv_weight_dims()).expect("dims"),
                );
                params.insert(
                    format!("{}.b", layer.name),
                    Tensor::zeros(&[g.out_ch]).expect("dims"),
                );
            }
            LayerKind::Deconv(g) => {
                params.insert(
                    format!("{}.w", layer.name),
                    Tensor::zeros(&g.deconv_weight_dims()).expect("dims"),
                );
                params.insert(
                    format!("{}.b", layer.name),
                    Tensor::zeros(&[g.out_ch]).expect("dims"),
                );
            }
            _ => {}
        }
    }
    let g = NetGraph {
        layers: b.layers,
        params,
        head,
        input_shape,
        shapes: b.shapes,
    };
    // output-equals-input-resolution contract
    let out = g.output_shape();
    debug_assert_eq!(
        out,
        [
            head.out_channels(),
            input_shape[1],
            input_shape[2],
            input_shape[3]
        ]
    );
    Ok(g)
}

/// Full V2V: C3D-style encoder, three deconvolutions with two skip
/// concatenations, 3x3x3 prediction layer. Channel counts scale with
/// `width_mult` (rounded up); the prediction channel count comes from the
/// head and is never scaled.
pub fn build_v2v(
    head: TaskHead,
    input_shape: [usize; 4],
    width_mult: f32,
) -> Result<NetGraph, GraphError> {
    check_input_shape(input_shape, false)?;
    let mut b = GraphBuilder::new(input_shape);
    let w = add_encoder(&mut b, input_shape[0], width_mult, false)?;

    let d5 = scaled(256, width_mult);
    let c4c = scaled(256, width_mult);
    let d4 = scaled(128, width_mult);
    let c3c = scaled(128, width_mult);
    let d3 = scaled(64, width_mult);
    let k = head.out_channels();

    let deconv2x = |i, o| ConvGeom {
        kernel: [4, 4, 4],
        stride: [2, 2, 2],
        pad: [1, 1, 1],
        in_ch: i,
        out_ch: o,
    };
    // Deconv3 doubles time and quadruples space: kernel 4 stride 2 pad 1
    // temporally, kernel 8 stride 4 pad 2 spatially.
    let deconv3_geom = |i, o| ConvGeom {
        kernel: [4, 8, 8],
        stride: [2, 4, 4],
        pad: [1, 2, 2],
        in_ch: i,
        out_ch: o,
    };

    b.add("deconv5", LayerKind::Deconv(deconv2x(w.c5, d5)), &["relu5b"])?;
    b.add("relu_d5", LayerKind::Relu, &["deconv5"])?;
    b.add("conv4c", LayerKind::Conv(conv3(w.c4, c4c)), &["relu4b"])?;
    b.add("relu4c", LayerKind::Relu, &["conv4c"])?;
    b.add("concat5", LayerKind::Concat, &["relu_d5", "relu4c"])?;
    b.add(
        "deconv4",
        LayerKind::Deconv(deconv2x(d5 + c4c, d4)),
        &["concat5"],
    )?;
    b.add("relu_d4", LayerKind::Relu, &["deconv4"])?;
    b.add("conv3c", LayerKind::Conv(conv3(w.c3, c3c)), &["relu3b"])?;
    b.add("relu3c", LayerKind::Relu, &["conv3c"])?;
    b.add("concat4", LayerKind::Concat, &["relu_d4", "relu3c"])?;
    b.add(
        "deconv3",
        LayerKind::Deconv(deconv3_geom(d4 + c3c, d3)),
        &["concat4"],
    )?;
    b.add("relu_d3", LayerKind::Relu, &["deconv3"])?;
    b.add("conv_pre", LayerKind::Conv(conv3(d3, k)), &["relu_d3"])?;
    finish(b, head, input_shape)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineLevel {
    Conv3b,
    Conv4b,
    Conv5b,
}

impl BaselineLevel {
    pub fn layer_name(&self) -> &'static str {
        match self {
            BaselineLevel::Conv3b => "conv3b",
            BaselineLevel::Conv4b => "conv4b",
            BaselineLevel::Conv5b => "conv5b",
        }
    }
}

/// Encoder truncated at the named layer, a 3x3x3 prediction conv to K
/// channels, then trilinear upsampling back to the input resolution.
pub fn build_baseline_up(
    level: BaselineLevel,
    head: TaskHead,
    input_shape: [usize; 4],
    width_mult: f32,
) -> Result<NetGraph, GraphError> {
    check_input_shape(input_shape, false)?;
    let mut b = GraphBuilder::new(input_shape);
    let w = add_encoder(&mut b, input_shape[0], width_mult, false)?;
    let (tap, ch) = match level {
        BaselineLevel::Conv3b => ("relu3b", w.c3),
        BaselineLevel::Conv4b => ("relu4b", w.c4),
        BaselineLevel::Conv5b => ("relu5b", w.c5),
    };
    let k = head.out_channels();
    b.add("conv_pre", LayerKind::Conv(conv3(ch, k)), &[tap])?;
    b.add(
        "upsample",
        LayerKind::Upsample {
            out: [input_shape[1], input_shape[2], input_shape[3]],
        },
        &["conv_pre"],
    )?;
    finish(b, head, input_shape)
}

/// Per-frame ablation: identical topology with every temporal kernel/stride
/// forced to 1, so each frame is processed independently.
pub fn build_2d_v2v(
    head: TaskHead,
    input_shape: [usize; 4],
    width_mult: f32,
) -> Result<NetGraph, GraphError> {
    check_input_shape(input_shape, true)?;
    let mut b = GraphBuilder::new(input_shape);
    let w = add_encoder(&mut b, input_shape[0], width_mult, true)?;

    let d5 = scaled(256, width_mult);
    let c4c = scaled(256, width_mult);
    let d4 = scaled(128, width_mult);
    let c3c = scaled(128, width_mult);
    let d3 = scaled(64, width_mult);
    let k = head.out_channels();

    let deconv2x = |i, o| ConvGeom {
        kernel: [1, 4, 4],
        stride: [1, 2, 2],
        pad: [0, 1, 1],
        in_ch: i,
        out_ch: o,
    };
    let deconv3_geom = |i, o| ConvGeom {
        kernel: [1, 8, 8],
        stride: [1, 4, 4],
        pad: [0, 2, 2],
        in_ch: i,
        out_ch: o,
    };

    b.add("deconv5", LayerKind::Deconv(deconv2x(w.c5, d5)), &["relu5b"])?;
    b.add("relu_d5", LayerKind::Relu, &["deconv5"])?;
    b.add("conv4c", LayerKind::Conv(conv2d(w.c4, c4c)), &["relu4b"])?;
    b.add("relu4c", LayerKind::Relu, &["conv4c"])?;
    b.add("concat5", LayerKind::Concat, &["relu_d5", "relu4c"])?;
    b.add(
        "deconv4",
        LayerKind::Deconv(deconv2x(d5 + c4c, d4)),
        &["concat5"],
    )?;
    b.add("relu_d4", LayerKind::Relu, &["deconv4"])?;
    b.add("conv3c", LayerKind::Conv(conv2d(w.c3, c3c)), &["relu3b"])?;
    b.add("relu3c", LayerKind::Relu, &["conv3c"])?;
    b.add("concat4", LayerKind::Concat, &["relu_d4", "relu3c"])?;
    b.add(
        "deconv3",
        LayerKind::Deconv(deconv3_geom(d4 + c3c, d3)),
        &["concat4"],
    )?;
    b.add("relu_d3", LayerKind::Relu, &["deconv3"])?;
    b.add("conv_pre", LayerKind::Conv(conv2d(d3, k)), &["relu_d3"])?;
    finish(b, head, input_shape)
}

impl NetGraph {
    pub fn output_shape(&self) -> [usize; 4] {
        *self.shapes.last().expect("non-empty graph")
    }

    /// Symbolic shape of a named layer's output, if the layer exists.
    pub fn layer_shape(&self, name: &str) -> Option<[usize; 4]> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .map(|i| self.shapes[i + 1])
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Cache), GraphError> {
        if x.dims() != self.input_shape {
            return Err(GraphError::InputShapeMismatch {
                expected: self.input_shape,
                found: x.dims().to_vec(),
            });
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.clone());
        let mut argmax: Vec<Option<Vec<u32>>> = vec![None; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            let wrap = |source| GraphError::Op {
                layer: layer.name.clone(),
                source,
            };
            let a = &values[layer.inputs[0]];
            let out = match &layer.kind {
                LayerKind::Conv(g) => {
                    let w = &self.params[&format!("{}.w", layer.name)];
                    let bia = &self.params[&format!("{}.b", layer.name)];
                    conv3d_forward(a, g, w, bia).map_err(wrap)?
                }
                LayerKind::Deconv(g) => {
                    let w = &self.params[&format!("{}.w", layer.name)];
                    let bia = &self.params[&format!("{}.b", layer.name)];
                    deconv3d_forward(a, g, w, bia).map_err(wrap)?
                }
                LayerKind::Pool { kernel, stride } => {
                    let (y, am) = maxpool3d_forward(a, *kernel, *stride).map_err(wrap)?;
                    argmax[i] = Some(am);
                    y
                }
                LayerKind::Relu => relu_forward(a),
                LayerKind::Concat => {
                    let b2 = &values[layer.inputs[1]];
                    concat_channels(a, b2).map_err(wrap)?
                }
                LayerKind::Upsample { out } => trilinear_upsample(a, *out).map_err(wrap)?,
            };
            values.push(out);
        }
        let pred = values.last().expect("non-empty").clone();
        Ok((pred, Cache { values, argmax }))
    }

    /// Gradients for every parameter. Skip-connected layers accumulate
    /// upstream gradients from all of their consumers.
    pub fn backward(
        &self,
        cache: &Cache,
        dprediction: &Tensor,
    ) -> Result<BTreeMap<String, Tensor>, GraphError> {
        let n = self.layers.len();
        let mut dvalues: Vec<Option<Tensor>> = vec![None; n + 1];
        dvalues[n] = Some(dprediction.clone());
        let mut grads = BTreeMap::new();

        let add_grad = |slot: &mut Option<Tensor>, g: Tensor| {
            match slot {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => *slot = Some(g),
            };
        };

        for (i, layer) in self.layers.iter().enumerate().rev() {
            let Some(dy) = dvalues[i + 1].take() else {
                continue;
            };
            let wrap = |source| GraphError::Op {
                layer: layer.name.clone(),
                source,
            };
            let x = &cache.values[layer.inputs[0]];
            match &layer.kind {
                LayerKind::Conv(g) => {
                    let w = &self.params[&format!("{}.w", layer.name)];
                    let (dx, dw, db) = conv3d_backward(x, g, w, &dy).map_err(wrap)?;
                    grads.insert(format!("{}.w", layer.name), dw);
                    grads.insert(format!("{}.b", layer.name), db);
                    add_grad(&mut dvalues[layer.inputs[0]], dx);
                }
                LayerKind::Deconv(g) => {
                    let w = &self.params[&format!("{}.w", layer.name)];
                    let (dx, dw, db) = deconv3d_backward(x, g, w, &dy).map_err(wrap)?;
                    grads.insert(format!("{}.w", layer.name), dw);
                    grads.insert(format!("{}.b", layer.name), db);
                    add_grad(&mut dvalues[layer.inputs[0]], dx);
                }
                LayerKind::Pool { .. } => {
                    let am = cache.argmax[i].as_ref().expect("argmax cached in forward");
                    let dx = maxpool3d_backward(am, &dy, x.dims()).map_err(wrap)?;
                    add_grad(&mut dvalues[layer.inputs[0]], dx);
                }
                LayerKind::Relu => {
                    let dx = relu_backward(x, &dy).map_err(wrap)?;
                    add_grad(&mut dvalues[layer.inputs[0]], dx);
                }
                LayerKind::Concat => {
                    let ca = cache.values[layer.inputs[0]].dims()[0];
                    let cb = cache.values[layer.inputs[1]].dims()[0];
                    let (da, db2) = concat_backward(&dy, ca, cb).map_err(wrap)?;
                    add_grad(&mut dvalues[layer.inputs[0]], da);
                    add_grad(&mut dvalues[layer.inputs[1]], db2);
                }
                LayerKind::Upsample { .. } => {
                    let dx = trilinear_upsample_backward(&dy, x.dims()).map_err(wrap)?;
                    add_grad(&mut dvalues[layer.inputs[0]], dx);
                }
            }
        }
        Ok(grads)
    }

    /// Seeded deterministic initialization: conv weights ~ N(0, sqrt(2/fan_in)),
    /// biases zero. Under `HeTrilinearDeconv` each deconv starts as a linear
    /// interpolation filter on matching channel pairs.
    pub fn init_params(&mut self, seed: u64, scheme: InitScheme) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &self.layers {
            let geom = match &layer.kind {
                LayerKind::Conv(g) | LayerKind::Deconv(g) => *g,
                _ => continue,
            };
            let is_deconv = matches!(layer.kind, LayerKind::Deconv(_));
            let w = self
                .params
                .get_mut(&format!("{}.w", layer.name))
                .expect("param exists");
            let kvol: usize = geom.kernel.iter().product();
            let fan_in = geom.in_ch * kvol;
            if is_deconv && scheme == InitScheme::HeTrilinearDeconv {
                fill_interp_deconv(w, &geom);
            } else {
                let normal =
                    Normal::new(0.0f32, (2.0f32 / fan_in as f32).sqrt()).expect("valid std");
                for v in w.data_mut() {
                    *v = normal.sample(&mut rng);
                }
            }
            let b = self
                .params
                .get_mut(&format!("{}.b", layer.name))
                .expect("param exists");
            for v in b.data_mut() {
                *v = 0.0;
            }
        }
    }

    /// Assigns matching checkpoint entries by name; unmatched graph
    /// parameters keep their current values and are reported.
    pub fn bind_checkpoint(
        &mut self,
        entries: &BTreeMap<String, Tensor>,
    ) -> Result<BindReport, GraphError> {
        let mut report = BindReport::default();
        for (name, param) in &self.params {
            match entries.get(name) {
                Some(t) if t.dims() == param.dims() => report.loaded.push(name.clone()),
                Some(t) => {
                    return Err(GraphError::BindShapeMismatch {
                        name: name.clone(),
                        file_dims: t.dims().to_vec(),
                        expected: param.dims().to_vec(),
                    })
                }
                None => report.missing_in_file.push(name.clone()),
            }
        }
        for name in entries.keys() {
            if !self.params.contains_key(name) {
                report.unused_in_file.push(name.clone());
            }
        }
        for name in &report.loaded {
            self.params.insert(name.clone(), entries[name].clone());
        }
        Ok(report)
    }
}

/// Separable linear-interpolation deconv filter; channel pairs map i -> i mod out.
fn fill_interp_deconv(w: &mut Tensor, g: &ConvGeom) {
    let f = |k: usize, s: usize| -> Vec<f32> {
        (0..k)
            .map(|i| {
                (1.0 - ((i as f32 + 0.5) / s as f32 - k as f32 / (2.0 * s as f32)).abs()).max(0.0)
            })
            .collect()
    };
    let fl = f(g.kernel[0], g.stride[0]);
    let fh = f(g.kernel[1], g.stride[1]);
    let fw = f(g.kernel[2], g.stride[2]);
    for v in w.data_mut() {
        *v = 0.0;
    }
    let [kl_n, kh_n, kw_n] = g.kernel;
    for i in 0..g.in_ch {
        let o = i % g.out_ch;
        for kl in 0..kl_n {
            for kh in 0..kh_n {
                for kw in 0..kw_n {
                    let idx = (((i * g.out_ch + o) * kl_n + kl) * kh_n + kh) * kw_n + kw;
                    w.data_mut()[idx] = fl[kl] * fh[kh] * fw[kw];
                }
            }
        }
    }
}
