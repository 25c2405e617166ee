//! Command-line front end: data generation, teacher labeling, training,
//! evaluation, prediction, gradient checking, and PPM visualizations.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use v2v::graph::{build_v2v, GraphError, InitScheme, NetGraph, TaskHead};
use v2v::loss::{flow_descale, FlowScaling};
use v2v::ops::{
    conv3d_backward, conv3d_forward, deconv3d_backward, deconv3d_forward, gradcheck,
    maxpool3d_backward, maxpool3d_forward, ConvGeom,
};
use v2v::synth::{make_dataset, to_grayscale, SceneSpec, SynthError};
use v2v::teacher::{teacher_label_clip, HSParams, TeacherError};
use v2v::tensor::{checkpoint_load, Tensor, TensorError};
use v2v::train::{evaluate, train, Manifest, TrainConfig, TrainError};
use v2v::viz::{filters_to_image, flow_to_image, seg_to_image, VizError};

const EXIT_DATA: u8 = 3;
const EXIT_IO: u8 = 4;

struct AppError {
    code: u8,
    msg: String,
}

impl AppError {
    fn data(msg: impl Into<String>) -> AppError {
        AppError {
            code: EXIT_DATA,
            msg: msg.into(),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> AppError {
        AppError {
            code: EXIT_IO,
            msg: e.to_string(),
        }
    }
}

impl From<TensorError> for AppError {
    fn from(e: TensorError) -> AppError {
        let code = match e {
            TensorError::Io(_) => EXIT_IO,
            _ => EXIT_DATA,
        };
        AppError {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> AppError {
        let code = match &e {
            TrainError::Config { .. } => 2,
            TrainError::Io(_) | TrainError::Tensor(TensorError::Io(_)) => EXIT_IO,
            _ => EXIT_DATA,
        };
        AppError {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<SynthError> for AppError {
    fn from(e: SynthError) -> AppError {
        let code = match &e {
            SynthError::Io(_) | SynthError::Tensor(TensorError::Io(_)) => EXIT_IO,
            _ => EXIT_DATA,
        };
        AppError {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<TeacherError> for AppError {
    fn from(e: TeacherError) -> AppError {
        AppError::data(e.to_string())
    }
}

impl From<GraphError> for AppError {
    fn from(e: GraphError) -> AppError {
        AppError::data(e.to_string())
    }
}

impl From<VizError> for AppError {
    fn from(e: VizError) -> AppError {
        let code = match e {
            VizError::Io(_) => EXIT_IO,
            _ => EXIT_DATA,
        };
        AppError {
            code,
            msg: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "v2v", about = "Voxel-to-voxel video prediction toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with exact ground truth
    MakeData(MakeDataArgs),
    /// Label clips with Horn-Schunck teacher flow
    TeacherFlow(TeacherFlowArgs),
    /// Train a model from a config file
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Run one clip through a checkpoint
    Predict(PredictArgs),
    /// Render a flow tensor frame with the color wheel
    VizFlow(VizFlowArgs),
    /// Render a segmentation logits frame
    VizSeg(VizSegArgs),
    /// Render a first-layer filter grid from a checkpoint
    VizFilters(VizFiltersArgs),
    /// Finite-difference checks of the analytic gradients
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct MakeDataArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    noise: f32,
    /// Per-pixel texture amplitude in [0, 1]; 0 renders flat regions
    #[arg(long, default_value_t = 1.0)]
    texture_contrast: f32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TeacherFlowArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    smoothness: f32,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    levels: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = ["seg", "flow", "color"])]
    task: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Fine-tune from this checkpoint
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// CSV loss log (stdout when omitted)
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

/// One flag per config key; set flags override the file.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    base_lr: Option<f32>,
    #[arg(long)]
    decay_every: Option<usize>,
    #[arg(long)]
    decay_factor: Option<f32>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    width_mult: Option<f32>,
    /// CxLxHxW, e.g. 3x16x64x64
    #[arg(long)]
    input_shape: Option<String>,
    #[arg(long)]
    clip_stride_train: Option<usize>,
    #[arg(long)]
    clip_stride_eval: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    stop_loss: Option<f32>,
}

impl Overrides {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<(), AppError> {
        let mut set = |key: &str, value: Option<String>| -> Result<(), AppError> {
            if let Some(v) = value {
                cfg.apply(key, &v, 0)?;
            }
            Ok(())
        };
        set("classes", self.classes.map(|v| v.to_string()))?;
        set("alpha", self.alpha.map(|v| v.to_string()))?;
        set("base_lr", self.base_lr.map(|v| v.to_string()))?;
        set("decay_every", self.decay_every.map(|v| v.to_string()))?;
        set("decay_factor", self.decay_factor.map(|v| v.to_string()))?;
        set("max_iters", self.max_iters.map(|v| v.to_string()))?;
        set("momentum", self.momentum.map(|v| v.to_string()))?;
        set("seed", self.seed.map(|v| v.to_string()))?;
        set("width_mult", self.width_mult.map(|v| v.to_string()))?;
        set("input_shape", self.input_shape.clone())?;
        set(
            "clip_stride_train",
            self.clip_stride_train.map(|v| v.to_string()),
        )?;
        set(
            "clip_stride_eval",
            self.clip_stride_eval.map(|v| v.to_string()),
        )?;
        set(
            "checkpoint_every",
            self.checkpoint_every.map(|v| v.to_string()),
        )?;
        set("stop_loss", self.stop_loss.map(|v| v.to_string()))?;
        Ok(())
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_parser = ["seg", "flow", "color"])]
    task: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, value_parser = ["seg", "flow", "color"])]
    task: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    clip: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct VizFlowArgs {
    #[arg(long)]
    flow: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long)]
    max_flow: Option<f32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VizSegArgs {
    #[arg(long)]
    logits: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Render this class's softmax probability instead of the argmax map
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VizFiltersArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "conv1a")]
    layer: String,
    #[arg(long, default_value_t = 10)]
    scale: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_config(args_task: &str, path: &Path, overrides: &Overrides) -> Result<TrainConfig, AppError> {
    let text = std::fs::read_to_string(path)?;
    // task lines parse before everything else, so appending the CLI task both
    // overrides any task in the file and scopes keys like alpha/classes
    let mut cfg = TrainConfig::parse(&format!("{text}\ntask = {args_task}"))?;
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Builds the task graph and binds every parameter from the checkpoint;
/// partial checkpoints are an error here (prediction needs all weights).
fn load_graph(cfg: &TrainConfig, ckpt: &Path) -> Result<NetGraph, AppError> {
    let mut graph = build_v2v(cfg.task, cfg.input_shape, cfg.width_mult)?;
    graph.init_params(cfg.seed, InitScheme::HeTrilinearDeconv);
    let entries = checkpoint_load(ckpt)?;
    let report = graph.bind_checkpoint(&entries)?;
    if !report.missing_in_file.is_empty() {
        return Err(AppError::data(format!(
            "checkpoint is missing parameters: {}",
            report.missing_in_file.join(", ")
        )));
    }
    Ok(graph)
}

fn cmd_make_data(a: MakeDataArgs) -> Result<(), AppError> {
    let mut spec = SceneSpec::default_scene(a.height, a.width, a.frames, a.classes);
    spec.noise_std = a.noise;
    spec.texture_contrast = a.texture_contrast;
    let manifest = make_dataset(a.n, &spec, a.seed, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_teacher_flow(a: TeacherFlowArgs) -> Result<(), AppError> {
    let manifest = Manifest::load(&a.manifest)?;
    if manifest.entries.is_empty() {
        return Err(AppError::data("dataset is empty"));
    }
    let params = HSParams {
        smoothness: a.smoothness,
        iterations: a.iters,
        pyramid_levels: a.levels,
    };
    std::fs::create_dir_all(&a.out)?;
    let mut lines = String::new();
    let mut epe_sum = 0.0f64;
    let mut epe_vox = 0u64;
    for e in &manifest.entries {
        let clip = Tensor::read(&e.clip)?;
        let labels = teacher_label_clip(&clip, &params)?;
        let name = format!("{}_teacher_flow.tensor", e.id);
        labels.write(&a.out.join(&name))?;
        if let Ok(gt) = Tensor::read(&e.flow) {
            if gt.dims() == labels.dims() {
                let e = v2v::loss::epe(&labels, &gt)
                    .map_err(|err| AppError::data(err.to_string()))?;
                epe_sum += e as f64 * (labels.len() / 2) as f64;
                epe_vox += (labels.len() / 2) as u64;
            }
        }
        // passthrough columns become absolute so they resolve from the new
        // manifest's directory
        let abs = |p: &Path| -> Result<PathBuf, AppError> { Ok(std::fs::canonicalize(p)?) };
        lines.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.id,
            abs(&e.clip)?.display(),
            name,
            abs(&e.seg)?.display(),
            abs(&e.color)?.display()
        ));
    }
    let out_manifest = a.out.join("manifest.txt");
    std::fs::write(&out_manifest, lines)?;
    if epe_vox > 0 {
        println!("teacher epe vs ground truth: {}", epe_sum / epe_vox as f64);
    }
    println!("{}", out_manifest.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), AppError> {
    let mut cfg = load_config(&a.task, &a.config, &a.overrides)?;
    if let Some(init) = a.init {
        cfg.init_checkpoint = Some(init);
    }
    let manifest = Manifest::load(&a.manifest)?;
    let result = if let Some(log_path) = &a.log {
        let mut log = std::io::BufWriter::new(std::fs::File::create(log_path)?);
        let r = train(&cfg, &manifest, &mut log, Some(&a.out))?;
        log.flush()?;
        r
    } else {
        let stdout = std::io::stdout();
        let mut lock = stdout.lock();
        train(&cfg, &manifest, &mut lock, Some(&a.out))?
    };
    println!(
        "final loss {} after {} iterations; checkpoint {}",
        result.final_loss,
        result.iters_run,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), AppError> {
    let cfg = load_config(&a.task, &a.config, &a.overrides)?;
    let graph = load_graph(&cfg, &a.ckpt)?;
    let manifest = Manifest::load(&a.manifest)?;
    let report = evaluate(&graph, &cfg, &manifest)?;
    print!("{report}");
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), AppError> {
    let cfg = load_config(&a.task, &a.config, &a.overrides)?;
    let raw = Tensor::read(&a.clip)?;
    let input = match cfg.task {
        TaskHead::Color => to_grayscale(&raw)?,
        _ => raw,
    };
    let d = input.dims().to_vec();
    if d.len() != 4 {
        return Err(AppError::data(format!("clip must be rank 4, got {d:?}")));
    }
    let mut cfg = cfg;
    cfg.input_shape = [d[0], d[1], d[2], d[3]];
    let graph = load_graph(&cfg, &a.ckpt)?;
    let (pred, _) = graph.forward(&input)?;
    let out = match cfg.task {
        TaskHead::Flow { alpha } => flow_descale(&pred, FlowScaling { alpha }),
        _ => pred,
    };
    out.write(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_viz_flow(a: VizFlowArgs) -> Result<(), AppError> {
    let flow = Tensor::read(&a.flow)?;
    let img = flow_to_image(&flow, a.frame, a.max_flow)?;
    img.write(&a.out)?;
    Ok(())
}

fn cmd_viz_seg(a: VizSegArgs) -> Result<(), AppError> {
    let logits = Tensor::read(&a.logits)?;
    let img = seg_to_image(&logits, a.frame, a.class)?;
    img.write(&a.out)?;
    Ok(())
}

fn cmd_viz_filters(a: VizFiltersArgs) -> Result<(), AppError> {
    let entries = checkpoint_load(&a.ckpt)?;
    let key = format!("{}.w", a.layer);
    let Some(w) = entries.get(&key) else {
        return Err(AppError::data(format!("checkpoint has no entry {key:?}")));
    };
    let img = filters_to_image(w, a.scale)?;
    img.write(&a.out)?;
    Ok(())
}

fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::from_vec(dims, data).expect("dims")
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), AppError> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut failures = 0;
    let mut report = |name: &str, err: f32, tol: f32| {
        let ok = err < tol;
        println!(
            "{name}: max rel err {err:.3e} (tol {tol:.0e}) {}",
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failures += 1;
        }
    };

    let g = ConvGeom {
        kernel: [3, 3, 3],
        stride: [1, 2, 2],
        pad: [1, 1, 1],
        in_ch: 2,
        out_ch: 3,
    };
    let x = rand_tensor(&[2, 4, 6, 6], &mut rng);
    let w = rand_tensor(&g.conv_weight_dims(), &mut rng);
    let b = rand_tensor(&[3], &mut rng);
    let err = gradcheck(
        |xx| conv3d_forward(xx, &g, &w, &b).unwrap(),
        |xx, dy| conv3d_backward(xx, &g, &w, dy).unwrap().0,
        &x,
        1e-3,
        a.seed ^ 1,
    );
    report("conv3d dx", err, 1e-2);

    let dg = ConvGeom {
        kernel: [4, 4, 4],
        stride: [2, 2, 2],
        pad: [1, 1, 1],
        in_ch: 3,
        out_ch: 2,
    };
    let dx_in = rand_tensor(&[3, 3, 4, 4], &mut rng);
    let dw = rand_tensor(&dg.deconv_weight_dims(), &mut rng);
    let db = rand_tensor(&[2], &mut rng);
    let err = gradcheck(
        |xx| deconv3d_forward(xx, &dg, &dw, &db).unwrap(),
        |xx, dy| deconv3d_backward(xx, &dg, &dw, dy).unwrap().0,
        &dx_in,
        1e-3,
        a.seed ^ 2,
    );
    report("deconv3d dx", err, 1e-2);

    let mut px = rand_tensor(&[2, 4, 4, 4], &mut rng);
    for v in px.data_mut() {
        *v = (*v * 100.0).round() / 10.0; // spread values so ties are unlikely
    }
    let kernel = [2, 2, 2];
    let stride = [2, 2, 2];
    let err = gradcheck(
        |xx| maxpool3d_forward(xx, kernel, stride).unwrap().0,
        |xx, dy| {
            let (_, am) = maxpool3d_forward(xx, kernel, stride).unwrap();
            maxpool3d_backward(&am, dy, xx.dims()).unwrap()
        },
        &px,
        1e-3,
        a.seed ^ 3,
    );
    report("maxpool3d dx", err, 1e-2);

    if failures == 0 {
        Ok(())
    } else {
        Err(AppError::data(format!("{failures} gradient checks failed")))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::MakeData(a) => cmd_make_data(a),
        Cmd::TeacherFlow(a) => cmd_teacher_flow(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::VizFlow(a) => cmd_viz_flow(a),
        Cmd::VizSeg(a) => cmd_viz_seg(a),
        Cmd::VizFilters(a) => cmd_viz_filters(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
