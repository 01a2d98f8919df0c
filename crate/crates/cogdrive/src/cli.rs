//! Command-line entry points wiring all modules together.
//!
//! Single binary with subcommands `gen`, `train`, `predict`, `plan`, `sim`
//! and `eval`. Every command is a pure function of its input files, flags and
//! seed: outputs are written atomically and repeated invocations produce
//! byte-identical files. Exit codes: 0 success, 2 validation error, 3
//! runtime/solver failure, 4 strict-mode safety violation.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{CogError, Result};
use crate::metrics::{aggregate, evaluate_scene, save_metrics, SceneMetrics};
use crate::modality::ModalityConfig;
use crate::planner::{plan_tree, save_plan, EgoState, PlanStatus, PlannerConfig};
use crate::prednet::{
    init_params, load_prediction, predict, save_prediction, NetConfig, PredictionSet,
};
use crate::scene::{load_scenario, save_scenario, synth_scene, GenConfig, Scene, Template};
use crate::simloop::{batch_eval, save_report, save_simlog, SimConfig};
use crate::tensor::{load_weights, save_weights};
use crate::training::{save_loss_curve, train, Example, TrainConfig};
use crate::util::atomic_write;

pub const MANIFEST_FORMAT: &str = "cogdrive-manifest/1";
pub const TRAINRUN_FORMAT: &str = "cogdrive-trainrun/1";

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// Scenario-generation defaults, overridable per invocation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenOptions {
    pub sigma: f64,
    pub t_h: usize,
    pub t_f: usize,
    pub dt: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            sigma: 0.0,
            t_h: 10,
            t_f: 30,
            dt: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimOptions {
    pub collision_tol: f64,
    pub max_steps: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            collision_tol: 0.0,
            max_steps: 400,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Keep only the `k` highest-probability modes (probabilities
    /// renormalized); `None` evaluates all modes.
    pub max_modes: Option<usize>,
}

/// Full run configuration: defaults, overridden by the `--config` file,
/// overridden by command-line flags. Unknown keys are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub net: NetConfig,
    pub planner: PlannerConfig,
    pub train: TrainConfig,
    pub modality: ModalityConfig,
    pub gen: GenOptions,
    pub sim: SimOptions,
    pub eval: EvalOptions,
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text =
        std::fs::read_to_string(path).map_err(|e| CogError::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| CogError::Parse {
        path: path.display().to_string(),
        context: Some(format!("line {}, column {}", e.line(), e.column())),
        msg: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// argument grammar
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "cogdrive",
    version,
    about = "Multimodal trajectory prediction and trajectory-tree planning"
)]
pub struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for generation, training and simulation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for batch commands (0 = library default).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Exit with code 4 when a safety property is violated.
    #[arg(long, global = true)]
    pub strict: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenario files from a template.
    Gen(GenArgs),
    /// Train the prediction network on a scenario dataset.
    Train(TrainArgs),
    /// Predict joint futures for one scenario.
    Predict(PredictArgs),
    /// Plan a trajectory tree for one scenario and prediction.
    Plan(PlanArgs),
    /// Run closed-loop episodes over scenario files.
    Sim(SimArgs),
    /// Score prediction files against ground-truth futures.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Template: straight_follow, unprotected_left, merge or crossing.
    pub template: String,
    /// Number of scenes to generate.
    pub count: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Observation-noise level, overrides the config file.
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Scenario directory (with optional manifest.json) or a single file.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss-curve output path (line-delimited JSON).
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Epoch count, overrides the config file.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Scenario file.
    pub scene: PathBuf,
    /// Checkpoint path; a fresh seeded initialization when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Prediction output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Scenario file (provides the ego state and the map).
    pub scene: PathBuf,
    /// Prediction file.
    pub pred: PathBuf,
    /// Plan output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// Scenario files with scripted futures.
    #[arg(required = true)]
    pub scenes: Vec<PathBuf>,
    /// Checkpoint path; a fresh seeded initialization when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Output directory for per-episode logs and the aggregate report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction files, matched by position with --scene.
    #[arg(long = "pred", required = true)]
    pub preds: Vec<PathBuf>,
    /// Scenario files carrying ground-truth futures.
    #[arg(long = "scene", required = true)]
    pub scenes: Vec<PathBuf>,
    /// Metrics report output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate only the k most probable modes (default: all).
    #[arg(long)]
    pub max_modes: Option<usize>,
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

/// Run the CLI against the process arguments and return the exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Exit code classes: validation errors are 2, runtime/solver failures 3.
fn exit_code(e: &CogError) -> i32 {
    match e {
        CogError::Parse { .. }
        | CogError::Invariant(_)
        | CogError::UnknownTemplate(_)
        | CogError::ShapeMismatch { .. }
        | CogError::CheckpointMismatch { .. }
        | CogError::DegenerateGeometry(_) => 2,
        CogError::Io { .. }
        | CogError::InfeasibleCorridor(_)
        | CogError::Diverged { .. }
        | CogError::Other(_) => 3,
    }
}

pub fn dispatch(cli: &Cli) -> Result<i32> {
    let cfg = load_run_config(cli.config.as_deref())?;
    configure_threads(cli.threads);
    match &cli.command {
        Command::Gen(args) => cmd_gen(&cfg, cli.seed.unwrap_or(0), args),
        Command::Train(args) => cmd_train(&cfg, cli.seed, args),
        Command::Predict(args) => cmd_predict(&cfg, cli.seed.unwrap_or(0), args),
        Command::Plan(args) => cmd_plan(&cfg, cli.strict, args),
        Command::Sim(args) => cmd_sim(&cfg, cli.seed.unwrap_or(0), cli.strict, args),
        Command::Eval(args) => cmd_eval(&cfg, args),
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        if n > 0 {
            // ignore failure: the global pool can only be set once per process
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(_threads: Option<usize>) {}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenManifest {
    pub format: String,
    pub template: String,
    pub count: usize,
    pub seed: u64,
    pub sigma: f64,
    pub t_h: usize,
    pub t_f: usize,
    pub dt: f64,
    pub files: Vec<String>,
}

fn cmd_gen(cfg: &RunConfig, seed: u64, args: &GenArgs) -> Result<i32> {
    let template = Template::parse(&args.template)?;
    let sigma = args.sigma.unwrap_or(cfg.gen.sigma);
    let gen_cfg = GenConfig {
        template,
        sigma,
        t_h: cfg.gen.t_h,
        t_f: cfg.gen.t_f,
        dt: cfg.gen.dt,
    };
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CogError::io(args.out.display().to_string(), e))?;
    let mut files = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let res = synth_scene(&gen_cfg, seed.wrapping_add(i as u64))?;
        let name = format!("{}_{:04}.json", args.template, i);
        save_scenario(&res.scene, Some(&res.futures), args.out.join(&name))?;
        files.push(name);
    }
    let manifest = GenManifest {
        format: MANIFEST_FORMAT.to_string(),
        template: args.template.clone(),
        count: args.count,
        seed,
        sigma,
        t_h: cfg.gen.t_h,
        t_f: cfg.gen.t_f,
        dt: cfg.gen.dt,
        files,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CogError::Other(e.to_string()))?
        + "\n";
    atomic_write(&args.out.join("manifest.json"), &text)?;
    println!(
        "wrote {} {} scenario(s) to {}",
        args.count,
        args.template,
        args.out.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Load every scenario (with futures) under `data`: a single file, or a
/// directory read through its manifest when present, sorted names otherwise.
fn load_dataset(data: &Path) -> Result<(Vec<Example>, Vec<String>)> {
    let paths: Vec<PathBuf> = if data.is_file() {
        vec![data.to_path_buf()]
    } else if data.is_dir() {
        let manifest = data.join("manifest.json");
        if manifest.is_file() {
            let text = std::fs::read_to_string(&manifest)
                .map_err(|e| CogError::io(manifest.display().to_string(), e))?;
            let m: GenManifest = serde_json::from_str(&text).map_err(|e| CogError::Parse {
                path: manifest.display().to_string(),
                context: None,
                msg: e.to_string(),
            })?;
            if m.format != MANIFEST_FORMAT {
                return Err(CogError::Invariant(format!(
                    "unsupported manifest format '{}', expected '{MANIFEST_FORMAT}'",
                    m.format
                )));
            }
            m.files.iter().map(|f| data.join(f)).collect()
        } else {
            let mut names: Vec<PathBuf> = std::fs::read_dir(data)
                .map_err(|e| CogError::io(data.display().to_string(), e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            names.sort();
            names
        }
    } else {
        return Err(CogError::Io {
            path: data.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        });
    };
    if paths.is_empty() {
        return Err(CogError::Invariant(format!(
            "no scenario files found under {}",
            data.display()
        )));
    }
    let mut dataset = Vec::with_capacity(paths.len());
    let mut names = Vec::with_capacity(paths.len());
    for p in &paths {
        let (scene, futures) = load_scenario(p)?;
        let futures = futures.ok_or_else(|| {
            CogError::Invariant(format!(
                "scenario {} carries no ground-truth futures",
                p.display()
            ))
        })?;
        dataset.push((scene, futures));
        names.push(p.file_name().unwrap().to_string_lossy().into_owned());
    }
    Ok((dataset, names))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunManifest {
    pub format: String,
    pub data_files: Vec<String>,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub best_val_min_ade: f64,
}

fn cmd_train(cfg: &RunConfig, seed: Option<u64>, args: &TrainArgs) -> Result<i32> {
    let (dataset, names) = load_dataset(&args.data)?;
    let mut train_cfg = cfg.train;
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
    }
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    let result = train(&dataset, &cfg.net, &train_cfg, &cfg.modality)?;
    save_weights(&args.out, &result.best)?;
    let curve_path = args
        .curve
        .clone()
        .unwrap_or_else(|| args.out.with_extension("curve.jsonl"));
    save_loss_curve(&curve_path, &result.curve)?;
    let manifest = TrainRunManifest {
        format: TRAINRUN_FORMAT.to_string(),
        data_files: names,
        net: cfg.net,
        train: train_cfg,
        best_val_min_ade: result.best_val_min_ade,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CogError::Other(e.to_string()))?
        + "\n";
    atomic_write(&args.out.with_extension("run.json"), &text)?;
    println!(
        "trained {} epochs on {} scene(s); best val minADE {:.4}; checkpoint {}",
        train_cfg.epochs,
        dataset.len(),
        result.best_val_min_ade,
        args.out.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// predict / plan
// ---------------------------------------------------------------------------

fn load_or_init_weights(
    weights: Option<&Path>,
    net: &NetConfig,
    seed: u64,
) -> Result<crate::tensor::ParamStore> {
    match weights {
        Some(p) => load_weights(p),
        None => init_params(net, seed),
    }
}

fn cmd_predict(cfg: &RunConfig, seed: u64, args: &PredictArgs) -> Result<i32> {
    let (scene, _) = load_scenario(&args.scene)?;
    let store = load_or_init_weights(args.weights.as_deref(), &cfg.net, seed)?;
    let pred = predict(&store, &cfg.net, &scene)?;
    save_prediction(&args.out, &pred)?;
    println!(
        "predicted {} mode(s) x {} joint agent(s) -> {}",
        pred.modes.len(),
        pred.joint_ids.len(),
        args.out.display()
    );
    Ok(0)
}

fn ego_state(scene: &Scene) -> EgoState {
    let s = scene.ego().last_state();
    EgoState::new(s.pose.x, s.pose.y, s.speed, s.pose.heading)
}

fn cmd_plan(cfg: &RunConfig, strict: bool, args: &PlanArgs) -> Result<i32> {
    let (scene, _) = load_scenario(&args.scene)?;
    let pred = load_prediction(&args.pred)?;
    let tree = plan_tree(&pred, &ego_state(&scene), &scene.map, &cfg.planner)?;
    save_plan(&args.out, &tree)?;
    println!(
        "plan: status {:?}, solver {:?}, min separation {:.3} m, {} branch(es) -> {}",
        tree.status,
        tree.solver,
        tree.report.min_separation,
        tree.branches.len(),
        args.out.display()
    );
    if strict && tree.status == PlanStatus::Fallback {
        eprintln!("strict: planner fell back to emergency braking");
        return Ok(4);
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// sim
// ---------------------------------------------------------------------------

fn cmd_sim(cfg: &RunConfig, seed: u64, strict: bool, args: &SimArgs) -> Result<i32> {
    let store = load_or_init_weights(args.weights.as_deref(), &cfg.net, seed)?;
    let mut episodes = Vec::with_capacity(args.scenes.len());
    let mut stems = Vec::with_capacity(args.scenes.len());
    for p in &args.scenes {
        let (scene, futures) = load_scenario(p)?;
        let futures = futures.ok_or_else(|| {
            CogError::Invariant(format!("scenario {} carries no scripted futures", p.display()))
        })?;
        episodes.push((scene, futures));
        stems.push(
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "episode".into()),
        );
    }
    let sim_cfg = SimConfig {
        planner: cfg.planner.clone(),
        net: cfg.net,
        collision_tol: cfg.sim.collision_tol,
        max_steps: cfg.sim.max_steps,
        seed,
        planning: true,
    };
    let (mut report, logs) = batch_eval(&episodes, &store, &sim_cfg)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CogError::io(args.out.display().to_string(), e))?;
    for (stem, log) in stems.iter().zip(&logs) {
        save_simlog(&args.out.join(format!("{stem}.simlog")), log)?;
    }
    println!(
        "simulated {} episode(s): collision rate {:.3}, completion rate {:.3}, \
         mean replan {:.1} ms, p95 {:.1} ms",
        logs.len(),
        report.collision_rate,
        report.completion_rate,
        report.replan_ms_mean.unwrap_or(0.0),
        report.replan_ms_p95.unwrap_or(0.0),
    );
    // wall-time aggregates go to the console only, keeping the saved report
    // byte-deterministic across reruns
    report.replan_ms_mean = None;
    report.replan_ms_p95 = None;
    save_report(&args.out.join("report.json"), &report)?;
    if strict && report.collision_rate > 0.0 {
        eprintln!("strict: collisions detected");
        return Ok(4);
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Keep the `k` most probable modes, renormalizing the probabilities.
fn truncate_modes(pred: &mut PredictionSet, k: usize) {
    if k == 0 || pred.modes.len() <= k {
        return;
    }
    let mut order: Vec<usize> = (0..pred.modes.len()).collect();
    order.sort_by(|&a, &b| {
        pred.modes[b]
            .prob
            .partial_cmp(&pred.modes[a].prob)
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    let mut kept: Vec<_> = order.iter().map(|&i| pred.modes[i].clone()).collect();
    let total: f64 = kept.iter().map(|m| m.prob).sum();
    if total > 0.0 {
        for m in &mut kept {
            m.prob /= total;
        }
    }
    pred.modes = kept;
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<i32> {
    if args.preds.len() != args.scenes.len() {
        return Err(CogError::Invariant(format!(
            "{} prediction file(s) vs {} scenario file(s); counts must match",
            args.preds.len(),
            args.scenes.len()
        )));
    }
    let max_modes = args.max_modes.or(cfg.eval.max_modes);
    let mut per_scene: Vec<SceneMetrics> = Vec::with_capacity(args.preds.len());
    for (pp, sp) in args.preds.iter().zip(&args.scenes) {
        let mut pred = load_prediction(pp)?;
        let (scene, futures) = load_scenario(sp)?;
        let _ = scene;
        let futures = futures.ok_or_else(|| {
            CogError::Invariant(format!(
                "scenario {} carries no ground-truth futures",
                sp.display()
            ))
        })?;
        if let Some(k) = max_modes {
            truncate_modes(&mut pred, k);
        }
        per_scene.push(evaluate_scene(&pred, &futures)?);
    }
    let report = aggregate(&per_scene)?;
    save_metrics(&args.out, &report)?;
    println!(
        "evaluated {} scene(s): minADE {:.4}, minFDE {:.4}, MR {:.3} -> {}",
        per_scene.len(),
        report.min_ade,
        report.min_fde,
        report.miss_rate,
        args.out.display()
    );
    Ok(0)
}
