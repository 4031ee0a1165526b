//! Operator entry point: scene generation, oracle perturbation, inference,
//! toy training, evaluation, and gradient verification as reproducible
//! commands over JSON/JSONL file contracts.
//!
//! Exit codes: 0 success, 2 usage, 3 input validation failure (violations
//! listed on stderr), 4 numerical failure (divergence, NaN, gradient check
//! over its limit). Every file-producing command writes outputs atomically
//! and drops a manifest recording the resolved configuration next to them.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use scenecast::gradcheck::{run_suite, PASS_LIMIT};
use scenecast::metrics::{evaluate, pair_by_scene_id, MetricOptions, MetricsReport, SceneRow};
use scenecast::model::{constant_params, full_forward, ModelParams};
use scenecast::scene::{
    read_predictions, read_scenes, validate_predictions, validate_scene, write_predictions,
    write_scenes, Config, PredictionSet, Scene,
};
use scenecast::synth::{generate_scene, perturb_to_predictions, synth_queries, GenConfig};
use scenecast::tensor::Tape;
use scenecast::train::{train_toy, OptimConfig, StepLosses, TrainError, TrainOutcome};

#[derive(Parser)]
#[command(name = "scenecast", version, about = "Synthetic driving-scene forecasting pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic ground-truth scenes as JSON lines.
    Gen {
        /// Run configuration JSON: {"config": {..}, "gen": {..}}, both optional.
        #[arg(long)]
        config: PathBuf,
        /// Generator seed; overrides the config file's gen.seed.
        #[arg(long)]
        seed: u64,
        /// Number of scenes to generate.
        #[arg(long)]
        num: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt ground-truth scenes into oracle predictions at a noise level.
    Perturb {
        #[arg(long)]
        scenes: PathBuf,
        /// Noise multiplier; 0 reproduces the ground truth exactly.
        #[arg(long)]
        noise: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the model over synthesized queries for each scene.
    Infer {
        #[arg(long)]
        scenes: PathBuf,
        /// Parameter checkpoint written by train.
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit parameters on scenes with the toy loop.
    Train {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        steps: usize,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Loss history CSV path.
        #[arg(long)]
        log: PathBuf,
    },
    /// Score predictions against ground-truth scenes.
    Eval {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        /// Agent match radius in meters for the end-to-end score.
        #[arg(long)]
        tau_epa: f64,
        /// Report JSON output path.
        #[arg(long)]
        report: PathBuf,
        /// Optional per-scene counts CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable block.
    Gradcheck {
        /// Run configuration JSON, as for gen.
        #[arg(long)]
        config: PathBuf,
        /// Central-difference step.
        #[arg(long)]
        eps: f64,
    },
    /// Generate, train, infer, and evaluate in one run, printing the metrics.
    Demo {
        #[arg(long)]
        seed: u64,
    },
}

/// Failure classes mapped onto the exit-code contract.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Validation(Vec<String>),
    Numerical(String),
}

impl Failure {
    fn exit(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Validation(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn print(&self) {
        match self {
            Failure::Usage(m) => eprintln!("error: {m}"),
            Failure::Validation(v) => {
                eprintln!("error: input validation failed");
                for line in v {
                    eprintln!("  {line}");
                }
            }
            Failure::Numerical(m) => eprintln!("error: {m}"),
        }
    }
}

/// On-disk run configuration. Omitted sections and fields fall back to
/// their defaults, so `{}` is a valid document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    config: Config,
    gen: GenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { config: Config::default(), gen: GenConfig::default() }
    }
}

/// Checkpoint envelope: the configuration that shaped the parameters
/// travels with the values, so infer needs no separate config flag.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: Config,
    gen: GenConfig,
    params: ModelParams,
}

/// Provenance record written next to each command's outputs. Re-running the
/// recorded command against the recorded config and seed reproduces the
/// outputs byte for byte within the same build.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: Config,
    gen: GenConfig,
    seed: Option<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    build: String,
    duration_seconds: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            f.print();
            ExitCode::from(f.exit())
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Gen { config, seed, num, out } => cmd_gen(&config, seed, num, &out),
        Cmd::Perturb { scenes, noise, seed, out } => cmd_perturb(&scenes, noise, seed, &out),
        Cmd::Infer { scenes, params, out } => cmd_infer(&scenes, &params, &out),
        Cmd::Train { scenes, steps, out, log } => cmd_train(&scenes, steps, &out, &log),
        Cmd::Eval { scenes, preds, tau_epa, report, csv } => {
            cmd_eval(&scenes, &preds, tau_epa, &report, csv.as_deref())
        }
        Cmd::Gradcheck { config, eps } => cmd_gradcheck(&config, eps),
        Cmd::Demo { seed } => cmd_demo(seed),
    }
}

fn cmd_gen(config_path: &Path, seed: u64, num: usize, out: &Path) -> Result<(), Failure> {
    let started = Instant::now();
    let mut rc = load_run_config(config_path)?;
    rc.gen.seed = seed;
    let mut scenes = Vec::with_capacity(num);
    for i in 0..num as u64 {
        let scene = generate_scene(&rc.gen, &rc.config, i)
            .map_err(|e| Failure::Validation(vec![e.to_string()]))?;
        scenes.push(scene);
    }
    let mut buf = Vec::new();
    write_scenes(&mut buf, &scenes).expect("in-memory write");
    write_atomic(out, &buf)?;
    write_manifest(
        out,
        &RunManifest {
            command: argv_line(),
            config: rc.config,
            gen: rc.gen,
            seed: Some(seed),
            inputs: vec![shown(config_path)],
            outputs: vec![shown(out)],
            build: build_id(),
            duration_seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn cmd_perturb(scenes_path: &Path, noise: f64, seed: u64, out: &Path) -> Result<(), Failure> {
    let started = Instant::now();
    let scenes = load_scenes_file(scenes_path)?;
    let config = sniff_geometry(Config::default(), &scenes, &[]);
    demand_valid_scenes(&scenes, &config, scenes_path)?;
    let gen = GenConfig { seed, ..GenConfig::default() };
    let mut preds = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        let set = perturb_to_predictions(scene, &gen, &config, noise)
            .map_err(|e| Failure::Validation(vec![e.to_string()]))?;
        preds.push(set);
    }
    let mut buf = Vec::new();
    write_predictions(&mut buf, &preds).expect("in-memory write");
    write_atomic(out, &buf)?;
    write_manifest(
        out,
        &RunManifest {
            command: argv_line(),
            config,
            gen,
            seed: Some(seed),
            inputs: vec![shown(scenes_path)],
            outputs: vec![shown(out)],
            build: build_id(),
            duration_seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    println!("wrote {} prediction sets to {}", preds.len(), out.display());
    Ok(())
}

fn cmd_infer(scenes_path: &Path, params_path: &Path, out: &Path) -> Result<(), Failure> {
    let started = Instant::now();
    let text = read_text(params_path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Failure::Validation(vec![format!("{}: {e}", params_path.display())]))?;
    let mut problems: Vec<String> =
        ckpt.config.check().iter().map(|v| format!("config.{v}")).collect();
    problems.extend(ckpt.params.check_against(&ckpt.config).into_iter().map(|m| format!("params: {m}")));
    if !problems.is_empty() {
        return Err(Failure::Validation(problems));
    }
    let scenes = load_scenes_file(scenes_path)?;
    demand_valid_scenes(&scenes, &ckpt.config, scenes_path)?;

    let preds = infer_scenes(&scenes, &ckpt.params, &ckpt.config, &ckpt.gen)?;
    let mut buf = Vec::new();
    write_predictions(&mut buf, &preds).expect("in-memory write");
    write_atomic(out, &buf)?;
    write_manifest(
        out,
        &RunManifest {
            command: argv_line(),
            config: ckpt.config,
            gen: ckpt.gen,
            seed: None,
            inputs: vec![shown(scenes_path), shown(params_path)],
            outputs: vec![shown(out)],
            build: build_id(),
            duration_seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    println!("wrote {} prediction sets to {}", preds.len(), out.display());
    Ok(())
}

fn cmd_train(scenes_path: &Path, steps: usize, out: &Path, log: &Path) -> Result<(), Failure> {
    let started = Instant::now();
    let scenes = load_scenes_file(scenes_path)?;
    if scenes.is_empty() {
        return Err(Failure::Validation(vec![format!("{}: no scenes", scenes_path.display())]));
    }
    let config = sniff_geometry(Config::tiny(), &scenes, &[]);
    demand_valid_scenes(&scenes, &config, scenes_path)?;
    let gen = GenConfig::default();
    let params = ModelParams::init(&config, gen.seed);

    let heartbeat = |r: &StepLosses| {
        if r.step % 200 == 0 {
            eprintln!("step {:>5}  total {:.4}", r.step, r.total);
        }
    };
    let outcome = match train_toy(&scenes, params, &config, &gen, steps, OptimConfig::default(), heartbeat)
    {
        Ok(outcome) => outcome,
        Err(TrainError::Diverged { step, loss, history }) => {
            // keep the partial history around for diagnosis
            let _ = write_atomic(log, loss_csv(&history).as_bytes());
            return Err(Failure::Numerical(format!(
                "training diverged at step {step} (total {loss:.3e}); partial history in {}",
                log.display()
            )));
        }
        Err(e) => return Err(Failure::Numerical(e.to_string())),
    };

    write_atomic(log, loss_csv(&outcome.history).as_bytes())?;
    let ckpt = Checkpoint { config: config.clone(), gen: gen.clone(), params: outcome.params };
    let body = serde_json::to_vec(&ckpt).expect("checkpoint serialization");
    write_atomic(out, &body)?;
    write_manifest(
        out,
        &RunManifest {
            command: argv_line(),
            config,
            seed: Some(ckpt.gen.seed),
            gen: ckpt.gen,
            inputs: vec![shown(scenes_path)],
            outputs: vec![shown(out), shown(log)],
            build: build_id(),
            duration_seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    match (outcome.history.first(), outcome.history.last()) {
        (Some(first), Some(last)) => {
            println!("trained {steps} steps, total {:.4} -> {:.4}", first.total, last.total)
        }
        _ => println!("trained 0 steps"),
    }
    Ok(())
}

fn cmd_eval(
    scenes_path: &Path,
    preds_path: &Path,
    tau_epa: f64,
    report_path: &Path,
    csv: Option<&Path>,
) -> Result<(), Failure> {
    let started = Instant::now();
    if !(tau_epa.is_finite() && tau_epa > 0.0) {
        return Err(Failure::Validation(vec![format!("tau-epa must be positive, got {tau_epa}")]));
    }
    let scenes = load_scenes_file(scenes_path)?;
    let preds = load_preds_file(preds_path)?;
    let config = sniff_geometry(Config::default(), &scenes, &preds);
    demand_valid_scenes(&scenes, &config, scenes_path)?;
    demand_valid_preds(&preds, &config, preds_path)?;
    let pairs = pair_by_scene_id(&scenes, &preds).map_err(|m| Failure::Validation(vec![m]))?;

    let mut opts = MetricOptions::from_config(&config);
    opts.tau_epa = tau_epa;
    let report = evaluate(&pairs, &opts);
    let body = serde_json::to_vec_pretty(&report).expect("report serialization");
    write_atomic(report_path, &body)?;
    let mut outputs = vec![shown(report_path)];
    if let Some(csv_path) = csv {
        write_atomic(csv_path, scene_csv(&report.per_scene).as_bytes())?;
        outputs.push(shown(csv_path));
    }
    let mut config = config;
    config.tau_epa = tau_epa;
    write_manifest(
        report_path,
        &RunManifest {
            command: argv_line(),
            config,
            gen: GenConfig::default(),
            seed: None,
            inputs: vec![shown(scenes_path), shown(preds_path)],
            outputs,
            build: build_id(),
            duration_seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    print_summary(&report);
    Ok(())
}

fn cmd_gradcheck(config_path: &Path, eps: f64) -> Result<(), Failure> {
    let rc = load_run_config(config_path)?;
    if !(eps.is_finite() && eps > 0.0 && eps < 0.1) {
        return Err(Failure::Validation(vec![format!("eps must lie in (0, 0.1), got {eps}")]));
    }
    let suite = run_suite(&rc.config, eps, rc.gen.seed)
        .map_err(|e| Failure::Numerical(e.to_string()))?;
    for b in &suite.blocks {
        println!(
            "{:<18} max rel err {:>12.3e}  ({} params, {} attempt{})",
            b.block,
            b.max_rel_err,
            b.params,
            b.attempts,
            if b.attempts == 1 { "" } else { "s" }
        );
    }
    if suite.pass {
        println!("all blocks within {PASS_LIMIT:e}");
        Ok(())
    } else {
        let failing: Vec<&str> =
            suite.blocks.iter().filter(|b| !b.pass).map(|b| b.block.as_str()).collect();
        Err(Failure::Numerical(format!(
            "gradient check failed above {PASS_LIMIT:e}: {}",
            failing.join(", ")
        )))
    }
}

const DEMO_SCENES: u64 = 3;
const DEMO_STEPS: usize = 600;

fn cmd_demo(seed: u64) -> Result<(), Failure> {
    let config = Config::tiny();
    let gen = GenConfig { seed, ..GenConfig::default() };
    println!("generating {DEMO_SCENES} scenes (seed {seed})");
    let mut scenes = Vec::new();
    for i in 0..DEMO_SCENES {
        scenes.push(
            generate_scene(&gen, &config, i).map_err(|e| Failure::Validation(vec![e.to_string()]))?,
        );
    }

    println!("training {DEMO_STEPS} steps on the tiny configuration");
    let params = ModelParams::init(&config, seed);
    let heartbeat = |r: &StepLosses| {
        if r.step % 100 == 0 {
            println!("  step {:>4}  total {:.4}", r.step, r.total);
        }
    };
    let outcome: TrainOutcome =
        train_toy(&scenes, params, &config, &gen, DEMO_STEPS, OptimConfig::default(), heartbeat)
            .map_err(|e| Failure::Numerical(e.to_string()))?;
    if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
        println!("  total loss {:.4} -> {:.4}", first.total, last.total);
    }

    println!("running inference and scoring against the ground truth");
    let preds = infer_scenes(&scenes, &outcome.params, &config, &gen)?;
    let pairs = pair_by_scene_id(&scenes, &preds).map_err(|m| Failure::Validation(vec![m]))?;
    let report = evaluate(&pairs, &MetricOptions::from_config(&config));
    print_summary(&report);
    Ok(())
}

/// Forward pass over every scene, one fresh tape each, outputs checked finite.
fn infer_scenes(
    scenes: &[Scene],
    params: &ModelParams,
    config: &Config,
    gen: &GenConfig,
) -> Result<Vec<PredictionSet>, Failure> {
    let bound = constant_params(params);
    let mut preds = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let mut tape = Tape::new();
        let numerical = |e: scenecast::tensor::TensorError| {
            Failure::Numerical(format!("scene {}: {e}", scene.scene_id))
        };
        let bundle = synth_queries(&mut tape, scene, &bound, config, gen).map_err(numerical)?;
        let set = full_forward(&mut tape, &bundle, &bound, config, &scene.scene_id)
            .map_err(numerical)?;
        if !preds_finite(&set) {
            return Err(Failure::Numerical(format!(
                "non-finite model output for scene {}",
                scene.scene_id
            )));
        }
        preds.push(set);
    }
    Ok(preds)
}

fn print_summary(r: &MetricsReport) {
    let num = |v: Option<f64>, unit: &str| match v {
        Some(x) => format!("{x:.4}{unit}"),
        None => "n/a".to_string(),
    };
    println!("scenes        {}", r.per_scene.len());
    println!("EPA           {}", num(r.epa, ""));
    println!("minADE        {}", num(r.min_ade_mean, " m"));
    println!("minFDE        {}", num(r.min_fde_mean, " m"));
    println!("miss rate     {}", num(r.miss_rate, ""));
    println!("map mean AP   {}", num(r.map_ap.mean, ""));
    println!("det mean AP   {}", num(r.det_ap.mean, ""));
    println!(
        "counts        {} GT, {} matched, {} FP",
        r.counts.n_gt, r.counts.n_match, r.counts.n_fp
    );
}

/// Loss history CSV with one row per step.
fn loss_csv(history: &[StepLosses]) -> String {
    let mut out = String::from("step,L_det_cls,L_det_reg,L_map_cls,L_map_reg,L_mot_reg,total\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.det_cls, r.det_reg, r.map_cls, r.map_reg, r.mot_reg, r.total
        ));
    }
    out
}

/// Per-scene counts CSV for external plotting.
fn scene_csv(rows: &[SceneRow]) -> String {
    let mut out = String::from(
        "scene_id,n_gt,counted_predictions,n_match,n_fp,n_hit,valid_trajectories,epa\n",
    );
    for r in rows {
        let epa = r.epa.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.scene_id,
            r.counts.n_gt,
            r.counts.counted_predictions,
            r.counts.n_match,
            r.counts.n_fp,
            r.counts.n_hit,
            r.counts.valid_trajectories,
            epa
        ));
    }
    out
}

/// Geometry for commands without a config flag is read off the data, so
/// validation demands internal consistency rather than one fixed shape.
fn sniff_geometry(base: Config, scenes: &[Scene], preds: &[PredictionSet]) -> Config {
    let mut cfg = base;
    let scene_points = scenes.iter().flat_map(|s| &s.map_instances).map(|m| m.points.len()).next();
    let pred_points = preds.iter().flat_map(|p| &p.map).map(|m| m.points.len()).next();
    if let Some(n) = scene_points.or(pred_points) {
        cfg.n_points = n;
    }
    let complete_len = scenes
        .iter()
        .flat_map(|s| &s.agents)
        .filter(|a| a.complete)
        .map(|a| a.future.len())
        .next();
    let longest = scenes.iter().flat_map(|s| &s.agents).map(|a| a.future.len()).max();
    let pred_len =
        preds.iter().flat_map(|p| &p.agents).flat_map(|a| &a.forecast).map(|m| m.len()).next();
    if let Some(t) = complete_len.or(longest.filter(|&t| t > 0)).or(pred_len) {
        cfg.t_future = t;
    }
    if let Some(m) = preds.iter().flat_map(|p| &p.agents).map(|a| a.forecast.len()).next() {
        cfg.n_modes = m;
    }
    cfg
}

fn preds_finite(p: &PredictionSet) -> bool {
    let point_ok = |q: &[f64; 2]| q[0].is_finite() && q[1].is_finite();
    p.map
        .iter()
        .all(|m| m.scores.iter().all(|s| s.is_finite()) && m.points.iter().all(point_ok))
        && p.agents.iter().all(|a| {
            a.scores.iter().all(|s| s.is_finite())
                && point_ok(&a.center)
                && a.size.iter().all(|s| s.is_finite())
                && a.yaw.is_finite()
                && a.forecast.iter().all(|m| m.iter().all(point_ok))
        })
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn load_run_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = read_text(path)?;
    let rc: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::Validation(vec![format!("{}: {e}", path.display())]))?;
    let mut problems: Vec<String> =
        rc.config.check().iter().map(|v| format!("config.{v}")).collect();
    problems.extend(rc.gen.check().into_iter().map(|m| format!("gen: {m}")));
    if problems.is_empty() {
        Ok(rc)
    } else {
        Err(Failure::Validation(problems))
    }
}

fn load_scenes_file(path: &Path) -> Result<Vec<Scene>, Failure> {
    let text = read_text(path)?;
    read_scenes(Cursor::new(text))
        .map_err(|e| Failure::Validation(vec![format!("{}: {e}", path.display())]))
}

fn load_preds_file(path: &Path) -> Result<Vec<PredictionSet>, Failure> {
    let text = read_text(path)?;
    read_predictions(Cursor::new(text))
        .map_err(|e| Failure::Validation(vec![format!("{}: {e}", path.display())]))
}

fn demand_valid_scenes(scenes: &[Scene], config: &Config, path: &Path) -> Result<(), Failure> {
    let mut problems = Vec::new();
    for s in scenes {
        for v in validate_scene(s, config) {
            problems.push(format!("{} {}: {v}", path.display(), s.scene_id));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Failure::Validation(problems))
    }
}

fn demand_valid_preds(preds: &[PredictionSet], config: &Config, path: &Path) -> Result<(), Failure> {
    let mut problems = Vec::new();
    for p in preds {
        for v in validate_predictions(p, config) {
            problems.push(format!("{} {}: {v}", path.display(), p.scene_id));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Failure::Validation(problems))
    }
}

/// Writes through a temp file in the same directory so a crash never leaves
/// a half-written output at the final path.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let name = path
        .file_name()
        .ok_or_else(|| Failure::Usage(format!("{} has no file name", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let fail = |e: std::io::Error| Failure::Usage(format!("cannot write {}: {e}", path.display()));
    fs::write(&tmp, bytes).map_err(fail)?;
    fs::rename(&tmp, path).map_err(fail)
}

fn write_manifest(primary_out: &Path, manifest: &RunManifest) -> Result<(), Failure> {
    let path = primary_out.with_extension("manifest.json");
    let body = serde_json::to_vec_pretty(manifest).expect("manifest serialization");
    write_atomic(&path, &body)
}

fn argv_line() -> String {
    std::env::args().skip(1).collect::<Vec<_>>().join(" ")
}

fn build_id() -> String {
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    format!("{} {} ({profile})", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

fn shown(path: &Path) -> String {
    path.display().to_string()
}
