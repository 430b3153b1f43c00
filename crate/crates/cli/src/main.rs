use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use flowik::dataset::{generate, mix_seed, Dataset, Dequantization};
use flowik::evaluator::{
    bench_runtime, evaluate_flow, test_poses, test_set_row, FlowSolver, LatentDraw,
    BENCH_CSV_HEADER, DEFAULT_K_LIST, IOU_EMPTY_SET, METRICS_CSV_HEADER,
};
use flowik::model::{Mode, ModelConfig, PoseInput};
use flowik::nn::Activation;
use flowik::robot::{Pose, RobotModel};
use flowik::trainer::{Checkpoint, TrainConfig, Trainer, LOSS_CSV_HEADER};
use flowik::world::{random_scene, Clutter, Scene};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SCENE_STREAM: u64 = 3;
const MANIFEST: &str = "manifest.csv";
const ROBOT_FILE: &str = "robot.txt";

/// Amortized inverse kinematics with a scene-conditioned normalizing flow.
#[derive(Parser)]
#[command(name = "flowik", version)]
struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Primary output path of the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker thread cap; 0 uses every core. `bench` always uses one.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write procedural scene files, the robot description and a manifest
    /// into a directory (default `scenes`).
    GenScenes {
        #[arg(long, default_value_t = 8)]
        count: u32,
        /// low, medium or high.
        #[arg(long, default_value = "medium")]
        clutter: String,
        /// Robot description file; the default 4-link arm otherwise.
        #[arg(long)]
        robot: Option<PathBuf>,
    },
    /// Sample labeled configurations for every scene in a directory
    /// (default output `data.bin`).
    GenData {
        #[arg(long, default_value = "scenes")]
        scenes: PathBuf,
        #[arg(long, default_value_t = 50_000)]
        n_per_scene: usize,
    },
    /// Train a model (default output `model.ckpt`, loss curve beside it).
    Train(TrainArgs),
    /// Draw solutions for one pose in one scene as CSV (default `samples.csv`).
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene file.
        #[arg(long)]
        scene: PathBuf,
        /// Target pose as `x,y,theta`.
        #[arg(long, allow_hyphen_values = true)]
        pose: String,
        #[arg(long, default_value_t = 1000)]
        k: usize,
        /// Draw a fresh scene latent per solution.
        #[arg(long)]
        resample: bool,
    },
    /// Per-scene metrics CSV for a checkpoint (default `metrics.csv`).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "scenes")]
        scenes: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
        /// Fail unless the checkpoint was trained in this mode.
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Compare modes per scene against the uniform test-set rates (default
    /// `ablation.csv`). Missing checkpoints are trained first.
    Ablate {
        #[arg(long, default_value = "data.bin")]
        data: PathBuf,
        #[arg(long, default_value = "p2,p3", value_delimiter = ',')]
        modes: Vec<Mode>,
        /// Directory holding `<mode>.ckpt` files.
        #[arg(long, default_value = "checkpoints")]
        checkpoints: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        train: TrainOptions,
    },
    /// Runtime of flow sampling against DLS plus collision checking
    /// (default `bench.csv`).
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "scenes")]
        scenes: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_K_LIST)]
        k_list: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Classical IK tolerance in meters and radians.
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "data.bin")]
    data: PathBuf,
    /// Continue from a checkpoint. Its stored configuration wins except for
    /// `--epochs`, which sets the new total.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Loss curve path; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long, default_value = "p3")]
    mode: Mode,
    #[command(flatten)]
    opts: TrainOptions,
}

#[derive(Args, Clone)]
struct TrainOptions {
    #[arg(long, default_value_t = 60)]
    epochs: u32,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    /// Per-epoch learning-rate decay.
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f64,
    #[arg(long, default_value_t = 10.0)]
    clip_norm: f64,
    /// Steps per epoch; rows / batch size when omitted.
    #[arg(long)]
    steps_per_epoch: Option<u64>,
    /// Flag noise std.
    #[arg(long, default_value_t = 0.1)]
    dequant_a: f64,
    /// Padding noise std.
    #[arg(long, default_value_t = 0.1)]
    dequant_b: f64,
    #[arg(long, default_value_t = 12)]
    blocks: usize,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    /// tanh or leaky_relu.
    #[arg(long, default_value = "leaky_relu")]
    activation: Activation,
    /// Pose fed to the scene encoder: first or mean of the batch.
    #[arg(long, default_value = "first")]
    pose_input: PoseInput,
    /// Std of per-pixel noise added to the scene raster each step; 0 disables it.
    #[arg(long, default_value_t = 0.0)]
    raster_noise: f64,
}

#[derive(Args, Clone)]
struct EvalArgs {
    /// Target poses per scene.
    #[arg(long, default_value_t = 100)]
    poses: usize,
    /// Solutions per pose.
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Uniform configurations behind each test-set row.
    #[arg(long, default_value_t = 100_000)]
    test_samples: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 usage, 3 numeric failure, 4 I/O or file format.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<flowik::Error>() {
            return match err {
                flowik::Error::NonFinite { .. }
                | flowik::Error::NonFiniteBlock { .. }
                | flowik::Error::NonFiniteLoss { .. } => 3,
                flowik::Error::Io(_) | flowik::Error::Format(_) => 4,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    2
}

fn run(cli: Cli) -> Result<()> {
    let threads = match cli.command {
        Command::Bench { .. } => 1,
        _ => cli.threads,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the worker pool")?;
    let seed = cli.seed;
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match cli.command {
        Command::GenScenes {
            count,
            clutter,
            robot,
        } => gen_scenes(&out("scenes"), count, &clutter, robot.as_deref(), seed),
        Command::GenData {
            scenes,
            n_per_scene,
        } => {
            let (robot, scenes) = read_scene_dir(&scenes)?;
            let data = generate(&robot, &scenes, n_per_scene, seed)?;
            let path = out("data.bin");
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            data.save(&path)
                .with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {} samples to {}", data.len(), path.display());
            Ok(())
        }
        Command::Train(args) => {
            let data = Dataset::load(&args.data)
                .with_context(|| format!("loading {}", args.data.display()))?;
            let path = out("model.ckpt");
            let loss = args.loss_csv.clone().unwrap_or_else(|| loss_path(&path));
            let ckpt = match &args.resume {
                Some(r) => {
                    let mut c = Checkpoint::load(r)
                        .with_context(|| format!("loading {}", r.display()))?;
                    c.config.epochs = args.opts.epochs;
                    Some(c)
                }
                None => None,
            };
            let cfg = train_config(args.mode, &args.opts, &data, seed)?;
            train_to(cfg, ckpt, &data, &path, &loss)
        }
        Command::Sample {
            checkpoint,
            scene,
            pose,
            k,
            resample,
        } => sample(&checkpoint, &scene, &pose, k, resample, seed, &out("samples.csv")),
        Command::Eval {
            checkpoint,
            scenes,
            eval,
            mode,
        } => {
            let solver = load_solver(&checkpoint)?;
            if let Some(m) = mode {
                solver.expect_mode(m)?;
            }
            let (_, scenes) = read_scene_dir(&scenes)?;
            let poses = test_poses(&solver.robot, eval.poses, mix_seed(&[seed, 5]));
            let mut lines = Vec::new();
            for s in &scenes {
                lines.push(evaluate_flow(&solver, s, &poses, eval.k, seed)?.to_string());
                lines.push(test_set_row(&solver.robot, s, eval.test_samples, seed)?.to_string());
            }
            write_metrics(&out("metrics.csv"), &lines)
        }
        Command::Ablate {
            data,
            modes,
            checkpoints,
            eval,
            train,
        } => ablate(&data, &modes, &checkpoints, &eval, &train, seed, &out("ablation.csv")),
        Command::Bench {
            checkpoint,
            scenes,
            k_list,
            trials,
            tol,
        } => {
            let solver = load_solver(&checkpoint)?;
            let (_, scenes) = read_scene_dir(&scenes)?;
            let scenes: Vec<Scene> = scenes
                .into_iter()
                .filter(|s| solver.scene_ids.contains(&s.id))
                .collect();
            let rows = bench_runtime(&solver, &scenes, &k_list, trials, tol, seed)?;
            let mut lines = vec![BENCH_CSV_HEADER.to_string()];
            lines.extend(rows.iter().map(|r| r.to_string()));
            write_lines(&out("bench.csv"), &lines)
        }
    }
}

fn load_solver(path: &Path) -> Result<FlowSolver> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(FlowSolver::from_checkpoint(&ckpt)?)
}

fn loss_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.csv")
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut w = BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

/// Metrics CSV plus a `.meta` sidecar stating the conventions behind it.
fn write_metrics(path: &Path, rows: &[String]) -> Result<()> {
    let mut lines = vec![METRICS_CSV_HEADER.to_string()];
    lines.extend_from_slice(rows);
    write_lines(path, &lines)?;
    write_lines(
        &path.with_extension("meta"),
        &[
            format!("iou_empty_set = {IOU_EMPTY_SET}"),
            "iou = tp / (tp + fp + fn) on the collision class, pooled over all samples".into(),
            "errors and rates = over emitted solutions (decoded collision-free in p3)".into(),
            "test rows = uniform configurations; K column holds the sample count".into(),
        ],
    )
}

fn gen_scenes(
    dir: &Path,
    count: u32,
    clutter: &str,
    robot: Option<&Path>,
    seed: u64,
) -> Result<()> {
    if count == 0 {
        bail!(flowik::Error::Config("--count must be at least 1".into()));
    }
    let clutter: Clutter = clutter.parse()?;
    let robot = match robot {
        Some(p) => RobotModel::from_text(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => RobotModel::default(),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(ROBOT_FILE), robot.to_text())?;
    let mut manifest = vec!["file,scene_id,clutter,obstacles".to_string()];
    for id in 0..count {
        let scene = random_scene(&robot, id, clutter, mix_seed(&[seed, SCENE_STREAM, id as u64]))?;
        let name = format!("scene_{id:03}.txt");
        fs::write(dir.join(&name), scene.to_text())?;
        manifest.push(format!("{name},{id},{clutter},{}", scene.obstacles.len()));
    }
    write_lines(&dir.join(MANIFEST), &manifest)?;
    eprintln!("wrote {count} scenes to {}", dir.display());
    Ok(())
}

/// Robot and scenes listed in a directory's manifest, in manifest order.
fn read_scene_dir(dir: &Path) -> Result<(RobotModel, Vec<Scene>)> {
    let read = |p: PathBuf| fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()));
    let robot = RobotModel::from_text(&read(dir.join(ROBOT_FILE))?)?;
    let manifest = read(dir.join(MANIFEST))?;
    let mut scenes = Vec::new();
    for line in manifest.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let file = line.split(',').next().unwrap_or_default();
        let scene = Scene::from_text(&read(dir.join(file))?)?;
        scene.validate(&robot)?;
        scenes.push(scene);
    }
    Ok((robot, scenes))
}

fn train_config(mode: Mode, o: &TrainOptions, data: &Dataset, seed: u64) -> Result<TrainConfig> {
    let model = ModelConfig {
        flow_blocks: o.blocks,
        flow_hidden: o.hidden,
        activation: o.activation,
        pose_input: o.pose_input,
        ..ModelConfig::new(mode, data.robot.dof(), data.robot.reach())
    };
    let cfg = TrainConfig {
        batch_size: o.batch_size,
        learning_rate: o.lr,
        gamma: o.gamma,
        epochs: o.epochs,
        weight_decay: o.weight_decay,
        clip_norm: o.clip_norm,
        seed,
        dequant: Dequantization::new(o.dequant_a, o.dequant_b)?,
        steps_per_epoch: o.steps_per_epoch,
        raster_noise: o.raster_noise,
        ..TrainConfig::new(model)
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Train or resume, saving the checkpoint after every epoch and appending
/// the loss curve as it goes.
fn train_to(
    cfg: TrainConfig,
    resume: Option<Checkpoint>,
    data: &Dataset,
    path: &Path,
    loss: &Path,
) -> Result<()> {
    let resumed = resume.is_some();
    let mut t = match resume {
        Some(c) => Trainer::resume(c, data)?,
        None => Trainer::new(cfg, data)?,
    };
    let mut curve = if resumed && loss.exists() {
        let text = fs::read_to_string(loss)?;
        let keep = t.global_step();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        // Drop rows past the resumed step so the curve matches a straight run.
        lines.retain(|l| {
            l.split(',')
                .nth(1)
                .and_then(|s| s.parse::<u64>().ok())
                .is_none_or(|s| s < keep)
        });
        lines
    } else {
        vec![LOSS_CSV_HEADER.to_string()]
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let save = |t: &Trainer| {
        t.checkpoint()
            .save(path)
            .with_context(|| format!("writing {}", path.display()))
    };
    let mut epoch = t.epoch();
    let (mut sum, mut n) = (0.0, 0usize);
    save(&t)?;
    while !t.is_done() {
        if let Some(r) = t.step()? {
            curve.push(r.csv_row());
            sum += r.loss;
            n += 1;
        }
        if t.epoch() != epoch {
            eprintln!("epoch {epoch}: mean loss {:.4} over {n} steps", sum / n.max(1) as f64);
            epoch = t.epoch();
            (sum, n) = (0.0, 0);
            save(&t)?;
            write_lines(loss, &curve)?;
        }
    }
    save(&t)?;
    write_lines(loss, &curve)?;
    eprintln!("wrote {} ({} mode)", path.display(), t.model().config.mode);
    Ok(())
}

fn parse_pose(s: &str) -> Result<Pose> {
    let v = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| flowik::Error::Config(format!("bad pose '{s}', expected x,y,theta")))?;
    match v.as_slice() {
        [x, y, t] => Ok(Pose::new(*x, *y, *t)),
        _ => bail!(flowik::Error::Config(format!("bad pose '{s}', expected x,y,theta"))),
    }
}

fn sample(
    checkpoint: &Path,
    scene: &Path,
    pose: &str,
    k: usize,
    resample: bool,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let solver = load_solver(checkpoint)?;
    let scene = Scene::from_text(
        &fs::read_to_string(scene).with_context(|| format!("reading {}", scene.display()))?,
    )?;
    let pose = parse_pose(pose)?;
    let draw = if resample {
        LatentDraw::PerSample
    } else {
        LatentDraw::Shared
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = solver.solve(&pose, &scene, k, draw, &mut rng)?;
    let dof = solver.robot.dof();
    let mut header: Vec<String> = (1..=dof).map(|i| format!("q{i}")).collect();
    header.extend(
        ["pred_self", "pred_env", "self_collision", "env_collision"].map(String::from),
    );
    let mut lines = vec![header.join(",")];
    for s in &set.solutions {
        let mut f: Vec<String> = s.config.0.iter().map(|v| format!("{v:?}")).collect();
        let (ps, pe) = s.decoded.map_or((String::new(), String::new()), |(a, b)| {
            ((a as u8).to_string(), (b as u8).to_string())
        });
        f.extend([ps, pe, (s.truth.0 as u8).to_string(), (s.truth.1 as u8).to_string()]);
        lines.push(f.join(","));
    }
    write_lines(out, &lines)
}

fn ablate(
    data_path: &Path,
    modes: &[Mode],
    dir: &Path,
    eval: &EvalArgs,
    train: &TrainOptions,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if modes.is_empty() {
        bail!(flowik::Error::Config("--modes is empty".into()));
    }
    let data = Dataset::load(data_path)
        .with_context(|| format!("loading {}", data_path.display()))?;
    let mut solvers = Vec::new();
    for &mode in modes {
        let path = dir.join(format!("{mode}.ckpt"));
        if !path.exists() {
            eprintln!("training {mode} into {}", path.display());
            let cfg = train_config(mode, train, &data, seed)?;
            train_to(cfg, None, &data, &path, &loss_path(&path))?;
        }
        let solver = load_solver(&path)?;
        solver.expect_mode(mode)?;
        solvers.push(solver);
    }
    let poses = test_poses(&data.robot, eval.poses, mix_seed(&[seed, 5]));
    let mut lines = Vec::new();
    for g in &data.groups {
        for solver in &solvers {
            lines.push(evaluate_flow(solver, &g.scene, &poses, eval.k, seed)?.to_string());
        }
        lines.push(test_set_row(&data.robot, &g.scene, eval.test_samples, seed)?.to_string());
    }
    write_metrics(out, &lines)
}
