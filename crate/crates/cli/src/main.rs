//! `shellflow`: data generation, training, evaluation, rollout and IK.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use shellflow::checkpoint::{config_hash, Checkpoint};
use shellflow::datagen::{write_atomic, Dataset, Provenance, Split};
use shellflow::embedding::{
    ik_solve, reconstruct_all, split_metrics, train_stage1, Autoencoder, ShellContext, TrainingData,
};
use shellflow::latent::{
    finetune_stage3, grasp_origin, prediction_metrics, rollout_latent, train_stage2, LatentMlp,
};
use shellflow::metrics::Metrics;
use shellflow::{Error, SimState};

use config::RunConfig;

const GIT_DESCRIBE: &str = env!("SHELLFLOW_GIT_DESCRIBE");
const THREADS_VAR: &str = "SHELLFLOW_THREADS";
const RUN_MANIFEST: &str = "run.json";

#[derive(Parser, Debug)]
#[command(
    name = "shellflow",
    version,
    about = "Cloth simulation with learned latent dynamics"
)]
struct Cli {
    /// JSON run configuration, layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate every configured sequence into `<out>/<sequence>/`.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Frames per sequence (overrides the configuration).
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Run one training stage and write a checkpoint directory.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint to continue from (required for stages 2 and 3).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint, or the dataset itself when none is given.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Free-running latent prediction from the dataset's first two frames.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Total frames including the two given ones.
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lowest-energy decoded shape for given grasp targets.
    Ik {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON array of `[x, y, z]` targets, one per grasped vertex.
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    version: String,
    git_describe: String,
    threads: usize,
    config_hash: String,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    timings: BTreeMap<String, f64>,
    config: RunConfig,
}

struct Run {
    manifest: RunManifest,
    out: PathBuf,
}

impl Run {
    fn new(command: &str, out: &Path, cfg: &RunConfig, seed: u64) -> CliResult<Self> {
        std::fs::create_dir_all(out)?;
        Ok(Self {
            manifest: RunManifest {
                command: command.into(),
                args: std::env::args().collect(),
                version: env!("CARGO_PKG_VERSION").into(),
                git_describe: GIT_DESCRIBE.into(),
                threads: rayon::current_num_threads(),
                config_hash: config_hash(cfg)?,
                seed,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                timings: BTreeMap::new(),
                config: cfg.clone(),
            },
            out: out.to_path_buf(),
        })
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.manifest
            .inputs
            .insert(name.into(), path.display().to_string());
    }

    fn output(&mut self, name: &str, file: &str) -> PathBuf {
        self.manifest.outputs.insert(name.into(), file.into());
        self.out.join(file)
    }

    fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let v = f();
        self.manifest
            .timings
            .insert(name.into(), start.elapsed().as_secs_f64());
        v
    }

    fn finish(self) -> CliResult<()> {
        write_atomic(
            self.out.join(RUN_MANIFEST),
            serde_json::to_string_pretty(&self.manifest)?.as_bytes(),
        )?;
        Ok(())
    }
}

fn load_config(cli: &Cli) -> CliResult<(RunConfig, u64)> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_json(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    let seed = cfg.dataset.seed;
    Ok((cfg, seed))
}

fn same_topology(ck: &Checkpoint, data: &Dataset) -> CliResult<()> {
    if ck.mesh.triangles() != data.mesh.triangles()
        || ck.mesh.num_vertices() != data.mesh.num_vertices()
        || ck.sim.grasp != data.grasp.indices
    {
        return Err(Error::Config("checkpoint and dataset meshes differ".into()).into());
    }
    Ok(())
}

fn gen_data(cli: &Cli, out: &Path, frames: Option<usize>) -> CliResult<()> {
    let (mut cfg, seed) = load_config(cli)?;
    if let Some(n) = frames {
        cfg.dataset.frames = n;
    }
    let mut run = Run::new("gen-data", out, &cfg, seed)?;
    let sets = run.time("generate", || cfg.dataset.generate_all())?;
    for (seq, data) in cfg.dataset.sequences.iter().zip(&sets) {
        data.save(run.output(&seq.name, &seq.name))?;
    }
    run.finish()
}

fn train(
    cli: &Cli,
    stage: u8,
    dataset: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    let (cfg, seed) = load_config(cli)?;
    let mut run = Run::new(&format!("train --stage {stage}"), out, &cfg, seed)?;
    run.input("dataset", dataset);
    let data = Dataset::load(dataset)?;
    let ctx = ShellContext::for_dataset(&data)?;
    let td = TrainingData::new(&data, &ctx)?;
    let hash = run.manifest.config_hash.clone();

    let (ck, history) = if stage == 1 {
        let mut ae = Autoencoder::new(
            &ctx.adjacency,
            cfg.autoencoder.clone(),
            td.fit_normalizer(cfg.autoencoder.std_floor),
        )?;
        let h = run.time("train", || train_stage1(&mut ae, &td, &cfg.stage1))?;
        let ck = Checkpoint {
            stage,
            seed,
            config_hash: hash,
            mesh: data.mesh.clone(),
            sim: data.cfg.clone(),
            autoencoder: ae,
            mlp: None,
        };
        (ck, h)
    } else {
        let path = checkpoint
            .ok_or_else(|| CliError::Usage(format!("stage {stage} needs --checkpoint")))?;
        run.input("checkpoint", path);
        let mut ck = Checkpoint::load(path)?;
        same_topology(&ck, &data)?;
        let h = if stage == 2 {
            let mut mlp = LatentMlp::new(
                ck.autoencoder.latent_dim(),
                data.grasp.indices.len(),
                cfg.mlp.clone(),
            )?;
            let h = run.time("train", || {
                train_stage2(&ck.autoencoder, &mut mlp, &td, &cfg.stage2)
            })?;
            ck.mlp = Some(mlp);
            h
        } else {
            let mut mlp = ck.mlp.take().ok_or_else(|| {
                Error::Config("stage 3 needs a checkpoint with a latent simulator".into())
            })?;
            let h = run.time("train", || {
                finetune_stage3(&mut ck.autoencoder, &mut mlp, &td, &cfg.stage3)
            })?;
            ck.mlp = Some(mlp);
            h
        };
        ck.stage = stage;
        ck.seed = seed;
        ck.config_hash = hash;
        (ck, h)
    };
    ck.save(out)?;
    run.output("checkpoint", shellflow::checkpoint::MANIFEST_FILE);
    write_atomic(
        run.output("history", "history.csv"),
        history.to_csv().as_bytes(),
    )?;
    run.finish()
}

fn dataset_name(path: &Path) -> String {
    path.canonicalize()
        .ok()
        .as_deref()
        .unwrap_or(path)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn eval(cli: &Cli, dataset: &Path, checkpoint: Option<&Path>, out: &Path) -> CliResult<()> {
    let (cfg, seed) = load_config(cli)?;
    let mut run = Run::new("eval", out, &cfg, seed)?;
    run.input("dataset", dataset);
    let data = Dataset::load(dataset)?;
    let ctx = ShellContext::for_dataset(&data)?;
    let td = TrainingData::new(&data, &ctx)?;
    let mut rows: Vec<(&str, Split, Metrics)> = Vec::new();
    let splits = [Split::Train, Split::Test];
    match checkpoint {
        None => {
            for s in splits {
                rows.push((
                    "reference",
                    s,
                    split_metrics(&td, &data.frames, s, &cfg.sted)?,
                ));
            }
        }
        Some(path) => {
            run.input("checkpoint", path);
            let ck = Checkpoint::load(path)?;
            same_topology(&ck, &data)?;
            let recon = run.time("reconstruct", || reconstruct_all(&ck.autoencoder, &td))?;
            for s in splits {
                rows.push(("autoencoder", s, split_metrics(&td, &recon, s, &cfg.sted)?));
            }
            if let Some(mlp) = &ck.mlp {
                for s in splits {
                    let m = run.time("predict", || {
                        prediction_metrics(&ck.autoencoder, mlp, &td, s, &cfg.sted)
                    })?;
                    rows.push(("latent", s, m));
                }
            }
        }
    }
    let name = dataset_name(dataset);
    let mut csv = String::from("dataset,method,split,m_rms,m_sted,m_phys\n");
    for (method, split, m) in rows {
        let split = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        csv.push_str(&format!(
            "{name},{method},{split},{},{},{}\n",
            m.m_rms, m.m_sted, m.m_phys
        ));
    }
    write_atomic(run.output("metrics", "metrics.csv"), csv.as_bytes())?;
    run.finish()
}

fn rollout(
    cli: &Cli,
    checkpoint: &Path,
    dataset: &Path,
    frames: usize,
    out: &Path,
) -> CliResult<()> {
    let (cfg, seed) = load_config(cli)?;
    if frames < 2 {
        return Err(CliError::Usage("--frames must be at least 2".into()));
    }
    let mut run = Run::new("rollout", out, &cfg, seed)?;
    run.input("checkpoint", checkpoint);
    run.input("dataset", dataset);
    let ck = Checkpoint::load(checkpoint)?;
    let data = Dataset::load(dataset)?;
    same_topology(&ck, &data)?;
    let mlp = ck.mlp.as_ref().ok_or_else(|| {
        Error::Config("rollout needs a checkpoint with a latent simulator".into())
    })?;
    if frames > data.grasp.trajectory.len() {
        return Err(Error::Config(format!(
            "dataset has grasp targets for {} frames, {frames} requested",
            data.grasp.trajectory.len()
        ))
        .into());
    }
    let ctx = ck.context()?;
    let feats = ctx.features(&data.frames[..2])?;
    let z1 = ck.autoencoder.encode(&feats[0])?;
    let z2 = ck.autoencoder.encode(&feats[1])?;
    let targets = &data.grasp.trajectory[2..frames];
    let origin = grasp_origin(data.grasp.targets(0));
    let learned = rollout_latent(&ck.autoencoder, mlp, &ctx, &z1, &z2, targets, origin)?;
    let start = Instant::now();
    let simulated = ctx.sim.rollout(
        &SimState {
            p_prev2: data.frames[0].clone(),
            p_prev1: data.frames[1].clone(),
        },
        targets,
        targets.len(),
    )?;
    let sim_seconds = start.elapsed().as_secs_f64();
    debug_assert_eq!(simulated.len(), learned.frames.len());
    run.manifest
        .timings
        .insert("latent".into(), learned.seconds);
    run.manifest.timings.insert("simulator".into(), sim_seconds);

    let mut predicted = data.frames[..2].to_vec();
    predicted.extend(learned.frames);
    let out_data = Dataset {
        mesh: data.mesh.clone(),
        frames: predicted,
        grasp: shellflow::GraspSet {
            indices: data.grasp.indices.clone(),
            trajectory: data.grasp.trajectory[..frames].to_vec(),
        },
        cfg: data.cfg.clone(),
        split: data.split[..frames].to_vec(),
        provenance: Provenance {
            generator: format!("shellflow rollout {}", env!("CARGO_PKG_VERSION")),
            ..data.provenance.clone()
        },
    };
    out_data.save(run.output("prediction", "prediction"))?;

    let n = targets.len();
    let per = |s: f64| if n > 0 { s / n as f64 } else { 0.0 };
    let csv = format!(
        "method,frames,seconds,seconds_per_frame\nlatent,{n},{},{}\nsimulator,{n},{},{}\n",
        learned.seconds,
        per(learned.seconds),
        sim_seconds,
        per(sim_seconds)
    );
    write_atomic(run.output("timing", "timing.csv"), csv.as_bytes())?;
    run.finish()
}

fn ik(cli: &Cli, checkpoint: &Path, targets: &Path, out: &Path) -> CliResult<()> {
    let (cfg, seed) = load_config(cli)?;
    let mut run = Run::new("ik", out, &cfg, seed)?;
    run.input("checkpoint", checkpoint);
    run.input("targets", targets);
    let ck = Checkpoint::load(checkpoint)?;
    let q: Vec<[f64; 3]> = serde_json::from_str(&std::fs::read_to_string(targets)?)?;
    let ctx = ck.context()?;
    let rest = ctx.features(&[ck.mesh.positions()])?;
    let z0 = ck.autoencoder.encode(&rest[0])?;
    let r = run.time("solve", || {
        ik_solve(&ck.autoencoder, &ctx, &q, &z0, &cfg.ik)
    })?;
    ck.mesh
        .save_obj_with_positions(&r.positions, run.output("mesh", "ik.obj"))?;
    let mut csv = String::from("iteration,objective\n");
    for (i, f) in r.objective.iter().enumerate() {
        csv.push_str(&format!("{i},{f}\n"));
    }
    write_atomic(run.output("objective", "ik_objective.csv"), csv.as_bytes())?;
    run.finish()
}

fn set_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_VAR} must be a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    set_threads()?;
    match &cli.command {
        Command::GenData { out, frames } => gen_data(cli, out, *frames),
        Command::Train {
            stage,
            dataset,
            checkpoint,
            out,
        } => train(cli, *stage, dataset, checkpoint.as_deref(), out),
        Command::Eval {
            dataset,
            checkpoint,
            out,
        } => eval(cli, dataset, checkpoint.as_deref(), out),
        Command::Rollout {
            checkpoint,
            dataset,
            frames,
            out,
        } => rollout(cli, checkpoint, dataset, *frames, out),
        Command::Ik {
            checkpoint,
            targets,
            out,
        } => ik(cli, checkpoint, targets, out),
    }
}

fn report(kind: &str, message: &str) {
    let v = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{v}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            report("usage", &m);
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            report(e.kind(), &e.to_string());
            ExitCode::from(1)
        }
    }
}
