//! Command-line surface: dataset generation, training, inference,
//! evaluation, ablations, and schedule inspection.
//!
//! Every command validates its inputs before side effects and fails with
//! a single machine-parsable line `error[CLASS]: message`. All randomness
//! flows from `--seed` / the config seed. `FLOWDIFF_OUT_ROOT` re-roots
//! relative output paths; `FLOWDIFF_THREADS` caps the evaluation thread
//! pool.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::data::{self, DirDataset, SyntheticDataset, TripletSource};
use crate::error::{Error, Result};
use crate::eval::{run_ablation, run_benchmark};
use crate::pipeline::{
    load_config, train_all, InterpolateOptions, Model, PhaseSel, PipelineConfig, HELDOUT_SALT,
};
use crate::schedules::{make_sampling_path, make_stage_plan};
use crate::tensor::Tensor;

#[derive(Parser, Debug)]
#[command(
    name = "flowdiff",
    about = "Hierarchical flow diffusion for video frame interpolation",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic triplet dataset (images + .flo + manifest).
    GenData(GenDataArgs),
    /// Run one training phase or all three.
    Train(TrainArgs),
    /// Interpolate the midpoint frame for an image pair.
    Interpolate(InterpolateArgs),
    /// Evaluate a checkpoint and write metric/timing reports.
    Eval(EvalArgs),
    /// Train and compare ablation arms under shared seeds and budgets.
    Ablate(AblateArgs),
    /// Print the stage plan and sampling path for given constants.
    InspectSchedule(InspectArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Config file providing the motion spec family (defaults when absent).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Skip writing ground-truth flow files.
    #[arg(long, default_value_t = false)]
    pub no_flow_files: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// 1, 2, 3 or "all".
    #[arg(long, default_value = "all")]
    pub phase: String,
    #[arg(long, default_value_t = false)]
    pub resume: bool,
    /// Checkpoint directory.
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// Train from a triplet directory instead of the synthetic set.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub i0: PathBuf,
    #[arg(long)]
    pub i1: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write f0.flo / f1.flo next to the output image.
    #[arg(long, default_value_t = false)]
    pub dump_flow: bool,
    /// With --gt, write a 3-panel overlay|prediction|gt image.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Ground-truth midpoint frame for --grid.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the number of sampling steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Evaluate a triplet directory instead of the held-out synthetic set.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "runs/eval")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated arm names (full, no_flow, no_joint, unshare,
    /// single_level_<k>).
    #[arg(long, default_value = "full,no_flow")]
    pub arms: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3")]
    pub seeds: String,
    #[arg(long, default_value = "runs/ablate")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long, default_value_t = 1000)]
    pub t: usize,
    #[arg(long, default_value_t = 2)]
    pub k0: usize,
    #[arg(long, default_value_t = 4)]
    pub k1: usize,
    #[arg(long, default_value_t = 6)]
    pub steps: usize,
}

/// Entry point used by the binary: parse, run, map errors to one line.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    init_thread_pool();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}

fn init_thread_pool() {
    if let Ok(n) = std::env::var("FLOWDIFF_THREADS") {
        if let Ok(n) = n.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

/// Re-root relative paths under `FLOWDIFF_OUT_ROOT` when set.
fn out_path(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os("FLOWDIFF_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(p),
        None => p.to_path_buf(),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::InspectSchedule(a) => inspect_schedule(a),
    }
}

fn config_from(path: &Option<PathBuf>) -> Result<PipelineConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = config_from(&a.spec)?;
    let out = out_path(&a.out);
    let ds = SyntheticDataset::generate(a.count, &cfg.motion_opts(), a.seed);
    let written = data::io::write_dataset(&ds, &out, !a.no_flow_files)?;
    println!("wrote {written} triplets to {}", out.display());
    Ok(())
}

fn parse_phase(s: &str) -> Result<PhaseSel> {
    match s {
        "all" => Ok(PhaseSel::All),
        "1" => Ok(PhaseSel::One(1)),
        "2" => Ok(PhaseSel::One(2)),
        "3" => Ok(PhaseSel::One(3)),
        other => Err(Error::invalid(format!(
            "phase must be 1, 2, 3 or all, got {other}"
        ))),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = config_from(&a.config)?;
    let sel = parse_phase(&a.phase)?;
    let out = out_path(&a.out);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let log_path = out.join("train.log");
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let mut run = |source: &dyn TripletSource| -> Result<Model> {
        let stdout = std::io::stdout();
        train_all(source, &cfg, &out, sel, a.resume, |row| {
            let line = format!("{} {} {:.6} {:.6e}", row.phase, row.step, row.loss, row.lr);
            let mut lock = stdout.lock();
            let _ = writeln!(lock, "{line}");
            let _ = writeln!(log_file, "{line}");
        })
    };
    let model = match &a.data {
        Some(dir) => run(&DirDataset::load(dir)?)?,
        None => run(&SyntheticDataset::generate(
            cfg.train_count,
            &cfg.motion_opts(),
            cfg.seed,
        ))?,
    };
    let s = model.summary();
    println!(
        "done: phase={} encoder={} decoder={} denoiser={} params",
        model.phase, s.encoder_params, s.decoder_params, s.denoiser_params
    );
    Ok(())
}

fn interpolate(a: InterpolateArgs) -> Result<()> {
    let model = Model::load(&a.ckpt)?;
    let i0 = data::read_image(&a.i0)?;
    let i1 = data::read_image(&a.i1)?;
    let opts = InterpolateOptions {
        seed: a.seed,
        n_steps: a.steps,
        zero_flow: false,
    };
    let out = model.interpolate(&i0, &i1, &opts)?;
    let img_path = out_path(&a.out);
    if let Some(parent) = img_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    data::write_image(&out.image, &img_path)?;
    if a.dump_flow {
        let base = img_path.with_extension("");
        let f0_path = PathBuf::from(format!("{}.f0.flo", base.display()));
        let f1_path = PathBuf::from(format!("{}.f1.flo", base.display()));
        data::write_flo(&out.flow0, &f0_path)?;
        data::write_flo(&out.flow1, &f1_path)?;
    }
    if let Some(grid_path) = &a.grid {
        let gt_path = a.gt.as_ref().ok_or_else(|| {
            Error::invalid("--grid needs --gt to supply the ground-truth frame")
        })?;
        let gt = data::read_image(gt_path)?;
        let overlay = crate::eval::overlay_baseline(&i0, &i1);
        let grid = hstack3(&overlay, &out.image, &gt)?;
        data::write_image(&grid, &out_path(grid_path))?;
    }
    println!("wrote {}", img_path.display());
    Ok(())
}

/// Three same-size panels side by side: `[3, h, 3w]`.
fn hstack3(a: &Tensor, b: &Tensor, c: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || b.shape() != c.shape() {
        return Err(Error::invalid("grid panels must share a shape"));
    }
    let (ch, h, w) = a.dims3();
    let mut out = Tensor::zeros(&[ch, h, 3 * w]);
    for cc in 0..ch {
        for y in 0..h {
            let row = (cc * h + y) * w;
            let dst = (cc * h + y) * 3 * w;
            out.data_mut()[dst..dst + w].copy_from_slice(&a.data()[row..row + w]);
            out.data_mut()[dst + w..dst + 2 * w].copy_from_slice(&b.data()[row..row + w]);
            out.data_mut()[dst + 2 * w..dst + 3 * w].copy_from_slice(&c.data()[row..row + w]);
        }
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = Model::load(&a.ckpt)?;
    let out = out_path(&a.out);
    let report = match &a.data {
        Some(dir) => {
            let ds = DirDataset::load(dir)?;
            run_benchmark(&model, &ds, a.seed, a.steps)?
        }
        None => {
            let ds = SyntheticDataset::generate(
                model.cfg.eval_count,
                &model.cfg.motion_opts(),
                // Held-out set: disjoint seed stream from training.
                crate::tensor::mix_seed(model.cfg.seed, HELDOUT_SALT),
            );
            run_benchmark(&model, &ds, a.seed, a.steps)?
        }
    };
    report.write(&out)?;
    print!("{}", report.to_table());
    println!("reports written to {}", out.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = config_from(&a.config)?;
    let arms: Vec<String> = a
        .arms
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if arms.is_empty() {
        return Err(Error::BadArm("(empty arm list)".into()));
    }
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad seed `{s}`")))
        })
        .collect::<Result<_>>()?;
    let out = out_path(&a.out);
    let eval_ds = SyntheticDataset::generate(
        cfg.eval_count,
        &cfg.motion_opts(),
        crate::tensor::mix_seed(cfg.seed, HELDOUT_SALT),
    );
    let report = run_ablation(&arms, &cfg, &seeds, &eval_ds, &out, |arm, seed, row| {
        println!(
            "{arm} s{seed} {} {} {:.6} {:.6e}",
            row.phase, row.step, row.loss, row.lr
        );
    })?;
    report.write(&out)?;
    print!("{}", report.to_table());
    Ok(())
}

fn inspect_schedule(a: InspectArgs) -> Result<()> {
    let plan = make_stage_plan(a.t, a.k0, a.k1)?;
    println!("stage plan T={} k0={} k1={}", a.t, a.k0, a.k1);
    println!("level   t0      t1      steps");
    for (level, lo, hi) in plan.rows() {
        println!("{level:<7} {lo:<7} {hi:<7} {}", hi - lo);
    }
    let path = make_sampling_path(&plan, a.steps)?;
    println!("\nsampling path n_steps={}", a.steps);
    for e in path.entries() {
        let marker = if e.boundary_after { " -> transition" } else { "" };
        println!("t={:<6} level={}{marker}", e.t, e.level);
    }
    Ok(())
}
