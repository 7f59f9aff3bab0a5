//! `simref` command-line driver.
//!
//! Exit codes: 0 on success, 1 on bad input or validation errors, 2 when
//! training or evaluation aborts on a non-finite value.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use simref_core::experiment::{baseline_eval, evaluate_refiner, train_refiner, ExperimentConfig, ExperimentData};
use simref_core::harness::{
    annotation_drift, eval_real_dataset, export_confusion, gradient_suite, refine_dataset, train_predictor,
    write_pgm_grid, ConfusionMatrix, GRAD_TOLERANCE,
};
use simref_core::nets::{AdvHead, Refiner};
use simref_core::objectives::FeatureTransform;
use simref_core::tensor::Tensor;
use simref_core::toyworld::{load_dataset, realize, save_dataset, simulate, AnnotatedImage, Role};
use simref_core::trainer::{HistoryMode, Streams, TrainConfig, Trainer};
use simref_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

/// Marker left in an output directory when a command fails part way.
pub const FAILED_SENTINEL: &str = "FAILED";

#[derive(Parser, Debug)]
#[command(name = "simref", version, about = "Refine simulator images against unlabeled real images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic or real dataset directory.
    GenData(GenDataArgs),
    /// Pretrain both networks and write a resumable checkpoint.
    Pretrain(TrainArgs),
    /// Pretrain (unless resuming) and run adversarial training.
    Train(TrainArgs),
    /// Refine a TNS1 stack or a labeled dataset directory.
    Refine(RefineArgs),
    /// Train the downstream predictor and score it on a real split.
    Eval(EvalArgs),
    /// Annotation drift of a refiner on a synthetic dataset.
    Drift(DriftArgs),
    /// Finite-difference checks of the layers and losses.
    GradCheck(GradCheckArgs),
    /// Confusion-matrix CSV and image grids for a real-vs-refined study.
    ExportStudy(ExportStudyArgs),
    /// Train and score one refiner per λ value.
    SweepLambda(SweepArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RoleArg {
    Synthetic,
    Real,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PsiArg {
    Identity,
    ChannelMean,
    Derivatives,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HistoryArg {
    Augment,
    Split,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Gaze,
    Hand,
}

/// Flags applied on top of the JSON config; flags win.
#[derive(Args, Debug, Default, Clone)]
struct Overrides {
    /// Experiment JSON (any subset of fields).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the training section with a preset before other flags apply.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Seed for training, data generation, predictor and probe.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    k_g: Option<usize>,
    #[arg(long)]
    k_d: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr_r: Option<f64>,
    #[arg(long)]
    lr_d: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    buffer_capacity: Option<usize>,
    #[arg(long)]
    pretrain_r_steps: Option<usize>,
    #[arg(long)]
    pretrain_d_steps: Option<usize>,
    #[arg(long, value_enum)]
    history_mode: Option<HistoryArg>,
    #[arg(long, value_enum)]
    psi: Option<PsiArg>,
    /// Train the discriminator on fresh refined images only.
    #[arg(long)]
    no_history: bool,
    /// One real/refined decision per image instead of per patch.
    #[arg(long)]
    global_adv: bool,
    #[arg(long)]
    n_synthetic: Option<usize>,
    #[arg(long)]
    n_real: Option<usize>,
}

impl Overrides {
    fn load(&self, base: Option<ExperimentConfig>) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => {
                let bytes = fs::read(p)?;
                serde_json::from_slice(&bytes).map_err(|e| Error::invalid(format!("{}: {e}", p.display())))?
            }
            None => base.unwrap_or_default(),
        };
        if let Some(p) = self.preset {
            cfg.train = match p {
                PresetArg::Desk => TrainConfig::default(),
                PresetArg::Gaze => TrainConfig::gaze(),
                PresetArg::Hand => TrainConfig::hand(),
            };
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.data_seed = s;
            cfg.predictor.seed = s;
            cfg.probe.seed = s;
        }
        let t = &mut cfg.train;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { t.$f = v; })* };
        }
        set!(steps, k_g, k_d, batch, lr_r, lr_d, lambda, pretrain_r_steps, pretrain_d_steps);
        if self.buffer_capacity.is_some() {
            t.buffer_capacity = self.buffer_capacity;
        }
        if let Some(h) = self.history_mode {
            t.history_mode = match h {
                HistoryArg::Augment => HistoryMode::Augment,
                HistoryArg::Split => HistoryMode::Split,
            };
        }
        if let Some(p) = self.psi {
            t.psi = match p {
                PsiArg::Identity => FeatureTransform::Identity,
                PsiArg::ChannelMean => FeatureTransform::ChannelMean,
                PsiArg::Derivatives => FeatureTransform::Derivatives,
            };
        }
        if self.no_history {
            t.no_history = true;
        }
        if self.global_adv {
            t.adv_head = AdvHead::Global;
        }
        if let Some(n) = self.n_synthetic {
            cfg.n_synthetic = n;
        }
        if let Some(n) = self.n_real {
            cfg.n_real = n;
        }
        cfg.train.validate()?;
        cfg.world.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    role: RoleArg,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Experiment JSON; only its `world` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run name; outputs go to `<runs-dir>/<name>/`.
    #[arg(long, default_value = "default")]
    name: String,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    /// Synthetic dataset directory (generated from the config when absent).
    #[arg(long, requires = "real")]
    synthetic: Option<PathBuf>,
    /// Real dataset directory.
    #[arg(long, requires = "synthetic")]
    real: Option<PathBuf>,
    /// Continue from `<run>/ckpt`.
    #[arg(long)]
    resume: bool,
    /// Accept a configuration that differs from the checkpoint's.
    #[arg(long, requires = "resume")]
    allow_config_change: bool,
    /// Save the checkpoint every N outer steps (0: only at the end).
    #[arg(long, default_value_t = 500)]
    checkpoint_every: usize,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct RefineArgs {
    /// Training checkpoint directory or refiner checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// TNS1 image stack or labeled dataset directory.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output path; defaults to `refined/` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Labeled training set (synthetic or refined dataset directory).
    #[arg(long)]
    train: PathBuf,
    /// Real dataset directory written by `gen-data --role real`.
    #[arg(long)]
    test: PathBuf,
    /// Refine the training set with this checkpoint first.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Curves CSV path; defaults to `<runs-dir>/<name>/curves.csv` when `--name` is given.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    /// Experiment JSON; its `predictor` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct DriftArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Synthetic dataset directory with at least 100 images.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
}

#[derive(Args, Debug)]
struct ExportStudyArgs {
    /// Counts as real→real,real→synthetic,synthetic→real,synthetic→synthetic.
    #[arg(long, value_delimiter = ',', required = true)]
    matrix: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, requires_all = ["real", "synthetic"])]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    real: Option<PathBuf>,
    #[arg(long)]
    synthetic: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 8)]
    cols: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, default_value = "sweep")]
    name: String,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    /// CSV path; defaults to `<runs-dir>/<name>/sweep.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Messages go to stdout/stderr.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let (result, out_dir) = dispatch(cli.command);
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(dir) = out_dir {
                if dir.is_dir() {
                    let _ = fs::write(dir.join(FAILED_SENTINEL), format!("{e}\n"));
                }
            }
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_INVALID
            }
        }
    }
}

fn dispatch(cmd: Command) -> (Result<(), Error>, Option<PathBuf>) {
    match cmd {
        Command::GenData(a) => {
            let dir = a.out.clone();
            (gen_data(a), Some(dir))
        }
        Command::Pretrain(a) => {
            let dir = a.runs_dir.join(&a.name);
            (train(a, true), Some(dir))
        }
        Command::Train(a) => {
            let dir = a.runs_dir.join(&a.name);
            (train(a, false), Some(dir))
        }
        Command::Refine(a) => (refine(a), None),
        Command::Eval(a) => {
            let dir = a.name.as_ref().map(|n| a.runs_dir.join(n));
            (eval(a), dir)
        }
        Command::Drift(a) => (drift(a), None),
        Command::GradCheck(a) => (grad_check(a), None),
        Command::ExportStudy(a) => {
            let dir = a.out.clone();
            (export_study(a), Some(dir))
        }
        Command::SweepLambda(a) => {
            let dir = a.runs_dir.join(&a.name);
            (sweep(a), Some(dir))
        }
    }
}

/// Creates `dir` and clears a sentinel left by an earlier failed attempt.
fn prepare_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let s = dir.join(FAILED_SENTINEL);
    if s.exists() {
        fs::remove_file(s)?;
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<(), Error> {
    fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<(), Error> {
    let cfg = Overrides {
        config: a.config.clone(),
        ..Default::default()
    }
    .load(None)?;
    let images = match a.role {
        RoleArg::Synthetic => simulate(&cfg.world, a.n, a.seed)?,
        RoleArg::Real => realize(&cfg.world, a.n, a.seed)?,
    };
    prepare_dir(&a.out)?;
    save_dataset(&a.out, &images, &cfg.world, a.seed)?;
    println!("wrote {} {:?} images to {}", a.n, a.role, a.out.display());
    Ok(())
}

fn pixels(images: &[AnnotatedImage]) -> Vec<Tensor> {
    images.iter().map(|i| i.pixels().clone()).collect()
}

fn load_role(dir: &Path, role: Role) -> Result<Vec<AnnotatedImage>, Error> {
    let d = load_dataset(dir)?;
    if d.role != role {
        return Err(Error::invalid(format!("{} holds {:?} images, expected {role:?}", dir.display(), d.role)));
    }
    Ok(d.images)
}

fn train(a: TrainArgs, pretrain_only: bool) -> Result<(), Error> {
    let run = a.runs_dir.join(&a.name);
    let ckpt = run.join("ckpt");
    let echoed = run.join("config.json");
    let base = if a.resume && a.overrides.config.is_none() && echoed.exists() {
        Some(serde_json::from_slice(&fs::read(&echoed)?)?)
    } else {
        None
    };
    let cfg = a.overrides.load(base)?;
    let (syn, real) = match (&a.synthetic, &a.real) {
        (Some(s), Some(r)) => (pixels(&load_role(s, Role::Synthetic)?), pixels(&load_role(r, Role::Real)?)),
        _ => {
            let data = ExperimentData::generate(&cfg)?;
            (data.synthetic_pixels(), data.real_pixels())
        }
    };
    let streams = Streams {
        synthetic: &syn,
        real: &real,
    };
    let mut trainer = if a.resume {
        Trainer::resume(&ckpt, Some(cfg.train.clone()), &streams, a.allow_config_change)?
    } else {
        Trainer::new(cfg.train.clone(), &streams)?
    };
    prepare_dir(&run)?;
    write_json(&echoed, &cfg)?;
    if !trainer.is_pretrained() {
        trainer.pretrain(&streams)?;
        println!("pretraining done");
    }
    if !pretrain_only {
        while trainer.step < trainer.config.steps {
            let r = trainer.step(&streams).cloned();
            let r = match r {
                Ok(r) => r,
                Err(e) => {
                    trainer.log.write(&run.join("log.csv"))?;
                    return Err(e);
                }
            };
            if r.step % 100 == 0 || r.step == trainer.config.steps {
                println!(
                    "step {:>6}  loss_r {:.2}  loss_d {:.2}  p_fake refined {:.3} real {:.3}",
                    r.step, r.loss_r, r.loss_d, r.p_fake_refined, r.p_fake_real
                );
            }
            if a.checkpoint_every > 0 && r.step % a.checkpoint_every == 0 {
                trainer.save(&ckpt)?;
            }
        }
        trainer.log.write(&run.join("log.csv"))?;
    }
    trainer.save(&ckpt)?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn load_refiner(ckpt: &Path) -> Result<Refiner, Error> {
    let nested = ckpt.join("refiner");
    if nested.join("manifest.json").exists() {
        Refiner::load(&nested)
    } else {
        Refiner::load(ckpt)
    }
}

fn refine(a: RefineArgs) -> Result<(), Error> {
    let refiner = load_refiner(&a.ckpt)?;
    let default_dir = a.ckpt.parent().unwrap_or(Path::new(".")).join("refined");
    if a.input.is_dir() {
        let d = load_dataset(&a.input)?;
        let out = refine_dataset(&refiner, &d.images)?;
        let dest = a.out.unwrap_or(default_dir);
        prepare_dir(&dest)?;
        save_dataset(&dest, &out, &d.world, d.seed)?;
        println!("refined {} images into {}", out.len(), dest.display());
    } else {
        let stack = Tensor::read_tns1(&a.input)?;
        let out = refiner.refine_all(&stack, 64)?;
        let dest = match a.out {
            Some(p) => p,
            None => {
                let name = a.input.file_name().ok_or_else(|| Error::invalid("input has no file name"))?;
                fs::create_dir_all(&default_dir)?;
                default_dir.join(name)
            }
        };
        out.write_tns1(&dest)?;
        println!("refined {:?} stack into {}", out.shape(), dest.display());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    let mut cfg = Overrides {
        config: a.config.clone(),
        ..Default::default()
    }
    .load(None)?
    .predictor;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let train = load_dataset(&a.train)?;
    if train.role == Role::Real {
        return Err(Error::Unlabeled("the training set must be synthetic or refined".into()));
    }
    let mut images = train.images;
    if let Some(ckpt) = &a.ckpt {
        images = refine_dataset(&load_refiner(ckpt)?, &images)?;
    }
    let test = load_dataset(&a.test)?;
    let (pred, _) = train_predictor(&images, &cfg)?;
    let report = eval_real_dataset(&pred, &test)?;
    let out = match (&a.out, &a.name) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(n)) => {
            let dir = a.runs_dir.join(n);
            prepare_dir(&dir)?;
            Some(dir.join("curves.csv"))
        }
        _ => None,
    };
    if let Some(p) = out {
        report.write_curves_csv(&p)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn drift(a: DriftArgs) -> Result<(), Error> {
    let refiner = load_refiner(&a.ckpt)?;
    let images = load_role(&a.data, Role::Synthetic)?;
    let r = annotation_drift(&refiner, &images)?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<(), Error> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in a.first_seed..a.first_seed + a.seeds {
        for (name, rep) in gradient_suite(seed)? {
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(w) => w.1 = w.1.max(rep.max_rel_error),
                None => worst.push((name, rep.max_rel_error)),
            }
        }
    }
    let mut failed = false;
    for (name, err) in &worst {
        let ok = *err < GRAD_TOLERANCE;
        failed |= !ok;
        println!("{name:<28} max rel error {err:.3e}  {}", if ok { "ok" } else { "FAIL" });
    }
    if failed {
        return Err(Error::invalid(format!("gradient check above {GRAD_TOLERANCE}")));
    }
    Ok(())
}

fn export_study(a: ExportStudyArgs) -> Result<(), Error> {
    if a.matrix.len() != 4 {
        return Err(Error::invalid(format!("--matrix takes 4 counts, got {}", a.matrix.len())));
    }
    let m = ConfusionMatrix([[a.matrix[0], a.matrix[1]], [a.matrix[2], a.matrix[3]]]);
    prepare_dir(&a.out)?;
    let acc = export_confusion(&m, &a.out.join("confusion.csv"))?;
    println!("accuracy {:.1}%", acc * 100.0);
    if let (Some(ckpt), Some(real), Some(syn)) = (&a.ckpt, &a.real, &a.synthetic) {
        let refiner = load_refiner(ckpt)?;
        let real = load_role(real, Role::Real)?;
        let syn = load_role(syn, Role::Synthetic)?;
        let n = a.count.min(real.len()).min(syn.len());
        let refined = refine_dataset(&refiner, &syn[..n])?;
        write_pgm_grid(&pixels(&real[..n]), a.cols, &a.out.join("real.pgm"))?;
        write_pgm_grid(&pixels(&refined), a.cols, &a.out.join("refined.pgm"))?;
        println!("wrote {n}-image grids to {}", a.out.display());
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<(), Error> {
    if a.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("λ values must be finite and ≥ 0"));
    }
    let cfg = a.overrides.load(None)?;
    let run = a.runs_dir.join(&a.name);
    prepare_dir(&run)?;
    write_json(&run.join("config.json"), &cfg)?;
    let data = ExperimentData::generate(&cfg)?;
    let baseline = baseline_eval(&cfg, &data)?;
    let mut csv = String::from("lambda,drift_mean_px,drift_std_px,baseline_px,refined_px,downstream_gain_px\n");
    for &lambda in &a.values {
        let mut c = cfg.clone();
        c.train.lambda = lambda;
        let trained = train_refiner(&c, &data)?;
        let r = evaluate_refiner(&c, &data, &trained, Some(baseline.clone()))?;
        let _ = writeln!(
            csv,
            "{lambda},{},{},{},{},{}",
            r.drift.mean_px,
            r.drift.std_px,
            r.baseline.mean_px,
            r.refined.mean_px,
            r.downstream_gain_px()
        );
        println!(
            "lambda {lambda}: drift {:.3} px, gain {:.3} px",
            r.drift.mean_px,
            r.downstream_gain_px()
        );
    }
    let out = a.out.unwrap_or_else(|| run.join("sweep.csv"));
    fs::write(&out, csv)?;
    println!("wrote {}", out.display());
    Ok(())
}
