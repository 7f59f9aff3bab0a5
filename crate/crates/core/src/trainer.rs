//! Adversarial refiner training: self-regularization pretraining of the
//! refiner, discriminator pretraining, then alternating updates with a
//! history buffer of refined images feeding the discriminator.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{sgd_step, Tape};
use crate::nets::{
    build_discriminator, build_refiner, mean_channel0, AdvHead, DiscArch, Discriminator, Refiner, RefinerArch,
};
use crate::objectives::{loss_discriminator, loss_refiner, loss_self_reg, FeatureTransform};
use crate::replay::ReplayBuffer;
use crate::rng::{self, RngState};
use crate::tensor::{fingerprint, Tensor};

const SAMPLING_STREAM: u64 = 10;
const STATE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// `b/2` current + `b/2` history fakes against `b` reals.
    #[default]
    Augment,
    /// `b/4` current + `b/4` history fakes against `b/2` reals.
    Split,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Both learning rates switch to `lr` from outer step `after` onwards.
    StepDecay { after: usize, lr: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Outer steps `T`.
    pub steps: usize,
    pub k_g: usize,
    pub k_d: usize,
    pub batch: usize,
    pub lr_r: f64,
    pub lr_d: f64,
    pub lambda: f64,
    /// Defaults to `16·batch` when absent.
    pub buffer_capacity: Option<usize>,
    pub pretrain_r_steps: usize,
    pub pretrain_d_steps: usize,
    pub seed: u64,
    pub history_mode: HistoryMode,
    pub no_history: bool,
    pub psi: FeatureTransform,
    pub adv_head: AdvHead,
    pub lr_schedule: LrSchedule,
    pub refiner: RefinerArch,
    pub discriminator: DiscArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            k_g: 2,
            k_d: 1,
            batch: 32,
            lr_r: DESK_LR,
            lr_d: DESK_LR,
            lambda: 0.5,
            buffer_capacity: None,
            pretrain_r_steps: 300,
            pretrain_d_steps: 200,
            seed: 0,
            history_mode: HistoryMode::Augment,
            no_history: false,
            psi: FeatureTransform::Identity,
            adv_head: AdvHead::Local,
            lr_schedule: LrSchedule::Constant,
            refiner: RefinerArch::desk(),
            discriminator: DiscArch::desk(),
        }
    }
}

/// Default learning rate for the desk configuration, where losses are sums
/// over a 32-image batch.
pub const DESK_LR: f64 = 1e-5;

impl TrainConfig {
    /// The gaze schedule: 1,000 refiner and 200 discriminator pretraining
    /// steps, `K_d = 1`, `K_g = 50`, batch 512, learning rate 0.001.
    pub fn gaze() -> Self {
        Self {
            k_g: 50,
            k_d: 1,
            batch: 512,
            lr_r: 0.001,
            lr_d: 0.001,
            pretrain_r_steps: 1000,
            pretrain_d_steps: 200,
            refiner: RefinerArch::paper_gaze(),
            discriminator: DiscArch::paper_gaze(),
            ..Self::default()
        }
    }

    /// The hand schedule: 500/200 pretraining steps, `K_d = 1`, `K_g = 2`,
    /// learning rate 0.0002 dropping to 0.00005 after 600,000 steps.
    pub fn hand() -> Self {
        Self {
            k_g: 2,
            k_d: 1,
            batch: 512,
            lr_r: 0.0002,
            lr_d: 0.0002,
            pretrain_r_steps: 500,
            pretrain_d_steps: 200,
            lr_schedule: LrSchedule::StepDecay {
                after: 600_000,
                lr: 0.00005,
            },
            refiner: RefinerArch::paper_hand(),
            ..Self::default()
        }
    }

    pub fn capacity(&self) -> usize {
        self.buffer_capacity.unwrap_or(16 * self.batch)
    }

    /// Discriminator architecture with the configured adversarial head.
    pub fn disc_arch(&self) -> DiscArch {
        self.discriminator.clone().with_head(self.adv_head)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.steps == 0 || self.k_g == 0 || self.k_d == 0 || self.batch == 0 {
            return bad("steps, k_g, k_d and batch must be positive".into());
        }
        if self.pretrain_r_steps == 0 || self.pretrain_d_steps == 0 {
            return bad("pretraining step counts must be positive".into());
        }
        if !self.batch.is_multiple_of(2) {
            return bad(format!("batch must be even, got {}", self.batch));
        }
        if self.history_mode == HistoryMode::Split && !self.no_history && !self.batch.is_multiple_of(4) {
            return bad(format!("split history mode needs batch divisible by 4, got {}", self.batch));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be finite and ≥ 0, got {}", self.lambda));
        }
        let lrs = [self.lr_r, self.lr_d];
        if lrs.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return bad("learning rates must be finite and ≥ 0".into());
        }
        if let LrSchedule::StepDecay { lr, .. } = self.lr_schedule {
            if !lr.is_finite() || lr < 0.0 {
                return bad("decayed learning rate must be finite and ≥ 0".into());
            }
        }
        if !self.no_history && self.capacity() < self.fresh_per_disc_update() {
            return bad(format!(
                "buffer capacity {} is smaller than the {} images replaced per update",
                self.capacity(),
                self.fresh_per_disc_update()
            ));
        }
        self.refiner.validate()?;
        self.disc_arch().validate()?;
        if self.refiner.input_channels != self.discriminator.input_channels {
            return bad("refiner and discriminator disagree on channel count".into());
        }
        Ok(())
    }

    /// Refined images produced fresh for each discriminator update.
    pub fn fresh_per_disc_update(&self) -> usize {
        match (self.no_history, self.history_mode) {
            (true, _) => self.batch,
            (false, HistoryMode::Augment) => self.batch / 2,
            (false, HistoryMode::Split) => self.batch / 4,
        }
    }

    fn reals_per_disc_update(&self) -> usize {
        match (self.no_history, self.history_mode) {
            (false, HistoryMode::Split) => self.batch / 2,
            _ => self.batch,
        }
    }

    fn lr_at(&self, step: usize) -> (f64, f64) {
        match self.lr_schedule {
            LrSchedule::StepDecay { after, lr } if step >= after => (lr, lr),
            _ => (self.lr_r, self.lr_d),
        }
    }

    /// Fields that may differ between a checkpoint and a resumed run without
    /// changing its trajectory.
    fn same_trajectory(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.steps = other.steps;
        &a == other
    }
}

/// One row per completed outer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss_r: f64,
    pub loss_realism: f64,
    pub loss_selfreg: f64,
    pub loss_d: f64,
    pub p_fake_refined: f64,
    pub p_fake_real: f64,
}

pub const LOG_HEADER: [&str; 7] = [
    "step",
    "loss_r",
    "loss_realism",
    "loss_selfreg",
    "loss_d",
    "p_fake_refined",
    "p_fake_real",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(LOG_HEADER)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(bytes);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != LOG_HEADER {
            return Err(Error::invalid(format!("unexpected log header {header:?}")));
        }
        let records = rd.deserialize().collect::<std::result::Result<Vec<LogRecord>, _>>()?;
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_csv()?)?;
        Ok(())
    }
}

/// Which network a phase updated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Refiner,
    Discriminator,
}

/// Fingerprints around one phase of an outer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseAudit {
    pub step: usize,
    pub phase: Phase,
    pub frozen_before: u64,
    pub frozen_after: u64,
    pub trained_before: u64,
    pub trained_after: u64,
    pub sgd_steps: usize,
}

/// Training images. The trainer only ever sees pixels.
pub struct Streams<'a> {
    pub synthetic: &'a [Tensor],
    pub real: &'a [Tensor],
}

impl Streams<'_> {
    fn fingerprint(&self) -> u64 {
        fingerprint(self.synthetic.iter()) ^ fingerprint(self.real.iter()).rotate_left(17)
    }
}

fn gather(pool: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = idx.iter().map(|&i| &pool[i]).collect();
    Tensor::stack(&refs)
}

fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

fn finite(v: f64, what: &str, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} = {v} at step {step}")))
    }
}

/// Full training state: both networks, the buffer, the sampling generator
/// and the bookkeeping needed to resume bit-identically.
pub struct Trainer {
    pub config: TrainConfig,
    pub refiner: Refiner,
    pub discriminator: Discriminator,
    pub buffer: Option<ReplayBuffer<Tensor>>,
    pub log: TrainLog,
    pub audit: Vec<PhaseAudit>,
    /// Completed outer steps.
    pub step: usize,
    pub refiner_sgd_steps: usize,
    pub disc_sgd_steps: usize,
    /// Outer step at which a non-finite loss stopped training.
    pub aborted_at: Option<usize>,
    pretrained: bool,
    rng: ChaCha8Rng,
    data_fingerprint: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, streams: &Streams) -> Result<Self> {
        config.validate()?;
        check_streams(&config, streams)?;
        let refiner = build_refiner(&config.refiner, config.seed)?;
        let discriminator = build_discriminator(&config.disc_arch(), config.seed)?;
        let buffer = if config.no_history {
            None
        } else {
            Some(ReplayBuffer::new(config.capacity(), config.seed)?)
        };
        Ok(Self {
            rng: rng::derive(config.seed, SAMPLING_STREAM),
            data_fingerprint: streams.fingerprint(),
            config,
            refiner,
            discriminator,
            buffer,
            log: TrainLog::default(),
            audit: Vec::new(),
            step: 0,
            refiner_sgd_steps: 0,
            disc_sgd_steps: 0,
            aborted_at: None,
            pretrained: false,
        })
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    /// Refiner pretraining on `λ·ℓ_reg` alone. Returns the loss of every step.
    pub fn pretrain_refiner(&mut self, streams: &Streams) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let mut losses = Vec::with_capacity(cfg.pretrain_r_steps);
        for s in 0..cfg.pretrain_r_steps {
            let idx = sample_indices(&mut self.rng, streams.synthetic.len(), cfg.batch);
            let x = gather(streams.synthetic, &idx)?;
            let mut tape = Tape::new();
            let bound = tape.bind(&self.refiner.params);
            let xi = tape.constant(x);
            let y = self.refiner.graph(&mut tape, &bound, xi)?;
            let reg = loss_self_reg(&mut tape, y, xi, cfg.psi)?;
            let loss = tape.scale(reg, cfg.lambda);
            losses.push(finite(tape.scalar(loss) as f64, "pretrain refiner loss", s)?);
            tape.backward(loss)?;
            bound.store_grads(&tape, &mut self.refiner.params)?;
            sgd_step(&mut self.refiner.params, cfg.lr_r)?;
        }
        Ok(losses)
    }

    /// Discriminator pretraining against the current refiner's outputs (no
    /// history). Returns the loss of every step.
    pub fn pretrain_discriminator(&mut self, streams: &Streams) -> Result<Vec<f64>> {
        let b = self.config.batch;
        let mut losses = Vec::with_capacity(self.config.pretrain_d_steps);
        for s in 0..self.config.pretrain_d_steps {
            let idx = sample_indices(&mut self.rng, streams.synthetic.len(), b);
            let fakes = self.refiner.refine(&gather(streams.synthetic, &idx)?)?;
            let ridx = sample_indices(&mut self.rng, streams.real.len(), b);
            let reals = gather(streams.real, &ridx)?;
            let out = self.disc_update(fakes, reals, s)?;
            losses.push(out.loss);
        }
        Ok(losses)
    }

    /// Both pretraining phases, then fills the buffer from the pretrained
    /// refiner.
    pub fn pretrain(&mut self, streams: &Streams) -> Result<()> {
        self.check_data(streams)?;
        self.pretrain_refiner(streams)?;
        self.pretrain_discriminator(streams)?;
        if let Some(buf) = self.buffer.as_mut() {
            let n = buf.capacity().min(streams.synthetic.len());
            let idx = sample_indices(&mut self.rng, streams.synthetic.len(), n);
            let refined = self.refiner.refine_all(&gather(streams.synthetic, &idx)?, self.config.batch)?;
            buf.seed_fill(&refined.unstack())?;
        }
        self.pretrained = true;
        Ok(())
    }

    fn check_data(&self, streams: &Streams) -> Result<()> {
        check_streams(&self.config, streams)?;
        if streams.fingerprint() != self.data_fingerprint {
            return Err(Error::Incompatible("training data differs from the data this run started with".into()));
        }
        Ok(())
    }

    fn disc_update(&mut self, fakes: Tensor, reals: Tensor, step: usize) -> Result<DiscOutcome> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.discriminator.params);
        let fi = tape.constant(fakes);
        let ri = tape.constant(reals);
        let mf = self.discriminator.graph(&mut tape, &bound, fi)?;
        let mr = self.discriminator.graph(&mut tape, &bound, ri)?;
        let loss = loss_discriminator(&mut tape, mf, mr)?;
        let value = finite(tape.scalar(loss) as f64, "discriminator loss", step)?;
        let p_fake = mean_channel0(tape.value(mf));
        let p_real = mean_channel0(tape.value(mr));
        tape.backward(loss)?;
        bound.store_grads(&tape, &mut self.discriminator.params)?;
        let (_, lr_d) = self.config.lr_at(step);
        sgd_step(&mut self.discriminator.params, lr_d)?;
        Ok(DiscOutcome {
            loss: value,
            p_fake_refined: p_fake,
            p_fake_real: p_real,
        })
    }

    fn refiner_update(&mut self, streams: &Streams, step: usize) -> Result<RefinerOutcome> {
        let cfg = &self.config;
        let idx = sample_indices(&mut self.rng, streams.synthetic.len(), cfg.batch);
        let x = gather(streams.synthetic, &idx)?;
        let mut tape = Tape::new();
        let rb = tape.bind(&self.refiner.params);
        let db = tape.bind_frozen(&self.discriminator.params);
        let xi = tape.constant(x);
        let y = self.refiner.graph(&mut tape, &rb, xi)?;
        let map = self.discriminator.graph(&mut tape, &db, y)?;
        let l = loss_refiner(&mut tape, map, y, xi, cfg.lambda, cfg.psi)?;
        let out = RefinerOutcome {
            total: finite(tape.scalar(l.total) as f64, "refiner loss", step)?,
            realism: tape.scalar(l.realism) as f64,
            self_reg: tape.scalar(l.self_reg) as f64,
        };
        tape.backward(l.total)?;
        rb.store_grads(&tape, &mut self.refiner.params)?;
        let (lr_r, _) = cfg.lr_at(step);
        sgd_step(&mut self.refiner.params, lr_r)?;
        Ok(out)
    }

    fn history_disc_update(&mut self, streams: &Streams, step: usize) -> Result<DiscOutcome> {
        let cfg = self.config.clone();
        let fresh = cfg.fresh_per_disc_update();
        let idx = sample_indices(&mut self.rng, streams.synthetic.len(), fresh);
        let current = self.refiner.refine(&gather(streams.synthetic, &idx)?)?;
        let ridx = sample_indices(&mut self.rng, streams.real.len(), cfg.reals_per_disc_update());
        let reals = gather(streams.real, &ridx)?;
        match self.buffer.as_mut() {
            None => self.disc_update(current, reals, step),
            Some(buf) => {
                let cur = current.unstack();
                let (fakes, _) = buf.compose_disc_batch(&cur, &[])?;
                let refs: Vec<&Tensor> = fakes.iter().collect();
                let fake_batch = Tensor::stack(&refs)?;
                let out = self.disc_update(fake_batch, reals, step)?;
                self.buffer.as_mut().expect("buffer present").replace_half(&cur)?;
                Ok(out)
            }
        }
    }

    /// One outer step: `K_g` refiner updates with φ frozen, then `K_d`
    /// discriminator updates with θ frozen.
    pub fn step(&mut self, streams: &Streams) -> Result<&LogRecord> {
        if !self.pretrained {
            return Err(Error::invalid("pretrain before adversarial training"));
        }
        let t = self.step;
        let result = self.step_inner(streams, t);
        if let Err(e) = &result {
            if e.is_numerical() {
                self.aborted_at = Some(t);
            }
        }
        result?;
        Ok(self.log.records.last().expect("record pushed"))
    }

    fn step_inner(&mut self, streams: &Streams, t: usize) -> Result<()> {
        let phi0 = self.discriminator.params.fingerprint();
        let theta0 = self.refiner.params.fingerprint();
        let mut r = None;
        for _ in 0..self.config.k_g {
            r = Some(self.refiner_update(streams, t)?);
            self.refiner_sgd_steps += 1;
        }
        let phi1 = self.discriminator.params.fingerprint();
        let theta1 = self.refiner.params.fingerprint();
        self.audit.push(PhaseAudit {
            step: t,
            phase: Phase::Refiner,
            frozen_before: phi0,
            frozen_after: phi1,
            trained_before: theta0,
            trained_after: theta1,
            sgd_steps: self.config.k_g,
        });
        if phi0 != phi1 {
            return Err(Error::invalid(format!("discriminator changed during refiner updates at step {t}")));
        }

        let mut d = None;
        for _ in 0..self.config.k_d {
            d = Some(self.history_disc_update(streams, t)?);
            self.disc_sgd_steps += 1;
        }
        let phi2 = self.discriminator.params.fingerprint();
        let theta2 = self.refiner.params.fingerprint();
        self.audit.push(PhaseAudit {
            step: t,
            phase: Phase::Discriminator,
            frozen_before: theta1,
            frozen_after: theta2,
            trained_before: phi1,
            trained_after: phi2,
            sgd_steps: self.config.k_d,
        });
        if theta1 != theta2 {
            return Err(Error::invalid(format!("refiner changed during discriminator updates at step {t}")));
        }

        let (r, d) = (r.expect("k_g ≥ 1"), d.expect("k_d ≥ 1"));
        self.log.records.push(LogRecord {
            step: t + 1,
            loss_r: r.total,
            loss_realism: r.realism,
            loss_selfreg: r.self_reg,
            loss_d: d.loss,
            p_fake_refined: d.p_fake_refined,
            p_fake_real: d.p_fake_real,
        });
        self.step = t + 1;
        Ok(())
    }

    /// Runs outer steps until `config.steps` have completed.
    pub fn train(&mut self, streams: &Streams) -> Result<()> {
        self.check_data(streams)?;
        while self.step < self.config.steps {
            self.step(streams)?;
        }
        Ok(())
    }

    /// Pretraining (if not yet done) followed by the adversarial phase.
    pub fn run(&mut self, streams: &Streams) -> Result<()> {
        if !self.pretrained {
            self.pretrain(streams)?;
        }
        self.train(streams)
    }

    /// Writes everything needed to continue this run into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.refiner.save(&dir.join("refiner"))?;
        self.discriminator.save(&dir.join("discriminator"))?;
        let buffer_fingerprint = match &self.buffer {
            Some(buf) => {
                buf.save(&dir.join("buffer"))?;
                Some(format!("{:016x}", fingerprint(buf.slots().iter())))
            }
            None => None,
        };
        self.log.write(&dir.join("log.csv"))?;
        let state = SavedState {
            version: STATE_VERSION,
            step: self.step,
            refiner_sgd_steps: self.refiner_sgd_steps,
            disc_sgd_steps: self.disc_sgd_steps,
            pretrained: self.pretrained,
            rng: RngState::capture(&self.rng),
            data_fingerprint: format!("{:016x}", self.data_fingerprint),
            buffer_fingerprint,
            refiner_fingerprint: format!("{:016x}", self.refiner.params.fingerprint()),
            disc_fingerprint: format!("{:016x}", self.discriminator.params.fingerprint()),
            config: self.config.clone(),
        };
        fs::write(dir.join("state.json"), serde_json::to_vec_pretty(&state)?)?;
        Ok(())
    }

    /// Restores a run saved with [`Trainer::save`]. `config` is the
    /// configuration the caller intends to continue with; anything other
    /// than a different step budget is rejected unless `allow_config_change`.
    pub fn resume(dir: &Path, config: Option<TrainConfig>, streams: &Streams, allow_config_change: bool) -> Result<Self> {
        let spath = dir.join("state.json");
        let state: SavedState =
            serde_json::from_slice(&fs::read(&spath)?).map_err(|e| Error::corrupt(&spath, e.to_string()))?;
        if state.version != STATE_VERSION {
            return Err(Error::Incompatible(format!(
                "training state version {} (expected {STATE_VERSION})",
                state.version
            )));
        }
        let config = match config {
            None => state.config.clone(),
            Some(c) => {
                if !allow_config_change && !c.same_trajectory(&state.config) {
                    return Err(Error::Incompatible(format!(
                        "configuration differs from the checkpoint ({}); pass allow_config_change to override",
                        config_diff(&state.config, &c)
                    )));
                }
                c
            }
        };
        config.validate()?;
        let data = streams.fingerprint();
        if format!("{data:016x}") != state.data_fingerprint {
            return Err(Error::Incompatible("training data differs from the checkpointed run".into()));
        }
        let refiner = Refiner::load(&dir.join("refiner"))?;
        let discriminator = Discriminator::load(&dir.join("discriminator"))?;
        if refiner.arch != config.refiner || discriminator.arch != config.disc_arch() {
            return Err(Error::Incompatible("network architecture differs from the configuration".into()));
        }
        let check = |what: &str, got: u64, want: &str| {
            if format!("{got:016x}") == want {
                Ok(())
            } else {
                Err(Error::corrupt(dir.join(what), "contents do not match the recorded fingerprint"))
            }
        };
        check("refiner", refiner.params.fingerprint(), &state.refiner_fingerprint)?;
        check("discriminator", discriminator.params.fingerprint(), &state.disc_fingerprint)?;
        let buffer = match (&state.buffer_fingerprint, config.no_history) {
            (Some(fp), false) => {
                let buf = ReplayBuffer::load(&dir.join("buffer"))?;
                check("buffer", fingerprint(buf.slots().iter()), fp)?;
                if buf.capacity() != config.capacity() {
                    return Err(Error::Incompatible("buffer capacity differs from the configuration".into()));
                }
                Some(buf)
            }
            (None, true) => None,
            _ => return Err(Error::Incompatible("history setting differs from the checkpoint".into())),
        };
        let log = TrainLog::from_csv(&fs::read(dir.join("log.csv"))?)?;
        if log.records.len() != state.step {
            return Err(Error::corrupt(dir.join("log.csv"), "row count does not match the step counter"));
        }
        Ok(Self {
            rng: state.rng.restore()?,
            data_fingerprint: data,
            config,
            refiner,
            discriminator,
            buffer,
            log,
            audit: Vec::new(),
            step: state.step,
            refiner_sgd_steps: state.refiner_sgd_steps,
            disc_sgd_steps: state.disc_sgd_steps,
            aborted_at: None,
            pretrained: state.pretrained,
        })
    }
}

fn config_diff(a: &TrainConfig, b: &TrainConfig) -> String {
    let (va, vb) = (serde_json::to_value(a), serde_json::to_value(b));
    match (va, vb) {
        (Ok(serde_json::Value::Object(ma)), Ok(serde_json::Value::Object(mb))) => {
            let keys: Vec<String> = ma
                .iter()
                .filter(|(k, v)| k.as_str() != "steps" && mb.get(*k) != Some(v))
                .map(|(k, _)| k.clone())
                .collect();
            format!("changed: {}", keys.join(", "))
        }
        _ => "unknown change".into(),
    }
}

fn check_streams(cfg: &TrainConfig, streams: &Streams) -> Result<()> {
    if streams.synthetic.is_empty() || streams.real.is_empty() {
        return Err(Error::invalid("both synthetic and real streams need at least one image"));
    }
    let shape = streams.synthetic[0].shape().to_vec();
    if shape.len() != 3 || shape[0] != cfg.refiner.input_channels {
        return Err(Error::invalid(format!("training images must be C×H×W, got {shape:?}")));
    }
    if streams.synthetic.iter().chain(streams.real).any(|t| t.shape() != shape) {
        return Err(Error::invalid("all training images must share one shape"));
    }
    cfg.disc_arch().output_size(shape[1], shape[2])?;
    Ok(())
}

struct DiscOutcome {
    loss: f64,
    p_fake_refined: f64,
    p_fake_real: f64,
}

struct RefinerOutcome {
    total: f64,
    realism: f64,
    self_reg: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SavedState {
    version: u32,
    step: usize,
    refiner_sgd_steps: usize,
    disc_sgd_steps: usize,
    pretrained: bool,
    rng: RngState,
    data_fingerprint: String,
    buffer_fingerprint: Option<String>,
    refiner_fingerprint: String,
    disc_fingerprint: String,
    config: TrainConfig,
}
