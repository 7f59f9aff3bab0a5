//! End-to-end pipeline: generate data, train the refiner, then measure
//! annotation drift, realism and the downstream gain.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::{
    annotation_drift, eval_predictor, probe_realism, refine_dataset, train_predictor, DriftReport, EvalReport,
    PredictorConfig, ProbeConfig,
};
use crate::nets::Refiner;
use crate::tensor::Tensor;
use crate::toyworld::{realize, realize_with_truth, simulate, AnnotatedImage, HeldOutTruth, WorldConfig};
use crate::trainer::{Streams, TrainConfig, TrainLog, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub world: WorldConfig,
    pub n_synthetic: usize,
    pub n_real: usize,
    pub n_test: usize,
    pub n_drift: usize,
    pub data_seed: u64,
    pub predictor: PredictorConfig,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            world: WorldConfig::default(),
            n_synthetic: 2000,
            n_real: 2000,
            n_test: 500,
            n_drift: 100,
            data_seed: 0,
            predictor: PredictorConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

/// Every split an experiment needs. Splits use disjoint seeds.
pub struct ExperimentData {
    pub synthetic: Vec<AnnotatedImage>,
    pub real: Vec<AnnotatedImage>,
    pub test: Vec<AnnotatedImage>,
    pub test_truth: HeldOutTruth,
    pub drift: Vec<AnnotatedImage>,
}

impl ExperimentData {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let s = cfg.data_seed.wrapping_mul(4);
        let (test, test_truth) = realize_with_truth(&cfg.world, cfg.n_test, s + 2)?;
        Ok(Self {
            synthetic: simulate(&cfg.world, cfg.n_synthetic, s)?,
            real: realize(&cfg.world, cfg.n_real, s + 1)?,
            test,
            test_truth,
            drift: simulate(&cfg.world, cfg.n_drift, s + 3)?,
        })
    }

    pub fn synthetic_pixels(&self) -> Vec<Tensor> {
        self.synthetic.iter().map(|i| i.pixels().clone()).collect()
    }

    pub fn real_pixels(&self) -> Vec<Tensor> {
        self.real.iter().map(|i| i.pixels().clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub drift: DriftReport,
    /// Predictor trained on raw synthetic images, scored on the real test split.
    pub baseline: EvalReport,
    /// Predictor trained on refined images, scored on the real test split.
    pub refined: EvalReport,
    /// Probe P_fake on images from the refiner as it left pretraining.
    pub realism_before: f64,
    /// Probe P_fake on images from the final refiner.
    pub realism_after: f64,
    #[serde(skip)]
    pub log: TrainLog,
}

impl ExperimentReport {
    pub fn downstream_gain_px(&self) -> f64 {
        self.baseline.mean_px - self.refined.mean_px
    }
}

/// Predictor trained on the raw synthetic split and scored on the real test
/// split. Independent of the refiner.
pub fn baseline_eval(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<EvalReport> {
    let (pred, _) = train_predictor(&data.synthetic, &cfg.predictor)?;
    eval_predictor(&pred, &data.test, &data.test_truth)
}

/// Trained refiner plus the refiner snapshot taken right after pretraining.
pub struct TrainedRefiner {
    pub pretrained: Refiner,
    pub trained: Refiner,
    pub log: TrainLog,
}

pub fn train_refiner(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<TrainedRefiner> {
    let (syn, real) = (data.synthetic_pixels(), data.real_pixels());
    let streams = Streams {
        synthetic: &syn,
        real: &real,
    };
    let mut trainer = Trainer::new(cfg.train.clone(), &streams)?;
    trainer.pretrain(&streams)?;
    let pretrained = trainer.refiner.clone();
    trainer.train(&streams)?;
    Ok(TrainedRefiner {
        pretrained,
        trained: trainer.refiner,
        log: trainer.log,
    })
}

/// Scores a trained refiner. `baseline` may be passed in when it has already
/// been computed for the same data and predictor settings.
pub fn evaluate_refiner(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    run: &TrainedRefiner,
    baseline: Option<EvalReport>,
) -> Result<ExperimentReport> {
    let drift = annotation_drift(&run.trained, &data.drift)?;
    let refined_set = refine_dataset(&run.trained, &data.synthetic)?;
    let (pred, _) = train_predictor(&refined_set, &cfg.predictor)?;
    let refined = eval_predictor(&pred, &data.test, &data.test_truth)?;
    let baseline = match baseline {
        Some(b) => b,
        None => baseline_eval(cfg, data)?,
    };

    let real = data.real_pixels();
    let (probe_train, probe_eval) = data.synthetic.split_at(data.synthetic.len() / 2);
    let realism = |r: &Refiner| -> Result<f64> {
        let train: Vec<Tensor> = refine_dataset(r, probe_train)?.iter().map(|i| i.pixels().clone()).collect();
        let eval: Vec<Tensor> = refine_dataset(r, probe_eval)?.iter().map(|i| i.pixels().clone()).collect();
        probe_realism(&train, &real, &eval, &cfg.probe)
    };
    Ok(ExperimentReport {
        drift,
        baseline,
        refined,
        realism_before: realism(&run.pretrained)?,
        realism_after: realism(&run.trained)?,
        log: run.log.clone(),
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let data = ExperimentData::generate(cfg)?;
    let run = train_refiner(cfg, &data)?;
    evaluate_refiner(cfg, &data, &run, None)
}
