//! Mixed-supervision training loop.

use std::path::PathBuf;

use diffcore::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::optim::{clip_grad_norm, poly_lr, AdamW};
use crate::error::{Error, Result};
use crate::matching::{
    match_targets, total_loss, LossReport, LossWeights, QueryOutputs, TargetSet,
};
use crate::model::{ModelConfig, PredictionValues, TextFormer};
use crate::synth::{degrade_annotation, read_dataset, SceneSample, SupervisionKind};

const KINDS: [SupervisionKind; 3] = [
    SupervisionKind::Full,
    SupervisionKind::TextOnly,
    SupervisionKind::Weak,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub full_data: Option<PathBuf>,
    pub text_data: Option<PathBuf>,
    pub weak_data: Option<PathBuf>,
    /// Probabilities of drawing a full, text-only or weak sample.
    pub mix_ratios: [f64; 3],
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub max_iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossWeights,
    /// Gradient norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Save a checkpoint every this many iterations; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            full_data: None,
            text_data: None,
            weak_data: None,
            mix_ratios: [1.0, 0.0, 0.0],
            learning_rate: 1e-3,
            weight_decay: 0.05,
            power: 0.9,
            max_iterations: 2000,
            batch_size: 4,
            seed: 0,
            loss: LossWeights::default(),
            grad_clip: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let sum: f64 = self.mix_ratios.iter().sum();
        if self.mix_ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mix ratios {:?} must be non-negative and sum to 1",
                self.mix_ratios
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let finite = [
            self.learning_rate,
            self.weight_decay,
            self.power,
            self.grad_clip,
        ];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(
                "learning rate, weight decay, power and clip must be finite and non-negative"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Training samples per supervision kind.
#[derive(Clone, Debug, Default)]
pub struct Pools {
    pub full: Vec<SceneSample>,
    pub text: Vec<SceneSample>,
    pub weak: Vec<SceneSample>,
}

impl Pools {
    /// Loads the datasets named in `config`; fully annotated records in the
    /// text-only and weak sets are degraded to that level.
    pub fn load(config: &TrainConfig) -> Result<Self> {
        let read = |p: &Option<PathBuf>, kind| -> Result<Vec<SceneSample>> {
            match p {
                None => Ok(Vec::new()),
                Some(dir) => read_dataset(dir)?
                    .into_iter()
                    .map(|s| to_kind(s, kind))
                    .collect(),
            }
        };
        Ok(Self {
            full: read(&config.full_data, SupervisionKind::Full)?,
            text: read(&config.text_data, SupervisionKind::TextOnly)?,
            weak: read(&config.weak_data, SupervisionKind::Weak)?,
        })
    }

    fn get(&self, kind: SupervisionKind) -> &[SceneSample] {
        match kind {
            SupervisionKind::Full => &self.full,
            SupervisionKind::TextOnly => &self.text,
            SupervisionKind::Weak => &self.weak,
        }
    }
}

fn to_kind(sample: SceneSample, kind: SupervisionKind) -> Result<SceneSample> {
    if sample.kind() == kind {
        return Ok(sample);
    }
    if sample.kind() == SupervisionKind::Full {
        let seed = sample.seed;
        return degrade_annotation(&sample, kind, seed);
    }
    Err(Error::Config(format!(
        "a {} sample cannot serve as {} supervision",
        sample.kind().as_str(),
        kind.as_str()
    )))
}

/// One training step's outcome.
#[derive(Clone, Debug)]
pub struct StepLog {
    pub iteration: usize,
    pub lr: f64,
    pub kinds: Vec<SupervisionKind>,
    pub loss: LossReport,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: TextFormer,
    pub params: ParamStore<f32>,
    pub optimizer: AdamW,
    pub iteration: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, params) = TextFormer::new::<f32>(config.model.clone(), config.seed)?;
        let optimizer = AdamW::new(&params, config.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
        Ok(Self {
            config,
            model,
            params,
            optimizer,
            iteration: 0,
            rng,
        })
    }

    pub fn lr(&self) -> f64 {
        poly_lr(
            self.config.learning_rate,
            self.iteration,
            self.config.max_iterations,
            self.config.power,
        )
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.max_iterations
    }

    fn draw_kind(&mut self) -> SupervisionKind {
        let u: f64 = self.rng.gen();
        let mut acc = 0.0;
        for (kind, &r) in KINDS.iter().zip(&self.config.mix_ratios) {
            acc += r;
            if u < acc && r > 0.0 {
                return *kind;
            }
        }
        // Rounding at the top of the range: the last kind with positive weight.
        *KINDS
            .iter()
            .zip(&self.config.mix_ratios)
            .rev()
            .find(|(_, &r)| r > 0.0)
            .expect("ratios sum to one")
            .0
    }

    /// Runs one optimisation step on a freshly drawn batch.
    pub fn step(&mut self, pools: &Pools) -> Result<StepLog> {
        let b = self.config.batch_size;
        let mut picks = Vec::with_capacity(b);
        for _ in 0..b {
            let kind = self.draw_kind();
            let pool = pools.get(kind);
            if pool.is_empty() {
                return Err(Error::EmptyDataset);
            }
            picks.push((kind, self.rng.gen_range(0..pool.len())));
        }

        let mut grads: Vec<Tensor<f32>> = Vec::new();
        let mut report = LossReport::default();
        for &(kind, index) in &picks {
            let sample = &pools.get(kind)[index];
            let (g, r) = self.sample_grads(sample)?;
            if grads.is_empty() {
                grads = g;
            } else {
                for (acc, x) in grads.iter_mut().zip(&g) {
                    acc.data_mut()
                        .iter_mut()
                        .zip(x.data())
                        .for_each(|(a, &v)| *a += v);
                }
            }
            report.total += r.total;
            report.cls += r.cls;
            report.dice += r.dice;
            report.focal += r.focal;
            report.rec += r.rec;
        }
        let inv = 1.0 / b as f64;
        for v in [
            &mut report.total,
            &mut report.cls,
            &mut report.dice,
            &mut report.focal,
            &mut report.rec,
        ] {
            *v *= inv;
        }
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                components: report.to_string(),
            });
        }
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= inv as f32);
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                components: format!("{report}, gradient norm {grad_norm}"),
            });
        }
        let lr = self.lr();
        self.optimizer.step(&mut self.params, &grads, lr);
        let log = StepLog {
            iteration: self.iteration,
            lr,
            kinds: picks.iter().map(|p| p.0).collect(),
            loss: report,
            grad_norm,
        };
        self.iteration += 1;
        Ok(log)
    }

    /// Matches, evaluates the loss and back-propagates for one sample.
    pub fn sample_grads(&self, sample: &SceneSample) -> Result<(Vec<Tensor<f32>>, LossReport)> {
        let model = &self.model;
        let targets = TargetSet::from_sample(sample, &model.charset, model.config.char_queries, 4)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let out = model.forward(&mut g, &p, &sample.image)?;
        let values = PredictionValues {
            class_probs: g.value(out.class_probs).cast(),
            mask_logits: g.value(out.mask_logits).cast(),
            rec_logits: g.value(out.rec_logits).cast(),
        };
        let sigma = match_targets(&targets, &values)?;
        let outputs = QueryOutputs {
            class_logits: out.class_logits,
            mask_logits: out.mask_logits,
            rec_logits: out.rec_logits,
        };
        let (loss, report) = total_loss(&mut g, &outputs, &targets, &sigma, &self.config.loss)?;
        g.backward_scalar(loss)?;
        Ok((self.params.grads(&g, &p), report))
    }

    /// Trains to `max_iterations`, calling `observe` after every step.
    pub fn run(
        &mut self,
        pools: &Pools,
        mut observe: impl FnMut(&Self, &StepLog) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            let log = self.step(pools)?;
            observe(self, &log)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration as u64,
            config: self.config.clone(),
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }
}
