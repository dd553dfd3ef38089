//! Teacher-forced training with Adam, evaluation, and experiment harnesses.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, RngState};
use crate::data::Sample;
use crate::exec::{map_ordered, Exec};
use crate::metrics::{CorpusScore, MetricsError};
use crate::model::{Model, ModelError};
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Probability that a step's decoder input is the truth token rather
    /// than the previous prediction.
    pub teacher_forcing_rate: f64,
    pub epochs: usize,
    /// Stops after this many steps when nonzero.
    pub max_steps: usize,
    pub seed: u64,
    pub coverage_enabled: bool,
    /// Writes a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_interval: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Fraction of the corpus held out for per-epoch WER.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            teacher_forcing_rate: 0.2,
            epochs: 10,
            max_steps: 0,
            seed: 1,
            coverage_enabled: true,
            checkpoint_interval: 0,
            clip_norm: 100.0,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing_rate) {
            return bad(format!("teacher_forcing_rate {} outside [0, 1]", self.teacher_forcing_rate));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout_fraction {} outside [0, 1)", self.holdout_fraction));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return bad(format!("clip_norm must be >= 0, got {}", self.clip_norm));
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return bad("one of epochs or max_steps must be nonzero".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite loss {loss} at step {step}; largest parameter norms: {}", top_norms(.norms))]
    NonFiniteLoss {
        step: u64,
        loss: f64,
        norms: Vec<(String, f64)>,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn top_norms(norms: &[(String, f64)]) -> String {
    let mut sorted: Vec<_> = norms.iter().collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1));
    sorted
        .iter()
        .take(5)
        .map(|(n, v)| format!("{n}={v:.3e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// One Bernoulli draw: `true` means the truth token is fed.
pub fn teacher_force(rng: &mut ChaCha8Rng, rate: f64) -> bool {
    rng.random_bool(rate)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    /// Decoder inputs after `<sos>` that were truth tokens.
    pub forced: usize,
    /// Decoder inputs after `<sos>`.
    pub choices: usize,
}

/// Splits `n` sample indices into (train, held-out). The held-out part is the
/// last `round(n·fraction)` entries of a seeded permutation, kept in corpus
/// order.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let k = ((n as f64) * fraction).round() as usize;
    let k = if fraction > 0.0 && n > 1 { k.clamp(1, n - 1) } else { 0 };
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    perm.shuffle(&mut rng);
    let mut held = perm.split_off(n - k);
    perm.sort_unstable();
    held.sort_unstable();
    (perm, held)
}

/// Visiting order of `train` during `epoch`.
pub fn epoch_order(train: &[usize], epoch: u64, seed: u64) -> Vec<usize> {
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + epoch);
    order.shuffle(&mut rng);
    order
}

/// Greedy-decodes every sample (fanned out over `exec`, merged in order).
pub fn evaluate(model: &Model, samples: &[Sample], exec: Exec) -> Result<CorpusScore, TrainError> {
    let decoded = map_ordered(exec, samples, |s| model.greedy_decode(&s.image).map(|d| d.tokens));
    let mut items = Vec::with_capacity(samples.len());
    for (s, d) in samples.iter().zip(decoded) {
        items.push((s.id.clone(), d?, s.target.clone()));
    }
    Ok(CorpusScore::compute(&items)?)
}

/// Where `fit` writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct FitOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    /// Resolved configuration text stored in checkpoints.
    pub config_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub step: u64,
    pub mean_loss: f64,
    pub heldout: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
    pub log: Vec<String>,
}

impl FitReport {
    /// Mean step loss of the last completed epoch.
    pub fn final_epoch_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// A model plus optimizer and sampling state.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    step: u64,
    epoch_loss_sum: f64,
}

impl Trainer {
    pub fn new(mut model: Model, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        model.set_coverage(cfg.coverage_enabled);
        let adam = Adam::new(cfg.learning_rate, model.params());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            cfg,
            adam,
            rng,
            step: 0,
            epoch_loss_sum: 0.0,
        })
    }

    /// Restores parameters, optimizer moments, step counter and sampling
    /// state from `ckpt` onto a freshly built `model`.
    pub fn resume(model: Model, cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let mut t = Self::new(model, cfg)?;
        ckpt.restore_params(t.model.params_mut())?;
        let (m, v) = ckpt.moments(t.model.params());
        t.adam.restore(ckpt.step, m, v);
        t.step = ckpt.step;
        t.epoch_loss_sum = ckpt.epoch_loss_sum;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        t.rng = rng;
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self, config_text: &str) -> Checkpoint {
        let (m, v) = self.adam.moments();
        Checkpoint {
            config: config_text.to_string(),
            vocab: self.model.vocab().to_text(),
            step: self.step,
            epoch_loss_sum: self.epoch_loss_sum,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            records: Checkpoint::tensor_records(self.model.params(), m, v),
        }
    }

    /// One teacher-forced update on `sample`: unroll over `target + <eol>`,
    /// mean cross-entropy, backward, clip, Adam, zero gradients.
    pub fn train_step(&mut self, sample: &Sample) -> Result<StepReport, TrainError> {
        let mut target = sample.target.clone();
        target.push(self.model.vocab().eol_id());
        let rate = self.cfg.teacher_forcing_rate;
        let (mut forced, mut choices) = (0, 0);
        let model = &self.model;
        let rng = &mut self.rng;
        let mut g = model.graph();
        let p = model.params().bind(&mut g);
        let prep = model.prepare(&mut g, &p, &sample.image)?;
        let unrolled = model.unroll(&mut g, &p, &prep, &target, |_, truth, pred| {
            choices += 1;
            if teacher_force(rng, rate) {
                forced += 1;
                truth
            } else {
                pred
            }
        })?;
        let loss = g.data(unrolled.loss)[0];
        let step = self.step + 1;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                loss,
                norms: self.model.params().norms(),
            });
        }
        let grads = g.backward(unrolled.loss).map_err(ModelError::from)?;
        let params = self.model.params_mut();
        params.accumulate(&p, &grads).map_err(ModelError::from)?;
        let norm = params.grad_norm();
        if !norm.is_finite() {
            let norms = params.norms();
            params.zero_grads();
            return Err(TrainError::NonFiniteLoss { step, loss: norm, norms });
        }
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            params.scale_grads(self.cfg.clip_norm / norm);
        }
        self.adam.step(params);
        params.zero_grads();
        self.step = step;
        Ok(StepReport { loss, forced, choices })
    }

    /// Trains until `epochs` (or `max_steps`) are done, continuing from the
    /// current step. Per-step and per-epoch lines go to `log` and the report.
    pub fn fit(&mut self, corpus: &[Sample], log: &mut dyn Write, out: &FitOutputs) -> Result<FitReport, TrainError> {
        let (train, held) = holdout_split(corpus.len(), self.cfg.holdout_fraction, self.cfg.seed);
        if train.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let held: Vec<Sample> = held.iter().map(|&i| corpus[i].clone()).collect();
        let per_epoch = train.len() as u64;
        let mut total = self.cfg.epochs as u64 * per_epoch;
        if self.cfg.max_steps > 0 {
            total = if self.cfg.epochs > 0 {
                total.min(self.cfg.max_steps as u64)
            } else {
                self.cfg.max_steps as u64
            };
        }
        let mut report = FitReport {
            step_losses: Vec::new(),
            epochs: Vec::new(),
            log: Vec::new(),
        };
        let mut emit = |line: String, report: &mut FitReport| -> Result<(), TrainError> {
            writeln!(log, "{line}").map_err(|source| TrainError::Io {
                path: PathBuf::from("<log>"),
                source,
            })?;
            report.log.push(line);
            Ok(())
        };
        let mut order = Vec::new();
        let mut order_epoch = u64::MAX;
        while self.step < total {
            let epoch = self.step / per_epoch;
            if epoch != order_epoch {
                order = epoch_order(&train, epoch, self.cfg.seed);
                order_epoch = epoch;
            }
            let idx = order[(self.step % per_epoch) as usize];
            let r = self.train_step(&corpus[idx])?;
            self.epoch_loss_sum += r.loss;
            report.step_losses.push(r.loss);
            emit(format!("step={} loss={:?}", self.step, r.loss), &mut report)?;

            if self.step.is_multiple_of(per_epoch) {
                let summary = EpochSummary {
                    epoch: self.step / per_epoch,
                    step: self.step,
                    mean_loss: self.epoch_loss_sum / per_epoch as f64,
                    heldout: if held.is_empty() {
                        None
                    } else {
                        let s = evaluate(&self.model, &held, self.model.exec())?;
                        Some((s.wer, s.exprate))
                    },
                };
                self.epoch_loss_sum = 0.0;
                let mut line = format!(
                    "epoch={} step={} mean_loss={:?}",
                    summary.epoch, summary.step, summary.mean_loss
                );
                if let Some((wer, exprate)) = summary.heldout {
                    line.push_str(&format!(" heldout_wer={wer:?} heldout_exprate={exprate:?}"));
                }
                emit(line, &mut report)?;
                report.epochs.push(summary);
            }
            if let Some(dir) = &out.checkpoint_dir {
                let interval = self.cfg.checkpoint_interval as u64;
                if interval > 0 && self.step.is_multiple_of(interval) {
                    self.save(dir, &format!("step-{:06}.ckpt", self.step), &out.config_text)?;
                }
            }
        }
        if let Some(dir) = &out.checkpoint_dir {
            self.save(dir, "final.ckpt", &out.config_text)?;
        }
        Ok(report)
    }

    fn save(&self, dir: &Path, name: &str, config_text: &str) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        self.checkpoint(config_text).save(dir.join(name))?;
        Ok(())
    }
}

/// Outcome of one run in a sweep or ablation.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub cfg: TrainConfig,
    pub report: FitReport,
    pub model: Model,
}

/// Trains one fresh copy of `model` per configuration. Runs fan out over
/// `exec` and come back in input order.
pub fn run_many(model: &Model, corpus: &[Sample], cfgs: &[TrainConfig], exec: Exec) -> Result<Vec<RunOutcome>, TrainError> {
    let runs = map_ordered(exec, cfgs, |cfg| {
        let mut trainer = Trainer::new(model.clone(), cfg.clone())?;
        let report = trainer.fit(corpus, &mut std::io::sink(), &FitOutputs::default())?;
        Ok(RunOutcome {
            cfg: cfg.clone(),
            report,
            model: trainer.into_model(),
        })
    });
    runs.into_iter().collect()
}

/// Learning-rate sweep: one run per rate, otherwise identical.
pub fn lr_sweep(model: &Model, corpus: &[Sample], base: &TrainConfig, rates: &[f64], exec: Exec) -> Result<Vec<RunOutcome>, TrainError> {
    let cfgs: Vec<TrainConfig> = rates
        .iter()
        .map(|&learning_rate| TrainConfig {
            learning_rate,
            ..base.clone()
        })
        .collect();
    run_many(model, corpus, &cfgs, exec)
}

/// Coverage ablation: `[with coverage, without coverage]` at equal budgets.
pub fn coverage_ablation(model: &Model, corpus: &[Sample], base: &TrainConfig, exec: Exec) -> Result<[RunOutcome; 2], TrainError> {
    let cfgs = [true, false].map(|coverage_enabled| TrainConfig {
        coverage_enabled,
        ..base.clone()
    });
    let mut runs = run_many(model, corpus, &cfgs, exec)?;
    let off = runs.pop().expect("two runs");
    let on = runs.pop().expect("two runs");
    Ok([on, off])
}
