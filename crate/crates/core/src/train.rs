//! Mini-batch Adam training with early stopping on a validation criterion.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::{loss_graph, Batch, LossBreakdown};
use crate::model::Model;
use crate::rng::stream;
use crate::tensor::{AdamConfig, Tape};

/// Quantity maximized on the validation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCriterion {
    /// The ELBO without its pitch-KL term.
    #[default]
    ElboWithoutPitchKl,
    FullElbo,
}

impl StopCriterion {
    pub fn of(self, b: &LossBreakdown) -> f64 {
        match self {
            Self::ElboWithoutPitchKl => b.elbo_without_pitch_kl(),
            Self::FullElbo => b.elbo(),
        }
    }
}

impl std::str::FromStr for StopCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elbo_without_pitch_kl" => Ok(Self::ElboWithoutPitchKl),
            "full_elbo" => Ok(Self::FullElbo),
            _ => Err(Error::Config(format!("unknown stop criterion '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Capped at the training-split size.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without improvement tolerated before stopping.
    pub patience: usize,
    /// Latent samples per example for the Monte-Carlo terms.
    pub mc_samples: usize,
    pub seed: u64,
    /// Optional cap on optimizer steps.
    pub max_steps: Option<u64>,
    pub criterion: StopCriterion,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: batch 128, learning rate 1e-4, patience 50,
    /// at most 2000 epochs.
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 128,
            learning_rate: adam.lr,
            max_epochs: 2000,
            patience: 50,
            mc_samples: 1,
            seed: 0,
            max_steps: None,
            criterion: StopCriterion::default(),
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
        }
    }
}

impl TrainConfig {
    /// Patience of 1000 epochs, otherwise as [`TrainConfig::default`].
    pub fn paper() -> Self {
        Self {
            patience: 1000,
            max_epochs: usize::MAX,
            ..Self::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.mc_samples == 0 {
            return Err(Error::Config(
                "batch size, epoch count and sample count must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.adam_eps > 0.0) {
            return Err(Error::Config("learning rate and epsilon must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: u64,
    /// Training terms averaged over the epoch's batches.
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub criterion: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_criterion: f64,
}

impl TrainReport {
    /// Tab-separated log with a header row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tsteps");
        for f in LossBreakdown::FIELDS {
            s.push('\t');
            s.push_str(f);
        }
        s.push_str("\tval_criterion\n");
        for e in &self.epochs {
            let _ = write!(s, "{}\t{}", e.epoch, e.steps);
            for v in e.train.values() {
                let _ = write!(s, "\t{v}");
            }
            let _ = writeln!(s, "\t{}", e.criterion);
        }
        s
    }
}

const SHUFFLE_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;
const VALIDATION_STREAM: u64 = 2;

fn check_compatible(ds: &Dataset, model: &Model) -> Result<()> {
    let c = model.config();
    if c.n_mel != ds.n_mel
        || c.n_frames != ds.n_frames
        || c.latent.n_pitch != ds.n_pitch()
        || c.latent.n_timbre != ds.n_timbre()
    {
        return Err(Error::Config(format!(
            "model expects {}x{} inputs with {} pitches and {} timbres; data has {}x{}, {} and {}",
            c.n_mel,
            c.n_frames,
            c.latent.n_pitch,
            c.latent.n_timbre,
            ds.n_mel,
            ds.n_frames,
            ds.n_pitch(),
            ds.n_timbre()
        )));
    }
    Ok(())
}

/// Batch-averaged loss terms over `idx`, evaluated in chunks of `chunk` with
/// one latent sample per example drawn from `rng`.
pub fn evaluate<R: Rng + ?Sized>(
    model: &Model,
    ds: &Dataset,
    idx: &[usize],
    chunk: usize,
    mc_samples: usize,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    for part in idx.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let g = loss_graph(model, &mut tape, &ds.batch(part), mc_samples, rng)?;
        acc.accumulate(&g.breakdown, part.len() as f64 / idx.len() as f64);
    }
    Ok(acc)
}

/// One optimizer step on `batch`; returns the batch's loss terms.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Model,
    batch: &Batch,
    mc_samples: usize,
    adam: &AdamConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let g = loss_graph(model, &mut tape, batch, mc_samples, rng)?;
    let params = model.params_mut();
    params.zero_grad();
    tape.backward(g.total, params)?;
    params.adam_step(adam)?;
    Ok(g.breakdown)
}

/// Trains `model` in place and leaves it holding the parameters of the best
/// validation epoch. Stops once `patience` consecutive epochs fail to improve
/// the criterion, at `max_epochs`, or at `max_steps`.
pub fn train(ds: &Dataset, cfg: &TrainConfig, model: &mut Model) -> Result<TrainReport> {
    cfg.validate()?;
    check_compatible(ds, model)?;
    let train_idx = ds.indices(Split::Train);
    let val_idx = ds.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config("training and validation splits must be nonempty".into()));
    }
    let batch_size = cfg.batch_size.min(train_idx.len());
    let adam = cfg.adam();
    let mut shuffle = stream(cfg.seed, SHUFFLE_STREAM);
    let mut noise = stream(cfg.seed, NOISE_STREAM);
    let mut order = train_idx;
    let mut best = model.params().clone();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_criterion: f64::NEG_INFINITY,
    };
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle.random_range(0..=i));
        }
        let mut train_acc = LossBreakdown::default();
        let mut seen = 0usize;
        let mut out_of_steps = false;
        for part in order.chunks(batch_size) {
            let b = train_step(model, &ds.batch(part), cfg.mc_samples, &adam, &mut noise)?;
            train_acc.accumulate(&b, part.len() as f64);
            seen += part.len();
            if cfg.max_steps.is_some_and(|m| model.params().step_count() >= m) {
                out_of_steps = true;
                break;
            }
        }
        let mut train_mean = LossBreakdown::default();
        train_mean.accumulate(&train_acc, 1.0 / seen as f64);
        let val = evaluate(
            model,
            ds,
            &val_idx,
            batch_size,
            cfg.mc_samples,
            &mut stream(cfg.seed, VALIDATION_STREAM),
        )?;
        let criterion = cfg.criterion.of(&val);
        report.epochs.push(EpochLog {
            epoch,
            steps: model.params().step_count(),
            train: train_mean,
            val,
            criterion,
        });
        if criterion > report.best_criterion {
            report.best_criterion = criterion;
            report.best_epoch = epoch;
            best.copy_values_from(model.params())?;
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
        if out_of_steps {
            break;
        }
    }
    model.params_mut().copy_values_from(&best)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_corpus, CorpusConfig, FeatureConfig};
    use crate::model::{DecoderInput, Geometry, LatentConfig, ModelConfig};
    use crate::rng::seeded;

    fn corpus() -> Dataset {
        let cfg = CorpusConfig {
            family_names: vec!["a".into(), "b".into()],
            family_sizes: vec![2, 1],
            instrument_names: vec!["a/x".into(), "a/y".into(), "b/z".into()],
            pitches: vec![57, 60, 64, 69, 72, 76],
            variations: 1,
            val_fraction: 0.2,
            test_fraction: 0.2,
            features: FeatureConfig {
                n_mel: 8,
                n_frames: 3,
                ..FeatureConfig::desk()
            },
        };
        build_corpus(&cfg, 1).unwrap()
    }

    fn model(ds: &Dataset, seed: u64) -> Model {
        let cfg = ModelConfig {
            latent: LatentConfig {
                dp: 2,
                dt: 2,
                geometry: Geometry::Hyperbolic,
                radius: 1.0,
                n_pitch: ds.n_pitch(),
                n_timbre: ds.n_timbre(),
            },
            n_mel: ds.n_mel,
            n_frames: ds.n_frames,
            hidden: vec![8],
            decoder_input: DecoderInput::Ambient,
        };
        Model::new(cfg, &mut seeded(seed)).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            learning_rate: 1e-3,
            max_epochs: 6,
            patience: 100,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fixed_seed_gives_identical_logs() {
        let ds = corpus();
        let mut a = model(&ds, 2);
        let mut b = model(&ds, 2);
        let ra = train(&ds, &quick(), &mut a).unwrap();
        let rb = train(&ds, &quick(), &mut b).unwrap();
        assert_eq!(ra.to_tsv(), rb.to_tsv());
        assert_eq!(ra.epochs.len(), 6);
        let header = ra.to_tsv().lines().next().unwrap().to_string();
        assert!(header.starts_with("epoch\tsteps\trecon"));
        assert!(header.ends_with("val_criterion"));
    }

    #[test]
    fn returns_best_epoch_parameters() {
        let ds = corpus();
        let mut m = model(&ds, 2);
        let cfg = quick();
        let report = train(&ds, &cfg, &mut m).unwrap();
        let best = report
            .epochs
            .iter()
            .map(|e| e.criterion)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best, report.best_criterion);
        let val = evaluate(
            &m,
            &ds,
            &ds.indices(Split::Val),
            cfg.batch_size,
            1,
            &mut stream(cfg.seed, VALIDATION_STREAM),
        )
        .unwrap();
        assert_eq!(cfg.criterion.of(&val), report.best_criterion);
    }

    #[test]
    fn zero_patience_stops_after_first_non_improving_epoch() {
        let ds = corpus();
        let mut m = model(&ds, 2);
        let cfg = TrainConfig {
            patience: 0,
            max_epochs: 200,
            learning_rate: 0.3,
            ..quick()
        };
        let r = train(&ds, &cfg, &mut m).unwrap();
        let n = r.epochs.len();
        assert!(n < 200);
        let prior_best = r.epochs[..n - 1]
            .iter()
            .map(|e| e.criterion)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(r.epochs[n - 1].criterion <= prior_best);
        for k in 1..n - 1 {
            let before = r.epochs[..k].iter().map(|e| e.criterion).fold(f64::NEG_INFINITY, f64::max);
            assert!(r.epochs[k].criterion > before);
        }
    }

    #[test]
    fn max_steps_caps_training() {
        let ds = corpus();
        let mut m = model(&ds, 2);
        let cfg = TrainConfig {
            max_steps: Some(5),
            ..quick()
        };
        let r = train(&ds, &cfg, &mut m).unwrap();
        assert_eq!(r.epochs.last().unwrap().steps, 5);
    }

    #[test]
    fn incompatible_or_empty_inputs_are_config_errors() {
        let ds = corpus();
        let mut m = model(&ds, 2);
        let mut no_val = ds.clone();
        no_val.examples.iter_mut().for_each(|e| {
            if e.split == Split::Val {
                e.split = Split::Train;
            }
        });
        assert!(matches!(train(&no_val, &quick(), &mut m), Err(Error::Config(_))));
        let mut fewer = ds.clone();
        fewer.pitch_names.pop();
        assert!(matches!(train(&fewer, &quick(), &mut m), Err(Error::Config(_))));
    }
}
