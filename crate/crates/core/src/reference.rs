//! Reference policy training on the size-proportional mixture, with
//! per-domain train/validation tracking and overfit-aware checkpoint
//! selection.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dro::{MixtureWeights, Provenance};
use crate::error::{Error, Result};
use crate::policy::{
    self, Checkpoint, CosineSchedule, OptimizerState, PolicyParams, CHECKPOINT_VERSION, DEFAULT_BATCH_SIZE,
    DEFAULT_HIDDEN, DEFAULT_LEARNING_RATE,
};
use crate::preprocess::PreparedDomain;

pub const DEFAULT_DELTA: f64 = 0.1;
/// State-action pairs per domain in the frozen evaluation subsets.
pub const EVAL_SUBSET: usize = 2048;

/// `alpha_i = size_i / sum(size)`.
pub fn uniform_weights(sizes: &[usize]) -> Result<MixtureWeights> {
    if sizes.is_empty() {
        return Err(Error::invalid("no domains to weight"));
    }
    if sizes.contains(&0) {
        return Err(Error::invalid("domain sizes must be positive"));
    }
    let total: usize = sizes.iter().sum();
    Ok(MixtureWeights {
        alpha: sizes.iter().map(|&s| s as f64 / total as f64).collect(),
        provenance: Provenance::Uniform,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub eval_interval: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Overfit threshold on `val - train` loss, in nats.
    pub delta: f64,
    pub hidden: Vec<usize>,
    pub eval_subset: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 10_000,
            eval_interval: 500,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            delta: DEFAULT_DELTA,
            hidden: DEFAULT_HIDDEN.to_vec(),
            eval_subset: EVAL_SUBSET,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.eval_interval == 0 {
            return Err(Error::invalid("total steps and eval interval must be positive"));
        }
        if self.total_steps % self.eval_interval != 0 {
            return Err(Error::invalid(format!(
                "eval interval {} does not divide total steps {}",
                self.eval_interval, self.total_steps
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::invalid(format!("overfit threshold {} must be positive", self.delta)));
        }
        if self.batch_size == 0 || self.eval_subset == 0 {
            return Err(Error::invalid("batch and evaluation sizes must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Per-domain losses at one evaluation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: u64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

impl CheckpointRecord {
    /// `val - train` per domain.
    pub fn gaps(&self) -> Vec<f64> {
        self.val_loss.iter().zip(&self.train_loss).map(|(v, t)| v - t).collect()
    }
}

/// Where training checkpoints go.
#[derive(Debug)]
pub enum CheckpointStore {
    Memory(BTreeMap<u64, Checkpoint>),
    Directory(PathBuf),
}

impl CheckpointStore {
    pub fn memory() -> Self {
        CheckpointStore::Memory(BTreeMap::new())
    }

    pub fn directory(dir: impl Into<PathBuf>) -> Self {
        CheckpointStore::Directory(dir.into())
    }

    pub fn path_for(dir: &Path, step: u64) -> PathBuf {
        dir.join(format!("step_{step:08}.json"))
    }

    fn save(&mut self, ckpt: Checkpoint) -> Result<Option<PathBuf>> {
        match self {
            CheckpointStore::Memory(map) => {
                map.insert(ckpt.step, ckpt);
                Ok(None)
            }
            CheckpointStore::Directory(dir) => {
                let path = Self::path_for(dir, ckpt.step);
                ckpt.save(&path)?;
                Ok(Some(path))
            }
        }
    }

    pub fn load(&self, step: u64) -> Result<Checkpoint> {
        match self {
            CheckpointStore::Memory(map) => map
                .get(&step)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("no checkpoint at step {step}"))),
            CheckpointStore::Directory(dir) => Checkpoint::load(&Self::path_for(dir, step)),
        }
    }
}

/// Draws `(domain, row)` pairs: the domain from the mixture weights, the
/// row uniformly within it.
#[derive(Debug, Clone)]
pub struct DomainSampler {
    domains: WeightedIndex<f64>,
    sizes: Vec<usize>,
}

impl DomainSampler {
    pub fn new(weights: &MixtureWeights, sizes: &[usize]) -> Result<Self> {
        if weights.len() != sizes.len() {
            return Err(Error::DimensionMismatch {
                context: "sampler weights".into(),
                expected: sizes.len(),
                found: weights.len(),
            });
        }
        let domains = WeightedIndex::new(&weights.alpha).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(DomainSampler {
            domains,
            sizes: sizes.to_vec(),
        })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let d = self.domains.sample(rng);
        (d, rng.random_range(0..self.sizes[d]))
    }
}

/// Fixed rows of one domain used at every evaluation.
#[derive(Debug, Clone)]
struct EvalSubset {
    states: Array2<f64>,
    bins: Array2<usize>,
}

impl EvalSubset {
    fn freeze<R: Rng>(domain: &PreparedDomain, limit: usize, rng: &mut R) -> Self {
        let mut rows = if domain.len() <= limit {
            (0..domain.len()).collect::<Vec<_>>()
        } else {
            index::sample(rng, domain.len(), limit).into_vec()
        };
        rows.sort_unstable();
        EvalSubset {
            states: domain.states.select(Axis(0), &rows),
            bins: domain.bins.select(Axis(0), &rows),
        }
    }

    fn loss(&self, policy: &PolicyParams) -> Result<f64> {
        policy.mean_nll(self.states.view(), self.bins.view())
    }
}

fn check_domains(train: &[PreparedDomain], val: &[PreparedDomain]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::invalid("no training domains"));
    }
    if train.len() != val.len() {
        return Err(Error::invalid(format!(
            "{} training domains but {} validation domains",
            train.len(),
            val.len()
        )));
    }
    for (t, v) in train.iter().zip(val) {
        if t.is_empty() || v.is_empty() {
            return Err(Error::invalid(format!(
                "domain `{}` needs both training and validation data",
                t.name
            )));
        }
    }
    Ok(())
}

/// Trains the reference policy on the size-proportional mixture of `train`.
///
/// Every `eval_interval` steps the per-domain mean NLL on frozen train and
/// validation subsets is recorded and a checkpoint is stored. A numerical
/// failure aborts the run; checkpoints already stored are kept.
pub fn train_reference(
    train: &[PreparedDomain],
    val: &[PreparedDomain],
    config: &TrainConfig,
    fingerprint: &str,
    store: &mut CheckpointStore,
) -> Result<Vec<CheckpointRecord>> {
    config.validate()?;
    check_domains(train, val)?;
    let first = &train[0];
    let (ds, da, nb) = (first.states.ncols(), first.bins.ncols(), first.num_bins);
    let sizes: Vec<usize> = train.iter().map(PreparedDomain::len).collect();
    let sampler = DomainSampler::new(&uniform_weights(&sizes)?, &sizes)?;

    let mut params = policy::init_policy(ds, da, nb, &config.hidden, config.seed)?;
    let mut opt = OptimizerState::new(
        &params,
        CosineSchedule {
            initial: config.learning_rate,
            total_steps: config.total_steps,
        },
    );

    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed);
    eval_rng.set_stream(2);
    let train_eval: Vec<EvalSubset> = train
        .iter()
        .map(|d| EvalSubset::freeze(d, config.eval_subset, &mut eval_rng))
        .collect();
    let val_eval: Vec<EvalSubset> = val
        .iter()
        .map(|d| EvalSubset::freeze(d, config.eval_subset, &mut eval_rng))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut states = Array2::zeros((config.batch_size, ds));
    let mut bins = Array2::zeros((config.batch_size, da));
    let weights = vec![1.0; config.batch_size];
    let mut records = Vec::with_capacity((config.total_steps / config.eval_interval) as usize);

    for step in 1..=config.total_steps {
        for r in 0..config.batch_size {
            let (d, j) = sampler.sample(&mut rng);
            states.row_mut(r).assign(&train[d].states.row(j));
            bins.row_mut(r).assign(&train[d].bins.row(j));
        }
        let (grads, loss) = policy::grad_nll(&params, states.view(), bins.view(), &weights)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("reference training step {step}: non-finite loss")));
        }
        let lr = opt.scheduled_lr();
        policy::adam_step(&mut params, &mut opt, &grads, lr)?;

        if step % config.eval_interval == 0 {
            let train_loss = train_eval.iter().map(|e| e.loss(&params)).collect::<Result<Vec<_>>>()?;
            let val_loss = val_eval.iter().map(|e| e.loss(&params)).collect::<Result<Vec<_>>>()?;
            if train_loss.iter().chain(&val_loss).any(|l| !l.is_finite()) {
                return Err(Error::Numerical(format!(
                    "reference evaluation at step {step}: non-finite loss"
                )));
            }
            let checkpoint = store.save(Checkpoint {
                version: CHECKPOINT_VERSION,
                fingerprint: fingerprint.to_string(),
                step,
                params: params.clone(),
                optimizer: opt.clone(),
            })?;
            log::info!(
                "reference step {step}: mean train {:.4}, mean val {:.4}",
                train_loss.iter().sum::<f64>() / train_loss.len() as f64,
                val_loss.iter().sum::<f64>() / val_loss.len() as f64
            );
            records.push(CheckpointRecord {
                step,
                train_loss,
                val_loss,
                checkpoint,
            });
        }
    }
    Ok(records)
}

/// Latest step at which no domain has yet exceeded the overfit gap `delta`.
///
/// Once any domain's gap exceeds `delta`, that step and all later ones are
/// excluded. If the first record already violates, its step is returned
/// with a warning.
pub fn select_checkpoint(records: &[CheckpointRecord], delta: f64) -> Result<u64> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("no checkpoint records to select from"))?;
    let mut selected = None;
    for record in records {
        if record.gaps().iter().any(|&g| g > delta) {
            break;
        }
        selected = Some(record.step);
    }
    Ok(selected.unwrap_or_else(|| {
        log::warn!(
            "every checkpoint exceeds the overfit threshold {delta}; using the first (step {})",
            first.step
        );
        first.step
    }))
}

/// Step with the lowest weighted mean validation loss.
pub fn min_aggregate_val_step(records: &[CheckpointRecord], weights: &MixtureWeights) -> Option<u64> {
    records
        .iter()
        .map(|r| {
            let agg: f64 = r.val_loss.iter().zip(&weights.alpha).map(|(l, w)| l * w).sum();
            (r.step, agg)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(step, _)| step)
}

/// Long-format `step,domain,train_loss,val_loss`.
pub fn write_records_csv(path: &Path, records: &[CheckpointRecord], names: &[String]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["step", "domain", "train_loss", "val_loss"])
        .map_err(|e| csv_error(path, e))?;
    for r in records {
        for (i, name) in names.iter().enumerate() {
            w.write_record([
                r.step.to_string(),
                name.clone(),
                r.train_loss[i].to_string(),
                r.val_loss[i].to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Writes the policy half of a stored checkpoint as a standalone reference.
pub fn export_reference(store: &CheckpointStore, step: u64, path: &Path) -> Result<Checkpoint> {
    let ckpt = store.load(step)?;
    ckpt.save(path)?;
    Ok(ckpt)
}


/// Reads a file written by [`write_records_csv`]; `names` fixes the domain
/// order and must cover every domain in the file.
pub fn read_records_csv(path: &Path, names: &[String]) -> Result<Vec<CheckpointRecord>> {
    #[derive(Deserialize)]
    struct Row {
        step: u64,
        domain: String,
        train_loss: f64,
        val_loss: f64,
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut by_step: BTreeMap<u64, (Vec<Option<f64>>, Vec<Option<f64>>)> = BTreeMap::new();
    for row in r.deserialize() {
        let row: Row = row.map_err(|e| csv_error(path, e))?;
        let i = names
            .iter()
            .position(|n| *n == row.domain)
            .ok_or_else(|| Error::invalid(format!("{}: unknown domain `{}`", path.display(), row.domain)))?;
        let entry = by_step
            .entry(row.step)
            .or_insert_with(|| (vec![None; names.len()], vec![None; names.len()]));
        entry.0[i] = Some(row.train_loss);
        entry.1[i] = Some(row.val_loss);
    }
    by_step
        .into_iter()
        .map(|(step, (train, val))| {
            let complete = |v: Vec<Option<f64>>| v.into_iter().collect::<Option<Vec<f64>>>();
            match (complete(train), complete(val)) {
                (Some(train_loss), Some(val_loss)) => Ok(CheckpointRecord {
                    step,
                    train_loss,
                    val_loss,
                    checkpoint: None,
                }),
                _ => Err(Error::invalid(format!(
                    "{}: step {step} is missing a domain",
                    path.display()
                ))),
            }
        })
        .collect()
}
