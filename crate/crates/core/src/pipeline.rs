//! End-to-end orchestration: preprocess, reference training, checkpoint
//! selection, DRO, optional subsetting and reporting.
//!
//! Every stage writes its outputs under one directory together with a
//! summary stamped with the preprocessing fingerprint and a stage key. A
//! rerun reuses any stage whose key still matches, and refuses to combine
//! artifacts produced under different preprocessing settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::dataset::{check_domain_ids, load_manifest, split_train_val, Domain, MANIFEST_FILE};
use crate::dro::{run_dro, DroConfig, DroTrace, MixtureWeights, Provenance};
use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_json};
use crate::policy::Checkpoint;
use crate::preprocess::{NormalizationStats, PreparedDomain, PreprocessSettings, Preprocessor};
use crate::reference::{
    read_records_csv, select_checkpoint, train_reference, uniform_weights, write_records_csv, CheckpointRecord,
    CheckpointStore, TrainConfig,
};
use crate::report::{self, export_trace, render_weight_table, write_alpha_trace, write_weights};
use crate::subset::{compute_retention, materialize_subset, write_subset, RetentionReport};

pub const PREPROCESS_FILE: &str = "preprocess.json";
/// Per-domain normalization statistics keyed by domain name.
pub const NORM_STATS_FILE: &str = "norm_stats.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RECORDS_FILE: &str = "records.csv";
pub const REFERENCE_FILE: &str = "reference.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const WEIGHTS_FILE: &str = "weights.json";
pub const ALPHA_TRACE_FILE: &str = "alpha_trace.csv";
pub const RUN_FILE: &str = "run.json";

fn digest(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

fn exists(path: &Path) -> bool {
    path.try_exists().unwrap_or(false)
}

fn fingerprint_guard(found: &str, expected: &str, context: &Path) -> Result<()> {
    if found != expected {
        return Err(Error::HashMismatch {
            context: context.display().to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

/// A loaded dataset split and run through stage one.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub names: Vec<String>,
    pub domains: Vec<Domain>,
    pub preprocessor: Preprocessor,
    pub train: Vec<PreparedDomain>,
    pub val: Vec<PreparedDomain>,
    /// Hash of the manifest bytes, tying stage keys to the input data.
    pub data_hash: String,
}

impl PreparedData {
    pub fn fingerprint(&self) -> String {
        self.preprocessor.fingerprint()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.domains.iter().map(Domain::size).collect()
    }
}

/// What `preprocess.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessArtifact {
    pub fingerprint: String,
    pub data_hash: String,
    pub settings: PreprocessSettings,
    pub names: Vec<String>,
    pub stats: Vec<NormalizationStats>,
}

/// Loads `data`, splits every domain and fits normalization on the
/// training halves.
pub fn prepare_data(data: &Path, settings: &PreprocessSettings) -> Result<PreparedData> {
    let (_, domains) = load_manifest(data)?;
    check_domain_ids(&domains)?;
    let manifest_path = if data.is_dir() { data.join(MANIFEST_FILE) } else { data.to_path_buf() };
    let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let data_hash = hex::encode(Sha256::digest(&bytes));
    let (train, val): (Vec<Domain>, Vec<Domain>) = domains
        .iter()
        .map(|d| split_train_val(d, &settings.split))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let preprocessor = Preprocessor::fit(&train, settings)?;
    Ok(PreparedData {
        names: domains.iter().map(|d| d.name.clone()).collect(),
        train: preprocessor.prepare(&train)?,
        val: preprocessor.prepare(&val)?,
        domains,
        preprocessor,
        data_hash,
    })
}

/// Writes `preprocess.json`, or checks an existing one against `data`.
/// Returns whether the file was already there.
pub fn write_preprocess(dir: &Path, data: &PreparedData) -> Result<bool> {
    let path = dir.join(PREPROCESS_FILE);
    let artifact = PreprocessArtifact {
        fingerprint: data.fingerprint(),
        data_hash: data.data_hash.clone(),
        settings: data.preprocessor.settings.clone(),
        names: data.names.clone(),
        stats: data.preprocessor.stats.clone(),
    };
    if exists(&path) {
        let old: PreprocessArtifact = read_json(&path)?;
        fingerprint_guard(&old.fingerprint, &artifact.fingerprint, &path)?;
        if old == artifact && exists(&dir.join(NORM_STATS_FILE)) {
            return Ok(true);
        }
        log::info!("{}: dataset changed, rewriting", path.display());
    }
    let by_name: serde_json::Map<String, serde_json::Value> = artifact
        .names
        .iter()
        .zip(&artifact.stats)
        .map(|(n, s)| Ok((n.clone(), serde_json::to_value(s).map_err(|e| Error::invalid(e.to_string()))?)))
        .collect::<Result<_>>()?;
    write_json(&dir.join(NORM_STATS_FILE), &by_name)?;
    write_json(&path, &artifact)?;
    Ok(false)
}

/// Finds `preprocess.json` beside a reference checkpoint or one level up.
pub fn find_preprocess(reference: &Path) -> Option<PathBuf> {
    let dir = if reference.is_dir() { reference } else { reference.parent()? };
    [Some(dir), dir.parent()]
        .into_iter()
        .flatten()
        .map(|d| d.join(PREPROCESS_FILE))
        .find(|p| exists(p))
}

pub fn read_preprocess(path: &Path) -> Result<PreprocessArtifact> {
    read_json(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub fingerprint: String,
    pub key: String,
    pub config: TrainConfig,
    pub names: Vec<String>,
    pub selected_step: u64,
    pub final_step: u64,
}

/// Outcome of the reference stage.
#[derive(Debug, Clone)]
pub struct ReferenceOutput {
    pub summary: ReferenceSummary,
    pub records: Vec<CheckpointRecord>,
    pub reference: Checkpoint,
    pub reused: bool,
}

fn reference_key(data: &PreparedData, config: &TrainConfig) -> String {
    digest(&json!({
        "stage": "reference",
        "fingerprint": data.fingerprint(),
        "data": data.data_hash,
        "config": config,
    }))
}

/// Trains and selects the reference policy into `dir`: `preprocess.json`,
/// `records.csv`, `checkpoints/`, `reference.json` (the selected checkpoint)
/// and `summary.json`, written last.
pub fn reference_stage(data: &PreparedData, dir: &Path, config: &TrainConfig) -> Result<ReferenceOutput> {
    write_preprocess(dir, data)?;
    let fingerprint = data.fingerprint();
    let key = reference_key(data, config);
    let summary_path = dir.join(SUMMARY_FILE);
    if exists(&summary_path) {
        let summary: ReferenceSummary = read_json(&summary_path)?;
        fingerprint_guard(&summary.fingerprint, &fingerprint, &summary_path)?;
        if summary.key == key {
            let reference = Checkpoint::load(&dir.join(REFERENCE_FILE))?;
            reference.require_fingerprint(&fingerprint, "reference checkpoint")?;
            let records = read_records_csv(&dir.join(RECORDS_FILE), &summary.names)?;
            log::info!("reusing reference training in {}", dir.display());
            return Ok(ReferenceOutput {
                summary,
                records,
                reference,
                reused: true,
            });
        }
        fs::remove_file(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    }

    let mut store = CheckpointStore::directory(dir.join(CHECKPOINT_DIR));
    let records = train_reference(&data.train, &data.val, config, &fingerprint, &mut store)?;
    write_records_csv(&dir.join(RECORDS_FILE), &records, &data.names)?;
    let selected_step = select_checkpoint(&records, config.delta)?;
    let reference = store.load(selected_step)?;
    reference.save(&dir.join(REFERENCE_FILE))?;
    let summary = ReferenceSummary {
        fingerprint,
        key,
        config: config.clone(),
        names: data.names.clone(),
        selected_step,
        final_step: records.last().map_or(0, |r| r.step),
    };
    write_json(&summary_path, &summary)?;
    Ok(ReferenceOutput {
        summary,
        records,
        reference,
        reused: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroSummary {
    pub fingerprint: String,
    pub key: String,
    pub config: DroConfig,
    pub reference_step: u64,
    pub names: Vec<String>,
    pub weights: MixtureWeights,
}

#[derive(Debug, Clone)]
pub struct DroOutput {
    pub summary: DroSummary,
    pub trace: DroTrace,
    pub reused: bool,
}

fn dro_key(data: &PreparedData, reference: &Checkpoint, config: &DroConfig) -> String {
    digest(&json!({
        "stage": "dro",
        "fingerprint": data.fingerprint(),
        "data": data.data_hash,
        "reference_step": reference.step,
        "reference": digest(&serde_json::to_value(&reference.params).expect("params serialize")),
        "config": config,
    }))
}

/// Runs DRO against `reference` into `dir`: `weights.json`,
/// `alpha_trace.csv` and `summary.json`. On a numerical failure the partial
/// trace is still written.
pub fn dro_stage(data: &PreparedData, reference: &Checkpoint, dir: &Path, config: &DroConfig) -> Result<DroOutput> {
    let fingerprint = data.fingerprint();
    reference.require_fingerprint(&fingerprint, "reference checkpoint")?;
    let key = dro_key(data, reference, config);
    let summary_path = dir.join(SUMMARY_FILE);
    if exists(&summary_path) {
        let summary: DroSummary = read_json(&summary_path)?;
        fingerprint_guard(&summary.fingerprint, &fingerprint, &summary_path)?;
        if summary.key == key {
            let trace = report::read_alpha_trace(&dir.join(ALPHA_TRACE_FILE), &summary.names)?;
            log::info!("reusing DRO run in {}", dir.display());
            return Ok(DroOutput {
                summary,
                trace,
                reused: true,
            });
        }
        fs::remove_file(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    }

    let mut trace = DroTrace::new();
    let result = run_dro(&data.train, &reference.params, config, &mut trace);
    if !trace.is_empty() {
        write_alpha_trace(&dir.join(ALPHA_TRACE_FILE), &data.names, &trace)?;
    }
    let weights = result?;
    write_weights(&dir.join(WEIGHTS_FILE), &data.names, &weights)?;
    let summary = DroSummary {
        fingerprint,
        key,
        config: config.clone(),
        reference_step: reference.step,
        names: data.names.clone(),
        weights,
    };
    write_json(&summary_path, &summary)?;
    Ok(DroOutput {
        summary,
        trace,
        reused: false,
    })
}

/// Plans and writes the subset of `domains` into `dir`.
pub fn subset_stage(
    domains: &[Domain],
    names: &[String],
    weights: &MixtureWeights,
    fraction: f64,
    seed: u64,
    fingerprint: Option<String>,
    dir: &Path,
) -> Result<RetentionReport> {
    let sizes: Vec<usize> = domains.iter().map(Domain::size).collect();
    let plan = compute_retention(&sizes, &weights.alpha, fraction)?;
    let subset = materialize_subset(domains, &plan, seed)?;
    let report = RetentionReport::new(&plan, names, &weights.alpha, fraction, seed, fingerprint);
    write_subset(dir, &subset, &report)?;
    Ok(report)
}

/// Everything `mixopt run` needs. Relative paths are resolved against the
/// directory of the config file by [`PipelineConfig::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    /// Seeds the split, reference training, DRO and subsetting; it replaces
    /// any seed given in the nested sections.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub preprocess: PreprocessSettings,
    #[serde(default)]
    pub train: TrainConfig,
    /// `total_steps` here is ignored; see `dro_steps`.
    #[serde(default)]
    pub dro: DroConfig,
    /// DRO step budget; defaults to the selected reference step.
    #[serde(default)]
    pub dro_steps: Option<u64>,
    #[serde(default)]
    pub subset_fraction: Option<f64>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut config: PipelineConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if config.data.is_relative() {
            config.data = base.join(&config.data);
        }
        if config.out.is_relative() {
            config.out = base.join(&config.out);
        }
        Ok(config)
    }

    /// Copies the top-level seed into every section.
    pub fn resolved(&self) -> PipelineConfig {
        let mut c = self.clone();
        c.preprocess.split.seed = c.seed;
        c.train.seed = c.seed;
        c.dro.seed = c.seed;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Computed,
    Reused,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub preprocess: StageStatus,
    pub reference: StageStatus,
    pub dro: StageStatus,
    pub subset: StageStatus,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub fingerprint: String,
    pub config: PipelineConfig,
    pub selected_reference_step: u64,
    pub dro_steps: u64,
    pub weights: serde_json::Value,
    pub stages: StageLog,
}

/// Runs every stage under `config.out`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunSummary> {
    let config = config.resolved();
    let out = &config.out;
    let data = prepare_data(&config.data, &config.preprocess)?;
    let fingerprint = data.fingerprint();
    log::info!("preprocessing fingerprint {fingerprint}");

    let ref_dir = out.join("reference");
    let preprocess_reused = exists(&ref_dir.join(PREPROCESS_FILE));
    let reference = reference_stage(&data, &ref_dir, &config.train)?;
    let selected = reference.summary.selected_step;
    log::info!("selected reference step {selected}");

    let mut dro_config = config.dro.clone();
    dro_config.total_steps = config.dro_steps.unwrap_or(selected);
    let dro = dro_stage(&data, &reference.reference, &out.join("dro"), &dro_config)?;
    let weights = dro.summary.weights.clone();
    write_weights(&out.join(WEIGHTS_FILE), &data.names, &weights)?;

    let subset_status = match config.subset_fraction {
        Some(fraction) => {
            subset_stage(
                &data.domains,
                &data.names,
                &weights,
                fraction,
                config.seed,
                Some(fingerprint.clone()),
                &out.join("subset"),
            )?;
            StageStatus::Computed
        }
        None => StageStatus::Skipped,
    };

    let uniform = uniform_weights(&data.sizes())?;
    let table = render_weight_table(
        &[("uniform".to_string(), uniform), ("dro".to_string(), weights.clone())],
        &data.names,
    )?;
    let report_dir = out.join("report");
    table.write(&report_dir)?;
    export_trace(&report_dir, &data.names, &dro.trace, &reference.records)?;

    let status = |reused: bool| if reused { StageStatus::Reused } else { StageStatus::Computed };
    let summary = RunSummary {
        fingerprint,
        config: config.clone(),
        selected_reference_step: selected,
        dro_steps: dro_config.total_steps,
        weights: report::weights_json(&data.names, &weights)?,
        stages: StageLog {
            preprocess: status(preprocess_reused),
            reference: status(reference.reused),
            dro: status(dro.reused),
            subset: subset_status,
        },
    };
    write_json(&out.join(RUN_FILE), &summary)?;
    Ok(summary)
}

/// Weights from a `{name: alpha}` file, reordered to `names`.
pub fn weights_for(path: &Path, names: &[String]) -> Result<MixtureWeights> {
    let (file_names, weights) = report::read_weights(path, Provenance::DroAveraged)?;
    if file_names.len() != names.len() {
        return Err(Error::DimensionMismatch {
            context: format!("domains in {}", path.display()),
            expected: names.len(),
            found: file_names.len(),
        });
    }
    let alpha = names
        .iter()
        .map(|n| {
            file_names
                .iter()
                .position(|f| f == n)
                .map(|i| weights.alpha[i])
                .ok_or_else(|| Error::invalid(format!("{} has no weight for domain `{n}`", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    MixtureWeights::from_unnormalized(alpha, weights.provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_suite, write_dataset, SuiteSizes, SyntheticKind};

    fn dataset(dir: &Path) {
        let sizes = SuiteSizes { trajectories: 8, steps: 10, state_dim: 3, action_dim: 2 };
        let domains = generate_synthetic_suite(SyntheticKind::NoisePair, 1, &sizes).unwrap();
        write_dataset(dir, &domains).unwrap();
    }

    fn config(root: &Path) -> PipelineConfig {
        PipelineConfig {
            data: root.join("data"),
            out: root.join("out"),
            seed: 2,
            preprocess: PreprocessSettings { bins: 16, ..PreprocessSettings::default() },
            train: TrainConfig {
                total_steps: 20,
                eval_interval: 10,
                batch_size: 32,
                hidden: vec![8],
                eval_subset: 64,
                delta: 10.0,
                ..TrainConfig::default()
            },
            dro: DroConfig { per_domain_batch: 8, ..DroConfig::default() },
            dro_steps: None,
            subset_fraction: Some(0.5),
        }
    }

    #[test]
    fn rerun_reuses_every_stage() {
        let root = tempfile::tempdir().unwrap();
        dataset(&root.path().join("data"));
        let cfg = config(root.path());
        let first = run_pipeline(&cfg).unwrap();
        assert_eq!(first.stages.reference, StageStatus::Computed);
        assert_eq!(first.dro_steps, first.selected_reference_step);
        let weights = fs::read(cfg.out.join(WEIGHTS_FILE)).unwrap();
        let second = run_pipeline(&cfg).unwrap();
        assert_eq!(second.stages.preprocess, StageStatus::Reused);
        assert_eq!(second.stages.reference, StageStatus::Reused);
        assert_eq!(second.stages.dro, StageStatus::Reused);
        assert_eq!(fs::read(cfg.out.join(WEIGHTS_FILE)).unwrap(), weights);
    }

    #[test]
    fn changed_settings_are_refused() {
        let root = tempfile::tempdir().unwrap();
        dataset(&root.path().join("data"));
        let mut cfg = config(root.path());
        run_pipeline(&cfg).unwrap();
        cfg.preprocess.bins = 32;
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(matches!(err, Error::HashMismatch { .. }), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn changed_dro_settings_rerun_only_dro() {
        let root = tempfile::tempdir().unwrap();
        dataset(&root.path().join("data"));
        let mut cfg = config(root.path());
        run_pipeline(&cfg).unwrap();
        cfg.dro_steps = Some(7);
        let again = run_pipeline(&cfg).unwrap();
        assert_eq!(again.stages.reference, StageStatus::Reused);
        assert_eq!(again.stages.dro, StageStatus::Computed);
        assert_eq!(again.dro_steps, 7);
    }

    #[test]
    fn config_paths_resolve_against_the_file() {
        let root = tempfile::tempdir().unwrap();
        let path = root.path().join("pipeline.json");
        fs::write(&path, r#"{"data": "d", "out": "o", "seed": 4, "train": {"total_steps": 100}}"#).unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.data, root.path().join("d"));
        assert_eq!(cfg.train.total_steps, 100);
        assert_eq!(cfg.train.eval_interval, TrainConfig::default().eval_interval);
        let resolved = cfg.resolved();
        assert_eq!((resolved.train.seed, resolved.dro.seed, resolved.preprocess.split.seed), (4, 4, 4));
    }

    #[test]
    fn weights_are_matched_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        fs::write(&path, r#"{"b": 0.25, "a": 0.75}"#).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        assert_eq!(weights_for(&path, &names).unwrap().alpha, vec![0.75, 0.25]);
        assert!(weights_for(&path, &["a".to_string(), "c".to_string()]).is_err());
    }
}
