//! Per-domain action normalization and uniform action binning.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Domain, SplitSpec};
use crate::error::{Error, Result};
use crate::fsutil;

/// Lower clamp applied to fitted standard deviations.
pub const STD_EPSILON: f64 = 1e-8;
pub const DEFAULT_BINS: usize = 256;
pub const DEFAULT_RANGE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Gaussian,
    Bounds,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Gaussian => "gaussian",
            Scheme::Bounds => "bounds",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Scheme::Gaussian),
            "bounds" => Ok(Scheme::Bounds),
            other => Err(Error::invalid(format!("unknown normalization scheme `{other}`"))),
        }
    }
}

/// Per-dimension action statistics of one domain.
///
/// Both moment and range statistics are recorded; `scheme` selects which
/// pair `apply` uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub scheme: Scheme,
    pub domain_id: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn fit_normalizer(domain: &Domain, scheme: Scheme) -> NormalizationStats {
    let da = domain.action_dim();
    let n = domain.size() as f64;
    let mut mean = vec![0.0; da];
    let mut min = vec![f64::INFINITY; da];
    let mut max = vec![f64::NEG_INFINITY; da];
    for a in domain.actions() {
        for j in 0..da {
            mean[j] += a[j];
            min[j] = min[j].min(a[j]);
            max[j] = max[j].max(a[j]);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    // Second pass keeps the variance free of cancellation.
    let mut var = vec![0.0; da];
    for a in domain.actions() {
        for j in 0..da {
            var[j] += (a[j] - mean[j]).powi(2);
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt().max(STD_EPSILON)).collect();
    NormalizationStats {
        scheme,
        domain_id: domain.id,
        mean,
        std,
        min,
        max,
    }
}

impl NormalizationStats {
    pub fn action_dim(&self) -> usize {
        self.mean.len()
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.action_dim() {
            return Err(Error::DimensionMismatch {
                context: "action normalization".into(),
                expected: self.action_dim(),
                found: len,
            });
        }
        Ok(())
    }

    pub fn apply(&self, action: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(action.len())?;
        Ok(action
            .iter()
            .enumerate()
            .map(|(j, &a)| match self.scheme {
                Scheme::Gaussian => (a - self.mean[j]) / self.std[j],
                Scheme::Bounds => {
                    let span = self.max[j] - self.min[j];
                    if span > 0.0 {
                        2.0 * (a - self.min[j]) / span - 1.0
                    } else {
                        0.0
                    }
                }
            })
            .collect())
    }

    /// Inverse of [`apply`](Self::apply). Degenerate bounds dimensions map back to their constant.
    pub fn invert(&self, normalized: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(normalized.len())?;
        Ok(normalized
            .iter()
            .enumerate()
            .map(|(j, &x)| match self.scheme {
                Scheme::Gaussian => x * self.std[j] + self.mean[j],
                Scheme::Bounds => {
                    let span = self.max[j] - self.min[j];
                    if span > 0.0 {
                        (x + 1.0) * 0.5 * span + self.min[j]
                    } else {
                        self.min[j]
                    }
                }
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        fsutil::read_json(path)
    }
}

/// Uniform bins over `[-range, range)`, shared by every action dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discretizer {
    bins: usize,
    range: f64,
    edges: Vec<f64>,
}

pub fn fit_discretizer(bins: usize, range: f64) -> Result<Discretizer> {
    if bins < 2 {
        return Err(Error::invalid(format!("bin count {bins} must be at least 2")));
    }
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::invalid(format!("bin range {range} must be positive and finite")));
    }
    let width = 2.0 * range;
    let mut edges: Vec<f64> = (0..=bins)
        .map(|b| -range + width * b as f64 / bins as f64)
        .collect();
    edges[bins] = range;
    Ok(Discretizer { bins, range, edges })
}

impl Discretizer {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn bin_width(&self) -> f64 {
        2.0 * self.range / self.bins as f64
    }

    /// Bin index of one normalized value; bin `b` covers `[edge[b], edge[b+1])`.
    pub fn bin_of(&self, x: f64) -> usize {
        if x.is_nan() || x < self.edges[0] {
            return 0;
        }
        if x >= self.edges[self.bins] {
            return self.bins - 1;
        }
        let mut b = (((x + self.range) / self.bin_width()).floor() as usize).min(self.bins - 1);
        // The arithmetic estimate can land one off near an edge.
        if x < self.edges[b] {
            b -= 1;
        } else if x >= self.edges[b + 1] {
            b += 1;
        }
        b
    }

    pub fn discretize(&self, action: &[f64]) -> Vec<usize> {
        action.iter().map(|&x| self.bin_of(x)).collect()
    }

    pub fn undiscretize(&self, bins: &[usize]) -> Result<Vec<f64>> {
        bins.iter()
            .map(|&b| {
                if b >= self.bins {
                    Err(Error::invalid(format!("bin {b} out of range 0..{}", self.bins)))
                } else {
                    Ok(0.5 * (self.edges[b] + self.edges[b + 1]))
                }
            })
            .collect()
    }
}

/// Settings that must match between every stage comparing losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSettings {
    pub scheme: Scheme,
    pub bins: usize,
    pub range: f64,
    pub split: SplitSpec,
}

impl Default for PreprocessSettings {
    fn default() -> Self {
        PreprocessSettings {
            scheme: Scheme::Gaussian,
            bins: DEFAULT_BINS,
            range: DEFAULT_RANGE,
            split: SplitSpec::default(),
        }
    }
}

impl PreprocessSettings {
    /// Hex SHA-256 over the canonical JSON form of the settings.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("settings serialize");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// A domain ready for training: one state row and one bin row per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDomain {
    pub id: usize,
    pub name: String,
    pub states: Array2<f64>,
    pub bins: Array2<usize>,
    /// Bins per action head.
    pub num_bins: usize,
}

impl PreparedDomain {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Normalizes with `stats` and bins with `disc`.
pub fn prepare_domain(domain: &Domain, stats: &NormalizationStats, disc: &Discretizer) -> Result<PreparedDomain> {
    if stats.domain_id != domain.id {
        return Err(Error::invalid(format!(
            "statistics fit on domain {} applied to domain {}",
            stats.domain_id, domain.id
        )));
    }
    let n = domain.size();
    let (ds, da) = (domain.state_dim(), domain.action_dim());
    let mut states = Array2::zeros((n, ds));
    let mut bins = Array2::zeros((n, da));
    for (i, (s, a)) in domain.states().zip(domain.actions()).enumerate() {
        states.row_mut(i).iter_mut().zip(s).for_each(|(d, v)| *d = *v);
        let b = disc.discretize(&stats.apply(a)?);
        bins.row_mut(i).iter_mut().zip(b).for_each(|(d, v)| *d = v);
    }
    Ok(PreparedDomain {
        id: domain.id,
        name: domain.name.clone(),
        states,
        bins,
        num_bins: disc.bins(),
    })
}

/// Fitted stage-one state: one set of statistics per domain plus the shared
/// discretizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub settings: PreprocessSettings,
    pub stats: Vec<NormalizationStats>,
    pub discretizer: Discretizer,
}

impl Preprocessor {
    /// Fits each domain's statistics on that domain alone.
    pub fn fit(domains: &[Domain], settings: &PreprocessSettings) -> Result<Self> {
        let discretizer = fit_discretizer(settings.bins, settings.range)?;
        let stats = domains.iter().map(|d| fit_normalizer(d, settings.scheme)).collect();
        Ok(Preprocessor {
            settings: settings.clone(),
            stats,
            discretizer,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.settings.fingerprint()
    }

    pub fn prepare(&self, domains: &[Domain]) -> Result<Vec<PreparedDomain>> {
        domains
            .iter()
            .map(|d| {
                let stats = self.stats.get(d.id).ok_or_else(|| {
                    Error::invalid(format!("no normalization statistics for domain {}", d.id))
                })?;
                prepare_domain(d, stats, &self.discretizer)
            })
            .collect()
    }
}
