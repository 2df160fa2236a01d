//! Turning mixture weights into per-domain retention counts, and cutting
//! the dataset down to them.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_dataset, Domain, Manifest};
use crate::dro::check_simplex;
use crate::error::{Error, Result};
use crate::fsutil::write_json;

pub const RETENTION_PLAN_FILE: &str = "retention_plan.json";

/// Per-domain state-action counts to keep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionPlan {
    /// Total pairs to keep, `round(fraction * sum(sizes))`.
    pub target: usize,
    pub sizes: Vec<usize>,
    /// `alpha_i * target` before capping.
    pub desired: Vec<f64>,
    pub retained: Vec<usize>,
    /// Whether the desired count exceeded the domain's size.
    pub capped: Vec<bool>,
}

impl RetentionPlan {
    pub fn total_retained(&self) -> usize {
        self.retained.iter().sum()
    }
}

/// Values this close to an integer are treated as that integer, so that
/// products like `0.3 * 250` do not lose a unit to representation error.
const INTEGER_SNAP: f64 = 1e-9;

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < INTEGER_SNAP {
        r
    } else {
        x
    }
}

/// Rounds non-negative quotas to integers summing to `total` by the largest
/// remainder method. Ties go to the lower index.
fn largest_remainder(quotas: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = quotas.iter().map(|&q| snap(q)).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let extra = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(extra) {
        out[i] += 1;
    }
    out
}

fn check_inputs(sizes: &[usize], alpha: &[f64], fraction: f64) -> Result<usize> {
    if sizes.is_empty() {
        return Err(Error::invalid("no domains to subset"));
    }
    if sizes.len() != alpha.len() {
        return Err(Error::DimensionMismatch {
            context: "subset weights".into(),
            expected: sizes.len(),
            found: alpha.len(),
        });
    }
    check_simplex(alpha)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("subset fraction {fraction} outside (0, 1]")));
    }
    let total: usize = sizes.iter().sum();
    let target = (fraction * total as f64).round() as usize;
    if target > total {
        return Err(Error::invalid(format!("target {target} exceeds dataset size {total}")));
    }
    Ok(target)
}

/// Allocates `round(fraction * N)` pairs across domains in proportion to
/// `alpha`, capped at each domain's size. Each domain first gets the whole
/// part of its capped entitlement; the rest, fractional leftovers included,
/// is spread in proportion to unselected pairs. That is the expected outcome
/// of topping up by uniform sampling.
pub fn compute_retention(sizes: &[usize], alpha: &[f64], fraction: f64) -> Result<RetentionPlan> {
    let target = check_inputs(sizes, alpha, fraction)?;
    let desired: Vec<f64> = alpha.iter().map(|a| a * target as f64).collect();
    let capped: Vec<bool> = desired.iter().zip(sizes).map(|(&d, &s)| snap(d) > s as f64).collect();
    let mut retained: Vec<usize> = desired
        .iter()
        .zip(sizes)
        .map(|(&d, &s)| (snap(d).floor() as usize).min(s))
        .collect();

    // A single pass suffices in exact arithmetic because the shortfall never
    // exceeds the unselected mass; the loop guards against a short pass.
    let mut shortfall = target - retained.iter().sum::<usize>();
    while shortfall > 0 {
        let free: Vec<usize> = sizes.iter().zip(&retained).map(|(s, r)| s - r).collect();
        let free_total: usize = free.iter().sum();
        let shares: Vec<f64> = free
            .iter()
            .map(|&u| shortfall as f64 * u as f64 / free_total as f64)
            .collect();
        let add = largest_remainder(&shares, shortfall);
        let mut added = 0;
        for ((r, a), u) in retained.iter_mut().zip(add).zip(&free) {
            let a = a.min(*u);
            *r += a;
            added += a;
        }
        if added == 0 {
            return Err(Error::invalid("retention top-up made no progress"));
        }
        shortfall -= added;
    }
    Ok(RetentionPlan {
        target,
        sizes: sizes.to_vec(),
        desired,
        retained,
        capped,
    })
}

/// Monte Carlo estimate of per-domain retained counts.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleEstimate {
    pub mean: Vec<f64>,
    /// Spread of the retained count across trials.
    pub std_dev: Vec<f64>,
    /// Standard error of each mean.
    pub std_error: Vec<f64>,
    pub trials: usize,
}

/// Simulates the literal procedure: keep `floor(min(alpha_i T, |D_i|))` from
/// each domain, then draw the rest uniformly without replacement from all
/// pairs not yet kept.
pub fn retention_oracle(sizes: &[usize], alpha: &[f64], fraction: f64, trials: usize, seed: u64) -> Result<OracleEstimate> {
    let target = check_inputs(sizes, alpha, fraction)?;
    if trials < 2 {
        return Err(Error::invalid("the oracle needs at least two trials"));
    }
    let base: Vec<usize> = alpha
        .iter()
        .zip(sizes)
        .map(|(&a, &s)| (snap(a * target as f64).floor() as usize).min(s))
        .collect();
    let rest = target - base.iter().sum::<usize>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = sizes.len();
    let mut sum = vec![0.0; k];
    let mut sum_sq = vec![0.0; k];
    for _ in 0..trials {
        let mut free: Vec<usize> = sizes.iter().zip(&base).map(|(s, b)| s - b).collect();
        let mut free_total: usize = free.iter().sum();
        let mut got = base.clone();
        for _ in 0..rest {
            let mut pick = rng.random_range(0..free_total);
            let d = free
                .iter()
                .position(|&u| {
                    if pick < u {
                        true
                    } else {
                        pick -= u;
                        false
                    }
                })
                .expect("pick is below the free total");
            free[d] -= 1;
            free_total -= 1;
            got[d] += 1;
        }
        for i in 0..k {
            sum[i] += got[i] as f64;
            sum_sq[i] += (got[i] * got[i]) as f64;
        }
    }
    let n = trials as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_dev: Vec<f64> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| ((sq - n * m * m) / (n - 1.0)).max(0.0).sqrt())
        .collect();
    let std_error = std_dev.iter().map(|s| s / n.sqrt()).collect();
    Ok(OracleEstimate { mean, std_dev, std_error, trials })
}

/// Keeps whole trajectories of each domain in a seeded random order until
/// the planned count is reached, truncating the last one to land exactly on
/// it. Domains planned to keep nothing are dropped; ids are renumbered.
pub fn materialize_subset(domains: &[Domain], plan: &RetentionPlan, seed: u64) -> Result<Vec<Domain>> {
    if domains.len() != plan.retained.len() {
        return Err(Error::DimensionMismatch {
            context: "retention plan domains".into(),
            expected: domains.len(),
            found: plan.retained.len(),
        });
    }
    let mut out = Vec::with_capacity(domains.len());
    for (domain, (&keep, &size)) in domains.iter().zip(plan.retained.iter().zip(&plan.sizes)) {
        if domain.size() != size || keep > size {
            return Err(Error::invalid(format!(
                "retention plan does not fit domain `{}` ({} pairs, plan sized {size}, keeping {keep})",
                domain.name,
                domain.size()
            )));
        }
        if keep == 0 {
            log::warn!("domain `{}` keeps no data and is left out of the subset", domain.name);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(domain.id as u64);
        let mut order: Vec<usize> = (0..domain.trajectories().len()).collect();
        order.shuffle(&mut rng);
        let mut left = keep;
        let mut kept = Vec::new();
        for i in order {
            if left == 0 {
                break;
            }
            let traj = &domain.trajectories()[i];
            let take = traj.len().min(left);
            kept.push(if take == traj.len() { traj.clone() } else { traj.truncated(take) });
            left -= take;
        }
        out.push(Domain::new(out.len(), domain.name.clone(), kept)?);
    }
    Ok(out)
}

/// One row of `retention_plan.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionEntry {
    pub name: String,
    pub alpha: f64,
    pub size: usize,
    pub desired: f64,
    pub retained: usize,
    pub capped: bool,
    /// `retained / target`, the realized share of the subset.
    pub realized_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub fingerprint: Option<String>,
    pub fraction: f64,
    pub seed: u64,
    pub target: usize,
    pub domains: Vec<RetentionEntry>,
}

impl RetentionReport {
    pub fn new(
        plan: &RetentionPlan,
        names: &[String],
        alpha: &[f64],
        fraction: f64,
        seed: u64,
        fingerprint: Option<String>,
    ) -> Self {
        let domains = names
            .iter()
            .enumerate()
            .map(|(i, name)| RetentionEntry {
                name: name.clone(),
                alpha: alpha[i],
                size: plan.sizes[i],
                desired: plan.desired[i],
                retained: plan.retained[i],
                capped: plan.capped[i],
                realized_fraction: plan.retained[i] as f64 / plan.target.max(1) as f64,
            })
            .collect();
        RetentionReport {
            fingerprint,
            fraction,
            seed,
            target: plan.target,
            domains,
        }
    }
}

/// Writes the subset dataset and its `retention_plan.json` into `dir`.
pub fn write_subset(dir: &Path, subset: &[Domain], report: &RetentionReport) -> Result<Manifest> {
    let manifest = write_dataset(dir, subset)?;
    write_json(&dir.join(RETENTION_PLAN_FILE), report)?;
    Ok(manifest)
}
