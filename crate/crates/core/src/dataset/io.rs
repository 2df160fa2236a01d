use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Domain, Trajectory};
use crate::error::{Error, Result};
use crate::fsutil::write_json;
#[cfg(test)]
use crate::fsutil::read_json;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub path: String,
    pub d_s: usize,
    pub d_a: usize,
    pub n_trajectories: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub domains: Vec<ManifestEntry>,
}

impl Manifest {
    fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::invalid(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.domains.is_empty() {
            return Err(Error::invalid("manifest lists no domains"));
        }
        let mut seen = HashSet::new();
        for entry in &self.domains {
            if !seen.insert(entry.name.as_str()) {
                return Err(Error::invalid(format!("duplicate domain name `{}`", entry.name)));
            }
        }
        Ok(())
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads a dataset from a manifest file or a directory holding `manifest.json`.
///
/// Domains receive ids in manifest order. Every declared dimension and
/// trajectory count is checked against the file contents.
pub fn load_manifest(path: &Path) -> Result<(Manifest, Vec<Domain>)> {
    let manifest_file = manifest_path(path);
    let root = manifest_file.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&manifest_file).map_err(|e| Error::io(&manifest_file, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::json(&manifest_file, e))?;
    manifest.validate()?;

    let mut domains = Vec::with_capacity(manifest.domains.len());
    for (id, entry) in manifest.domains.iter().enumerate() {
        let trajectories = read_domain_file(&root.join(&entry.path), entry)?;
        if trajectories.len() != entry.n_trajectories {
            return Err(Error::DimensionMismatch {
                context: format!("trajectory count of domain `{}`", entry.name),
                expected: entry.n_trajectories,
                found: trajectories.len(),
            });
        }
        domains.push(Domain::new(id, entry.name.clone(), trajectories)?);
    }
    Ok((manifest, domains))
}

fn read_domain_file(path: &Path, entry: &ManifestEntry) -> Result<Vec<Trajectory>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let data_err = |message: String| Error::Data {
            domain: entry.name.clone(),
            trajectory: out.len(),
            message,
        };
        let traj: Trajectory = serde_json::from_str(&line)
            .map_err(|e| data_err(format!("line {}: {e}", i + 1)))?;
        if traj.state_dim() != entry.d_s {
            return Err(Error::DimensionMismatch {
                context: format!("state dimension of domain `{}` trajectory {}", entry.name, out.len()),
                expected: entry.d_s,
                found: traj.state_dim(),
            });
        }
        if traj.action_dim() != entry.d_a {
            return Err(Error::DimensionMismatch {
                context: format!("action dimension of domain `{}` trajectory {}", entry.name, out.len()),
                expected: entry.d_a,
                found: traj.action_dim(),
            });
        }
        traj.check().map_err(data_err)?;
        out.push(traj);
    }
    Ok(out)
}

/// Writes `manifest.json` plus one JSON-lines file per domain into `dir`.
pub fn write_dataset(dir: &Path, domains: &[Domain]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(domains.len());
    for domain in domains {
        let rel = format!("{}.jsonl", domain.name);
        let path = dir.join(&rel);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for traj in domain.trajectories() {
            serde_json::to_writer(&mut w, traj).map_err(|e| Error::json(&path, e))?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            name: domain.name.clone(),
            path: rel,
            d_s: domain.state_dim(),
            d_a: domain.action_dim(),
            n_trajectories: domain.trajectories().len(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        domains: entries,
    };
    manifest.validate()?;
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_suite, SuiteSizes, SyntheticKind};

    fn small_domain(id: usize, name: &str, n: usize) -> Domain {
        let trajs = (0..n)
            .map(|i| {
                let len = 2 + i % 3;
                Trajectory::new(
                    (0..len).map(|t| vec![t as f64 * 0.1, i as f64]).collect(),
                    (0..len).map(|t| vec![1.0 / (t + 1) as f64; 3]).collect(),
                )
                .unwrap()
            })
            .collect();
        Domain::new(id, name, trajs).unwrap()
    }

    #[test]
    fn loads_two_domains_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let domains = vec![small_domain(0, "a", 3), small_domain(1, "b", 5)];
        write_dataset(dir.path(), &domains).unwrap();
        let (manifest, loaded) = load_manifest(dir.path()).unwrap();
        assert_eq!(manifest.domains.len(), 2);
        assert_eq!(loaded[0].id, 0);
        assert_eq!(loaded[1].id, 1);
        assert_eq!(loaded[0].size(), 2 + 3 + 4);
        assert_eq!(loaded[1].size(), 2 + 3 + 4 + 2 + 3);
        assert_eq!(loaded, domains);
    }

    #[test]
    fn declared_action_dim_must_match() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[small_domain(0, "a", 2)]).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut manifest: Manifest = read_json(&path).unwrap();
        manifest.domains[0].d_a = 7;
        write_json(&path, &manifest).unwrap();
        let err = load_manifest(dir.path()).unwrap_err();
        assert!(
            matches!(err, Error::DimensionMismatch { expected: 7, found: 3, .. }),
            "{err}"
        );
    }

    #[test]
    fn missing_domain_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[small_domain(0, "a", 2)]).unwrap();
        fs::remove_file(dir.path().join("a.jsonl")).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn non_finite_value_names_domain_and_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[small_domain(0, "a", 3)]).unwrap();
        let file = dir.path().join("a.jsonl");
        let text = fs::read_to_string(&file).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        // JSON has no NaN literal; an overflowing literal parses to +inf.
        lines[1] = lines[1].replacen("1.0", "1e999", 1);
        fs::write(&file, lines.join("\n") + "\n").unwrap();
        let err = load_manifest(dir.path()).unwrap_err();
        match err {
            Error::Data { domain, trajectory, .. } => {
                assert_eq!(domain, "a");
                assert_eq!(trajectory, 1);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_dataset(dir.path(), &[small_domain(0, "a", 2), small_domain(1, "a", 2)]);
        assert!(err.is_err());
    }

    #[test]
    fn reserialization_is_byte_identical() {
        let sizes = SuiteSizes { trajectories: 6, steps: 7, ..SuiteSizes::default() };
        let domains = generate_synthetic_suite(SyntheticKind::OperatorTiers, 5, &sizes).unwrap();
        let first = tempfile::tempdir().unwrap();
        let second = tempfile::tempdir().unwrap();
        write_dataset(first.path(), &domains).unwrap();
        let (_, loaded) = load_manifest(first.path()).unwrap();
        assert_eq!(loaded, domains);
        write_dataset(second.path(), &loaded).unwrap();
        for entry in fs::read_dir(first.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let a = fs::read(first.path().join(&name)).unwrap();
            let b = fs::read(second.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name:?} differs");
        }
    }
}
