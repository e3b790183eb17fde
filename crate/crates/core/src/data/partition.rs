use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolKind {
    #[serde(rename = "T1_correlated")]
    T1Correlated,
    #[serde(rename = "T2_decorrelated")]
    T2Decorrelated,
}

/// Unit that is kept whole when splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Sequence,
    Frame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitProtocol {
    pub name: ProtocolKind,
    pub train_ranges: Vec<f64>,
    pub test_ranges: Vec<f64>,
    /// Train, validation and test shares within the training ranges.
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    #[serde(default)]
    pub granularity: Granularity,
}

fn default_fractions() -> [f64; 3] {
    [0.7, 0.2, 0.1]
}

/// Ranges are compared in whole metres so that 2.5 km written as 2.5 or
/// 2.50000001 lands in the same bucket.
pub fn range_key(km: f64) -> i64 {
    (km * 1000.0).round() as i64
}

fn steps(from: f64, to: f64) -> Vec<f64> {
    let (a, b) = (range_key(from), range_key(to));
    (a..=b).step_by(500).map(|m| m as f64 / 1000.0).collect()
}

impl SplitProtocol {
    /// Presets: `DS1` trains on 1.0–2.5 km, `DS2` on 3.0–4.5 km; the
    /// decorrelated test range is 3.0 and 5.0 km respectively.
    pub fn preset(dataset: &str, kind: ProtocolKind) -> Result<SplitProtocol> {
        let (train, t2) = match dataset.to_ascii_uppercase().as_str() {
            "DS1" => (steps(1.0, 2.5), vec![3.0]),
            "DS2" => (steps(3.0, 4.5), vec![5.0]),
            other => return Err(Error::Protocol(format!("unknown dataset preset {other:?}; expected DS1 or DS2"))),
        };
        let test = match kind {
            ProtocolKind::T1Correlated => train.clone(),
            ProtocolKind::T2Decorrelated => t2,
        };
        Ok(SplitProtocol { name: kind, train_ranges: train, test_ranges: test, fractions: default_fractions(), granularity: Granularity::Sequence })
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_ranges.is_empty() || self.test_ranges.is_empty() {
            return Err(Error::Protocol("train and test ranges must be non-empty".into()));
        }
        if self.fractions.iter().any(|f| !(*f >= 0.0)) || (self.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Protocol(format!("fractions {:?} must be non-negative and sum to 1", self.fractions)));
        }
        if self.name == ProtocolKind::T2Decorrelated {
            let max_train = self.train_ranges.iter().map(|&r| range_key(r)).max().unwrap_or(0);
            let min_test = self.test_ranges.iter().map(|&r| range_key(r)).min().unwrap_or(0);
            if min_test <= max_train {
                return Err(Error::Protocol(format!(
                    "decorrelated protocol needs every test range above {} km",
                    max_train as f64 / 1000.0
                )));
            }
        }
        Ok(())
    }
}

/// Entry indices into the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Held-out share of the training ranges that a decorrelated protocol
    /// does not test on.
    pub holdout: Vec<usize>,
}

pub fn partition(manifest: &DatasetManifest, protocol: &SplitProtocol, seed: u64) -> Result<Partition> {
    protocol.validate()?;
    let present: BTreeSet<i64> = manifest.entries.iter().map(|e| range_key(e.range_km)).collect();
    let wanted: BTreeSet<i64> = protocol.train_ranges.iter().chain(&protocol.test_ranges).map(|&r| range_key(r)).collect();
    let missing: Vec<String> = wanted.difference(&present).map(|m| format!("{:.1} km", *m as f64 / 1000.0)).collect();
    if !missing.is_empty() {
        return Err(Error::Protocol(format!("manifest has no entries at {}", missing.join(", "))));
    }
    let train_keys: BTreeSet<i64> = protocol.train_ranges.iter().map(|&r| range_key(r)).collect();
    let test_keys: BTreeSet<i64> = protocol.test_ranges.iter().map(|&r| range_key(r)).collect();

    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if train_keys.contains(&range_key(e.range_km)) {
            let key = match protocol.granularity {
                Granularity::Sequence => e.sequence.clone(),
                Granularity::Frame => format!("{}#{i}", e.sequence),
            };
            groups.entry(key).or_default().push(i);
        }
    }
    let mut names: Vec<&String> = groups.keys().collect();
    names.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = names.len();
    let n_train = (protocol.fractions[0] * n as f64).round() as usize;
    let n_val = ((protocol.fractions[1] * n as f64).round() as usize).min(n - n_train);
    let collect = |names: &[&String]| {
        let mut v: Vec<usize> = names.iter().flat_map(|k| groups[*k].iter().copied()).collect();
        v.sort_unstable();
        v
    };
    let mut p = Partition {
        train: collect(&names[..n_train]),
        val: collect(&names[n_train..n_train + n_val]),
        ..Partition::default()
    };
    let rest = collect(&names[n_train + n_val..]);
    match protocol.name {
        ProtocolKind::T1Correlated => p.test = rest,
        ProtocolKind::T2Decorrelated => {
            p.holdout = rest;
            p.test = (0..manifest.entries.len()).filter(|&i| test_keys.contains(&range_key(manifest.entries[i].range_km))).collect();
            let train_seqs: BTreeSet<&str> = p.train.iter().chain(&p.val).map(|&i| manifest.entries[i].sequence.as_str()).collect();
            if let Some(&i) = p.test.iter().find(|&&i| train_seqs.contains(manifest.entries[i].sequence.as_str())) {
                return Err(Error::Protocol(format!(
                    "sequence {} spans training and test ranges",
                    manifest.entries[i].sequence
                )));
            }
        }
    }
    Ok(p)
}
