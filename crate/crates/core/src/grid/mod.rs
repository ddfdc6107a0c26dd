//! Gridded NWP samples: data model, per-channel normalization statistics,
//! dataset splitting, synthetic generation, and the binary file format.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::tensor::Tensor;

pub mod format;
pub mod synth;

pub use format::{load_grid, store_grid};
pub use synth::{synthesize, SynthConfig};

/// Upper bound (exclusive) on QPE values in mm/h.
pub const QPE_MAX: f32 = 100.0;

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file while reading {0}")]
    Truncated(&'static str),
    #[error("dimension overflow: {0}")]
    DimOverflow(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("channel '{0}' has zero variance")]
    ZeroVariance(String),
    #[error("stats do not match dataset: {0}")]
    StatsMismatch(String),
}

pub type Result<T> = std::result::Result<T, GridError>;

/// One sample: a `[C,H,W]` stack of atmospheric variables plus an `[H,W]`
/// QPE target field in mm/h.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSample {
    pub variables: Tensor<f32>,
    pub qpe: Vec<f32>,
    pub timestamp: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridHeader {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub variable_names: Vec<String>,
}

/// Where a dataset came from; runtime metadata, not persisted.
#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Synthetic { seed: u64 },
    File(String),
    InMemory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridDataset {
    pub header: GridHeader,
    pub samples: Vec<GridSample>,
    pub provenance: Provenance,
}

impl GridDataset {
    /// Checks header/sample consistency and the QPE domain `[0, QPE_MAX)`.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.channels == 0 || h.height == 0 || h.width == 0 {
            return Err(GridError::InvalidData("zero dimension in header".into()));
        }
        if h.variable_names.len() != h.channels {
            return Err(GridError::InvalidData(format!(
                "{} variable names for {} channels",
                h.variable_names.len(),
                h.channels
            )));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.variables.shape() != [h.channels, h.height, h.width] {
                return Err(GridError::InvalidData(format!(
                    "sample {i} variables shape {:?}",
                    s.variables.shape()
                )));
            }
            if s.qpe.len() != h.height * h.width {
                return Err(GridError::InvalidData(format!("sample {i} qpe length {}", s.qpe.len())));
            }
            if !s.variables.all_finite() {
                return Err(GridError::InvalidData(format!("sample {i} has non-finite variables")));
            }
            if s.qpe.iter().any(|&v| !v.is_finite() || v < 0.0 || v >= QPE_MAX) {
                return Err(GridError::InvalidData(format!(
                    "sample {i} qpe outside [0, {QPE_MAX})"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-channel normalization statistics, aligned with the dataset's channel
/// order. Serialized as a JSON map keyed by variable name.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub names: Vec<String>,
    pub stats: Vec<ChannelStats>,
}

impl NormStats {
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, &ChannelStats> = self
            .names
            .iter()
            .map(String::as_str)
            .zip(&self.stats)
            .collect();
        serde_json::to_string_pretty(&map).expect("stats serialize")
    }

    pub fn from_json(json: &str) -> Result<NormStats> {
        let map: BTreeMap<String, ChannelStats> =
            serde_json::from_str(json).map_err(|e| GridError::InvalidData(format!("stats json: {e}")))?;
        let mut names = Vec::with_capacity(map.len());
        let mut stats = Vec::with_capacity(map.len());
        for (name, cs) in map {
            if !(cs.std > 0.0) || !cs.std.is_finite() || !cs.mean.is_finite() {
                return Err(GridError::InvalidData(format!("channel '{name}' stats out of domain")));
            }
            names.push(name);
            stats.push(cs);
        }
        Ok(NormStats { names, stats })
    }

    /// Stats for `name`, if present.
    pub fn lookup(&self, name: &str) -> Option<&ChannelStats> {
        self.names.iter().position(|n| n == name).map(|i| &self.stats[i])
    }
}

/// Exact per-channel mean and population standard deviation over every
/// pixel of every sample. Errors on an empty dataset or a zero-variance
/// channel.
pub fn compute_stats(ds: &GridDataset) -> Result<NormStats> {
    if ds.is_empty() {
        return Err(GridError::InvalidData("cannot compute stats of empty dataset".into()));
    }
    let (c, h, w) = (ds.header.channels, ds.header.height, ds.header.width);
    let plane = h * w;
    let n = (ds.len() * plane) as f64;
    let mut stats = Vec::with_capacity(c);
    for ci in 0..c {
        let mut sum = 0.0f64;
        for s in &ds.samples {
            for &v in &s.variables.data()[ci * plane..(ci + 1) * plane] {
                sum += v as f64;
            }
        }
        let mean = sum / n;
        let mut var = 0.0f64;
        for s in &ds.samples {
            for &v in &s.variables.data()[ci * plane..(ci + 1) * plane] {
                let d = v as f64 - mean;
                var += d * d;
            }
        }
        var /= n;
        let std = var.sqrt();
        if std <= 0.0 || !std.is_finite() {
            return Err(GridError::ZeroVariance(ds.header.variable_names[ci].clone()));
        }
        stats.push(ChannelStats { mean, std });
    }
    Ok(NormStats {
        names: ds.header.variable_names.clone(),
        stats,
    })
}

fn transform(ds: &GridDataset, stats: &NormStats, forward: bool) -> Result<GridDataset> {
    let (c, h, w) = (ds.header.channels, ds.header.height, ds.header.width);
    let plane = h * w;
    let per_channel: Vec<&ChannelStats> = ds
        .header
        .variable_names
        .iter()
        .map(|name| {
            stats
                .lookup(name)
                .ok_or_else(|| GridError::StatsMismatch(format!("no stats for channel '{name}'")))
        })
        .collect::<Result<_>>()?;
    let samples = ds
        .samples
        .iter()
        .map(|s| {
            let mut data = s.variables.data().to_vec();
            for ci in 0..c {
                let ChannelStats { mean, std } = *per_channel[ci];
                for v in &mut data[ci * plane..(ci + 1) * plane] {
                    let x = *v as f64;
                    *v = if forward { (x - mean) / std } else { x * std + mean } as f32;
                }
            }
            GridSample {
                variables: Tensor::new(vec![c, h, w], data).expect("shape preserved"),
                qpe: s.qpe.clone(),
                timestamp: s.timestamp.clone(),
            }
        })
        .collect();
    Ok(GridDataset {
        header: ds.header.clone(),
        samples,
        provenance: ds.provenance.clone(),
    })
}

/// `(v - mean) / std` per channel; QPE is untouched.
pub fn normalize(ds: &GridDataset, stats: &NormStats) -> Result<GridDataset> {
    transform(ds, stats, true)
}

/// Inverse of [`normalize`].
pub fn denormalize(ds: &GridDataset, stats: &NormStats) -> Result<GridDataset> {
    transform(ds, stats, false)
}

/// Seeded disjoint exhaustive split. Val and test sizes are floored; the
/// remainder goes to train.
pub fn split(
    ds: &GridDataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(GridDataset, GridDataset, GridDataset)> {
    let (rt, rv, rs) = ratios;
    if rt < 0.0 || rv < 0.0 || rs < 0.0 || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(GridError::InvalidData(format!("split ratios {ratios:?} must sum to 1")));
    }
    let n = ds.len();
    let n_val = (rv * n as f64).floor() as usize;
    let n_test = (rs * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates, kept in-crate so the partition is stable across rand
    // versions.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    let pick = |range: std::ops::Range<usize>| GridDataset {
        header: ds.header.clone(),
        samples: range.map(|i| ds.samples[indices[i]].clone()).collect(),
        provenance: ds.provenance.clone(),
    };
    Ok((
        pick(0..n_train),
        pick(n_train..n_train + n_val),
        pick(n_train + n_val..n),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(values: &[&[f32]]) -> GridDataset {
        // Each entry is one channel plane of a single 1x2 sample.
        let c = values.len();
        let mut data = Vec::new();
        for plane in values {
            data.extend_from_slice(plane);
        }
        GridDataset {
            header: GridHeader {
                channels: c,
                height: 1,
                width: 2,
                variable_names: (0..c).map(|i| format!("var{i}")).collect(),
            },
            samples: vec![GridSample {
                variables: Tensor::new(vec![c, 1, 2], data).unwrap(),
                qpe: vec![0.0, 0.0],
                timestamp: "t0".into(),
            }],
            provenance: Provenance::InMemory,
        }
    }

    #[test]
    fn constant_channel_is_zero_variance_error() {
        let ds = tiny_dataset(&[&[3.0, 3.0]]);
        assert!(matches!(compute_stats(&ds), Err(GridError::ZeroVariance(_))));
    }

    #[test]
    fn two_point_channel_has_unit_std() {
        let ds = tiny_dataset(&[&[-1.0, 1.0]]);
        let stats = compute_stats(&ds).unwrap();
        assert!(stats.stats[0].mean.abs() < 1e-12);
        assert!((stats.stats[0].std - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_with_identity_stats_is_identity() {
        let ds = tiny_dataset(&[&[0.5, -2.0]]);
        let stats = NormStats {
            names: vec!["var0".into()],
            stats: vec![ChannelStats { mean: 0.0, std: 1.0 }],
        };
        let out = normalize(&ds, &stats).unwrap();
        assert_eq!(out.samples[0].variables, ds.samples[0].variables);
    }

    #[test]
    fn normalize_closed_form() {
        let ds = tiny_dataset(&[&[5.0, 5.0]]);
        let stats = NormStats {
            names: vec!["var0".into()],
            stats: vec![ChannelStats { mean: 3.0, std: 2.0 }],
        };
        let out = normalize(&ds, &stats).unwrap();
        assert_eq!(out.samples[0].variables.data(), &[1.0, 1.0]);
    }

    #[test]
    fn normalize_then_denormalize_round_trips() {
        let ds = tiny_dataset(&[&[0.25, -1.75], &[10.0, 30.0]]);
        let stats = compute_stats(&ds).unwrap();
        let back = denormalize(&normalize(&ds, &stats).unwrap(), &stats).unwrap();
        for (a, b) in back.samples[0]
            .variables
            .data()
            .iter()
            .zip(ds.samples[0].variables.data())
        {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn stats_json_round_trips() {
        let stats = NormStats {
            names: vec!["tmp_850".into(), "hum_500".into()],
            stats: vec![
                ChannelStats { mean: 1.5, std: 2.25 },
                ChannelStats { mean: -0.125, std: 0.5 },
            ],
        };
        let parsed = NormStats::from_json(&stats.to_json()).unwrap();
        assert_eq!(parsed.lookup("tmp_850"), Some(&ChannelStats { mean: 1.5, std: 2.25 }));
        assert_eq!(parsed.lookup("hum_500"), Some(&ChannelStats { mean: -0.125, std: 0.5 }));
    }

    fn many_samples(n: usize) -> GridDataset {
        let header = GridHeader {
            channels: 1,
            height: 1,
            width: 1,
            variable_names: vec!["v".into()],
        };
        GridDataset {
            samples: (0..n)
                .map(|i| GridSample {
                    variables: Tensor::new(vec![1, 1, 1], vec![i as f32]).unwrap(),
                    qpe: vec![0.0],
                    timestamp: format!("t{i}"),
                })
                .collect(),
            header,
            provenance: Provenance::InMemory,
        }
    }

    #[test]
    fn split_all_train() {
        let ds = many_samples(5);
        let (tr, va, te) = split(&ds, (1.0, 0.0, 0.0), 9).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (5, 0, 0));
    }

    #[test]
    fn split_floors_then_remainder_to_train() {
        let ds = many_samples(10);
        let (tr, va, te) = split(&ds, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seeded() {
        let ds = many_samples(13);
        let (tr, va, te) = split(&ds, (0.5, 0.25, 0.25), 42).unwrap();
        let mut seen: Vec<String> = tr
            .samples
            .iter()
            .chain(&va.samples)
            .chain(&te.samples)
            .map(|s| s.timestamp.clone())
            .collect();
        seen.sort();
        let mut expect: Vec<String> = (0..13).map(|i| format!("t{i}")).collect();
        expect.sort();
        assert_eq!(seen, expect);

        let (tr2, va2, te2) = split(&ds, (0.5, 0.25, 0.25), 42).unwrap();
        assert_eq!(tr.samples, tr2.samples);
        assert_eq!(va.samples, va2.samples);
        assert_eq!(te.samples, te2.samples);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let ds = many_samples(4);
        assert!(split(&ds, (0.5, 0.2, 0.2), 0).is_err());
    }
}
