//! Black-box validation against a manifest and detection-rate experiments.

mod manifest;

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use manifest::{make_manifest, Manifest, MANIFEST_FORMAT, MANIFEST_VERSION};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::faults::{gda, random_perturb, sba, AttackKind, AttackSpec, GdaTarget, Perturbation};
use crate::nn::{argmax, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::testgen::GeneratedSuite;

/// Something that maps an input to an output vector and nothing more.
pub trait BlackBox {
    fn query(&self, input: &Tensor<f32>) -> Result<Vec<f32>>;
}

impl<T: Scalar> BlackBox for Network<T> {
    fn query(&self, input: &Tensor<f32>) -> Result<Vec<f32>> {
        let logits = self.logits(input.cast::<T>().as_slice())?;
        Ok(logits.iter().map(|v| v.to_f32_lossy()).collect())
    }
}

/// How observed outputs are compared with the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CompareMode {
    /// Predicted labels must match.
    #[default]
    Label,
    /// Every logit must match within `tolerance`. Needs a manifest with logits.
    Strict { tolerance: f64 },
}

impl CompareMode {
    pub const DEFAULT_TOLERANCE: f64 = 1e-5;

    pub fn strict() -> Self {
        CompareMode::Strict {
            tolerance: Self::DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Intact,
    Perturbed { first_mismatch: usize },
}

impl Verdict {
    pub fn first_mismatch(self) -> Option<usize> {
        match self {
            Verdict::Intact => None,
            Verdict::Perturbed { first_mismatch } => Some(first_mismatch),
        }
    }
}

/// Replays the manifest's tests through `bb`, stopping at the first mismatch.
///
/// Errors from the black box are reported as [`Error::BlackBox`], never as a
/// perturbation.
pub fn validate<B: BlackBox + ?Sized>(
    bb: &B,
    manifest: &Manifest,
    mode: CompareMode,
) -> Result<Verdict> {
    if let CompareMode::Strict { .. } = mode {
        if manifest.logits.is_none() {
            return Err(Error::Precondition(
                "strict comparison needs a manifest with logits".into(),
            ));
        }
    }
    for (i, x) in manifest.inputs.iter().enumerate() {
        let out = bb
            .query(x)
            .map_err(|e| Error::BlackBox(format!("test {i}: {e}")))?;
        if out.is_empty() {
            return Err(Error::BlackBox(format!("test {i}: empty output")));
        }
        let same = match mode {
            CompareMode::Label => argmax(&out) == manifest.labels[i],
            CompareMode::Strict { tolerance } => {
                let expected = &manifest.logits.as_ref().expect("checked above")[i];
                if expected.len() != out.len() {
                    return Err(Error::BlackBox(format!(
                        "test {i}: {} outputs, expected {}",
                        out.len(),
                        expected.len()
                    )));
                }
                out.iter()
                    .zip(expected)
                    .all(|(a, b)| (f64::from(*a) - f64::from(*b)).abs() <= tolerance)
            }
        };
        if !same {
            return Ok(Verdict::Perturbed { first_mismatch: i });
        }
    }
    Ok(Verdict::Intact)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub mode: CompareMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub detected: bool,
    pub first_mismatch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub attack: AttackKind,
    pub trials: usize,
    pub detected: usize,
    pub rate: f64,
    pub records: Vec<TrialRecord>,
}

impl DetectionResult {
    fn from_records(attack: AttackKind, records: Vec<TrialRecord>) -> Self {
        let detected = records.iter().filter(|r| r.detected).count();
        Self {
            attack,
            trials: records.len(),
            detected,
            rate: detected as f64 / records.len().max(1) as f64,
            records,
        }
    }

    /// Rate had only the first `n` tests been published.
    pub fn rate_at(&self, n: usize) -> f64 {
        let hits = self
            .records
            .iter()
            .filter(|r| r.first_mismatch.is_some_and(|i| i < n))
            .count();
        hits as f64 / self.trials.max(1) as f64
    }
}

/// Per-trial seeds for one attack kind. The same `(seed, kind)` always
/// yields the same sequence, which pairs trials across suites.
pub fn trial_seeds(seed: u64, kind: AttackKind, trials: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind as u64);
    (0..trials).map(|_| rng.next_u64()).collect()
}

/// One perturbation drawn from `spec` with `seed`. GDA draws its target
/// from `pool`.
pub fn draw_perturbation<T: Scalar>(
    net: &Network<T>,
    spec: &AttackSpec,
    seed: u64,
    pool: Option<&LabeledDataset<T>>,
) -> Result<Perturbation<T>> {
    match spec.kind {
        AttackKind::Sba => sba(net, spec, seed),
        AttackKind::Random => random_perturb(net, spec, seed),
        AttackKind::Gda => {
            let pool = pool
                .ok_or_else(|| Error::InvalidConfig("GDA needs a pool of target samples".into()))?;
            let target = GdaTarget::choose(net, pool, seed)?;
            gda(
                net,
                &AttackSpec {
                    seed,
                    ..spec.clone()
                },
                &target,
            )
        }
    }
}

/// Runs `cfg.trials` seeded perturbations of `net` and validates each
/// perturbed copy against every manifest. Returns one result per manifest,
/// all sharing the same perturbations.
pub fn paired_detection<T: Scalar>(
    net: &Network<T>,
    manifests: &[&Manifest],
    spec: &AttackSpec,
    cfg: &DetectionConfig,
    pool: Option<&LabeledDataset<T>>,
) -> Result<Vec<DetectionResult>> {
    if cfg.trials == 0 {
        return Err(Error::InvalidConfig("trials must be >= 1".into()));
    }
    let seeds = trial_seeds(cfg.seed, spec.kind, cfg.trials);
    let per_trial: Vec<Vec<TrialRecord>> = seeds
        .par_iter()
        .map(|&seed| {
            let p = draw_perturbation(net, spec, seed, pool)?;
            let perturbed = p.applied_to(net)?;
            manifests
                .iter()
                .map(|m| {
                    let first_mismatch = validate(&perturbed, m, cfg.mode)?.first_mismatch();
                    Ok(TrialRecord {
                        seed,
                        detected: first_mismatch.is_some(),
                        first_mismatch,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok((0..manifests.len())
        .map(|j| DetectionResult::from_records(spec.kind, per_trial.iter().map(|t| t[j]).collect()))
        .collect())
}

/// Fraction of seeded perturbations that the manifest detects.
pub fn detection_rate<T: Scalar>(
    net: &Network<T>,
    manifest: &Manifest,
    spec: &AttackSpec,
    cfg: &DetectionConfig,
    pool: Option<&LabeledDataset<T>>,
) -> Result<DetectionResult> {
    Ok(paired_detection(net, &[manifest], spec, cfg, pool)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub n: usize,
    pub attack: AttackKind,
    pub suite: String,
    pub rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn rate(&self, n: usize, attack: AttackKind, suite: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.attack == attack && r.suite == suite)
            .map(|r| r.rate)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let to_err = |e: csv::Error| Error::Corrupt(format!("csv: {e}"));
        w.write_record(["N", "attack", "suite", "rate"])
            .map_err(to_err)?;
        for r in &self.rows {
            w.write_record([
                r.n.to_string(),
                r.attack.name().into(),
                r.suite.clone(),
                format!("{:.4}", r.rate),
            ])
            .map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }
}

/// Prefix lengths reported by [`compare_suites`] unless told otherwise.
pub const DEFAULT_PREFIXES: [usize; 5] = [10, 20, 30, 40, 50];

/// Detection rate of every suite prefix under every attack, with the same
/// perturbations applied to all suites of one attack.
pub fn compare_suites<T: Scalar>(
    net: &Network<T>,
    suites: &[(&str, &GeneratedSuite<T>)],
    specs: &[AttackSpec],
    cfg: &DetectionConfig,
    prefixes: &[usize],
    pool: Option<&LabeledDataset<T>>,
) -> Result<ComparisonTable> {
    let with_logits = matches!(cfg.mode, CompareMode::Strict { .. });
    let manifests = suites
        .iter()
        .map(|(_, s)| make_manifest(net, s, with_logits))
        .collect::<Result<Vec<_>>>()?;
    let named: Vec<(&str, &Manifest)> = suites.iter().map(|(n, _)| *n).zip(&manifests).collect();
    compare_manifests(net, &named, specs, cfg, prefixes, pool)
}

/// [`compare_suites`] for already published manifests.
pub fn compare_manifests<T: Scalar>(
    net: &Network<T>,
    manifests: &[(&str, &Manifest)],
    specs: &[AttackSpec],
    cfg: &DetectionConfig,
    prefixes: &[usize],
    pool: Option<&LabeledDataset<T>>,
) -> Result<ComparisonTable> {
    if manifests.is_empty() {
        return Err(Error::InvalidConfig("no suites to compare".into()));
    }
    let refs: Vec<&Manifest> = manifests.iter().map(|(_, m)| *m).collect();
    let mut table = ComparisonTable::default();
    for spec in specs {
        let results = paired_detection(net, &refs, spec, cfg, pool)?;
        for &n in prefixes {
            for ((name, _), res) in manifests.iter().zip(&results) {
                table.rows.push(ComparisonRow {
                    n,
                    attack: spec.kind,
                    suite: (*name).to_string(),
                    rate: res.rate_at(n),
                });
            }
        }
    }
    Ok(table)
}
