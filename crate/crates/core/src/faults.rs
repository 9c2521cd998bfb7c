//! Parameter perturbation attacks and their application to a network.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{Network, SoftmaxCrossEntropy};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// One large delta on a random bias.
    Sba,
    /// Small deltas on many high-gradient parameters forcing a chosen misclassification.
    Gda,
    /// Gaussian noise on a random subset of parameters.
    Random,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Sba => "sba",
            AttackKind::Gda => "gda",
            AttackKind::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// SBA delta as a multiple of the largest absolute parameter.
    pub sba_magnitude: f64,
    pub gda_m: usize,
    pub gda_step: f64,
    pub gda_max_iters: usize,
    pub random_sigma: f64,
    pub random_fraction: f64,
    pub seed: u64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: AttackKind::Sba,
            sba_magnitude: 10.0,
            gda_m: 50,
            gda_step: 0.05,
            gda_max_iters: 100,
            random_sigma: 0.01,
            random_fraction: 0.01,
            seed: 0,
        }
    }
}

impl AttackSpec {
    pub fn of_kind(kind: AttackKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match self.kind {
            AttackKind::Sba if !(self.sba_magnitude > 0.0 && self.sba_magnitude.is_finite()) => {
                bad(format!(
                    "sba_magnitude must be > 0, got {}",
                    self.sba_magnitude
                ))
            }
            AttackKind::Gda if self.gda_m == 0 => bad("gda_m must be >= 1".into()),
            AttackKind::Gda if !(self.gda_step > 0.0 && self.gda_step.is_finite()) => {
                bad(format!("gda_step must be > 0, got {}", self.gda_step))
            }
            AttackKind::Random if !(self.random_fraction > 0.0 && self.random_fraction <= 1.0) => {
                bad(format!(
                    "random_fraction must be in (0, 1], got {}",
                    self.random_fraction
                ))
            }
            AttackKind::Random if !(self.random_sigma >= 0.0 && self.random_sigma.is_finite()) => {
                bad(format!(
                    "random_sigma must be >= 0, got {}",
                    self.random_sigma
                ))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerturbationMeta {
    pub seed: Option<u64>,
    /// GDA only: whether the perturbed network predicts the desired label.
    pub success: Option<bool>,
    /// GDA only: descent iterations actually run.
    pub iterations: Option<usize>,
}

/// Sparse parameter deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation<T = f32> {
    kind: AttackKind,
    entries: Vec<(usize, T)>,
    meta: PerturbationMeta,
}

impl<T: Scalar> Perturbation<T> {
    /// Rejects empty, duplicate or out-of-range entries.
    pub fn new(
        kind: AttackKind,
        entries: Vec<(usize, T)>,
        param_count: usize,
        meta: PerturbationMeta,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidConfig("perturbation has no entries".into()));
        }
        let mut seen = vec![false; param_count];
        for &(i, _) in &entries {
            if i >= param_count {
                return Err(Error::IndexOutOfRange {
                    what: "parameter",
                    index: i,
                    limit: param_count,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate perturbation index {i}"
                )));
            }
        }
        Ok(Self {
            kind,
            entries,
            meta,
        })
    }

    pub fn kind(&self) -> AttackKind {
        self.kind
    }

    pub fn entries(&self) -> &[(usize, T)] {
        &self.entries
    }

    pub fn meta(&self) -> &PerturbationMeta {
        &self.meta
    }

    /// Adds the deltas to `net` and returns the overwritten values.
    pub fn apply(&self, net: &mut Network<T>) -> Result<RestoreToken<T>> {
        let n = net.param_count();
        if let Some(&(i, _)) = self.entries.iter().find(|(i, _)| *i >= n) {
            return Err(Error::IndexOutOfRange {
                what: "parameter",
                index: i,
                limit: n,
            });
        }
        let params = net.params_mut();
        let saved = self
            .entries
            .iter()
            .map(|&(i, d)| {
                let old = params[i];
                params[i] += d;
                (i, old)
            })
            .collect();
        Ok(RestoreToken { saved })
    }

    /// A perturbed copy of `net`.
    pub fn applied_to(&self, net: &Network<T>) -> Result<Network<T>> {
        let mut out = net.clone();
        let _ = self.apply(&mut out)?;
        Ok(out)
    }
}

/// Original values of the parameters touched by [`Perturbation::apply`].
///
/// Subtracting a delta after adding it does not always give back the same
/// float, so reverting writes the saved values instead.
#[derive(Debug, Clone, PartialEq)]
#[must_use = "dropping the token loses the ability to revert"]
pub struct RestoreToken<T> {
    saved: Vec<(usize, T)>,
}

impl<T: Scalar> RestoreToken<T> {
    pub fn revert(self, net: &mut Network<T>) -> Result<()> {
        let n = net.param_count();
        if let Some(&(i, _)) = self.saved.iter().find(|(i, _)| *i >= n) {
            return Err(Error::IndexOutOfRange {
                what: "parameter",
                index: i,
                limit: n,
            });
        }
        let params = net.params_mut();
        for &(i, v) in self.saved.iter().rev() {
            params[i] = v;
        }
        Ok(())
    }
}

/// Perturbs one uniformly chosen bias by `sba_magnitude * max |param|`.
pub fn sba<T: Scalar>(net: &Network<T>, spec: &AttackSpec, seed: u64) -> Result<Perturbation<T>> {
    AttackSpec {
        kind: AttackKind::Sba,
        ..spec.clone()
    }
    .validate()?;
    let biases = net.bias_indices();
    if biases.is_empty() {
        return Err(Error::Precondition("network has no bias parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = biases[rng.random_range(0..biases.len())];
    let delta = T::lit(spec.sba_magnitude) * net.max_abs_param();
    Perturbation::new(
        AttackKind::Sba,
        vec![(index, delta)],
        net.param_count(),
        PerturbationMeta {
            seed: Some(seed),
            ..Default::default()
        },
    )
}

/// Adds N(0, sigma^2) noise to `ceil(fraction * param_count)` distinct parameters.
pub fn random_perturb<T: Scalar>(
    net: &Network<T>,
    spec: &AttackSpec,
    seed: u64,
) -> Result<Perturbation<T>> {
    AttackSpec {
        kind: AttackKind::Random,
        ..spec.clone()
    }
    .validate()?;
    let n = net.param_count();
    let count = ((spec.random_fraction * n as f64).ceil() as usize).clamp(1, n);
    let normal =
        Normal::new(0.0, spec.random_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = sample(&mut rng, n, count).into_vec();
    indices.sort_unstable();
    let entries = indices
        .into_iter()
        .map(|i| (i, T::lit(normal.sample(&mut rng))))
        .collect();
    Perturbation::new(
        AttackKind::Random,
        entries,
        n,
        PerturbationMeta {
            seed: Some(seed),
            ..Default::default()
        },
    )
}

/// The sample a GDA tries to push to a wrong class.
#[derive(Debug, Clone, PartialEq)]
pub struct GdaTarget<T = f32> {
    pub input: Tensor<T>,
    /// Label the network currently predicts.
    pub label: usize,
    pub desired: usize,
}

impl<T: Scalar> GdaTarget<T> {
    /// A random sample of `pool` that `net` classifies correctly, paired with
    /// a random wrong label.
    pub fn choose(net: &Network<T>, pool: &LabeledDataset<T>, seed: u64) -> Result<Self> {
        let k = net.output_dim();
        if k < 2 {
            return Err(Error::Precondition("GDA needs at least two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in sample(&mut rng, pool.len(), pool.len()).into_vec() {
            let (x, y) = pool.get(i).expect("index in range");
            let Some(y) = y else { continue };
            if net.predict(x)? != y {
                continue;
            }
            let mut desired = rng.random_range(0..k - 1);
            if desired >= y {
                desired += 1;
            }
            return Ok(Self {
                input: x.clone(),
                label: y,
                desired,
            });
        }
        Err(Error::Precondition(
            "no correctly classified labeled sample in the pool".into(),
        ))
    }
}

/// Gradient descent attack.
///
/// Each iteration takes the `gda_m` parameters with the largest
/// `|d loss(x, desired) / d theta|` and moves them by
/// `-gda_step * g / max|g|`, until the target is classified as desired or
/// `gda_max_iters` is reached. The success flag is checked by applying the
/// accumulated deltas to a fresh copy of `net`.
pub fn gda<T: Scalar>(
    net: &Network<T>,
    spec: &AttackSpec,
    target: &GdaTarget<T>,
) -> Result<Perturbation<T>> {
    AttackSpec {
        kind: AttackKind::Gda,
        ..spec.clone()
    }
    .validate()?;
    let k = net.output_dim();
    if target.desired >= k || target.label >= k {
        return Err(Error::IndexOutOfRange {
            what: "class",
            index: target.desired.max(target.label),
            limit: k,
        });
    }
    if target.desired == target.label {
        return Err(Error::InvalidConfig(
            "desired label equals the true label".into(),
        ));
    }
    if net.predict(&target.input)? != target.label {
        return Err(Error::Precondition(
            "GDA target is already misclassified".into(),
        ));
    }

    let mut work = net.clone();
    let mut acc: BTreeMap<usize, T> = BTreeMap::new();
    let mut iterations = 0;
    let mut order: Vec<usize> = (0..net.param_count()).collect();
    let m = spec.gda_m.min(net.param_count());
    for _ in 0..spec.gda_max_iters {
        let (_, g) = work.loss_param_gradient(
            target.input.as_slice(),
            target.desired,
            &SoftmaxCrossEntropy,
        )?;
        // Largest |g| first, ties to the lower index: a total order, so the
        // selected set does not depend on how `order` was left last time.
        let by_magnitude = |a: &usize, b: &usize| {
            g[*b]
                .abs()
                .partial_cmp(&g[*a].abs())
                .expect("finite gradient")
                .then(a.cmp(b))
        };
        if m < order.len() {
            order.select_nth_unstable_by(m - 1, by_magnitude);
        }
        let top = &mut order[..m];
        top.sort_unstable_by(by_magnitude);
        let top = &order[..m];
        let gmax = g[top[0]].abs();
        if gmax == T::zero() {
            break;
        }
        iterations += 1;
        let step = T::lit(spec.gda_step);
        let params = work.params_mut();
        for &i in top {
            let d = -step * g[i] / gmax;
            params[i] += d;
            *acc.entry(i).or_insert(T::zero()) += d;
        }
        if work.predict(&target.input)? == target.desired {
            break;
        }
    }
    let mut p = Perturbation::new(
        AttackKind::Gda,
        acc.into_iter().collect(),
        net.param_count(),
        PerturbationMeta {
            seed: Some(spec.seed),
            success: None,
            iterations: Some(iterations),
        },
    )?;
    p.meta.success = Some(p.applied_to(net)?.predict(&target.input)? == target.desired);
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coverage::{activation_mask, CoverageConfig};
    use crate::data::Provenance;
    use crate::nn::fixtures::{t9, t9_two_logit};
    use crate::nn::Activation;
    use proptest::prelude::*;

    fn bits<T: Scalar>(net: &Network<T>) -> Vec<u64> {
        net.params()
            .iter()
            .map(|p| p.to_f64_lossy().to_bits())
            .collect()
    }

    #[test]
    fn t9_output_bias_shift() {
        let mut net = t9::<f32>();
        assert_eq!(net.logits(&[1.0, 0.0]).unwrap(), vec![1.0]);
        let p = Perturbation::new(AttackKind::Sba, vec![(8, 5.0)], 9, Default::default()).unwrap();
        let token = p.apply(&mut net).unwrap();
        assert_eq!(net.logits(&[1.0, 0.0]).unwrap(), vec![6.0]);
        token.revert(&mut net).unwrap();
        assert_eq!(net.params(), t9::<f32>().params());
    }

    #[test]
    fn construction_rejects_bad_entries() {
        assert!(Perturbation::<f32>::new(AttackKind::Sba, vec![], 9, Default::default()).is_err());
        assert!(
            Perturbation::new(AttackKind::Sba, vec![(9, 1.0f32)], 9, Default::default()).is_err()
        );
        assert!(Perturbation::new(
            AttackKind::Sba,
            vec![(1, 1.0f32), (1, 2.0)],
            9,
            Default::default()
        )
        .is_err());
        let p =
            Perturbation::new(AttackKind::Sba, vec![(8, 1.0f32)], 9, Default::default()).unwrap();
        let mut small = Network::<f32>::mlp(&[2, 2], Activation::Identity, 0).unwrap();
        assert!(p.apply(&mut small).is_err());
        assert!(small.params().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn deltas_accumulate() {
        let base = t9::<f32>();
        let p = Perturbation::new(AttackKind::Random, vec![(6, 0.5f32)], 9, Default::default())
            .unwrap();
        let once = p.applied_to(&base).unwrap();
        let twice = p.applied_to(&once).unwrap();
        assert_eq!(once.params()[6], 1.5);
        assert_eq!(twice.params()[6], 2.0);
    }

    #[test]
    fn sba_on_t9_hits_a_bias_with_scaled_delta() {
        let net = t9::<f32>();
        let spec = AttackSpec::of_kind(AttackKind::Sba);
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..64 {
            let p = sba(&net, &spec, seed).unwrap();
            assert_eq!(p.entries().len(), 1);
            let (i, d) = p.entries()[0];
            assert!([4, 5, 8].contains(&i));
            assert_eq!(d, 10.0);
            seen.insert(i);
            let mut n = net.clone();
            p.apply(&mut n).unwrap().revert(&mut n).unwrap();
            assert_eq!(bits(&n), bits(&net));
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn random_counts_and_degenerate_noise() {
        let net = t9::<f32>();
        let spec = AttackSpec {
            random_fraction: 1.0,
            ..AttackSpec::of_kind(AttackKind::Random)
        };
        let p = random_perturb(&net, &spec, 1).unwrap();
        assert_eq!(p.entries().len(), 9);
        assert_eq!(p, random_perturb(&net, &spec, 1).unwrap());
        assert_ne!(p, random_perturb(&net, &spec, 2).unwrap());

        let quiet = AttackSpec {
            random_sigma: 0.0,
            ..spec.clone()
        };
        assert!(random_perturb(&net, &quiet, 1)
            .unwrap()
            .entries()
            .iter()
            .all(|&(_, d)| d == 0.0));

        let small = AttackSpec {
            random_fraction: 0.2,
            ..spec.clone()
        };
        assert_eq!(random_perturb(&net, &small, 1).unwrap().entries().len(), 2);
        for bad in [0.0, 1.5, f64::NAN] {
            let s = AttackSpec {
                random_fraction: bad,
                ..spec.clone()
            };
            assert!(random_perturb(&net, &s, 1).is_err());
        }
    }

    #[test]
    fn gda_flips_two_logit_net() {
        let net = t9_two_logit::<f32>();
        let target = GdaTarget {
            input: Tensor::from_vec(vec![1.0, 0.0]),
            label: 0,
            desired: 1,
        };
        let spec = AttackSpec {
            gda_m: 2,
            gda_step: 0.2,
            ..AttackSpec::of_kind(AttackKind::Gda)
        };
        let p = gda(&net, &spec, &target).unwrap();
        assert_eq!(p.meta().success, Some(true));
        assert_eq!(p.applied_to(&net).unwrap().predict(&[1.0, 0.0]).unwrap(), 1);
        assert!(p.entries().len() <= spec.gda_m * p.meta().iterations.unwrap());
    }

    #[test]
    fn gda_errors() {
        let net = t9_two_logit::<f32>();
        let target = GdaTarget {
            input: Tensor::from_vec(vec![1.0, 0.0]),
            label: 0,
            desired: 1,
        };
        let zero_iters = AttackSpec {
            gda_max_iters: 0,
            ..AttackSpec::of_kind(AttackKind::Gda)
        };
        assert!(gda(&net, &zero_iters, &target).is_err());
        let wrong = GdaTarget {
            label: 1,
            desired: 0,
            ..target.clone()
        };
        assert!(matches!(
            gda(&net, &AttackSpec::of_kind(AttackKind::Gda), &wrong),
            Err(Error::Precondition(_))
        ));
        let same = GdaTarget {
            desired: 0,
            ..target
        };
        assert!(gda(&net, &AttackSpec::of_kind(AttackKind::Gda), &same).is_err());
    }

    #[test]
    fn gda_target_is_correct_and_desired_is_wrong() {
        let net = t9_two_logit::<f32>();
        let inputs = vec![
            Tensor::from_vec(vec![1.0, 0.0]),
            Tensor::from_vec(vec![0.0, 1.0]),
        ];
        // Sample 0 is mislabeled on purpose and must be skipped.
        let pool = LabeledDataset::new(inputs, vec![Some(1), Some(1)], Provenance::Toy).unwrap();
        for seed in 0..16 {
            let t = GdaTarget::choose(&net, &pool, seed).unwrap();
            assert_eq!(t.input.as_slice(), &[0.0, 1.0]);
            assert_eq!((t.label, t.desired), (1, 0));
        }
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = AttackSpec {
            gda_m: 7,
            ..AttackSpec::of_kind(AttackKind::Gda)
        };
        let s = serde_json::to_string(&spec).unwrap();
        assert!(s.contains("\"kind\":\"gda\""));
        assert_eq!(serde_json::from_str::<AttackSpec>(&s).unwrap(), spec);
        let partial: AttackSpec =
            serde_json::from_str(r#"{"kind":"random","random_sigma":0.5}"#).unwrap();
        assert_eq!(partial.random_sigma, 0.5);
        assert_eq!(partial.random_fraction, 0.01);
    }

    fn preacts(net: &Network<f64>, x: &[f64]) -> Vec<f64> {
        let trace = net.forward(x).unwrap();
        trace.layer_output(0).to_vec()
    }

    /// Unactivated parameters (ReLU, eps = 0) do not move the logits under
    /// small deltas, and activated ones do under large deltas. The small-delta
    /// half only holds away from ReLU kinks: a hidden pre-activation sitting
    /// exactly at 0 has zero derivative, yet a positive nudge opens the unit.
    #[test]
    fn t9_mask_predicts_effect_of_perturbation() {
        let net = t9::<f64>();
        let cfg = CoverageConfig::new(0.0, Default::default()).unwrap();
        let grid = [-1.0, -0.5, 0.0, 0.5, 1.0];
        for &a in &grid {
            for &b in &grid {
                let x = [a, b];
                let mask = activation_mask(&net, &x, &cfg).unwrap();
                let at_kink = preacts(&net, &x).contains(&0.0);
                let base = net.logits(&x).unwrap();
                for j in 0..9 {
                    let change = |d: f64| {
                        let p = Perturbation::new(
                            AttackKind::Random,
                            vec![(j, d)],
                            9,
                            Default::default(),
                        )
                        .unwrap();
                        let l = p.applied_to(&net).unwrap().logits(&x).unwrap();
                        (l[0] - base[0]).abs()
                    };
                    if mask.get(j) {
                        for d in [1.0, 10.0] {
                            assert!(change(d) > 1e-3, "x={x:?} j={j} d={d}");
                        }
                    } else if !at_kink {
                        for d in [1e-3, -1e-3, 1e-4, -1e-4] {
                            assert!(change(d) < 1e-5, "x={x:?} j={j} d={d}");
                        }
                    } else {
                        // One direction pushes the kinked unit further shut.
                        assert!(change(1e-3).min(change(-1e-3)) < 1e-5, "x={x:?} j={j}");
                    }
                }
            }
        }
    }

    #[test]
    fn kink_counterexample_is_real() {
        // At (1, 0) hidden unit 1 sits exactly at 0: b1[1] is not activated,
        // but +1e-3 opens the unit and moves the logit by -1e-3.
        let net = t9::<f64>();
        let cfg = CoverageConfig::new(0.0, Default::default()).unwrap();
        let mask = activation_mask(&net, &[1.0, 0.0], &cfg).unwrap();
        assert!(!mask.get(5));
        let p = Perturbation::new(AttackKind::Sba, vec![(5, 1e-3)], 9, Default::default()).unwrap();
        let l = p.applied_to(&net).unwrap().logits(&[1.0, 0.0]).unwrap();
        assert!((l[0] - (1.0 - 1e-3)).abs() < 1e-12);
    }

    fn random_net() -> impl Strategy<Value = Network<f32>> {
        (1usize..6, 1usize..6, 1usize..4, any::<u64>(), any::<bool>()).prop_map(
            |(i, h, o, seed, tanh)| {
                let act = if tanh {
                    Activation::Tanh
                } else {
                    Activation::Relu
                };
                Network::mlp(&[i, h, o], act, seed).unwrap()
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn apply_then_revert_is_bit_exact(net in random_net(), seed in any::<u64>(), sigma in 0.0f64..1e3, fraction in 0.01f64..=1.0) {
            let spec = AttackSpec { random_sigma: sigma, random_fraction: fraction, ..AttackSpec::of_kind(AttackKind::Random) };
            let p = random_perturb(&net, &spec, seed).unwrap();
            let mut n = net.clone();
            let token = p.apply(&mut n).unwrap();
            token.revert(&mut n).unwrap();
            prop_assert_eq!(bits(&n), bits(&net));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gda_locality_and_success_flag(net in random_net(), x in proptest::collection::vec(0.0f32..1.0, 5), m in 1usize..6, iters in 1usize..20, step in 0.01f64..0.5, desired_seed in any::<u64>()) {
            let input = Tensor::from_vec(x[..net.input_dim()].to_vec());
            let k = net.output_dim();
            prop_assume!(k >= 2);
            let label = net.predict(&input).unwrap();
            let desired = (label + 1 + (desired_seed as usize % (k - 1))) % k;
            let spec = AttackSpec { gda_m: m, gda_step: step, gda_max_iters: iters, ..AttackSpec::of_kind(AttackKind::Gda) };
            match gda(&net, &spec, &GdaTarget { input: input.clone(), label, desired }) {
                Ok(p) => {
                    let nonzero = p.entries().iter().filter(|(_, d)| *d != 0.0).count();
                    prop_assert!(nonzero <= m * p.meta().iterations.unwrap());
                    prop_assert!(p.meta().iterations.unwrap() <= iters);
                    let hit = p.applied_to(&net).unwrap().predict(&input).unwrap() == desired;
                    prop_assert_eq!(p.meta().success, Some(hit));
                }
                // A dead network has no gradient to follow.
                Err(Error::InvalidConfig(_)) => {}
                Err(e) => return Err(TestCaseError::fail(format!("{e}"))),
            }
        }
    }
}
