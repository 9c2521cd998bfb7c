//! Parameter-activation coverage.
//!
//! A parameter is activated by an input when the magnitude of some selected
//! logit's gradient with respect to it exceeds `epsilon` (with `epsilon == 0`
//! this is the plain "gradient is non-zero" rule). Validation coverage (VC) of
//! a test set is the fraction of parameters activated by at least one test.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, Dense, Layer, Network};
use crate::scalar::Scalar;

/// Fixed-length bitset over flat parameter indices with a cached popcount.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivationMask {
    words: Vec<u64>,
    len: usize,
    count: usize,
}

impl ActivationMask {
    pub fn empty(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
            count: 0,
        }
    }

    pub fn full(len: usize) -> Self {
        let mut m = Self::empty(len);
        for i in 0..len {
            m.set(i);
        }
        m
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut m = Self::empty(len);
        for i in indices {
            if i >= len {
                return Err(Error::IndexOutOfRange {
                    what: "mask bit",
                    index: i,
                    limit: len,
                });
            }
            m.set(i);
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of set bits.
    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] >> (i % 64) & 1 == 1
    }

    /// Sets bit `i`. Panics if `i` is out of range.
    #[inline]
    pub fn set(&mut self, i: usize) {
        assert!(
            i < self.len,
            "bit {i} out of range for mask of length {}",
            self.len
        );
        let w = &mut self.words[i / 64];
        let bit = 1u64 << (i % 64);
        if *w & bit == 0 {
            *w |= bit;
            self.count += 1;
        }
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let b = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + b)
            })
        })
    }

    fn check_len(&self, other: &Self) -> Result<()> {
        if self.len != other.len {
            return Err(Error::Dimension {
                expected: self.len,
                got: other.len,
            });
        }
        Ok(())
    }

    pub fn union_with(&mut self, other: &Self) -> Result<()> {
        self.check_len(other)?;
        let mut count = 0;
        for (a, &b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
            count += a.count_ones() as usize;
        }
        self.count = count;
        Ok(())
    }

    /// Number of bits set in `self` but not in `covered`.
    pub fn count_new(&self, covered: &Self) -> Result<usize> {
        self.check_len(covered)?;
        Ok(self
            .words
            .iter()
            .zip(&covered.words)
            .map(|(&a, &b)| (a & !b).count_ones() as usize)
            .sum())
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.len == other.len
            && self
                .words
                .iter()
                .zip(&other.words)
                .all(|(&a, &b)| a & !b == 0)
    }

    /// Little-endian byte encoding of the bit words, as hex.
    pub fn to_hex(&self) -> String {
        let bytes: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        hex::encode(bytes)
    }

    pub fn from_hex(len: usize, s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::Corrupt(format!("mask hex: {e}")))?;
        let n_words = len.div_ceil(64);
        if bytes.len() != n_words * 8 {
            return Err(Error::Corrupt(format!(
                "mask of {len} bits needs {} bytes, got {}",
                n_words * 8,
                bytes.len()
            )));
        }
        let words: Vec<u64> = bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if len % 64 != 0 && words.last().is_some_and(|w| w >> (len % 64) != 0) {
            return Err(Error::Corrupt("mask has bits beyond its length".into()));
        }
        let count = words.iter().map(|w| w.count_ones() as usize).sum();
        Ok(Self { words, len, count })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitMode {
    #[default]
    AllLogits,
    PredictedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub epsilon: f64,
    #[serde(default)]
    pub logit_mode: LogitMode,
}

/// Threshold used for networks with saturating activations.
pub const SATURATING_EPSILON: f64 = 1e-4;

impl CoverageConfig {
    pub fn new(epsilon: f64, logit_mode: LogitMode) -> Result<Self> {
        if epsilon.is_nan() || epsilon < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be >= 0, got {epsilon}"
            )));
        }
        Ok(Self {
            epsilon,
            logit_mode,
        })
    }

    /// Zero threshold for piecewise-linear networks, `1e-4` when any
    /// activation saturates.
    pub fn for_network<T: Scalar>(net: &Network<T>) -> Self {
        let epsilon = if net.activations().any(|a| a.saturates()) {
            SATURATING_EPSILON
        } else {
            0.0
        };
        Self {
            epsilon,
            logit_mode: LogitMode::AllLogits,
        }
    }
}

/// Parameters activated by `input`.
///
/// The per-parameter gradient of logit `c` is `g_c[r] * a[j]` for a weight
/// (and `g_c[r]` for a bias), where `g_c` is the gradient at the dense
/// layer's output and `a` its input. Rounded multiplication is monotone in
/// magnitude, so the maximum over logits equals `max_c |g_c[r]| * |a[j]|`
/// exactly and only the per-row maximum needs to be kept.
pub fn activation_mask<T: Scalar, I: AsRef<[T]> + ?Sized>(
    net: &Network<T>,
    input: &I,
    cfg: &CoverageConfig,
) -> Result<ActivationMask> {
    let trace = net.forward(input)?;
    let k = net.output_dim();
    let outputs: Vec<usize> = match cfg.logit_mode {
        LogitMode::AllLogits => (0..k).collect(),
        LogitMode::PredictedOnly => vec![argmax(trace.logits())],
    };

    let dense: Vec<(usize, Dense)> = net
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(li, l)| match l {
            Layer::Dense(d) => Some((li, *d)),
            Layer::Activation(_) => None,
        })
        .collect();
    let mut row_max: Vec<Vec<T>> = dense
        .iter()
        .map(|(_, d)| vec![T::zero(); d.out_dim])
        .collect();

    let mut seed = vec![T::zero(); k];
    for &c in &outputs {
        seed.iter_mut().for_each(|s| *s = T::zero());
        seed[c] = T::one();
        net.backward_with(&trace, &seed, None, false, |d, _, g| {
            let di = dense
                .binary_search_by_key(&d.offset, |(_, x)| x.offset)
                .expect("dense layer belongs to this network");
            for (m, &gr) in row_max[di].iter_mut().zip(g) {
                let a = gr.abs();
                if a > *m {
                    *m = a;
                }
            }
        });
    }

    let eps = T::lit(cfg.epsilon);
    let mut mask = ActivationMask::empty(net.param_count());
    for ((li, d), gmax) in dense.iter().zip(&row_max) {
        let a: Vec<T> = trace.layer_input(*li).iter().map(|v| v.abs()).collect();
        for (r, &gm) in gmax.iter().enumerate() {
            if gm == T::zero() {
                continue;
            }
            if gm > eps {
                mask.set(d.bias_index(r));
            }
            let base = d.weight_index(r, 0);
            for (j, &aj) in a.iter().enumerate() {
                if gm * aj > eps {
                    mask.set(base + j);
                }
            }
        }
    }
    Ok(mask)
}

/// Masks for many inputs, computed in parallel. Output order follows input order.
pub fn activation_masks<T, I>(
    net: &Network<T>,
    inputs: &[I],
    cfg: &CoverageConfig,
) -> Result<Vec<ActivationMask>>
where
    T: Scalar,
    I: AsRef<[T]> + Sync,
{
    inputs
        .par_iter()
        .map(|x| activation_mask(net, x.as_ref(), cfg))
        .collect()
}

pub fn vc_single(mask: &ActivationMask) -> f64 {
    if mask.is_empty() {
        0.0
    } else {
        mask.count() as f64 / mask.len() as f64
    }
}

/// VC of a test set together with the union of its masks. An empty list has
/// VC 0 and an empty zero-length union.
pub fn vc_set(masks: &[ActivationMask]) -> Result<(f64, ActivationMask)> {
    let Some(first) = masks.first() else {
        return Ok((0.0, ActivationMask::empty(0)));
    };
    let mut union = first.clone();
    for m in &masks[1..] {
        union.union_with(m)?;
    }
    Ok((vc_single(&union), union))
}

/// Coverage increase from adding `candidate` to a set whose union is `cumulative`.
pub fn marginal_gain(cumulative: &ActivationMask, candidate: &ActivationMask) -> Result<f64> {
    let new = candidate.count_new(cumulative)?;
    Ok(if candidate.is_empty() {
        0.0
    } else {
        new as f64 / candidate.len() as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub test_id: usize,
    pub vc: f64,
    pub gain: f64,
    pub cumulative_vc: f64,
}

/// Per-test coverage, marginal gains and the cumulative trajectory of an
/// ordered test sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ReportWire", into = "ReportWire")]
pub struct CoverageReport {
    pub param_count: usize,
    pub entries: Vec<ReportEntry>,
    pub cumulative: ActivationMask,
}

#[derive(Serialize, Deserialize)]
struct ReportWire {
    format_version: u32,
    param_count: usize,
    final_vc: f64,
    entries: Vec<ReportEntry>,
    /// Little-endian bit words of the cumulative mask, hex encoded.
    cumulative_mask: String,
}

impl From<CoverageReport> for ReportWire {
    fn from(r: CoverageReport) -> Self {
        ReportWire {
            format_version: CoverageReport::FORMAT_VERSION,
            param_count: r.param_count,
            final_vc: r.final_vc(),
            entries: r.entries,
            cumulative_mask: r.cumulative.to_hex(),
        }
    }
}

impl TryFrom<ReportWire> for CoverageReport {
    type Error = Error;

    fn try_from(w: ReportWire) -> Result<Self> {
        if w.format_version != CoverageReport::FORMAT_VERSION {
            return Err(Error::Version(format!(
                "coverage report v{}",
                w.format_version
            )));
        }
        Ok(CoverageReport {
            param_count: w.param_count,
            entries: w.entries,
            cumulative: ActivationMask::from_hex(w.param_count, &w.cumulative_mask)?,
        })
    }
}

impl CoverageReport {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn from_masks<'a>(
        param_count: usize,
        tests: impl IntoIterator<Item = (usize, &'a ActivationMask)>,
    ) -> Result<Self> {
        let mut cumulative = ActivationMask::empty(param_count);
        let mut entries = Vec::new();
        for (test_id, mask) in tests {
            let gain = marginal_gain(&cumulative, mask)?;
            cumulative.union_with(mask)?;
            entries.push(ReportEntry {
                test_id,
                vc: vc_single(mask),
                gain,
                cumulative_vc: vc_single(&cumulative),
            });
        }
        Ok(Self {
            param_count,
            entries,
            cumulative,
        })
    }

    pub fn final_vc(&self) -> f64 {
        vc_single(&self.cumulative)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fixtures::{t9, t9_two_logit};
    use crate::nn::{Activation, LayerSpec};
    use proptest::prelude::*;

    const EXACT: CoverageConfig = CoverageConfig {
        epsilon: 0.0,
        logit_mode: LogitMode::AllLogits,
    };

    fn ones(m: &ActivationMask) -> Vec<usize> {
        m.iter_ones().collect()
    }

    #[test]
    fn t9_masks_by_hand() {
        let net = t9::<f32>();
        let m = activation_mask(&net, &[1.0f32, 0.0], &EXACT).unwrap();
        assert_eq!(ones(&m), vec![0, 4, 6, 8]);
        assert!((vc_single(&m) - 4.0 / 9.0).abs() < 1e-12);
        let m = activation_mask(&net, &[0.0f32, 0.0], &EXACT).unwrap();
        assert_eq!(ones(&m), vec![8]);
        let m = activation_mask(&net, &[1.0f32, 1.0], &EXACT).unwrap();
        assert_eq!(m.count(), 9);
    }

    #[test]
    fn infinite_epsilon_gives_empty_mask() {
        let net = Network::<f32>::mlp(&[3, 4, 2], Activation::Tanh, 1).unwrap();
        let cfg = CoverageConfig::new(f64::INFINITY, LogitMode::AllLogits).unwrap();
        assert_eq!(
            activation_mask(&net, &[0.3f32, 0.1, 0.9], &cfg)
                .unwrap()
                .count(),
            0
        );
        assert!(CoverageConfig::new(-1.0, LogitMode::AllLogits).is_err());
    }

    #[test]
    fn t9_set_coverage_and_gain() {
        let net = t9::<f32>();
        let a = activation_mask(&net, &[1.0f32, 0.0], &EXACT).unwrap();
        let b = activation_mask(&net, &[0.0f32, 1.0], &EXACT).unwrap();
        let (vc, union) = vc_set(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(union.count(), 7);
        assert!(!union.get(1) && !union.get(2));
        assert!((vc - 7.0 / 9.0).abs() < 1e-12);
        assert!((marginal_gain(&a, &b).unwrap() - 3.0 / 9.0).abs() < 1e-12);
        assert_eq!(marginal_gain(&union, &a).unwrap(), 0.0);
        assert_eq!(
            marginal_gain(&ActivationMask::empty(9), &a).unwrap(),
            vc_single(&a)
        );
        assert_eq!(vc_set(&[a.clone(), a.clone()]).unwrap().0, vc_single(&a));
        assert_eq!(vc_set(&[]).unwrap().0, 0.0);
        assert!(vc_set(&[a, ActivationMask::empty(3)]).is_err());
    }

    #[test]
    fn predicted_only_mode_uses_one_logit() {
        let net = t9_two_logit::<f32>();
        let pred = CoverageConfig {
            epsilon: 0.0,
            logit_mode: LogitMode::PredictedOnly,
        };
        let all = activation_mask(&net, &[1.0f32, 0.0], &EXACT).unwrap();
        let one = activation_mask(&net, &[1.0f32, 0.0], &pred).unwrap();
        assert!(one.is_subset_of(&all));
        // Output row 1 (weights 8, 9 and bias 11) is not reached from logit 0.
        assert!(all.get(11) && !one.get(11));
    }

    #[test]
    fn full_and_empty_masks() {
        assert_eq!(vc_single(&ActivationMask::full(70)), 1.0);
        assert_eq!(vc_single(&ActivationMask::empty(70)), 0.0);
        assert_eq!(ActivationMask::full(70).count(), 70);
    }

    #[test]
    fn report_trajectory_and_json() {
        let net = t9::<f32>();
        let masks: Vec<_> = [[1.0f32, 0.0], [0.0, 1.0], [1.0, 1.0]]
            .iter()
            .map(|x| activation_mask(&net, x, &EXACT).unwrap())
            .collect();
        let report = CoverageReport::from_masks(9, masks.iter().enumerate()).unwrap();
        let traj: Vec<f64> = report.entries.iter().map(|e| e.cumulative_vc).collect();
        assert!(traj.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(report.final_vc(), 1.0);
        let back = CoverageReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn mask_hex_rejects_stray_bits() {
        let m = ActivationMask::from_indices(70, [0, 69]).unwrap();
        assert_eq!(ActivationMask::from_hex(70, &m.to_hex()).unwrap(), m);
        assert!(ActivationMask::from_hex(69, &m.to_hex()).is_err());
    }

    fn arb_mask(len: usize) -> impl Strategy<Value = ActivationMask> {
        proptest::collection::vec(any::<bool>(), len).prop_map(move |bits| {
            ActivationMask::from_indices(
                len,
                bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn cached_popcount_is_exact(m in arb_mask(130), n in arb_mask(130)) {
            prop_assert_eq!(m.count(), m.iter_ones().count());
            let mut u = m.clone();
            u.union_with(&n).unwrap();
            prop_assert_eq!(u.count(), u.iter_ones().count());
        }

        #[test]
        fn prefix_vc_is_monotone(ms in proptest::collection::vec(arb_mask(100), 1..8)) {
            let mut last = 0.0;
            for i in 1..=ms.len() {
                let (vc, _) = vc_set(&ms[..i]).unwrap();
                prop_assert!(vc >= last);
                last = vc;
            }
        }

        #[test]
        fn gain_is_submodular(a in arb_mask(100), extra in arb_mask(100), c in arb_mask(100)) {
            let mut b = a.clone();
            b.union_with(&extra).unwrap();
            prop_assert!(marginal_gain(&a, &c).unwrap() >= marginal_gain(&b, &c).unwrap());
            prop_assert!(marginal_gain(&b, &c).unwrap() >= 0.0);
        }

        #[test]
        fn vc_set_is_order_invariant(mut ms in proptest::collection::vec(arb_mask(90), 1..6), seed in any::<u64>()) {
            let (vc, u) = vc_set(&ms).unwrap();
            let n = ms.len();
            ms.rotate_left((seed as usize) % n);
            ms.reverse();
            let (vc2, u2) = vc_set(&ms).unwrap();
            prop_assert_eq!(vc, vc2);
            prop_assert_eq!(u, u2);
        }

        #[test]
        fn disjoint_union_adds(len in 1usize..200, split in 0usize..200) {
            let split = split.min(len);
            let a = ActivationMask::from_indices(len, 0..split).unwrap();
            let b = ActivationMask::from_indices(len, split..len).unwrap();
            let (vc, _) = vc_set(&[a.clone(), b.clone()]).unwrap();
            prop_assert!((vc - (vc_single(&a) + vc_single(&b))).abs() < 1e-12);
        }

        #[test]
        fn epsilon_is_monotone(seed in any::<u64>(), x in proptest::collection::vec(0.0f32..1.0, 4), e1 in 0.0f64..0.5, e2 in 0.0f64..0.5) {
            let net = Network::<f32>::new(4, &[
                LayerSpec::Dense { out: 5 },
                LayerSpec::Activation { function: Activation::Tanh },
                LayerSpec::Dense { out: 3 },
            ], seed).unwrap();
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let m_lo = activation_mask(&net, &x, &CoverageConfig::new(lo, LogitMode::AllLogits).unwrap()).unwrap();
            let m_hi = activation_mask(&net, &x, &CoverageConfig::new(hi, LogitMode::AllLogits).unwrap()).unwrap();
            prop_assert!(m_hi.is_subset_of(&m_lo));
        }

        #[test]
        fn mask_matches_gradient_definition(seed in any::<u64>(), x in proptest::collection::vec(-1.0f32..1.0, 3), eps in prop_oneof![Just(0.0f64), 0.0f64..0.3]) {
            let net = Network::<f32>::mlp(&[3, 6, 4, 3], Activation::Relu, seed).unwrap();
            let cfg = CoverageConfig::new(eps, LogitMode::AllLogits).unwrap();
            let mask = activation_mask(&net, &x, &cfg).unwrap();
            let trace = net.forward(&x).unwrap();
            let grads: Vec<_> = (0..3).map(|c| net.param_gradients(&trace, c).unwrap()).collect();
            for p in 0..net.param_count() {
                let expected = grads.iter().any(|g| g.values[p].abs() > eps as f32);
                prop_assert_eq!(mask.get(p), expected, "param {}", p);
            }
        }
    }
}
