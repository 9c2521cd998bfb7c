//! Functional test suite generation.
//!
//! Three sources of tests are provided: greedy selection from a corpus,
//! gradient-based synthesis, and a combined strategy that selects from the
//! corpus until a synthetic batch promises more coverage per test than the
//! best remaining corpus sample, then switches to synthesis for good.

mod synth;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use synth::{synthesize_batch, SynthesisConfig, SyntheticInput};

use crate::coverage::ActivationMask;
use crate::coverage::{
    activation_mask, activation_masks, vc_single, CoverageConfig, CoverageReport,
};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{Network, SoftmaxCrossEntropy};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenBudget {
    /// Maximum number of tests.
    pub n_max: usize,
    /// When set, each greedy iteration scores only this many randomly drawn
    /// corpus samples.
    #[serde(default)]
    pub candidate_cap: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl GenBudget {
    pub fn new(n_max: usize, seed: u64) -> Self {
        Self {
            n_max,
            candidate_cap: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 {
            return Err(Error::InvalidConfig("n_max must be >= 1".into()));
        }
        if self.candidate_cap == Some(0) {
            return Err(Error::InvalidConfig("candidate_cap must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestOrigin {
    Selected { corpus_index: usize },
    Synthetic { target: usize, reached_target: bool },
    Random { corpus_index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteTest<T = f32> {
    pub input: Tensor<T>,
    pub origin: TestOrigin,
    pub mask: ActivationMask,
    /// Coverage added by this test given all earlier ones.
    pub gain: f64,
    pub cumulative_vc: f64,
}

/// Ordered tests with their masks and running coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSuite<T = f32> {
    tests: Vec<SuiteTest<T>>,
    cumulative: ActivationMask,
    switch_point: Option<usize>,
    saturated: bool,
}

impl<T: Scalar> GeneratedSuite<T> {
    pub fn new(param_count: usize) -> Self {
        Self {
            tests: Vec::new(),
            cumulative: ActivationMask::empty(param_count),
            switch_point: None,
            saturated: false,
        }
    }

    /// Suite made of arbitrary inputs, masks computed against `net`.
    pub fn from_inputs(
        net: &Network<T>,
        inputs: Vec<Tensor<T>>,
        origin: impl Fn(usize) -> TestOrigin,
        cfg: &CoverageConfig,
    ) -> Result<Self> {
        let masks = activation_masks(net, &inputs, cfg)?;
        let mut suite = Self::new(net.param_count());
        for (i, (x, m)) in inputs.into_iter().zip(masks).enumerate() {
            suite.push(x, origin(i), m)?;
        }
        Ok(suite)
    }

    pub fn push(
        &mut self,
        input: Tensor<T>,
        origin: TestOrigin,
        mask: ActivationMask,
    ) -> Result<()> {
        let n = mask.count_new(&self.cumulative)?;
        self.cumulative.union_with(&mask)?;
        self.tests.push(SuiteTest {
            input,
            origin,
            mask,
            gain: n as f64 / self.cumulative.len().max(1) as f64,
            cumulative_vc: vc_single(&self.cumulative),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tests.is_empty()
    }

    pub fn tests(&self) -> &[SuiteTest<T>] {
        &self.tests
    }

    pub fn inputs(&self) -> impl Iterator<Item = &Tensor<T>> + '_ {
        self.tests.iter().map(|t| &t.input)
    }

    pub fn param_count(&self) -> usize {
        self.cumulative.len()
    }

    pub fn cumulative_mask(&self) -> &ActivationMask {
        &self.cumulative
    }

    pub fn vc(&self) -> f64 {
        vc_single(&self.cumulative)
    }

    /// Index of the first synthetic test in a combined suite.
    pub fn switch_point(&self) -> Option<usize> {
        self.switch_point
    }

    /// True when generation stopped early because no source could add coverage.
    pub fn saturated(&self) -> bool {
        self.saturated
    }

    /// The first `n` tests (or all, if fewer).
    pub fn prefix(&self, n: usize) -> Self {
        let mut out = Self::new(self.param_count());
        for t in self.tests.iter().take(n) {
            out.push(t.input.clone(), t.origin, t.mask.clone())
                .expect("masks of one suite share a length");
        }
        out.switch_point = self.switch_point.filter(|&s| s < n);
        out.saturated = self.saturated && n >= self.len();
        out
    }

    pub fn report(&self) -> CoverageReport {
        CoverageReport::from_masks(
            self.param_count(),
            self.tests.iter().map(|t| &t.mask).enumerate(),
        )
        .expect("masks of one suite share a length")
    }
}

/// Prefix coverage `(n, VC of the first n tests)` for `n = 1..=len`.
pub fn coverage_curve<T: Scalar>(suite: &GeneratedSuite<T>) -> Vec<(usize, f64)> {
    suite
        .tests()
        .iter()
        .enumerate()
        .map(|(i, t)| (i + 1, t.cumulative_vc))
        .collect()
}

/// Corpus samples not yet taken, with lazily computed and cached masks.
struct CorpusPool<'a, T> {
    net: &'a Network<T>,
    corpus: &'a LabeledDataset<T>,
    cfg: &'a CoverageConfig,
    masks: Vec<Option<ActivationMask>>,
    available: Vec<usize>,
    cap: Option<usize>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> CorpusPool<'a, T> {
    fn new(
        net: &'a Network<T>,
        corpus: &'a LabeledDataset<T>,
        budget: &GenBudget,
        cfg: &'a CoverageConfig,
    ) -> Result<Self> {
        budget.validate()?;
        if corpus.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut pool = Self {
            net,
            corpus,
            cfg,
            masks: vec![None; corpus.len()],
            available: (0..corpus.len()).collect(),
            cap: budget.candidate_cap,
            rng: ChaCha8Rng::seed_from_u64(budget.seed),
        };
        if pool.cap.is_none() {
            pool.ensure(&(0..corpus.len()).collect::<Vec<_>>())?;
        }
        Ok(pool)
    }

    fn ensure(&mut self, indices: &[usize]) -> Result<()> {
        let missing: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| self.masks[i].is_none())
            .collect();
        let inputs: Vec<&Tensor<T>> = missing.iter().map(|&i| &self.corpus.inputs()[i]).collect();
        for (i, m) in missing
            .iter()
            .zip(activation_masks(self.net, &inputs, self.cfg)?)
        {
            self.masks[*i] = Some(m);
        }
        Ok(())
    }

    /// Highest `(new bits, -index)` among `indices`, all of which have masks.
    fn argbest(&self, indices: &[usize], covered: &ActivationMask) -> Result<(usize, usize)> {
        let mut best = (indices[0], 0usize);
        let mut first = true;
        for &i in indices {
            let n = self.masks[i]
                .as_ref()
                .expect("mask computed")
                .count_new(covered)?;
            if first || n > best.1 || (n == best.1 && i < best.0) {
                best = (i, n);
                first = false;
            }
        }
        Ok(best)
    }

    /// Best available sample and its number of newly covered parameters, or
    /// `None` once the corpus is used up. With a candidate cap a zero result
    /// from the sample is confirmed by a full scan.
    fn best(&mut self, covered: &ActivationMask) -> Result<Option<(usize, usize)>> {
        if self.available.is_empty() {
            return Ok(None);
        }
        let sampled = match self.cap {
            Some(cap) if cap < self.available.len() => {
                let mut c: Vec<usize> = sample(&mut self.rng, self.available.len(), cap)
                    .into_iter()
                    .map(|p| self.available[p])
                    .collect();
                c.sort_unstable();
                Some(c)
            }
            _ => None,
        };
        if let Some(c) = &sampled {
            self.ensure(c)?;
            let best = self.argbest(c, covered)?;
            if best.1 > 0 {
                return Ok(Some(best));
            }
        }
        let all = self.available.clone();
        self.ensure(&all)?;
        self.argbest(&all, covered).map(Some)
    }

    fn take(&mut self, index: usize) -> (Tensor<T>, ActivationMask) {
        self.available.retain(|&i| i != index);
        let mask = self.masks[index].clone().expect("mask computed");
        (self.corpus.inputs()[index].clone(), mask)
    }
}

/// Greedy maximum-coverage selection from `corpus`.
///
/// Each iteration takes the sample adding the most uncovered parameters
/// (ties to the lowest corpus index). Stops at `n_max` tests or, marking the
/// suite saturated, when no sample adds anything.
pub fn greedy_select<T: Scalar>(
    net: &Network<T>,
    corpus: &LabeledDataset<T>,
    budget: &GenBudget,
    cfg: &CoverageConfig,
) -> Result<GeneratedSuite<T>> {
    let mut pool = CorpusPool::new(net, corpus, budget, cfg)?;
    let mut suite = GeneratedSuite::new(net.param_count());
    while suite.len() < budget.n_max {
        match pool.best(suite.cumulative_mask())? {
            Some((i, n)) if n > 0 => {
                let (x, m) = pool.take(i);
                suite.push(x, TestOrigin::Selected { corpus_index: i }, m)?;
            }
            _ => {
                suite.saturated = true;
                break;
            }
        }
    }
    Ok(suite)
}

/// A synthesized batch with masks, ready to be appended to a suite.
#[derive(Clone)]
struct Batch<T> {
    tests: Vec<(SyntheticInput<T>, ActivationMask)>,
    union: ActivationMask,
}

impl<T: Scalar> Batch<T> {
    fn synthesize(net: &Network<T>, syn: &SynthesisConfig, cfg: &CoverageConfig) -> Result<Self> {
        let inputs = synthesize_batch(net, syn, &SoftmaxCrossEntropy)?;
        let mut union = ActivationMask::empty(net.param_count());
        let mut tests = Vec::with_capacity(inputs.len());
        for s in inputs {
            let m = activation_mask(net, &s.input, cfg)?;
            union.union_with(&m)?;
            tests.push((s, m));
        }
        Ok(Self { tests, union })
    }

    /// Appends copies of the batch, each in greedy gain order, until the
    /// suite holds `n_max` tests.
    fn fill(&self, suite: &mut GeneratedSuite<T>, n_max: usize) -> Result<()> {
        while suite.len() < n_max {
            let room = n_max - suite.len();
            self.clone().append_to(suite, room)?;
        }
        Ok(())
    }

    /// Appends up to `room` tests in greedy gain order.
    fn append_to(mut self, suite: &mut GeneratedSuite<T>, room: usize) -> Result<()> {
        for _ in 0..room.min(self.tests.len()) {
            let mut best = 0;
            let mut best_n = 0;
            for (j, (_, m)) in self.tests.iter().enumerate() {
                let n = m.count_new(suite.cumulative_mask())?;
                if n > best_n {
                    best = j;
                    best_n = n;
                }
            }
            let (s, m) = self.tests.remove(best);
            let origin = TestOrigin::Synthetic {
                target: s.target,
                reached_target: s.reached_target,
            };
            suite.push(s.input, origin, m)?;
        }
        Ok(())
    }
}

/// Tests made only of synthetic batches.
///
/// Synthesis starts every batch from zeros and is deterministic, so every
/// batch after the first repeats it exactly and adds no coverage. The budget
/// is still filled.
pub fn synthesis_generate<T: Scalar>(
    net: &Network<T>,
    budget: &GenBudget,
    syn: &SynthesisConfig,
    cfg: &CoverageConfig,
) -> Result<GeneratedSuite<T>> {
    budget.validate()?;
    let batch = Batch::synthesize(net, syn, cfg)?;
    let mut suite = GeneratedSuite::new(net.param_count());
    batch.fill(&mut suite, budget.n_max)?;
    Ok(suite)
}

/// Greedy selection with a one-way switch to synthesis.
///
/// Before every pick the best corpus gain is compared with the mean gain per
/// test of a synthetic batch against the current coverage. Synthesis wins
/// when strictly better, or when the corpus is used up while coverage is
/// still incomplete. After the switch, synthetic batches fill the rest of
/// the budget, see [`synthesis_generate`].
pub fn combined_generate<T: Scalar>(
    net: &Network<T>,
    corpus: &LabeledDataset<T>,
    budget: &GenBudget,
    syn: &SynthesisConfig,
    cfg: &CoverageConfig,
) -> Result<GeneratedSuite<T>> {
    let mut pool = CorpusPool::new(net, corpus, budget, cfg)?;
    let syn = SynthesisConfig {
        input_shape: syn
            .input_shape
            .clone()
            .or_else(|| Some(corpus.input_shape().to_vec())),
        ..syn.clone()
    };
    // The probe is a pure function of the network, so one batch serves
    // every comparison.
    let batch = Batch::synthesize(net, &syn, cfg)?;
    let k = batch.tests.len().max(1);

    let mut suite = GeneratedSuite::new(net.param_count());
    while suite.len() < budget.n_max {
        let covered = suite.cumulative_mask();
        let best = pool.best(covered)?;
        let probe = batch.union.count_new(covered)?;
        let switch = match best {
            None => covered.count() < covered.len(),
            Some((_, n)) => probe > n * k,
        };
        if switch {
            suite.switch_point = Some(suite.len());
            batch.fill(&mut suite, budget.n_max)?;
            return Ok(suite);
        }
        match best {
            Some((i, n)) if n > 0 => {
                let (x, m) = pool.take(i);
                suite.push(x, TestOrigin::Selected { corpus_index: i }, m)?;
            }
            _ => {
                suite.saturated = true;
                break;
            }
        }
    }
    Ok(suite)
}

/// `n` distinct corpus samples drawn uniformly at random, in draw order.
pub fn random_suite<T: Scalar>(
    net: &Network<T>,
    corpus: &LabeledDataset<T>,
    n: usize,
    seed: u64,
    cfg: &CoverageConfig,
) -> Result<GeneratedSuite<T>> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if n > corpus.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot draw {n} tests from a corpus of {}",
            corpus.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, corpus.len(), n).into_vec();
    let inputs = picks.iter().map(|&i| corpus.inputs()[i].clone()).collect();
    GeneratedSuite::from_inputs(
        net,
        inputs,
        |j| TestOrigin::Random {
            corpus_index: picks[j],
        },
        cfg,
    )
}
