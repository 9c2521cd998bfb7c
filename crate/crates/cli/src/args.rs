use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

#[derive(Debug, Parser)]
#[command(
    name = "paramcover",
    version,
    about = "Parameter-coverage test generation and model integrity validation"
)]
pub struct Cli {
    /// Worker threads for mask computation and attack trials (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an MLP on an IDX dataset and write a PCNM model file.
    Train(TrainArgs),
    /// Generate a test suite and write its manifest and coverage report.
    Generate(GenerateArgs),
    /// Measure detection rates of published suites under seeded attacks.
    AttackEval(AttackEvalArgs),
    /// Replay a manifest against a model (exit 0 intact, 1 perturbed).
    Validate(ValidateArgs),
    /// Coverage report (JSON) of a manifest's tests on a model.
    CoverageReport(CoverageReportArgs),
}

/// Where datasets come from when no explicit IDX paths are given.
#[derive(Debug, Args)]
pub struct DataDir {
    /// Directory holding `mnist/` IDX files.
    #[arg(long, env = "PARAMCOVER_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,
}

impl DataDir {
    /// Explicit IDX pair if both are given, else the standard MNIST file names
    /// under `<data-dir>/mnist`.
    pub fn resolve(
        &self,
        images: &Option<PathBuf>,
        labels: &Option<PathBuf>,
        prefix: &str,
    ) -> (PathBuf, PathBuf) {
        let mnist = self.data_dir.join("mnist");
        let pick = |p: &Option<PathBuf>, kind: &str| {
            p.clone()
                .unwrap_or_else(|| mnist.join(format!("{prefix}-{kind}")))
        };
        (
            pick(images, "images-idx3-ubyte"),
            pick(labels, "labels-idx1-ubyte"),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationArg {
    Relu,
    Tanh,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training images (IDX3); defaults to `<data-dir>/mnist/train-images-idx3-ubyte`.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Training labels (IDX1).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataDir,
    /// Use only the first N training samples.
    #[arg(long, default_value_t = 10_000)]
    pub subset: usize,
    #[arg(long, value_enum, default_value = "relu")]
    pub activation: ActivationArg,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "128,64")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON training report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Select,
    Synth,
    Combined,
    RandomBaseline,
}

/// Generation parameters settable from flags or the config file.
#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Maximum number of tests.
    #[arg(long)]
    pub n_max: Option<usize>,
    /// Synthesis step size.
    #[arg(long)]
    pub step_size: Option<f64>,
    /// Synthesis updates per input.
    #[arg(long)]
    pub max_updates: Option<usize>,
    /// Activation threshold (default: 0 for ReLU, 1e-4 for Tanh networks).
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Score only this many random corpus samples per greedy step.
    #[arg(long)]
    pub candidate_cap: Option<usize>,
    /// Use only the first N corpus samples.
    #[arg(long)]
    pub corpus_size: Option<usize>,
    /// Shape of synthetic inputs when no corpus is loaded, e.g. `28,28`.
    #[arg(long, value_delimiter = ',')]
    pub input_shape: Option<Vec<usize>>,
    /// Store expected logits for strict comparison.
    #[arg(long)]
    pub logits: Option<bool>,
}

impl GenParams {
    /// Fields set here win over `file`.
    pub fn over(self, file: Self) -> Self {
        Self {
            method: self.method.or(file.method),
            n_max: self.n_max.or(file.n_max),
            step_size: self.step_size.or(file.step_size),
            max_updates: self.max_updates.or(file.max_updates),
            epsilon: self.epsilon.or(file.epsilon),
            candidate_cap: self.candidate_cap.or(file.candidate_cap),
            corpus_size: self.corpus_size.or(file.corpus_size),
            input_shape: self.input_shape.or(file.input_shape),
            logits: self.logits.or(file.logits),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// JSON file with generation parameters; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub params: GenParams,
    /// Corpus images (IDX3); defaults to the MNIST training split.
    #[arg(long)]
    pub corpus_images: Option<PathBuf>,
    #[arg(long)]
    pub corpus_labels: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataDir,
    /// Output manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Coverage report path (default: `<out>.coverage.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Label,
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackArg {
    Sba,
    Gda,
    Random,
}

/// Attack-evaluation parameters settable from flags or the config file.
#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Absolute logit tolerance in strict mode.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Suite prefix lengths to report.
    #[arg(long, value_delimiter = ',')]
    pub prefixes: Option<Vec<usize>>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub attacks: Option<Vec<AttackArg>>,
    /// SBA bias delta as a multiple of max |parameter|.
    #[arg(long)]
    pub sba_magnitude: Option<f64>,
    #[arg(long)]
    pub gda_m: Option<usize>,
    #[arg(long)]
    pub gda_step: Option<f64>,
    #[arg(long)]
    pub gda_max_iters: Option<usize>,
    #[arg(long)]
    pub random_sigma: Option<f64>,
    #[arg(long)]
    pub random_fraction: Option<f64>,
    /// GDA target pool size (first N samples).
    #[arg(long)]
    pub pool_size: Option<usize>,
}

impl EvalParams {
    pub fn over(self, file: Self) -> Self {
        Self {
            trials: self.trials.or(file.trials),
            mode: self.mode.or(file.mode),
            tolerance: self.tolerance.or(file.tolerance),
            prefixes: self.prefixes.or(file.prefixes),
            attacks: self.attacks.or(file.attacks),
            sba_magnitude: self.sba_magnitude.or(file.sba_magnitude),
            gda_m: self.gda_m.or(file.gda_m),
            gda_step: self.gda_step.or(file.gda_step),
            gda_max_iters: self.gda_max_iters.or(file.gda_max_iters),
            random_sigma: self.random_sigma.or(file.random_sigma),
            random_fraction: self.random_fraction.or(file.random_fraction),
            pool_size: self.pool_size.or(file.pool_size),
        }
    }
}

#[derive(Debug, Args)]
pub struct AttackEvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Suite to evaluate as `NAME=MANIFEST`; repeat for several.
    #[arg(long = "suite", value_parser = parse_suite, required = true)]
    pub suites: Vec<(String, PathBuf)>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub params: EvalParams,
    /// GDA target pool images; defaults to the MNIST test split.
    #[arg(long)]
    pub pool_images: Option<PathBuf>,
    #[arg(long)]
    pub pool_labels: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataDir,
    /// CSV output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_suite(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected NAME=MANIFEST, got `{s}`")),
    }
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "label")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct CoverageReportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// JSON output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn read_config<T: for<'de> Deserialize<'de> + Default>(
    path: Option<&Path>,
) -> anyhow::Result<T> {
    use anyhow::Context;
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: invalid config", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config_file() {
        let file: GenParams =
            serde_json::from_str(r#"{"method":"random-baseline","n_max":7,"step_size":0.5}"#)
                .unwrap();
        let flags = GenParams {
            n_max: Some(3),
            ..Default::default()
        };
        let merged = flags.over(file);
        assert_eq!(merged.method, Some(Method::RandomBaseline));
        assert_eq!(merged.n_max, Some(3));
        assert_eq!(merged.step_size, Some(0.5));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(serde_json::from_str::<GenParams>(r#"{"nmax":3}"#).is_err());
        assert!(serde_json::from_str::<EvalParams>(r#"{"mode":"fuzzy"}"#).is_err());
    }

    #[test]
    fn suite_argument_syntax() {
        assert_eq!(
            parse_suite("a=b.m").unwrap(),
            ("a".into(), PathBuf::from("b.m"))
        );
        assert!(parse_suite("nopath").is_err());
        assert!(parse_suite("=x").is_err());
    }
}
