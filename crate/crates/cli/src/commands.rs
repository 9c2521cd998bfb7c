use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use paramcover::coverage::{activation_masks, CoverageConfig, CoverageReport, LogitMode};
use paramcover::data::{load_idx, load_model, model_hash, save_model, LabeledDataset};
use paramcover::faults::{AttackKind, AttackSpec};
use paramcover::nn::{train_sgd, Activation, Network, TrainConfig, TrainReport};
use paramcover::testgen::{
    combined_generate, greedy_select, random_suite, synthesis_generate, GenBudget, GeneratedSuite,
    SynthesisConfig, TestOrigin,
};
use paramcover::validation::{
    compare_manifests, make_manifest, validate as replay, CompareMode, DetectionConfig, Manifest,
    Verdict, DEFAULT_PREFIXES,
};
use serde::Serialize;

use crate::args::{
    read_config, ActivationArg, AttackArg, AttackEvalArgs, CoverageReportArgs, EvalParams,
    GenParams, GenerateArgs, Method, ModeArg, TrainArgs, ValidateArgs,
};

const REPORT_VERSION: u32 = 1;

fn load_dataset(images: &Path, labels: &Path, limit: Option<usize>) -> Result<LabeledDataset<f32>> {
    let ds = load_idx(images, labels)
        .with_context(|| format!("loading dataset {}", images.display()))?;
    Ok(match limit {
        Some(n) => ds.take(n),
        None => ds,
    })
}

fn load_net(path: &Path) -> Result<Network<f32>> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn coverage_config(net: &Network<f32>, epsilon: Option<f64>) -> Result<CoverageConfig> {
    Ok(match epsilon {
        Some(e) => CoverageConfig::new(e, LogitMode::AllLogits)?,
        None => CoverageConfig::for_network(net),
    })
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    format_version: u32,
    model_hash: String,
    #[serde(flatten)]
    report: &'a TrainReport,
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let (images, labels) = a.data.resolve(&a.images, &a.labels, "train");
    let data = load_dataset(&images, &labels, Some(a.subset))?;
    let mut widths = vec![data.input_len()];
    widths.extend(&a.hidden);
    widths.push(a.classes);
    let activation = match a.activation {
        ActivationArg::Relu => Activation::Relu,
        ActivationArg::Tanh => Activation::Tanh,
    };
    let mut net = Network::<f32>::mlp(&widths, activation, a.seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let report = train_sgd(&mut net, &data, None, &cfg)?;
    save_model(&net, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "trained {widths:?} {activation:?} on {} samples: final train accuracy {:.4}",
        data.len(),
        report.final_train_accuracy
    );
    if let Some(path) = &a.report {
        write_json(
            path,
            &TrainOutput {
                format_version: REPORT_VERSION,
                model_hash: model_hash(&net),
                report: &report,
            },
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct GenerateOutput<'a> {
    format_version: u32,
    method: &'static str,
    seed: u64,
    tests: usize,
    switch_point: Option<usize>,
    saturated: bool,
    origins: Vec<TestOrigin>,
    coverage: &'a CoverageReport,
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Select => "select",
        Method::Synth => "synth",
        Method::Combined => "combined",
        Method::RandomBaseline => "random-baseline",
    }
}

pub fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let p = a
        .params
        .over(read_config::<GenParams>(a.config.as_deref())?);
    let Some(method) = p.method else {
        bail!("--method is required (select, synth, combined or random-baseline)");
    };
    let net = load_net(&a.model)?;
    let cfg = coverage_config(&net, p.epsilon)?;
    let budget = GenBudget {
        n_max: p.n_max.unwrap_or(30),
        candidate_cap: p.candidate_cap,
        seed: a.seed,
    };
    budget.validate()?;
    let corpus = if method == Method::Synth {
        None
    } else {
        let (images, labels) = a.data.resolve(&a.corpus_images, &a.corpus_labels, "train");
        Some(load_dataset(
            &images,
            &labels,
            Some(p.corpus_size.unwrap_or(10_000)),
        )?)
    };
    let base = SynthesisConfig::for_network(&net);
    let syn = SynthesisConfig {
        step_size: p.step_size.unwrap_or(base.step_size),
        max_updates: p.max_updates.unwrap_or(base.max_updates),
        input_shape: p
            .input_shape
            .or_else(|| corpus.as_ref().map(|c| c.input_shape().to_vec())),
        ..base
    };

    let suite: GeneratedSuite<f32> = match (method, &corpus) {
        (Method::Synth, _) => synthesis_generate(&net, &budget, &syn, &cfg)?,
        (Method::Select, Some(c)) => greedy_select(&net, c, &budget, &cfg)?,
        (Method::Combined, Some(c)) => combined_generate(&net, c, &budget, &syn, &cfg)?,
        (Method::RandomBaseline, Some(c)) => random_suite(&net, c, budget.n_max, a.seed, &cfg)?,
        _ => unreachable!("corpus is loaded for every corpus-based method"),
    };
    if suite.is_empty() {
        bail!("no test activates any parameter; nothing to publish");
    }

    let manifest = make_manifest(&net, &suite, p.logits.unwrap_or(true))?;
    manifest
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let report_path = a.report.unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".coverage.json");
        PathBuf::from(s)
    });
    let coverage = suite.report();
    write_json(
        &report_path,
        &GenerateOutput {
            format_version: REPORT_VERSION,
            method: method_name(method),
            seed: a.seed,
            tests: suite.len(),
            switch_point: suite.switch_point(),
            saturated: suite.saturated(),
            origins: suite.tests().iter().map(|t| t.origin).collect(),
            coverage: &coverage,
        },
    )?;

    println!(
        "{} tests, validation coverage {:.4}{}",
        suite.len(),
        suite.vc(),
        suite
            .switch_point()
            .map(|s| format!(", switched to synthesis at test {s}"))
            .unwrap_or_default()
    );
    if suite.saturated() {
        println!(
            "saturated: no remaining candidate adds coverage; stopped at {} of {} tests",
            suite.len(),
            budget.n_max
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn compare_mode(mode: ModeArg, tolerance: Option<f64>) -> Result<CompareMode> {
    Ok(match mode {
        ModeArg::Label => CompareMode::Label,
        ModeArg::Strict => {
            let tolerance = tolerance.unwrap_or(CompareMode::DEFAULT_TOLERANCE);
            if tolerance.is_nan() || tolerance < 0.0 {
                bail!("tolerance must be >= 0, got {tolerance}");
            }
            CompareMode::Strict { tolerance }
        }
    })
}

fn attack_specs(p: &EvalParams, seed: u64) -> Result<Vec<AttackSpec>> {
    let attacks = p
        .attacks
        .clone()
        .unwrap_or_else(|| vec![AttackArg::Sba, AttackArg::Gda, AttackArg::Random]);
    attacks
        .into_iter()
        .map(|a| {
            let kind = match a {
                AttackArg::Sba => AttackKind::Sba,
                AttackArg::Gda => AttackKind::Gda,
                AttackArg::Random => AttackKind::Random,
            };
            let d = AttackSpec::of_kind(kind);
            let spec = AttackSpec {
                sba_magnitude: p.sba_magnitude.unwrap_or(d.sba_magnitude),
                gda_m: p.gda_m.unwrap_or(d.gda_m),
                gda_step: p.gda_step.unwrap_or(d.gda_step),
                gda_max_iters: p.gda_max_iters.unwrap_or(d.gda_max_iters),
                random_sigma: p.random_sigma.unwrap_or(d.random_sigma),
                random_fraction: p.random_fraction.unwrap_or(d.random_fraction),
                seed,
                ..d
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

pub fn attack_eval(a: AttackEvalArgs) -> Result<ExitCode> {
    let p = a
        .params
        .over(read_config::<EvalParams>(a.config.as_deref())?);
    let net = load_net(&a.model)?;
    let specs = attack_specs(&p, a.seed)?;
    let cfg = DetectionConfig {
        trials: p.trials.unwrap_or(1000),
        seed: a.seed,
        mode: compare_mode(p.mode.unwrap_or(ModeArg::Strict), p.tolerance)?,
    };
    if cfg.trials == 0 {
        bail!("--trials must be >= 1");
    }
    let manifests = a
        .suites
        .iter()
        .map(|(name, path)| {
            let m = Manifest::load(path)
                .with_context(|| format!("loading manifest {}", path.display()))?;
            Ok((name.as_str(), m))
        })
        .collect::<Result<Vec<_>>>()?;
    let pool = if specs.iter().any(|s| s.kind == AttackKind::Gda) {
        let (images, labels) = a.data.resolve(&a.pool_images, &a.pool_labels, "t10k");
        Some(load_dataset(
            &images,
            &labels,
            Some(p.pool_size.unwrap_or(1000)),
        )?)
    } else {
        None
    };
    let named: Vec<(&str, &Manifest)> = manifests.iter().map(|(n, m)| (*n, m)).collect();
    let prefixes = p
        .prefixes
        .clone()
        .unwrap_or_else(|| DEFAULT_PREFIXES.to_vec());
    let table = compare_manifests(&net, &named, &specs, &cfg, &prefixes, pool.as_ref())?;
    match &a.out {
        Some(path) => {
            let f =
                fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
            table.write_csv(f)?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(table.to_csv()?.as_bytes())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn validate(a: ValidateArgs) -> Result<ExitCode> {
    let net = load_net(&a.model)?;
    let manifest = Manifest::load(&a.manifest)
        .with_context(|| format!("loading manifest {}", a.manifest.display()))?;
    if model_hash(&net) != manifest.model_hash {
        eprintln!("note: model differs from the one the manifest was published for");
    }
    let mode = compare_mode(a.mode, Some(a.tolerance))?;
    match replay(&net, &manifest, mode)? {
        Verdict::Intact => {
            println!("intact: all {} tests match", manifest.len());
            Ok(ExitCode::SUCCESS)
        }
        Verdict::Perturbed { first_mismatch } => {
            println!("perturbed: first mismatch at test {first_mismatch}");
            Ok(ExitCode::from(1))
        }
    }
}

pub fn coverage_report(a: CoverageReportArgs) -> Result<ExitCode> {
    let net = load_net(&a.model)?;
    let manifest = Manifest::load(&a.manifest)
        .with_context(|| format!("loading manifest {}", a.manifest.display()))?;
    let cfg = coverage_config(&net, a.epsilon)?;
    let masks = activation_masks(&net, &manifest.inputs, &cfg)?;
    let report = CoverageReport::from_masks(net.param_count(), masks.iter().enumerate())?;
    let json = report.to_json()?;
    match &a.out {
        Some(path) => {
            fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?
        }
        None => println!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}
