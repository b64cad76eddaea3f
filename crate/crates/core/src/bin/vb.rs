use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use vb_score::error::VbError;
use vb_score::gain::GainMode;
use vb_score::intent::TruncationPolicy;
use vb_score::io::{parse_queries, parse_run, parse_string_map, parse_variants};
use vb_score::oracle::{validate_theorems, ValidationConfig};
use vb_score::pipeline::{
    compare_runs, score_collection, write_comparison_outputs, write_score_outputs, RunConfig,
};
use vb_score::replica::{PerturbationSpec, VariantStore};
use vb_score::report::{to_json_bytes, write_atomic};
use vb_score::tagger::{RemoteTaggerConfig, TaggerSpec, ENDPOINT_ENV};
use vb_score::uncertainty::CiMethod;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_ALL_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "vb", version, about = "Variance-bounded scoring of entity-centric retrieval runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score one run over a query collection.
    Score(ScoreArgs),
    /// Score with the alpha sweep enabled (same as `score --ablate`).
    Ablate(ScoreArgs),
    /// Paired comparison of two runs over the same queries.
    Compare(CompareArgs),
    /// Empirical checks of the metric's guarantees on synthetic data.
    ValidateTheorems(ValidateArgs),
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write the alpha-sweep CSV and report section.
    #[arg(long)]
    ablate: bool,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long = "run-a")]
    run_a: PathBuf,
    #[arg(long = "run-b")]
    run_b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    oracle_queries: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum TaggerKind {
    Rule,
    Remote,
}

/// Flags layered over `--config` (if any), which is layered over defaults.
#[derive(Args)]
struct CommonArgs {
    /// JSON file with a full or partial run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ci: Option<CiMethod>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    boot_resamples: Option<usize>,
    /// binary or dcg
    #[arg(long)]
    gain: Option<GainMode>,
    #[arg(long)]
    temperature: Option<f64>,
    /// threshold:TAU, top-k:K or mass:RHO
    #[arg(long)]
    truncate: Option<TruncationPolicy>,
    /// Comma-separated alpha grid for the sweep.
    #[arg(long, value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    /// Gaussian score jitter sigma.
    #[arg(long)]
    jitter: Option<f64>,
    /// Log-normal constraint weight rescale sd.
    #[arg(long)]
    weight_rescale: Option<f64>,
    /// Candidate dropout probability.
    #[arg(long)]
    dropout: Option<f64>,
    /// Alternate candidate-set JSONL file; repeatable.
    #[arg(long)]
    variants: Vec<PathBuf>,
    /// JSON object mapping KB ids to canonical ids.
    #[arg(long)]
    canonical_ids: Option<PathBuf>,
    #[arg(long, value_enum)]
    tagger: Option<TaggerKind>,
    /// JSON object mapping alias strings to entity ids (rule tagger).
    #[arg(long)]
    aliases: Option<PathBuf>,
    #[arg(long)]
    tagger_endpoint: Option<String>,
    #[arg(long)]
    tagger_timeout_ms: Option<u64>,
    #[arg(long)]
    tagger_retries: Option<u32>,
    #[arg(long)]
    tagger_in_flight: Option<usize>,
    #[arg(long)]
    tagger_audit: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

/// An error plus the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: error.into(),
    }
}

fn data(error: impl Into<anyhow::Error>) -> Failure {
    let error = error.into();
    let code = match error.downcast_ref::<VbError>() {
        Some(VbError::EstimationFailed(_)) => EXIT_ALL_FAILED,
        _ => EXIT_DATA,
    };
    Failure { code, error }
}

fn resolve_config(args: &CommonArgs, ablate: bool) -> anyhow::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(k) = args.k {
        cfg.k = Some(k);
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = args.$flag.clone() { cfg.$field = v; })*
        };
    }
    set!(alpha => alpha, replicas => replicas, seed => seed, ci => ci_method, delta => delta,
         boot_resamples => boot_resamples, gain => gain_mode, temperature => temperature,
         alpha_grid => alpha_grid);
    if let Some(t) = args.truncate {
        cfg.truncation = Some(t);
    }
    cfg.ablate |= ablate;

    if let Some(sigma) = args.jitter {
        cfg.perturbations.push(PerturbationSpec::ScoreJitter { sigma });
    }
    if let Some(log_sd) = args.weight_rescale {
        cfg.perturbations.push(PerturbationSpec::WeightRescale { log_sd });
    }
    if let Some(p) = args.dropout {
        cfg.perturbations.push(PerturbationSpec::CandidateDropout { p });
    }
    if !args.variants.is_empty() {
        cfg.perturbations.push(PerturbationSpec::ParaphraseVariants {
            sources: args.variants.clone(),
        });
    }
    if let Some(p) = &args.canonical_ids {
        cfg.canonical_ids = parse_string_map(p).with_context(|| format!("reading {}", p.display()))?;
    }

    let remote_flags = args.tagger_endpoint.is_some()
        || args.tagger_timeout_ms.is_some()
        || args.tagger_retries.is_some()
        || args.tagger_in_flight.is_some()
        || args.tagger_audit.is_some();
    match args.tagger {
        Some(TaggerKind::Rule) if !matches!(cfg.tagger, TaggerSpec::RuleBased { .. }) => {
            cfg.tagger = TaggerSpec::default();
        }
        Some(TaggerKind::Remote) if !matches!(cfg.tagger, TaggerSpec::Remote(_)) => {
            let endpoint = args
                .tagger_endpoint
                .clone()
                .or_else(|| std::env::var(ENDPOINT_ENV).ok())
                .ok_or_else(|| anyhow::anyhow!("--tagger remote needs --tagger-endpoint or {ENDPOINT_ENV}"))?;
            cfg.tagger = TaggerSpec::Remote(RemoteTaggerConfig::new(endpoint));
        }
        _ => {}
    }
    match &mut cfg.tagger {
        TaggerSpec::RuleBased { alias_table, .. } => {
            if remote_flags {
                anyhow::bail!("remote tagger flags given without --tagger remote");
            }
            if let Some(p) = &args.aliases {
                *alias_table = parse_string_map(p).with_context(|| format!("reading {}", p.display()))?;
            }
        }
        TaggerSpec::Remote(remote) => {
            if args.aliases.is_some() {
                anyhow::bail!("--aliases applies to the rule tagger only");
            }
            if let Some(v) = &args.tagger_endpoint {
                remote.endpoint_url = v.clone();
            }
            if let Some(v) = args.tagger_timeout_ms {
                remote.timeout_ms = v;
            }
            if let Some(v) = args.tagger_retries {
                remote.max_retries = v;
            }
            if let Some(v) = args.tagger_in_flight {
                remote.max_in_flight = v;
            }
            if let Some(v) = &args.tagger_audit {
                remote.audit_log = Some(v.clone());
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_variants(cfg: &RunConfig) -> anyhow::Result<VariantStore> {
    let sources: Vec<&PathBuf> = cfg
        .perturbations
        .iter()
        .filter_map(|p| match p {
            PerturbationSpec::ParaphraseVariants { sources } => Some(sources),
            _ => None,
        })
        .flatten()
        .collect();
    Ok(parse_variants(&sources)?)
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(usage(anyhow::anyhow!("--workers must be >= 1"))),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(usage)?;
            Ok(pool.install(f))
        }
    }
}

fn read_input<T>(path: &Path, parse: impl FnOnce(&Path) -> vb_score::error::Result<T>) -> Result<T, Failure> {
    parse(path).map_err(|e| data(anyhow::Error::new(e).context(path.display().to_string())))
}

fn score(args: ScoreArgs, force_ablate: bool) -> Result<u8, Failure> {
    let cfg = resolve_config(&args.common, args.ablate || force_ablate).map_err(usage)?;
    let queries = read_input(&args.queries, parse_queries)?;
    let runs = read_input(&args.run, parse_run)?;
    let variants = load_variants(&cfg).map_err(data)?;
    let tagger = cfg.tagger.build().map_err(usage)?;
    info!("scoring {} queries with {} replicas each", queries.len(), cfg.replicas);

    let outcome = with_workers(args.common.workers, || {
        score_collection(&queries, &runs, &cfg, tagger.as_ref(), &variants)
    })?
    .map_err(data)?;
    write_score_outputs(&args.out, &outcome, &cfg).map_err(data)?;

    for q in outcome.queries.iter().filter(|q| q.estimate.is_none()) {
        warn!("query {} has no estimate: {}", q.query_id, q.failure.as_deref().unwrap_or("unknown"));
    }
    match &outcome.report {
        Some(r) => {
            println!(
                "macro ES {:.4}  macro VB {:.4}  CI [{:.4}, {:.4}]  ({} queries, {} failed)",
                r.collection.macro_es,
                r.collection.macro_vb,
                r.collection.macro_ci.lower,
                r.collection.macro_ci.upper,
                r.collection.per_query.len(),
                r.failed_queries.len()
            );
            Ok(0)
        }
        None => {
            eprintln!("error: estimation failed for every query");
            Ok(EXIT_ALL_FAILED)
        }
    }
}

fn compare(args: CompareArgs) -> Result<u8, Failure> {
    let cfg = resolve_config(&args.common, false).map_err(usage)?;
    let queries = read_input(&args.queries, parse_queries)?;
    let run_a = read_input(&args.run_a, parse_run)?;
    let run_b = read_input(&args.run_b, parse_run)?;
    let variants = load_variants(&cfg).map_err(data)?;
    let tagger = cfg.tagger.build().map_err(usage)?;

    let report = with_workers(args.common.workers, || {
        compare_runs(&queries, &run_a, &run_b, &cfg, tagger.as_ref(), &variants)
    })?
    .map_err(data)?;
    write_comparison_outputs(&args.out, &report).map_err(data)?;
    println!(
        "macro VB delta {:+.4}  CI [{:.4}, {:.4}]  t={:.3} p={:.4}  ({} queries, {} excluded)",
        report.macro_vb_delta,
        report.vb_delta_ci.lower,
        report.vb_delta_ci.upper,
        report.vb_t_test.t_statistic,
        report.vb_t_test.p_value,
        report.per_query.len(),
        report.excluded_queries.len()
    );
    Ok(0)
}

fn validate(args: ValidateArgs) -> Result<u8, Failure> {
    let cfg = ValidationConfig {
        trials: args.trials,
        seed: args.seed,
        oracle_queries: args.oracle_queries,
        ..ValidationConfig::default()
    };
    let report = with_workers(args.workers, || validate_theorems(&cfg))?.map_err(usage)?;
    let bytes = to_json_bytes(&report).map_err(data)?;
    write_atomic(&args.out.join("validation.json"), &bytes).map_err(data)?;
    for s in &report.suites {
        println!(
            "{:<4} {:<40} failures={} observed={} bound={}",
            if s.passed { "PASS" } else { "FAIL" },
            s.name,
            s.failures,
            s.observed.map_or("-".into(), |v| format!("{v:.6}")),
            s.bound.map_or("-".into(), |v| format!("{v:.6}")),
        );
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Score(a) => score(a, false),
        Command::Ablate(a) => score(a, true),
        Command::Compare(a) => compare(a),
        Command::ValidateTheorems(a) => validate(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
