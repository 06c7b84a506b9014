//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use qnl_core::verifier::{HeadHyper, DEFAULT_CLASSIFY_TAU, DEFAULT_FILTER_TAU};

use crate::assets::PromptAssets;
use crate::config::{BackendChoice, EmbedderKind, RunConfig};
use crate::dataset::{
    build_training_pairs, load_dataset, save_dataset, write_atomic, Format, NegativePolicy, QnlRecord,
};
use crate::eval::{evaluate, EvalOptions, EvalTarget};
use crate::export::{export_finetune, ExportOptions, DEFAULT_SYSTEM_PROMPT};
use crate::kg::KgCache;
use crate::llm::{Gateway, ProviderKind};
use crate::pipeline::{self, PipelineError, Scorer, StepReport};

#[derive(Debug, Parser)]
#[command(
    name = "qnl",
    version,
    about = "Generate, verify, filter and evaluate query/question pairs"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; falls back to $QNL_CONFIG.
    #[arg(long, global = true, env = "QNL_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Output path; dataset steps default to rewriting --dataset.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Fixed provenance timestamp, for reproducible output.
    #[arg(long, global = true)]
    pub timestamp: Option<String>,
    /// Do not print the resolved configuration.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct ProviderArgs {
    #[arg(long, value_enum)]
    pub provider: Option<ProviderArg>,
    #[arg(long)]
    pub model: Option<String>,
    /// Response table for the mock provider.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long)]
    pub base_url: Option<String>,
    /// Append every provider exchange to this JSON Lines file.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    #[arg(long)]
    pub prompt_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProviderArg {
    OpenaiStyle,
    GeminiStyle,
    LocalHttp,
    Mock,
}

#[derive(Debug, Args)]
pub struct EmbedderArgs {
    #[arg(long, value_enum)]
    pub embedder: Option<EmbedderArg>,
    /// Embedding dump for the file embedder.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub embed_url: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EmbedderArg {
    Mock,
    File,
    Http,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Bi,
    Head,
    External,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    Hard,
    Shuffled,
}

impl From<PolicyArg> for NegativePolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Hard => NegativePolicy::Hard,
            PolicyArg::Shuffled => NegativePolicy::Shuffled,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TargetArg {
    Synth,
    Human,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fetch labels and descriptions and write the labeled query.
    Enrich {
        /// SPARQL endpoint URL, or fixture:<path>.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Translate labeled queries into questions.
    Translate {
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long, overrides_with = "no_reflect")]
        reflect: bool,
        #[arg(long)]
        no_reflect: bool,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Generate a hard negative for each translation.
    Negatives {
        #[command(flatten)]
        provider: ProviderArgs,
    },
    /// Score translations with a verifier backend.
    Score {
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
        #[command(flatten)]
        embedder: EmbedderArgs,
        #[arg(long)]
        head_model: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Score key to write instead of the backend's default name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Keep records scoring at least tau; the rest go to a side file.
    Filter {
        /// Score key to filter on.
        #[arg(long, default_value = "bi")]
        backend: String,
        /// Defaults to the output path with `.dropped` before the extension.
        #[arg(long)]
        dropped: Option<PathBuf>,
    },
    /// Write the evaluation report and tables into the --out directory.
    Eval {
        /// Score keys to evaluate; repeatable.
        #[arg(long = "backend", default_value = "bi")]
        backends: Vec<String>,
        #[arg(long)]
        filter_tau: Option<f64>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, value_enum, default_value = "synth")]
        target: TargetArg,
        /// Also compute the embedding metric with this embedder.
        #[command(flatten)]
        embedder: EmbedderArgs,
    },
    /// Export question-to-query chat examples for fine-tuning.
    ExportFinetune {
        #[arg(long)]
        n: usize,
        /// Only records whose score under --backend is above 0.5.
        #[arg(long)]
        filtered: bool,
        #[arg(long, default_value = "bi")]
        backend: String,
        #[arg(long)]
        system_prompt: Option<String>,
    },
    /// Write positive and negative training pairs as JSON Lines.
    Pairs {
        #[arg(long, value_enum, default_value = "hard")]
        policy: PolicyArg,
    },
    /// Train the classifier head on generated pairs.
    TrainHead {
        #[arg(long, value_enum, default_value = "hard")]
        policy: PolicyArg,
        #[command(flatten)]
        embedder: EmbedderArgs,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
    },
    /// Print the resolved configuration.
    Config,
}

fn apply_provider(cfg: &mut RunConfig, p: &ProviderArgs) {
    if let Some(kind) = p.provider {
        cfg.provider.provider = match kind {
            ProviderArg::OpenaiStyle => ProviderKind::HttpOpenaiStyle,
            ProviderArg::GeminiStyle => ProviderKind::HttpGeminiStyle,
            ProviderArg::LocalHttp => ProviderKind::LocalHttp,
            ProviderArg::Mock => ProviderKind::Mock,
        };
    }
    if let Some(m) = &p.model {
        cfg.provider.model_id = m.clone();
    }
    if let Some(f) = &p.fixture {
        cfg.provider.fixture = Some(f.clone());
    }
    if let Some(u) = &p.base_url {
        cfg.provider.base_url = Some(u.clone());
    }
    if let Some(t) = &p.transcript {
        cfg.transcript = Some(t.clone());
    }
    if let Some(d) = &p.prompt_dir {
        cfg.prompt_dir = Some(d.clone());
    }
}

fn apply_embedder(cfg: &mut RunConfig, e: &EmbedderArgs) {
    let ec = &mut cfg.verifier.embedder;
    if let Some(kind) = e.embedder {
        ec.kind = match kind {
            EmbedderArg::Mock => EmbedderKind::Mock,
            EmbedderArg::File => EmbedderKind::File,
            EmbedderArg::Http => EmbedderKind::Http,
        };
    }
    if let Some(p) = &e.embeddings {
        ec.path = Some(p.clone());
    }
    if let Some(u) = &e.embed_url {
        ec.url = Some(u.clone());
    }
    if let Some(d) = e.dim {
        ec.dim = d;
    }
}

/// Resolves defaults, the config file and the flags into one config.
pub fn resolve(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let c = &cli.common;
    let mut cfg = RunConfig::load(c.config.as_deref()).map_err(|e| PipelineError::Config(e.to_string()))?;
    if let Some(d) = &c.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(o) = &c.out {
        cfg.out = Some(o.clone());
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(j) = c.jobs {
        cfg.jobs = j;
    }
    if let Some(t) = c.tau {
        cfg.tau = Some(t);
    }
    if let Some(t) = &c.timestamp {
        cfg.timestamp = Some(t.clone());
    }
    match &cli.command {
        Command::Enrich { endpoint, cache } => {
            if let Some(e) = endpoint {
                cfg.endpoint.url = e.clone();
            }
            if let Some(p) = cache {
                cfg.cache = Some(p.clone());
            }
        }
        Command::Translate {
            provider,
            reflect,
            no_reflect,
            k,
        } => {
            apply_provider(&mut cfg, provider);
            if *reflect {
                cfg.reflect = true;
            }
            if *no_reflect {
                cfg.reflect = false;
            }
            if let Some(k) = k {
                cfg.k = *k;
            }
        }
        Command::Negatives { provider } => apply_provider(&mut cfg, provider),
        Command::Score {
            backend,
            embedder,
            head_model,
            manifest,
            name,
        } => {
            if let Some(b) = backend {
                cfg.verifier.backend = match b {
                    BackendArg::Bi => BackendChoice::Bi,
                    BackendArg::Head => BackendChoice::Head,
                    BackendArg::External => BackendChoice::External,
                };
            }
            apply_embedder(&mut cfg, embedder);
            if let Some(h) = head_model {
                cfg.verifier.head_model = Some(h.clone());
            }
            if let Some(m) = manifest {
                cfg.verifier.manifest = Some(m.clone());
            }
            if let Some(n) = name {
                cfg.verifier.name = Some(n.clone());
            }
        }
        Command::Eval { embedder, .. } | Command::TrainHead { embedder, .. } => apply_embedder(&mut cfg, embedder),
        _ => {}
    }
    cfg.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok(cfg)
}

fn dataset_path(cfg: &RunConfig) -> Result<&Path, PipelineError> {
    cfg.dataset
        .as_deref()
        .ok_or_else(|| PipelineError::Config("no dataset given (--dataset or `dataset` in the config)".into()))
}

fn out_path(cfg: &RunConfig) -> Result<PathBuf, PipelineError> {
    match &cfg.out {
        Some(p) => Ok(p.clone()),
        None => Ok(dataset_path(cfg)?.to_path_buf()),
    }
}

fn load(cfg: &RunConfig) -> Result<Vec<QnlRecord>, PipelineError> {
    let path = dataset_path(cfg)?;
    Ok(load_dataset(path, Format::from_path(path))?)
}

fn save(records: &[QnlRecord], path: &Path) -> Result<(), PipelineError> {
    Ok(save_dataset(records, path, Format::from_path(path))?)
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::Io(format!("{}: {e}", dir.display())))?;
    }
    write_atomic(path, text.as_bytes()).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

fn report(r: &StepReport) {
    eprintln!(
        "{}: {} records, {} done, {} up to date, {} failed",
        r.step, r.total, r.done, r.skipped, r.failed
    );
    if r.failed > 0 {
        eprintln!("warning: {} records carry a `{}` failure marker", r.failed, r.step);
    }
}

fn gateway(cfg: &RunConfig) -> Result<Gateway, PipelineError> {
    let g = Gateway::from_config(cfg.provider.clone()).map_err(|e| PipelineError::Config(e.to_string()))?;
    match &cfg.transcript {
        Some(p) => g.with_transcript(p).map_err(|e| PipelineError::Io(e.to_string())),
        None => Ok(g),
    }
}

fn assets(cfg: &RunConfig) -> Result<PromptAssets, PipelineError> {
    PromptAssets::load(cfg.prompt_dir.as_deref())
        .and_then(|a| a.with_k(cfg.k))
        .map_err(|e| PipelineError::Config(e.to_string()))
}

fn dropped_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    let name = match out.extension().and_then(|s| s.to_str()) {
        Some(ext) => format!("{stem}.dropped.{ext}"),
        None => format!("{stem}.dropped"),
    };
    out.with_file_name(name)
}

/// Runs one command; the error's exit code is the process exit code.
pub fn execute(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = resolve(cli)?;
    if !cli.common.quiet || matches!(cli.command, Command::Config) {
        let rendered = cfg.redacted_toml();
        if matches!(cli.command, Command::Config) {
            print!("{rendered}");
            return Ok(());
        }
        eprintln!("# resolved configuration\n{rendered}");
    }

    match &cli.command {
        Command::Config => unreachable!("handled above"),
        Command::Enrich { .. } => {
            let mut records = load(&cfg)?;
            let transport = pipeline::open_transport(&cfg)?;
            let cache = match &cfg.cache {
                Some(p) => KgCache::open(p).map_err(|e| PipelineError::Io(e.to_string()))?,
                None => KgCache::in_memory(),
            };
            let r = pipeline::cmd_enrich(&mut records, &cfg, transport.as_ref(), &cache)?;
            save(&records, &out_path(&cfg)?)?;
            report(&r);
        }
        Command::Translate { .. } => {
            let mut records = load(&cfg)?;
            let r = pipeline::cmd_translate(&mut records, &cfg, &assets(&cfg)?, &gateway(&cfg)?)?;
            save(&records, &out_path(&cfg)?)?;
            report(&r);
            r.into_result()?;
        }
        Command::Negatives { .. } => {
            let mut records = load(&cfg)?;
            let r = pipeline::cmd_negatives(&mut records, &cfg, &assets(&cfg)?, &gateway(&cfg)?)?;
            save(&records, &out_path(&cfg)?)?;
            report(&r);
            r.into_result()?;
        }
        Command::Score { .. } => {
            let mut records = load(&cfg)?;
            let scorer = Scorer::from_config(&cfg.verifier)?;
            let r = pipeline::cmd_score(&mut records, &cfg, &scorer)?;
            save(&records, &out_path(&cfg)?)?;
            report(&r);
        }
        Command::Filter { backend, dropped } => {
            let records = load(&cfg)?;
            let (outcome, summary) = pipeline::cmd_filter(&records, backend, cfg.tau)?;
            let out = out_path(&cfg)?;
            let dropped = dropped.clone().unwrap_or_else(|| dropped_path(&out));
            save(&outcome.kept, &out)?;
            save(&outcome.dropped, &dropped)?;
            print!("{}", summary.render());
        }
        Command::Eval {
            backends,
            filter_tau,
            bins,
            target,
            embedder,
        } => {
            let records = load(&cfg)?;
            let opts = EvalOptions {
                backends: backends.clone(),
                tau: cfg.tau.unwrap_or(DEFAULT_CLASSIFY_TAU),
                filter_tau: filter_tau.unwrap_or(DEFAULT_FILTER_TAU),
                bins: *bins,
                target: match target {
                    TargetArg::Synth => EvalTarget::Synth,
                    TargetArg::Human => EvalTarget::Human,
                },
            };
            let provider = match embedder.embedder {
                Some(_) => Some(pipeline::open_embedder(&cfg.verifier.embedder)?),
                None => None,
            };
            let rep = evaluate(&records, &opts, provider.as_deref()).map_err(|e| match e {
                crate::eval::EvalError::Io { .. } => PipelineError::Io(e.to_string()),
                other => PipelineError::Data(other.to_string()),
            })?;
            let dir = cfg
                .out
                .clone()
                .ok_or_else(|| PipelineError::Config("eval needs --out <directory>".into()))?;
            let files = rep.write_to(&dir).map_err(|e| PipelineError::Io(e.to_string()))?;
            print!("{}", rep.metrics_csv());
            eprintln!("wrote {} files to {}", files.len(), dir.display());
        }
        Command::ExportFinetune {
            n,
            filtered,
            backend,
            system_prompt,
        } => {
            let records = load(&cfg)?;
            let opts = ExportOptions {
                n: *n,
                seed: cfg.seed,
                filter_backend: filtered.then(|| backend.clone()),
                system_prompt: system_prompt
                    .clone()
                    .unwrap_or_else(|| DEFAULT_SYSTEM_PROMPT.to_string()),
            };
            let text = export_finetune(&records, &opts).map_err(|e| PipelineError::Data(e.to_string()))?;
            let out = cfg
                .out
                .clone()
                .ok_or_else(|| PipelineError::Config("export-finetune needs --out".into()))?;
            write_text(&out, &text)?;
        }
        Command::Pairs { policy } => {
            let records = load(&cfg)?;
            let pairs = build_training_pairs(&records, (*policy).into(), cfg.seed)?;
            let mut text = String::new();
            for p in &pairs {
                text.push_str(&serde_json::to_string(p).expect("pair serializes"));
                text.push('\n');
            }
            let out = cfg
                .out
                .clone()
                .ok_or_else(|| PipelineError::Config("pairs needs --out".into()))?;
            write_text(&out, &text)?;
        }
        Command::TrainHead {
            policy,
            epochs,
            learning_rate,
            ..
        } => {
            let records = load(&cfg)?;
            let hyper = HeadHyper {
                epochs: *epochs,
                learning_rate: *learning_rate,
                seed: cfg.seed,
            };
            let trained = pipeline::cmd_train_head(&records, &cfg, (*policy).into(), &hyper)?;
            let out = cfg
                .out
                .clone()
                .ok_or_else(|| PipelineError::Config("train-head needs --out".into()))?;
            write_text(
                &out,
                &(serde_json::to_string_pretty(&trained.model).expect("head serializes") + "\n"),
            )?;
            if let (Some(first), Some(last)) = (trained.loss_trace.first(), trained.loss_trace.last()) {
                eprintln!("loss {first:.6} -> {last:.6} over {} epochs", trained.loss_trace.len());
            }
        }
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
