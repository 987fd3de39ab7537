use std::fs;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::Args;

use velum::attack::{
    default_prompt_bank, eval_targeted, eval_untargeted, load_prompt_bank, rank_top_n,
    run_targeted, run_untargeted, AttackReport, ReferenceLm, TargetedConfig, TargetedReport,
    UntargetedConfig, UntargetedReport,
};
use velum::corpus::{Corpus, Vocabulary};
use velum::datastore::Datastore;
use velum::experiments::{
    build_shared_vocab, emit_report, render_markdown, run_dir_name, sweep as run_sweep,
    ExperimentPlan, Lab, ReportFormat, ScenarioReport, SynthSpec,
};
use velum::knnlm::{KnnLm, KnnLmConfig};
use velum::lm::{GenConfig, LmConfig, LmParams, TrainConfig};
use velum::pii::{sanitize as sanitize_corpus, PiiPool, SanitizeStrategy};
use velum::service::{serve_bundle, ServiceClient, ServiceConfig};

use crate::read_json;

fn save_json<T: serde::Serialize>(path: &PathBuf, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 400)]
    private_docs: usize,
    #[arg(long, default_value_t = 600)]
    public_docs: usize,
    #[arg(long, default_value_t = 50)]
    pii_per_kind: usize,
    #[arg(long, default_value_t = 1.0)]
    density: f64,
    #[arg(long, default_value_t = 16)]
    doc_len_min: usize,
    #[arg(long, default_value_t = 30)]
    doc_len_max: usize,
    #[arg(long, default_value_t = 4096)]
    vocab_cap: usize,
    #[arg(long, default_value_t = 60)]
    pool_per_kind: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

pub fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let spec = SynthSpec {
        n_private_docs: args.private_docs,
        n_public_docs: args.public_docs,
        doc_len: (args.doc_len_min, args.doc_len_max),
        pii_per_kind: args.pii_per_kind,
        pii_density: args.density,
        templates: Default::default(),
        seed: args.seed,
    };
    let (public, private, ground_truth) = velum::experiments::synth_corpus(&spec)?;
    let pool = velum::experiments::synth_pii_pool(args.pool_per_kind, args.seed.wrapping_add(1));
    let prompts = default_prompt_bank();
    let vocab = build_shared_vocab(&public, &private, &pool, &prompts, args.vocab_cap)?;

    fs::create_dir_all(&args.out)?;
    public.save(&args.out.join("public.txt"))?;
    private.save(&args.out.join("private.txt"))?;
    save_json(&args.out.join("ground_truth.json"), &ground_truth)?;
    pool.save(&args.out.join("pool.txt"))?;
    velum::attack::save_prompt_bank(&prompts, &args.out.join("prompts.txt"))?;
    vocab.save(&args.out.join("vocab.json"))?;
    println!(
        "wrote {} public docs, {} private docs, |V|={} to {}",
        public.len(),
        private.len(),
        vocab.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Fine-tune from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.25)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 64)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 32)]
    context_window: usize,
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
}

pub fn train(args: TrainArgs) -> anyhow::Result<()> {
    let vocab = Vocabulary::load(&args.vocab)?;
    let corpus = Corpus::load(&args.corpus)?.with_tokens(&vocab);
    let params = match &args.init {
        Some(path) => {
            let (params, ckpt_vocab) = LmParams::load(path)?;
            if ckpt_vocab != vocab {
                bail!("checkpoint vocabulary differs from --vocab");
            }
            params
        }
        None => LmParams::init(
            LmConfig {
                embed_dim: args.embed_dim,
                hidden_dim: args.hidden_dim,
                context_window: args.context_window,
                seed: args.init_seed,
            },
            &vocab,
        ),
    };
    let cfg = TrainConfig {
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        gradient_clip_norm: args.clip,
        seed: args.seed,
    };
    let (trained, history) = params.train(&corpus, &cfg)?;
    trained.save(&args.out, &vocab)?;
    for (epoch, loss) in history.iter().enumerate() {
        println!("epoch {epoch}: loss {loss:.4}");
    }
    println!("saved {}", args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct SanitizeArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// One of: endoftext, dummy, random-public.
    #[arg(long)]
    strategy: String,
    /// Replacement pool file (required for random-public).
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn sanitize(args: SanitizeArgs) -> anyhow::Result<()> {
    let corpus = Corpus::load(&args.corpus)?;
    let strategy = match args.strategy.as_str() {
        "endoftext" => SanitizeStrategy::EndOfText,
        "dummy" => SanitizeStrategy::DummyPii,
        "random-public" => {
            let pool_path = args
                .pool
                .as_ref()
                .context("--pool is required for random-public")?;
            SanitizeStrategy::RandomPublicPii {
                pool: PiiPool::load(pool_path)?,
                seed: args.seed,
            }
        }
        other => bail!("unknown strategy {other:?}"),
    };
    let out = sanitize_corpus(&corpus, &strategy)?;
    out.save(&args.out)?;
    println!("sanitized {} docs to {}", out.len(), args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct BuildDsArgs {
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn build_ds(args: BuildDsArgs) -> anyhow::Result<()> {
    let (encoder, vocab) = LmParams::load(&args.encoder)?;
    let corpus = Corpus::load(&args.corpus)?.with_tokens(&vocab);
    let ds = Datastore::build(&encoder, &corpus)?;
    ds.save(&args.out)?;
    println!("built {} entries (dim {}) to {}", ds.len(), ds.dim(), args.out.display());
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| anyhow::anyhow!("{e}")))
        .collect()
}

#[derive(Args)]
pub struct SweepArgs {
    /// Base model checkpoint (also the query encoder unless --query given).
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    query: Option<PathBuf>,
    #[arg(long)]
    datastore: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long, default_value = "4,8,16,32,64")]
    k_grid: String,
    #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5")]
    lambda_grid: String,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn sweep(args: SweepArgs) -> anyhow::Result<()> {
    let (base, vocab) = LmParams::load(&args.base)?;
    let base = Arc::new(base);
    let query = match &args.query {
        Some(path) => {
            let (q, qv) = LmParams::load(path)?;
            if qv != vocab {
                bail!("query encoder vocabulary differs from base");
            }
            Arc::new(q)
        }
        None => base.clone(),
    };
    let ds = Arc::new(Datastore::load(&args.datastore)?);
    let valid = Corpus::load(&args.valid)?.with_tokens(&vocab);
    let k_grid: Vec<usize> = parse_list(&args.k_grid)?;
    let lambda_grid: Vec<f64> = parse_list(&args.lambda_grid)?;
    let outcome = run_sweep(
        |k, lambda| {
            let cfg = KnnLmConfig::with_temperature(k, lambda, args.temperature)
                .map_err(|e| velum::experiments::ScenarioError::Stage {
                    stage: "model-config",
                    message: e.to_string(),
                })?;
            KnnLm::with_query_encoder(base.clone(), query.clone(), ds.clone(), cfg).map_err(|e| {
                velum::experiments::ScenarioError::Stage {
                    stage: "model",
                    message: e.to_string(),
                }
            })
        },
        &k_grid,
        &lambda_grid,
        &valid,
    )?;
    println!("k\tlambda\tvalid_ppl");
    for p in &outcome.table {
        println!("{}\t{}\t{:.4}", p.k, p.lambda, p.valid_ppl);
    }
    println!("best: k={} lambda={}", outcome.best_k, outcome.best_lambda);
    if let Some(path) = &args.out {
        save_json(path, &outcome)?;
    }
    Ok(())
}

#[derive(Args)]
pub struct ServeArgs {
    /// Bind address; falls back to VELUM_ADDR, then 127.0.0.1:7478.
    #[arg(long)]
    addr: Option<String>,
    /// Model bundle directory; falls back to VELUM_BUNDLE.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long, default_value_t = 64 * 1024)]
    max_body_bytes: usize,
    #[arg(long, default_value_t = 256)]
    max_tokens: usize,
}

pub fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let addr = args
        .addr
        .or_else(|| std::env::var("VELUM_ADDR").ok())
        .unwrap_or_else(|| "127.0.0.1:7478".to_string());
    let bundle = args
        .bundle
        .or_else(|| std::env::var("VELUM_BUNDLE").ok().map(PathBuf::from))
        .context("--bundle or VELUM_BUNDLE is required")?;
    let config = ServiceConfig {
        addr,
        bundle_dir: Some(bundle),
        max_body_bytes: args.max_body_bytes,
        max_tokens: args.max_tokens,
        ..ServiceConfig::default()
    };
    let service = serve_bundle(&config)?;
    println!("serving on {}", service.url());
    loop {
        std::thread::sleep(Duration::from_secs(3600));
    }
}

#[derive(Args)]
pub struct AttackArgs {
    /// Base URL of the deployed service, e.g. http://127.0.0.1:7478.
    #[arg(long)]
    url: String,
    /// Reference model checkpoint for calibration.
    #[arg(long)]
    reference: PathBuf,
    /// targeted or untargeted.
    #[arg(long)]
    mode: String,
    /// Prompt bank file (targeted; defaults to the built-in bank).
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Public corpus to draw seeding chunks from (untargeted).
    #[arg(long)]
    seed_corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    context_len: usize,
    #[arg(long, default_value_t = 200)]
    num_candidates: usize,
    #[arg(long, default_value_t = 100)]
    top_n: usize,
    #[arg(long, default_value_t = 20)]
    max_new_tokens: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0.75)]
    repetition_penalty: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Private corpus for leakage evaluation (defender-side measurement).
    #[arg(long)]
    eval_private: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    rouge_threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

pub fn attack(args: AttackArgs) -> anyhow::Result<()> {
    let client = ServiceClient::new(args.url.clone(), Duration::from_secs(30), 3);
    let (ref_params, ref_vocab) = LmParams::load(&args.reference)?;
    let reference = ReferenceLm::new(Arc::new(ref_params), Arc::new(ref_vocab));
    let gen = GenConfig::sample(args.temperature, args.seed, args.max_new_tokens)
        .with_penalty(args.repetition_penalty);
    let mut report = AttackReport::default();

    match args.mode.as_str() {
        "targeted" => {
            let prompts = match &args.prompts {
                Some(path) => load_prompt_bank(path)?,
                None => default_prompt_bank(),
            };
            let cfg = TargetedConfig {
                prompts,
                num_candidates: args.num_candidates,
                top_n: args.top_n,
                gen,
            };
            let candidates = run_targeted(&client, &reference, &cfg)?;
            let top = rank_top_n(&candidates, args.top_n)?;
            let counts = match &args.eval_private {
                Some(path) => {
                    let private = Corpus::load(path)?;
                    eval_targeted(&velum::pii::unique_pii(&private), &top)
                }
                None => Default::default(),
            };
            println!(
                "targeted: {} candidates, top {}, recovered total={} phone={} email={} url={}",
                candidates.len(),
                top.len(),
                counts.total(),
                counts.phone,
                counts.email,
                counts.url
            );
            report.targeted = Some(TargetedReport {
                total: counts.total(),
                counts,
                deduplicated_before_ranking: true,
                top_candidates: top,
            });
        }
        "untargeted" => {
            let seed_path = args
                .seed_corpus
                .as_ref()
                .context("--seed-corpus is required for untargeted")?;
            let cfg = UntargetedConfig {
                public_seed_corpus: Corpus::load(seed_path)?,
                context_len: args.context_len,
                num_candidates: args.num_candidates,
                top_n: args.top_n,
                rouge_threshold: args.rouge_threshold,
                gen,
                seed: args.seed,
            };
            let candidates = run_untargeted(&client, &reference, &cfg)?;
            let top = rank_top_n(&candidates, args.top_n)?;
            let (good, matches) = match &args.eval_private {
                Some(path) => {
                    let private = Corpus::load(path)?;
                    let eval = eval_untargeted(&private, &top, args.rouge_threshold)?;
                    (eval.good_count, eval.matches)
                }
                None => (0, Vec::new()),
            };
            println!(
                "untargeted: {} candidates, top {}, good reconstructions={}",
                candidates.len(),
                top.len(),
                good
            );
            report.untargeted = Some(UntargetedReport {
                good_count: good,
                deduplicated_before_ranking: true,
                matches,
            });
        }
        other => bail!("unknown mode {other:?} (expected targeted or untargeted)"),
    }
    save_json(&args.out, &report)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct ScenarioArgs {
    /// Experiment plan JSON ({"lab": ..., "scenarios": [...]}); the built-in
    /// default plan runs when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to runs/<plan-hash>-<seed>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the default plan to this path and exit.
    #[arg(long)]
    write_default: Option<PathBuf>,
}

pub fn scenario(args: ScenarioArgs) -> anyhow::Result<()> {
    if let Some(path) = &args.write_default {
        save_json(path, &ExperimentPlan::default())?;
        println!("wrote default plan to {}", path.display());
        return Ok(());
    }
    let plan: ExperimentPlan = match &args.config {
        Some(path) => read_json(path)?,
        None => ExperimentPlan::default(),
    };
    let plan_json = serde_json::to_string(&plan)?;
    let out_dir = args.out.unwrap_or_else(|| {
        PathBuf::from("runs").join(run_dir_name(&plan_json, plan.lab.synth.seed))
    });
    fs::create_dir_all(&out_dir)?;
    save_json(&out_dir.join("plan.json"), &plan)?;

    let lab = Lab::new(plan.lab.clone())?;
    let mut reports: Vec<ScenarioReport> = Vec::new();
    for cfg in &plan.scenarios {
        eprintln!("running scenario {} ...", cfg.name);
        let report = lab.run_scenario(cfg)?;
        save_json(&out_dir.join(format!("{}.json", cfg.name)), &report)?;
        eprintln!(
            "  eval_ppl={:.2} targeted={} untargeted_good={} (k={}, lambda={})",
            report.eval_ppl,
            report.targeted_total,
            report.untargeted_good,
            report.chosen_k,
            report.chosen_lambda
        );
        reports.push(report);
    }
    emit_report(&reports, ReportFormat::Json, &out_dir.join("report.json"))?;
    emit_report(&reports, ReportFormat::Csv, &out_dir.join("report.csv"))?;
    emit_report(&reports, ReportFormat::Markdown, &out_dir.join("report.md"))?;
    println!("{}", render_markdown(&reports));
    println!("reports under {}", out_dir.display());
    Ok(())
}

#[derive(Args)]
pub struct ReportArgs {
    /// A report.json produced by the scenario subcommand.
    #[arg(long)]
    input: PathBuf,
    /// json, csv, or markdown.
    #[arg(long, default_value = "markdown")]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

pub fn report(args: ReportArgs) -> anyhow::Result<()> {
    let reports: Vec<ScenarioReport> = read_json(&args.input)?;
    let format: ReportFormat = args.format.parse().map_err(|e: String| anyhow::anyhow!(e))?;
    emit_report(&reports, format, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
