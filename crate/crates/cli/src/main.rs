use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use minchange::annotate::{aggregate_ratings, format_summary, sample_items, AnnotationSession};
use minchange::eval::delta::{check_table, delta1, delta2, delta2_rounded, format_report, PUBLISHED};
use minchange::eval::scaling::{plot_svg, scaling_run};
use minchange::eval::{
    feature_cloud, fid, inclusion_coefficient, jaccard, lpips_score, overlap_matrix, pairwise_cosine_score, MetricRecord, PixelL2,
    PredictionSet, ToyLinearEmbedder,
};
use minchange::model::{AttributeCategory, Feasibility, ImageKind, Split, Stage};
use minchange::pipeline::{write_toy_dataset, Pipeline, PipelineConfig, StageReport};
use minchange::raster::load_rgb;
use minchange::train::{
    class_names, evaluate, load_test_set, load_train_data, manifest_hash, train, train_on, write_log, AdapterCheckpoint, DataRegime,
    Example, Regime,
};
use minchange_cli::server::{router, ServerConfig};

const DEFAULT_CONFIG: &str = "minchange.toml";

#[derive(Parser)]
#[command(name = "minchange", version, about = "Minimal-change synthetic data pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline config (TOML). Defaults to `minchange.toml` in the root if present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that manifest and image paths are relative to. Defaults to the config's directory.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<String>,
    /// Concurrent jobs per stage.
    #[arg(long, global = true)]
    stage_parallelism: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// Restrict to these attribute categories (comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    category: Vec<AttributeCategory>,
    #[arg(long, global = true)]
    feasibility: Option<Feasibility>,
    /// Training data regime: real, syn, mixed; optionally suffixed -F, -IF or -Mix.
    #[arg(long, global = true)]
    regime: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a small toy dataset, manifest and config to start from.
    Init(InitArgs),
    Prompts,
    Maps,
    Priors,
    Generate,
    Filter,
    /// prompts, maps, priors, generate and filter in order.
    Run,
    /// Fine-tune adapters on one data regime and report test accuracy.
    Train(TrainArgs),
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Accuracy against synthetic:real ratio for each (category, feasibility) pool.
    Scale(ScaleArgs),
    /// Serve the annotation endpoints.
    AnnotateServe(ServeArgs),
    /// Write collected ratings as CSV and print the aggregate table.
    AnnotateExport(ExportArgs),
}

#[derive(Args)]
struct InitArgs {
    #[arg(long, value_delimiter = ',', default_value = "Abyssinian,Bengal")]
    classes: Vec<String>,
    #[arg(long, default_value_t = 3)]
    train_per_class: usize,
    #[arg(long, default_value_t = 2)]
    test_per_class: usize,
    #[arg(long, default_value_t = 48)]
    size: u32,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Checkpoint path; defaults to checkpoints/<regime>.json under the root.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Feasible/infeasible gap and mixing gain. Without --results, checks the published table.
    Delta {
        /// CSV with columns dataset,category,f,if,mix.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Test accuracy of checkpoints; with two or more, also prediction overlap.
    Accuracy {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// FID, pairwise cosine and perceptual distance of accepted synthetic pools.
    Quality {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct ScaleArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    ratios: Vec<u32>,
    #[arg(long, default_value = "scaling.svg")]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "annotation/session.json")]
    session: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8787")]
    addr: SocketAddr,
    /// Require this value in the x-annotator-token header.
    #[arg(long)]
    token: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, default_value = "annotation/session.json")]
    session: PathBuf,
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Ctx {
    root: PathBuf,
    config: PipelineConfig,
    g: Global,
}

impl Ctx {
    fn load(g: Global) -> Result<Self> {
        let root_flag = g.root.clone();
        let cfg_path = match &g.config {
            Some(p) => Some(p.clone()),
            None => {
                let p = root_flag.clone().unwrap_or_else(|| ".".into()).join(DEFAULT_CONFIG);
                p.exists().then_some(p)
            }
        };
        let mut config = match &cfg_path {
            Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        let root = root_flag
            .or_else(|| cfg_path.as_ref().and_then(|p| p.parent()).map(|p| if p.as_os_str().is_empty() { ".".into() } else { p.to_path_buf() }))
            .unwrap_or_else(|| ".".into());
        apply_overrides(&mut config, &g);
        config.validate()?;
        Ok(Ctx { root, config, g })
    }

    fn pipeline(&self) -> Result<Pipeline> {
        Ok(Pipeline::new(self.config.clone(), &self.root)?)
    }

    fn regime(&self) -> Result<Regime> {
        let base = self.g.regime.as_deref().unwrap_or("real");
        let text = match (base.contains('-'), self.g.feasibility) {
            (true, Some(_)) => bail!("give feasibility either in --regime or --feasibility, not both"),
            (false, Some(f)) => format!("{base}-{}", f.short()),
            _ => base.to_string(),
        };
        Ok(text.parse()?)
    }

    fn wants(&self, c: AttributeCategory, f: Feasibility) -> bool {
        (self.g.category.is_empty() || self.g.category.contains(&c)) && self.g.feasibility.is_none_or(|x| x == f)
    }

    fn under_root(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }
}

fn apply_overrides(c: &mut PipelineConfig, g: &Global) {
    if let Some(m) = &g.manifest {
        c.paths.manifest = m.clone();
    }
    if let Some(p) = g.stage_parallelism {
        c.parallelism = p;
    }
    if let Some(s) = g.seed {
        c.seed = s;
        c.train.seed = s;
        c.annotation.seed = s;
    }
    if let Some(d) = &g.dataset {
        c.dataset_id = d.clone();
    }
    if !g.category.is_empty() {
        c.generation.categories = g.category.clone();
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// `Ok(false)` means the command ran but some units failed.
fn run(cli: Cli) -> Result<bool> {
    if let Command::Init(a) = &cli.command {
        return init(&cli.global, a);
    }
    let ctx = Ctx::load(cli.global)?;
    match cli.command {
        Command::Init(_) => unreachable!(),
        Command::Prompts => stage(&ctx, Stage::Prompts),
        Command::Maps => stage(&ctx, Stage::Maps),
        Command::Priors => stage(&ctx, Stage::Priors),
        Command::Generate => stage(&ctx, Stage::Generate),
        Command::Filter => stage(&ctx, Stage::Filter),
        Command::Run => {
            let reports = ctx.pipeline()?.run_all()?;
            reports.iter().for_each(print_report);
            Ok(reports.len() == 5 && reports.iter().all(StageReport::ok))
        }
        Command::Train(a) => train_cmd(&ctx, &a),
        Command::Eval(EvalCommand::Delta { results }) => eval_delta(results.as_deref()),
        Command::Eval(EvalCommand::Accuracy { checkpoints }) => eval_accuracy(&ctx, &checkpoints),
        Command::Eval(EvalCommand::Quality { json }) => eval_quality(&ctx, json),
        Command::Scale(a) => scale(&ctx, &a),
        Command::AnnotateServe(a) => serve(&ctx, &a),
        Command::AnnotateExport(a) => export(&ctx, &a),
    }
}

fn init(g: &Global, a: &InitArgs) -> Result<bool> {
    let root = g.root.clone().unwrap_or_else(|| ".".into());
    let cfg_path = g.config.clone().unwrap_or_else(|| root.join(DEFAULT_CONFIG));
    let mut config = PipelineConfig::default();
    config.prompts.auto_accept = true;
    config.prompts.per_group = 4;
    config.generation.working_long_side = 64;
    config.train.total_iterations = 200;
    config.train.lr = 1e-2;
    config.train.batch_size = 8;
    apply_overrides(&mut config, g);
    let manifest = root.join(&config.paths.manifest);
    if !a.force && (manifest.exists() || cfg_path.exists()) {
        bail!("{} or {} already exists; pass --force to overwrite", manifest.display(), cfg_path.display());
    }
    let names: Vec<&str> = a.classes.iter().map(String::as_str).collect();
    write_toy_dataset(&root, &config.paths.manifest, &config.dataset_id, &names, a.train_per_class, a.test_per_class, a.size, config.seed)?;
    std::fs::write(&cfg_path, config.to_toml()?).with_context(|| format!("writing {}", cfg_path.display()))?;
    println!("wrote {} and {}", manifest.display(), cfg_path.display());
    Ok(true)
}

fn print_report(r: &StageReport) {
    let name = r.stage.map_or("?", Stage::as_str);
    println!("{name}: {} done, {} skipped, {} failed", r.done, r.skipped, r.failures.len());
    for f in &r.failures {
        eprintln!("  {name} {} (attempt {}): {}", f.job_id, f.attempt, f.message);
    }
}

fn stage(ctx: &Ctx, s: Stage) -> Result<bool> {
    let r = ctx.pipeline()?.run_stage(s)?;
    print_report(&r);
    Ok(r.ok())
}

fn test_or_train_real(ctx: &Ctx, p: &Pipeline) -> Result<(Vec<Example>, &'static str)> {
    let m = p.load_manifest()?;
    let test = load_test_set(&m, &ctx.root)?;
    if !test.is_empty() {
        return Ok((test, "test"));
    }
    log::warn!("manifest has no test split; reporting accuracy on the real training images");
    Ok((load_train_data(&m, &ctx.root, Regime::new(DataRegime::Real, minchange::train::FeasibilityRegime::Mix))?.real, "train"))
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<bool> {
    let p = ctx.pipeline()?;
    let regime = ctx.regime()?;
    let mut cfg = ctx.config.train.clone();
    if let Some(n) = a.iterations {
        cfg.total_iterations = n;
    }
    let m = p.load_manifest()?;
    let out = train(&m, &ctx.root, regime, p.backends.encoder.as_ref(), &cfg)?;
    let path = a.out.clone().unwrap_or_else(|| ctx.under_root(Path::new(&format!("checkpoints/{regime}.json"))));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    out.checkpoint.save(&path)?;
    write_log(&out.log, path.with_extension("log.jsonl"))?;
    let (examples, split) = test_or_train_real(ctx, &p)?;
    let acc = evaluate(p.backends.encoder.as_ref(), Some(&out.checkpoint.adapters), &examples, &class_names(&m))?.accuracy;
    println!(
        "{regime}: best validation {:.2}% at step {}; {split} accuracy {acc:.2}% -> {}",
        out.checkpoint.best_val_acc,
        out.checkpoint.best_step,
        path.display()
    );
    Ok(true)
}

#[derive(serde::Deserialize)]
struct ResultRow {
    dataset: String,
    category: String,
    f: f64,
    #[serde(rename = "if")]
    if_: f64,
    mix: f64,
}

fn eval_delta(results: Option<&Path>) -> Result<bool> {
    let Some(path) = results else {
        print!("{}", format_report(&check_table(&PUBLISHED)));
        return Ok(true);
    };
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    println!("dataset  category    F      IF     Mix    Δ1      Δ2      Δ2(1dp)");
    for row in rd.deserialize() {
        let r: ResultRow = row?;
        println!(
            "{:<8} {:<10} {:>6.1} {:>6.1} {:>6.1} {:>+6.1} {:>+7.2} {:>+6.1}",
            r.dataset,
            r.category,
            r.f,
            r.if_,
            r.mix,
            delta1(r.f, r.if_),
            delta2(r.mix, r.f, r.if_),
            delta2_rounded(r.mix, r.f, r.if_)
        );
    }
    Ok(true)
}

fn eval_accuracy(ctx: &Ctx, paths: &[PathBuf]) -> Result<bool> {
    let p = ctx.pipeline()?;
    let enc = p.backends.encoder.as_ref();
    let (examples, split) = test_or_train_real(ctx, &p)?;
    let mut sets = Vec::new();
    for path in paths {
        let ck = AdapterCheckpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        if ck.provenance.encoder != enc.name() {
            bail!("{} was trained with encoder `{}`, config selects `{}`", path.display(), ck.provenance.encoder, enc.name());
        }
        let e = evaluate(enc, Some(&ck.adapters), &examples, &ck.class_names)?;
        let label = ck.provenance.regime.to_string();
        println!("{label}: {split} top-1 {:.2}% ({})", e.accuracy, path.display());
        sets.push(PredictionSet::new(label, e.correct_ids));
    }
    if sets.len() >= 2 {
        for (name, metric) in [("inclusion", inclusion_coefficient as fn(&_, &_) -> _), ("jaccard", jaccard)] {
            println!("{name}:");
            for (s, row) in sets.iter().zip(overlap_matrix(&sets, metric)?) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
                println!("  {:<12} {}", s.regime, cells.join(" "));
            }
        }
    }
    Ok(true)
}

fn eval_quality(ctx: &Ctx, json: bool) -> Result<bool> {
    let p = ctx.pipeline()?;
    let m = p.load_manifest()?;
    let emb = ToyLinearEmbedder::default();
    let real: Vec<_> =
        m.real_images(Split::Train).map(|r| load_rgb(ctx.root.join(&r.path))).collect::<minchange::Result<_>>()?;
    let real_cloud = feature_cloud(&emb, &real)?;
    let mut records = Vec::new();
    for c in AttributeCategory::ALL {
        for f in Feasibility::ALL {
            if !ctx.wants(c, f) {
                continue;
            }
            let recs = m.accepted_synthetic(Some(c), Some(f));
            if recs.is_empty() {
                continue;
            }
            let mut syn = Vec::new();
            let mut parents = Vec::new();
            for r in recs {
                syn.push(load_rgb(ctx.root.join(&r.path))?);
                let parent = r.parent_real_id.as_deref().and_then(|id| m.image(id)).context("synthetic image without parent")?;
                parents.push(load_rgb(ctx.root.join(&parent.path))?);
            }
            let subject = format!("{c}/{}", f.short());
            if syn.len() >= 2 {
                records.push(MetricRecord { metric: "fid".into(), subject: subject.clone(), value: fid(&feature_cloud(&emb, &syn)?, &real_cloud)? });
            }
            records.push(MetricRecord { metric: "cosine".into(), subject: subject.clone(), value: pairwise_cosine_score(&emb, &syn, &parents)? });
            records.push(MetricRecord { metric: "perceptual".into(), subject, value: lpips_score(&PixelL2, &syn, &parents)? });
        }
    }
    if records.is_empty() {
        bail!("no accepted synthetic images to score");
    }
    for r in &records {
        if json {
            println!("{}", serde_json::to_string(r)?);
        } else {
            println!("{:<14} {:<11} {:.4}", r.subject, r.metric, r.value);
        }
    }
    Ok(true)
}

fn scale(ctx: &Ctx, a: &ScaleArgs) -> Result<bool> {
    let p = ctx.pipeline()?;
    let m = p.load_manifest()?;
    let enc = p.backends.encoder.as_ref();
    let mut cfg = ctx.config.train.clone();
    if let Some(n) = a.iterations {
        cfg.total_iterations = n;
    }
    let (examples, split) = test_or_train_real(ctx, &p)?;
    let hash = manifest_hash(&m)?;
    let names = class_names(&m);
    let curves = scaling_run(&m, &ctx.root, &a.ratios, ctx.config.seed, |c, f, _, data| {
        if !ctx.wants(c, f) {
            return Ok(f64::NAN);
        }
        let regime = Regime::new(DataRegime::Mixed, if f.is_feasible() { minchange::train::FeasibilityRegime::Feasible } else { minchange::train::FeasibilityRegime::Infeasible });
        let out = train_on(data, regime, enc, &cfg, &hash)?;
        Ok(evaluate(enc, Some(&out.checkpoint.adapters), &examples, &names)?.accuracy)
    })?;
    let curves: Vec<_> = curves.into_iter().filter(|c| ctx.wants(c.category, c.feasibility)).collect();
    if curves.is_empty() {
        bail!("no synthetic pool matches the category/feasibility selection");
    }
    for c in &curves {
        let pts: Vec<String> = c.points.iter().map(|p| format!("{}x:{:.2}", p.ratio, p.accuracy)).collect();
        println!("{} {} ({split}): {}", c.category, c.feasibility.short(), pts.join(" "));
    }
    let out = ctx.under_root(&a.out);
    std::fs::write(&out, plot_svg(&curves)).with_context(|| format!("writing {}", out.display()))?;
    std::fs::write(out.with_extension("json"), serde_json::to_string_pretty(&curves)?)?;
    println!("wrote {}", out.display());
    Ok(true)
}

fn serve(ctx: &Ctx, a: &ServeArgs) -> Result<bool> {
    let p = ctx.pipeline()?;
    let m = p.load_manifest()?;
    let path = ctx.under_root(&a.session);
    let session = if path.exists() {
        AnnotationSession::load(&path)?
    } else {
        let items: Vec<_> = sample_items(&m, ctx.config.annotation.per_cell, ctx.config.annotation.seed)?
            .into_iter()
            .filter(|i| ctx.wants(i.category, i.feasibility))
            .collect();
        if items.is_empty() {
            bail!("no accepted synthetic images to annotate");
        }
        let s = AnnotationSession::new(items, ctx.config.annotation.seed)?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        s.save(&path)?;
        s
    };
    let images: BTreeMap<String, PathBuf> =
        m.images.iter().filter(|i| i.kind == ImageKind::Synthetic).map(|i| (i.image_id.clone(), ctx.root.join(&i.path))).collect();
    let n = session.items.len();
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let app = router(ServerConfig { session, persist: Some(path), images, token: a.token.clone() });
        let listener = tokio::net::TcpListener::bind(a.addr).await?;
        println!("serving {n} items on http://{}", listener.local_addr()?);
        std::io::stdout().flush()?;
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(true)
}

fn export(ctx: &Ctx, a: &ExportArgs) -> Result<bool> {
    let path = ctx.under_root(&a.session);
    let session = AnnotationSession::load(&path)?;
    let csv = session.export_csv()?;
    match &a.out {
        Some(out) => std::fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?,
        None => print!("{csv}"),
    }
    let ratings = session.ratings();
    if ratings.is_empty() {
        eprintln!("no ratings yet");
    } else {
        eprint!("{}", format_summary(&aggregate_ratings(&session.items, &ratings)?));
    }
    Ok(true)
}
