//! `claimsect` command-line entry point.

mod experiment;
mod terminal;

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use claimsect::annotation::{
    Campaign, CampaignError, NewCampaign, ReplayAnnotator, SimulatedAnnotator, CAMPAIGN_FILE,
    REPORTS_FILE, SCORES_FILE, TAXONOMY_FILE,
};
use claimsect::classify::{
    classify, parse_predictions, predictions_to_jsonl, ClassifyError, Comparator, DetectOptions,
    ThresholdSet, ZERO_SHOT_THRESHOLD,
};
use claimsect::eval::parse_stance_label;
use claimsect::eval::{compare_runs, evaluate, render_deltas, render_metrics, ThresholdStats};
use claimsect::pba::BisectionConfig;
use claimsect::scores::{
    fetch_scores, ingest_scores, parse_dataset, peek_score_kind, Document, FetchConfig,
    HttpProvider, ScoreError, ScoreKind, ScoreMatrix, Split, PROVIDER_URL_ENV,
};
use claimsect::taxonomy::{parse_taxonomy, validate_against_scores, TaskKind, Taxonomy};
use clap::{Args, Parser, Subcommand, ValueEnum};

const SCHEMAS: &str = "\
FILE FORMATS (all versioned claimsect/v1)

  taxonomy.json
    {\"taxonomy_id\": str, \"task_kind\": \"multi_label\" | \"multi_class_topic\" | \"stance\",
     \"claims\": [{\"claim_id\": str, \"text\": str, \"negated_text\"?: str,
                 \"classes\": [{\"class_id\": str, \"polarity\": \"supports\" | \"opposes\"}]}],
     \"classes\": [{\"class_id\": str, \"label\": str, \"mode\": \"any_of\" | \"all_of\",
                  \"member_claims\": [str], \"absence_claims\": [str]}]}

  scores.jsonl
    first line: {\"score_kind\": \"entailment\" | \"cosine\", \"range\": [lo, hi]}
    then one line per cell: {\"doc_id\": str, \"claim_id\": str, \"score\": float}
    Negated claims use the column id \"¬<claim_id>\".

  dataset.jsonl
    {\"doc_id\": str, \"text\": str, \"gold_classes\"?: [str], \"split\"?: \"train\" | \"test\"}
    Stance gold labels read \"<topic>:favor\", \"<topic>:against\" or \"<topic>:neutral\".

  thresholds
    reports.json written by `tune`, or a plain {\"<claim_id>\": threshold} object.

  reports.json
    {\"format\": \"claimsect/v1\", \"reports\": [{\"claim_id\", \"threshold\", \"status\",
     \"annotations\", \"ci_width\", \"ci\": [lo, hi], ...}]}

  predictions.jsonl
    multi_label: {\"doc_id\", \"claims\": [str], \"classes\": [str]}
    topic/stance: {\"doc_id\", \"topic\": str, \"stance\"?: \"favor\" | \"against\" | \"neutral\"}

  p-sweep CSV
    p,step,mean_dist,se,n_active

EXIT CODES
  0 success, 1 validation error, 2 runtime error, 64 usage error";

#[derive(Debug, Parser)]
#[command(name = "claimsect", version, about = "Tune claim thresholds with probabilistic bisection and classify documents", after_long_help = SCHEMAS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalize a score file, or fetch scores from a provider endpoint.
    Ingest(IngestArgs),
    /// Check a taxonomy against a score file (and optionally a dataset).
    Validate(ValidateArgs),
    /// Run or resume a threshold-tuning campaign.
    Tune(TuneArgs),
    /// Classify documents from scores and thresholds.
    Classify(ClassifyArgs),
    /// Score predictions against gold labels.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Experiment harnesses.
    #[command(subcommand)]
    Experiment(experiment::ExperimentCommand),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Entailment,
    Cosine,
}

impl From<KindArg> for ScoreKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Entailment => ScoreKind::Entailment,
            KindArg::Cosine => ScoreKind::Cosine,
        }
    }
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Score file to normalize.
    #[arg(long, conflicts_with = "provider_url")]
    scores: Option<PathBuf>,
    /// Score kind; read from the file header when omitted.
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// Scoring endpoint; requires --taxonomy and --dataset.
    #[arg(long, env = PROVIDER_URL_ENV)]
    provider_url: Option<String>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long, default_value_t = 4)]
    max_retries: u32,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 60)]
    timeout: u64,
    /// Output score file. When fetching it doubles as the cache.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

/// Overrides of the bisection settings.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    grid_size: Option<usize>,
    /// Credible mass of the completion interval.
    #[arg(long)]
    ci_mass: Option<f64>,
    /// Completion interval width, in score units.
    #[arg(long)]
    ci_width: Option<f64>,
    #[arg(long)]
    max_annotations: Option<usize>,
    /// Keep annotating after the completion target is met.
    #[arg(long)]
    run_to_exhaustion: bool,
}

impl ConfigArgs {
    pub fn apply(&self, p: Option<f64>, mut config: BisectionConfig) -> BisectionConfig {
        if let Some(p) = p {
            config.p = p;
        }
        if let Some(g) = self.grid_size {
            config.grid_size = g;
        }
        if let Some(m) = self.ci_mass {
            config.completion_ci_mass = m;
        }
        if let Some(w) = self.ci_width {
            config.completion_ci_width = w;
        }
        if self.max_annotations.is_some() {
            config.max_annotations = self.max_annotations;
        }
        if self.run_to_exhaustion {
            config.stop_on_complete = false;
        }
        config
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AnnotatorKind {
    InteractiveTerminal,
    Simulated,
    Replay,
}

#[derive(Debug, Args)]
struct TuneArgs {
    /// Campaign directory. Created when it holds no campaign yet.
    #[arg(long)]
    campaign: PathBuf,
    /// Taxonomy file, for a new campaign.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Score file, for a new campaign.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Dataset with document texts and gold labels.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Campaign id; defaults to the directory name.
    #[arg(long)]
    id: Option<String>,
    /// Probability that an annotator answer is correct.
    #[arg(long)]
    p: Option<f64>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum, default_value = "interactive-terminal")]
    annotator: AnnotatorKind,
    /// Campaign whose logs the replay annotator reads.
    #[arg(long, required_if_eq("annotator", "replay"))]
    replay_from: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probability that a simulated answer is flipped.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Claims tuned in parallel (simulated annotator only).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ComparatorArg {
    Strict,
    AtLeast,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    /// Defaults to the campaign's taxonomy when --campaign is given.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Defaults to the campaign's scores when --campaign is given.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Thresholds file (reports.json or a claim_id to threshold map).
    #[arg(long, conflicts_with_all = ["zero_shot"])]
    thresholds: Option<PathBuf>,
    /// Use 0.5 for every claim.
    #[arg(long)]
    zero_shot: bool,
    /// Use the thresholds a campaign has produced.
    #[arg(long)]
    campaign: Option<PathBuf>,
    /// Require a claim to outscore its negation.
    #[arg(long)]
    negation_filter: bool,
    #[arg(long, value_enum, default_value = "strict")]
    comparator: ComparatorArg,
    /// Predictions file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    /// Predictions to report deltas against, in percentage points.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Only evaluate documents of this split.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Also write the metrics as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[arg(long, env = claimsect_service::DATA_DIR_ENV, default_value = "campaigns")]
    data_dir: PathBuf,
    /// Directory of static UI assets.
    #[arg(long)]
    serve_ui: Option<PathBuf>,
}

/// Bad input; exits with status 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Invalid(pub String);

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Invalid>() || cause.is::<ClassifyError>() || cause.is::<ScoreError>() {
            return 1;
        }
        if cause.is::<claimsect::taxonomy::TaxonomyError>() {
            return 1;
        }
        if let Some(c) = cause.downcast_ref::<CampaignError>() {
            return match c {
                CampaignError::Invalid(_)
                | CampaignError::Taxonomy(_)
                | CampaignError::Scores(_)
                | CampaignError::Engine(_)
                | CampaignError::Discrepancies(_)
                | CampaignError::AlreadyExists(_) => 1,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<claimsect::eval::EvalError>() {
            return match e {
                claimsect::eval::EvalError::Engine(_) => 2,
                _ => 1,
            };
        }
    }
    2
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Validate(a) => validate(a),
        Command::Tune(a) => tune(a),
        Command::Classify(a) => classify_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Serve(a) => serve(a),
        Command::Experiment(c) => experiment::run(c),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn load_taxonomy(path: &Path) -> Result<Taxonomy> {
    parse_taxonomy(&read(path)?).with_context(|| format!("taxonomy {}", path.display()))
}

pub fn load_scores(path: &Path, kind: Option<ScoreKind>) -> Result<ScoreMatrix> {
    let bytes = read(path)?;
    let kind = match kind {
        Some(k) => k,
        None => peek_score_kind(&bytes).with_context(|| format!("scores {}", path.display()))?,
    };
    ingest_scores(&bytes, kind).with_context(|| format!("scores {}", path.display()))
}

pub fn load_dataset(path: &Path) -> Result<Vec<Document>> {
    parse_dataset(&read(path)?).with_context(|| format!("dataset {}", path.display()))
}

fn ingest(a: IngestArgs) -> Result<()> {
    let kind = a.kind.map(ScoreKind::from);
    let matrix = match (&a.scores, &a.provider_url) {
        (Some(path), _) => load_scores(path, kind)?,
        (None, Some(url)) => {
            let (Some(tax), Some(data)) = (&a.taxonomy, &a.dataset) else {
                return Err(invalid("fetching scores needs --taxonomy and --dataset"));
            };
            let taxonomy = load_taxonomy(tax)?;
            let docs = load_dataset(data)?;
            let provider = HttpProvider::new(url.clone(), Duration::from_secs(a.timeout))?;
            let config = FetchConfig {
                kind: kind.unwrap_or(ScoreKind::Entailment),
                batch_size: a.batch_size.max(1),
                max_retries: a.max_retries,
                concurrency: a.concurrency.max(1),
                cache_path: Some(a.out.clone()),
                ..FetchConfig::default()
            };
            fetch_scores(&provider, &docs, &taxonomy.claims, &config)?
        }
        (None, None) => {
            return Err(invalid(format!(
                "give --scores FILE or --provider-url URL (or set {PROVIDER_URL_ENV})"
            )))
        }
    };
    write(&a.out, &matrix.to_jsonl())?;
    println!(
        "{} documents x {} columns ({:?}) -> {}",
        matrix.doc_ids().len(),
        matrix.claim_ids().len(),
        matrix.kind(),
        a.out.display()
    );
    Ok(())
}

fn validate(a: ValidateArgs) -> Result<()> {
    let taxonomy = load_taxonomy(&a.taxonomy)?;
    let scores = load_scores(&a.scores, None)?;
    let mut problems: Vec<String> = validate_against_scores(&taxonomy, &scores)
        .into_iter()
        .map(|d| format!("{d:?}"))
        .collect();
    if let Some(path) = &a.dataset {
        problems.extend(dataset_problems(&taxonomy, &scores, &load_dataset(path)?));
    }
    if problems.is_empty() {
        println!(
            "ok: {} claims, {} classes, {} documents",
            taxonomy.claims.len(),
            taxonomy.classes.len(),
            scores.doc_ids().len()
        );
        return Ok(());
    }
    for p in &problems {
        println!("{p}");
    }
    Err(invalid(format!("{} problem(s) found", problems.len())))
}

fn dataset_problems(taxonomy: &Taxonomy, scores: &ScoreMatrix, docs: &[Document]) -> Vec<String> {
    let mut out = Vec::new();
    let known: std::collections::HashSet<&str> =
        scores.doc_ids().iter().map(String::as_str).collect();
    for doc in docs {
        if !known.contains(doc.doc_id.as_str()) {
            out.push(format!("document {:?} has no scores", doc.doc_id));
        }
        for label in doc.gold_classes.iter().flatten() {
            let class = match taxonomy.task_kind {
                TaskKind::Stance => parse_stance_label(label).map(|(t, _)| t),
                _ => Some(label.as_str()),
            };
            if !class.is_some_and(|c| taxonomy.class(c).is_some()) {
                out.push(format!(
                    "document {:?}: unknown gold label {label:?}",
                    doc.doc_id
                ));
            }
        }
    }
    out
}

fn tune(a: TuneArgs) -> Result<()> {
    let creating = !a.campaign.join(CAMPAIGN_FILE).exists();
    let mut campaign = if creating {
        let (Some(tax), Some(scores)) = (&a.taxonomy, &a.scores) else {
            return Err(invalid(format!(
                "no campaign at {}; give --taxonomy and --scores to create one",
                a.campaign.display()
            )));
        };
        let campaign_id = match &a.id {
            Some(id) => id.clone(),
            None => a
                .campaign
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("campaign")
                .to_string(),
        };
        let taxonomy = load_taxonomy(tax)?;
        let scores = load_scores(scores, None)?;
        let documents = match &a.dataset {
            Some(p) => load_dataset(p)?,
            None => Vec::new(),
        };
        let config = a
            .config
            .apply(a.p, BisectionConfig::default().with_range(scores.range()));
        Campaign::create(
            &a.campaign,
            NewCampaign {
                campaign_id,
                taxonomy,
                scores,
                documents,
                config,
            },
        )?
    } else {
        if a.taxonomy.is_some() || a.scores.is_some() || a.dataset.is_some() || a.p.is_some() {
            return Err(invalid(format!(
                "a campaign already exists at {}; drop the creation options to resume it",
                a.campaign.display()
            )));
        }
        Campaign::open(&a.campaign)?
    };

    let run = match a.annotator {
        AnnotatorKind::InteractiveTerminal => {
            let mut annotator = terminal::TerminalAnnotator::stdio();
            campaign.run(&mut annotator)?
        }
        AnnotatorKind::Simulated => {
            let docs = all_documents(&campaign);
            let task_kind = campaign.taxonomy().task_kind;
            let annotator = SimulatedAnnotator::new(&docs, task_kind, a.noise, a.seed)?;
            if a.jobs > 1 {
                campaign.run_parallel(a.jobs, |_| annotator.clone())?
            } else {
                campaign.run(&mut annotator.clone())?
            }
        }
        AnnotatorKind::Replay => {
            let from = a.replay_from.as_deref().expect("required by clap");
            let mut annotator = ReplayAnnotator::from_campaign(from)?;
            campaign.run(&mut annotator)?
        }
    };
    let stats = ThresholdStats::from_reports(&run.reports);
    print!("{}", stats.render(&campaign.meta().taxonomy_id));
    if run.quit {
        println!(
            "stopped with {} of {} claims finished; rerun to resume",
            run.reports.len(),
            campaign.sessions().len()
        );
    }
    println!("reports: {}", a.campaign.join(REPORTS_FILE).display());
    Ok(())
}

fn all_documents(campaign: &Campaign) -> Vec<Document> {
    campaign
        .scores()
        .doc_ids()
        .iter()
        .filter_map(|id| campaign.document(id).cloned())
        .collect()
}

fn classify_cmd(a: ClassifyArgs) -> Result<()> {
    let taxonomy = match (&a.taxonomy, &a.campaign) {
        (Some(p), _) => load_taxonomy(p)?,
        (None, Some(dir)) => load_taxonomy(&dir.join(TAXONOMY_FILE))?,
        (None, None) => return Err(invalid("give --taxonomy or --campaign")),
    };
    let scores = match (&a.scores, &a.campaign) {
        (Some(p), _) => load_scores(p, None)?,
        (None, Some(dir)) => load_scores(&dir.join(SCORES_FILE), None)?,
        (None, None) => return Err(invalid("give --scores or --campaign")),
    };
    let thresholds = if a.zero_shot {
        ThresholdSet::uniform(&taxonomy, ZERO_SHOT_THRESHOLD)
    } else if let Some(path) = &a.thresholds {
        ThresholdSet::parse(&read(path)?)?
    } else if let Some(dir) = &a.campaign {
        ThresholdSet::parse(&read(&dir.join(REPORTS_FILE))?)?
    } else {
        return Err(invalid(
            "give --thresholds FILE, --zero-shot or --campaign DIR",
        ));
    };
    thresholds.check(&taxonomy, scores.range())?;
    let opts = DetectOptions {
        comparator: match a.comparator {
            ComparatorArg::Strict => Comparator::Strict,
            ComparatorArg::AtLeast => Comparator::AtLeast,
        },
        negation_filter: a.negation_filter,
    };
    let records = classify(&scores, &thresholds, &taxonomy, opts)?;
    let out = predictions_to_jsonl(&records);
    match &a.out {
        Some(path) => {
            write(path, &out)?;
            eprintln!("{} predictions -> {}", records.len(), path.display());
        }
        None => print!("{out}"),
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let taxonomy = load_taxonomy(&a.taxonomy)?;
    let mut docs = load_dataset(&a.dataset)?;
    if let Some(split) = a.split {
        let want = match split {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        };
        docs.retain(|d| d.split == Some(want));
    }
    let load_preds = |path: &Path| -> Result<_> {
        let text = String::from_utf8(read(path)?)
            .map_err(|_| invalid(format!("{} is not UTF-8", path.display())))?;
        parse_predictions(&text)
            .map_err(|(line, e)| invalid(format!("{}:{line}: {e}", path.display())))
    };
    let current = evaluate(&load_preds(&a.predictions)?, &docs, &taxonomy)?;
    println!("{} documents", current.documents);
    print!("{}", render_metrics(&current.classes));
    if let Some(stance) = &current.stance {
        println!();
        print!("{}", render_metrics(stance));
    }
    if let Some(path) = &a.baseline {
        let base = evaluate(&load_preds(path)?, &docs, &taxonomy)?;
        println!("\nchange from baseline (percentage points)");
        print!(
            "{}",
            render_deltas(&compare_runs(&base.classes, &current.classes)?)
        );
        if let (Some(b), Some(c)) = (&base.stance, &current.stance) {
            println!();
            print!("{}", render_deltas(&compare_runs(b, c)?));
        }
    }
    if let Some(path) = &a.json {
        write(path, &(serde_json::to_string_pretty(&current)? + "\n"))?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let config = claimsect_service::ServiceConfig {
        data_dir: a.data_dir,
        ui_dir: a.serve_ui,
    };
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime
        .block_on(claimsect_service::serve(
            SocketAddr::new(a.host, a.port),
            config,
        ))
        .context("server failed")
}
