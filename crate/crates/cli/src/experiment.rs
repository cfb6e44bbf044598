//! `claimsect experiment ...`

use std::path::PathBuf;

use anyhow::Result;
use claimsect::classify::{classify, DetectOptions, ThresholdSet, ZERO_SHOT_THRESHOLD};
use claimsect::eval::{
    dataset_problems, dataset_samples, evaluate, experiment_folds, experiment_p_sweep,
    fit_temperature, mixed_fold_problems, render_table, separable_problems, EvalError,
    TrajectoryReport, TuningProblem,
};
use claimsect::pba::{BisectionConfig, SessionStatus};
use claimsect::scores::{Document, ScoreKind, Split};
use claimsect::synthetic;
use clap::{Args, Subcommand};

use crate::{invalid, load_dataset, load_scores, load_taxonomy, write, ConfigArgs};

#[derive(Debug, Subcommand)]
pub enum ExperimentCommand {
    /// Distance to the reference threshold per annotation step, for several p.
    PSweep(PSweepArgs),
    /// Threshold spread across disjoint folds.
    Folds(FoldsArgs),
    /// Temperature-scaling baseline for several sample sizes.
    TempScaling(TempArgs),
}

/// Labeled data to run on. Synthetic data is used when omitted.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, requires_all = ["scores", "dataset"])]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

struct Labeled {
    taxonomy: claimsect::taxonomy::Taxonomy,
    scores: claimsect::scores::ScoreMatrix,
    documents: Vec<Document>,
}

impl DataArgs {
    fn load(&self) -> Result<Option<Labeled>> {
        let (Some(t), Some(s), Some(d)) = (&self.taxonomy, &self.scores, &self.dataset) else {
            return Ok(None);
        };
        Ok(Some(Labeled {
            taxonomy: load_taxonomy(t)?,
            scores: load_scores(s, None)?,
            documents: load_dataset(d)?,
        }))
    }
}

fn problems_from(data: &Labeled, noise: f64, seed: u64) -> Result<Vec<TuningProblem>> {
    let (problems, skipped) =
        dataset_problems(&data.taxonomy, &data.scores, &data.documents, noise, seed)?;
    if !skipped.is_empty() {
        eprintln!(
            "skipped claims whose gold answers are all equal: {}",
            skipped.join(", ")
        );
    }
    Ok(problems)
}

#[derive(Debug, Args)]
pub struct PSweepArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated p values.
    #[arg(long, value_delimiter = ',', default_value = "0.6,0.7,0.8,0.9")]
    p: Vec<f64>,
    #[arg(long, default_value_t = 30)]
    max_step: usize,
    /// Synthetic runs per p.
    #[arg(long, default_value_t = 50)]
    seeds: usize,
    /// Documents per synthetic run.
    #[arg(long, default_value_t = 500)]
    n_docs: usize,
    /// Threshold of the synthetic runs.
    #[arg(long, default_value_t = 0.6)]
    root: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
    /// Keep finished runs in the average at their final median.
    #[arg(long)]
    carried: bool,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
pub struct FoldsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Synthetic claims; even ones have dense scores, odd ones few documents above the threshold.
    #[arg(long, default_value_t = 20)]
    claims: usize,
    #[arg(long, default_value_t = 600)]
    n_docs: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    p: Option<f64>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
pub struct TempArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated per-label sample sizes.
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,40,80,160")]
    n: Vec<usize>,
    /// Simulate scores with this true temperature instead of reading data.
    #[arg(long)]
    t0: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: Option<PathBuf>,
}

pub fn run(cmd: ExperimentCommand) -> Result<()> {
    match cmd {
        ExperimentCommand::PSweep(a) => p_sweep(a),
        ExperimentCommand::Folds(a) => folds(a),
        ExperimentCommand::TempScaling(a) => temp_scaling(a),
    }
}

fn p_sweep(a: PSweepArgs) -> Result<()> {
    let (problems, base) = match a.data.load()? {
        Some(data) => {
            let base = BisectionConfig::default().with_range(data.scores.range());
            (problems_from(&data, a.noise, a.seed)?, base)
        }
        None => (
            separable_problems(a.n_docs, a.root, a.seeds, a.noise, a.seed),
            BisectionConfig::default(),
        ),
    };
    let base = a.config.apply(None, base);
    let report = experiment_p_sweep(&problems, &a.p, &base, a.max_step, a.jobs)?;
    let csv = if a.carried {
        report.to_csv_carried()
    } else {
        report.to_csv()
    };
    match &a.out {
        Some(path) => {
            write(path, &csv)?;
            print!("{}", sweep_summary(&report, &a.p, a.max_step));
        }
        None => {
            print!("{csv}");
            eprint!("{}", sweep_summary(&report, &a.p, a.max_step));
        }
    }
    if let Some(path) = &a.json {
        write(path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(())
}

fn sweep_summary(report: &TrajectoryReport, p_values: &[f64], max_step: usize) -> String {
    let steps: Vec<usize> = [5, 10, 20, 30]
        .into_iter()
        .filter(|&s| s <= max_step)
        .collect();
    let mut headers = vec!["p", "runs", "complete", "avg annots"];
    let labels: Vec<String> = steps.iter().map(|s| format!("dist@{s}")).collect();
    headers.extend(labels.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = p_values
        .iter()
        .map(|&p| {
            let runs: Vec<_> = report.runs.iter().filter(|r| r.p == p).collect();
            let complete = runs
                .iter()
                .filter(|r| r.status == SessionStatus::Complete)
                .count();
            let avg =
                runs.iter().map(|r| r.annotations as f64).sum::<f64>() / runs.len().max(1) as f64;
            let mut row = vec![
                p.to_string(),
                runs.len().to_string(),
                complete.to_string(),
                format!("{avg:.1}"),
            ];
            for &s in &steps {
                row.push(
                    report
                        .row(p, s)
                        .map_or("-".into(), |r| format!("{:.4}", r.mean_dist_carried)),
                );
            }
            row
        })
        .collect();
    render_table(&headers, &rows)
}

fn folds(a: FoldsArgs) -> Result<()> {
    let (problems, doc_ids, base): (_, Vec<String>, _) = match a.data.load()? {
        Some(data) => {
            let problems = problems_from(&data, a.noise, a.seed)?;
            let ids = data
                .documents
                .iter()
                .filter(|d| d.gold_classes.is_some())
                .map(|d| d.doc_id.clone())
                .collect();
            (
                problems,
                ids,
                BisectionConfig::default().with_range(data.scores.range()),
            )
        }
        None => {
            let ids = (0..a.n_docs).map(synthetic::doc_id).collect();
            (
                mixed_fold_problems(a.claims, a.n_docs, a.noise, a.seed),
                ids,
                BisectionConfig::default(),
            )
        }
    };
    let config = a.config.apply(a.p, base);
    let report = experiment_folds(&doc_ids, &problems, a.k, a.seed, &config, a.jobs)?;
    println!("{} folds of {} documents", report.k, report.fold_size);
    print!("{}", report.render());
    if let Some(path) = &a.json {
        write(path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(())
}

fn temp_scaling(a: TempArgs) -> Result<()> {
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    let fmt_fit = |n: usize, fit: Result<claimsect::eval::TemperatureFit, EvalError>| match fit {
        Ok(f) => vec![
            n.to_string(),
            (2 * n).to_string(),
            format!("{:.4}", f.temperature),
            format!("{:.3}", f.nll),
            if f.low_confidence { "yes" } else { "no" }.to_string(),
        ],
        Err(e) => vec![
            n.to_string(),
            (2 * n).to_string(),
            format!("{e}"),
            "-".into(),
            "-".into(),
        ],
    };
    if let Some(t0) = a.t0 {
        if t0.is_nan() || t0 <= 0.0 {
            return Err(invalid("--t0 must be positive"));
        }
        let samples = synthetic::temperature_samples(20_000, t0, 6.0, &mut synthetic::rng(a.seed));
        for &n in &a.n {
            let fit = fit_temperature(&samples, n, a.seed);
            fits.push((n, fit.clone().ok()));
            rows.push(fmt_fit(n, fit));
        }
        println!("true temperature {t0}");
        print!(
            "{}",
            render_table(&["N", "annots", "T", "NLL", "low conf"], &rows)
        );
    } else {
        let Some(data) = a.data.load()? else {
            return Err(invalid("give --taxonomy, --scores and --dataset, or --t0"));
        };
        if data.scores.kind() != ScoreKind::Entailment {
            return Err(invalid(
                "temperature scaling needs entailment probabilities",
            ));
        }
        let has_split = data.documents.iter().any(|d| d.split.is_some());
        let pick = |split: Split| -> Vec<Document> {
            data.documents
                .iter()
                .filter(|d| !has_split || d.split == Some(split))
                .cloned()
                .collect()
        };
        let (train, test) = (pick(Split::Train), pick(Split::Test));
        let samples = dataset_samples(&data.taxonomy, &data.scores, &train);
        // sigmoid(logit(x) / T) > 0.5 iff x > 0.5 for every T > 0, so the
        // calibrated detections coincide with the zero-shot ones.
        let thresholds = ThresholdSet::uniform(&data.taxonomy, ZERO_SHOT_THRESHOLD);
        let records = classify(
            &data.scores,
            &thresholds,
            &data.taxonomy,
            DetectOptions::default(),
        )?;
        let metrics = evaluate(&records, &test, &data.taxonomy)?;
        let w = metrics.classes.weighted;
        for &n in &a.n {
            let fit = fit_temperature(&samples, n, a.seed);
            fits.push((n, fit.clone().ok()));
            let mut row = fmt_fit(n, fit);
            row.extend([
                format!("{:.2}", w.precision),
                format!("{:.2}", w.recall),
                format!("{:.2}", w.f1),
            ]);
            rows.push(row);
        }
        println!(
            "{} training pairs, {} test documents",
            samples.len(),
            metrics.documents
        );
        print!(
            "{}",
            render_table(
                &["N", "annots", "T", "NLL", "low conf", "P", "R", "F1"],
                &rows
            )
        );
    }
    if let Some(path) = &a.json {
        let value: Vec<_> = fits
            .iter()
            .map(|(n, f)| serde_json::json!({"n": n, "fit": f}))
            .collect();
        write(path, &(serde_json::to_string_pretty(&value)? + "\n"))?;
    }
    Ok(())
}
