use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rfme_core::eval::{adjusted_rand_index, cluster_purity, read_labeling};
use rfme_core::event::{write_event_log, Format};
use rfme_core::pipeline::{run_score, run_train, LoadSummary, RunConfig, RunReport};
use rfme_core::synth::{write_truth_csv, GeneratorSpec};

/// Batch RFME customer segmentation.
#[derive(Debug, Parser)]
#[command(name = "rfme", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a segmentation model on the train span.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Assign test-span users to the segments of a trained model.
    Score {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate a labelled synthetic event log.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replaces the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "csv")]
        format: Format,
    },
    /// Compare a predicted labelling with ground truth (ARI and purity).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
}

/// Command-line replacements for config-file keys.
#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    platform: Option<String>,
    #[arg(long = "train_start", alias = "train-start")]
    train_start: Option<String>,
    #[arg(long = "train_end", alias = "train-end")]
    train_end: Option<String>,
    #[arg(long = "test_start", alias = "test-start")]
    test_start: Option<String>,
    #[arg(long = "test_end", alias = "test-end")]
    test_end: Option<String>,
    #[arg(long = "window_days", alias = "window-days")]
    window_days: Option<String>,
    #[arg(long = "session_gap_minutes", alias = "session-gap-minutes")]
    session_gap_minutes: Option<String>,
    #[arg(long = "pdp_weight", alias = "pdp-weight")]
    pdp_weight: Option<String>,
    #[arg(long = "lead_weight", alias = "lead-weight")]
    lead_weight: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long = "k_min", alias = "k-min")]
    k_min: Option<String>,
    #[arg(long = "k_max", alias = "k-max")]
    k_max: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "n_init", alias = "n-init")]
    n_init: Option<String>,
    #[arg(long = "max_iter", alias = "max-iter")]
    max_iter: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    #[arg(long)]
    standardize: Option<String>,
    #[arg(long = "output_dir", alias = "output-dir")]
    output_dir: Option<String>,
    #[arg(long)]
    workers: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(String, String)> {
        let fields = [
            ("input", &self.input),
            ("format", &self.format),
            ("platform", &self.platform),
            ("train_start", &self.train_start),
            ("train_end", &self.train_end),
            ("test_start", &self.test_start),
            ("test_end", &self.test_end),
            ("window_days", &self.window_days),
            ("session_gap_minutes", &self.session_gap_minutes),
            ("pdp_weight", &self.pdp_weight),
            ("lead_weight", &self.lead_weight),
            ("k", &self.k),
            ("k_min", &self.k_min),
            ("k_max", &self.k_max),
            ("seed", &self.seed),
            ("n_init", &self.n_init),
            ("max_iter", &self.max_iter),
            ("tol", &self.tol),
            ("standardize", &self.standardize),
            ("output_dir", &self.output_dir),
            ("workers", &self.workers),
        ];
        fields
            .into_iter()
            .filter_map(|(key, value)| value.clone().map(|v| (key.to_string(), v)))
            .collect()
    }
}

fn print_load(load: &LoadSummary) {
    eprintln!(
        "loaded {} events ({} on platform), rejected {}",
        load.events_loaded,
        load.events_on_platform,
        load.rejections.total()
    );
    for (kind, lines) in &load.rejections.by_kind {
        let shown: Vec<String> = lines.iter().take(10).map(usize::to_string).collect();
        let more = if lines.len() > 10 { ", ..." } else { "" };
        eprintln!(
            "  {kind:?}: {} (records {}{more})",
            lines.len(),
            shown.join(", ")
        );
    }
}

fn print_report(report: &RunReport) {
    let split = &report.split;
    eprintln!(
        "{} split: {} users, reference {}, window {} days{}",
        split.split,
        split.user_count,
        split.reference_date,
        split.window_days_effective,
        if split.window_clipped {
            " (clipped to span)"
        } else {
            ""
        }
    );
    eprintln!("k = {}", report.selected_k);
    for row in &split.segments {
        eprintln!(
            "  {:>2} {:<16} {:>8} users ({:5.1}%)",
            row.cluster_id,
            row.segment,
            row.count,
            row.share * 100.0
        );
    }
}

fn synth(spec_path: &Path, out: &Path, seed: Option<u64>, format: Format) -> Result<()> {
    let text = fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))?;
    let mut spec = GeneratorSpec::from_toml(&text)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let (log, truth) = spec.generate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let events_name = match format {
        Format::Csv => "events.csv",
        Format::Jsonl => "events.jsonl",
    };
    let events_path = out.join(events_name);
    let file = File::create(&events_path)
        .with_context(|| format!("creating {}", events_path.display()))?;
    write_event_log(BufWriter::new(file), log.events(), format)?;
    let truth_path = out.join("truth.csv");
    let file =
        File::create(&truth_path).with_context(|| format!("creating {}", truth_path.display()))?;
    write_truth_csv(BufWriter::new(file), &truth)?;
    eprintln!(
        "wrote {} events for {} users to {}",
        log.len(),
        truth.len(),
        out.display()
    );
    Ok(())
}

fn eval(pred: &Path, truth: &Path) -> Result<()> {
    let predicted = read_labeling(pred, &["segment", "cluster_id"])?;
    let actual = read_labeling(truth, &["segment"])?;
    println!("ari={:.6}", adjusted_rand_index(&predicted, &actual)?);
    println!("purity={:.6}", cluster_purity(&predicted, &actual)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides } => {
            let config = RunConfig::from_file(&config, &overrides.pairs())?;
            let outcome = run_train(&config)?;
            print_load(&outcome.load);
            print_report(&outcome.report);
            eprintln!("outputs in {}", config.output_dir.display());
        }
        Command::Score {
            config,
            model,
            overrides,
        } => {
            let config = RunConfig::from_file(&config, &overrides.pairs())?;
            let outcome = run_score(&config, &model)?;
            print_load(&outcome.load);
            print_report(&outcome.report);
            eprintln!("outputs in {}", config.output_dir.display());
        }
        Command::Synth {
            spec,
            out,
            seed,
            format,
        } => synth(&spec, &out, seed, format)?,
        Command::Eval { pred, truth } => eval(&pred, &truth)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
