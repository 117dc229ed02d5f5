//! Train and score runs: ingest, split by date, build features, cluster,
//! label, and write the model artifact, reports and plot data.
//!
//! Every output is a pure function of the config and the input bytes. No
//! timestamps, absolute paths or thread counts end up in an artifact.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{
    count_distinct, elbow_curve, kmeans_fit, kmeans_predict, ClusterError, ElbowCurve,
    KMeansConfig, KMeansModel, Point, Scaling, StandardizationParams,
};
use crate::event::{load_event_log, EventLog, Format, LoadError, Platform, RejectionReport};
use crate::features::{
    build_feature_matrix, write_features_csv, FeatureError, MonetaryWeights, RfmeVector,
    WindowSpec, DEFAULT_WINDOW_DAYS, FEATURE_NAMES,
};
use crate::labeling::{
    cluster_names, profile_assignments, profile_clusters, write_segment_report, ClusterProfile,
    FeatureMeans, LabelError,
};
use crate::session::DEFAULT_GAP_MINUTES;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("no user has activity in the {split} window")]
    EmptyWindow { split: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("model artifact not found: {0}")]
    ModelMissing(String),
    #[error("model artifact {path} is unreadable: {reason}")]
    ModelFormat { path: String, reason: String },
    #[error("model feature order {found:?} differs from {expected:?}")]
    FeatureOrderMismatch {
        found: Vec<String>,
        expected: Vec<String>,
    },
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::ConfigInvalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlatformFilter {
    Web,
    App,
    Both,
}

impl PlatformFilter {
    pub fn admits(self, platform: Platform) -> bool {
        match self {
            PlatformFilter::Both => true,
            PlatformFilter::Web => platform == Platform::Web,
            PlatformFilter::App => platform == Platform::App,
        }
    }
}

impl FromStr for PlatformFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "web" => Ok(Self::Web),
            "app" => Ok(Self::App),
            "both" => Ok(Self::Both),
            other => Err(format!(
                "unknown platform filter `{other}` (web, app or both)"
            )),
        }
    }
}

/// Inclusive range of UTC calendar days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateSpan {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateSpan {
    pub fn days(&self) -> u32 {
        ((self.end - self.start).num_days() + 1).max(0) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum KSelection {
    Fixed { k: usize },
    Auto { k_min: usize, k_max: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: PathBuf,
    pub format: Format,
    pub platform: PlatformFilter,
    pub train: DateSpan,
    pub test: Option<DateSpan>,
    pub window_days: u32,
    pub session_gap_minutes: i64,
    pub weights: MonetaryWeights,
    pub k: KSelection,
    pub seed: Option<u64>,
    pub n_init: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub standardize: bool,
    pub output_dir: PathBuf,
    /// Rayon pool size; `None` uses the global pool. Never affects output.
    pub workers: Option<usize>,
}

/// Every key a config file or command line may set.
pub const CONFIG_KEYS: &[&str] = &[
    "input",
    "format",
    "platform",
    "train_start",
    "train_end",
    "test_start",
    "test_end",
    "window_days",
    "session_gap_minutes",
    "pdp_weight",
    "lead_weight",
    "k",
    "k_min",
    "k_max",
    "seed",
    "n_init",
    "max_iter",
    "tol",
    "standardize",
    "output_dir",
    "workers",
];

fn toml_scalar(key: &str, value: &toml::Value) -> Result<String, PipelineError> {
    Ok(match value {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Datetime(d) => d.to_string(),
        _ => return Err(invalid(format!("`{key}` must be a scalar value"))),
    })
}

impl RunConfig {
    /// Parses a flat `key = value` document, then applies `overrides` in order.
    pub fn from_toml_str(
        text: &str,
        overrides: &[(String, String)],
    ) -> Result<Self, PipelineError> {
        let table: toml::Table = text.parse().map_err(|e| invalid(format!("{e}")))?;
        let mut pairs = BTreeMap::new();
        for (key, value) in &table {
            pairs.insert(key.clone(), toml_scalar(key, value)?);
        }
        for (key, value) in overrides {
            pairs.insert(key.clone(), value.clone());
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_file(path: &Path, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self, PipelineError> {
        if let Some(unknown) = pairs.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
            return Err(invalid(format!("unknown key `{unknown}`")));
        }
        let get = |key: &str| pairs.get(key).map(|s| s.trim());
        fn parse<T: FromStr>(key: &str, raw: Option<&str>) -> Result<Option<T>, PipelineError>
        where
            T::Err: std::fmt::Display,
        {
            raw.map(|s| {
                s.parse::<T>()
                    .map_err(|e| invalid(format!("`{key}` = `{s}`: {e}")))
            })
            .transpose()
        }
        let required = |key: &str| get(key).ok_or_else(|| invalid(format!("missing `{key}`")));
        let date = |key: &str| parse::<NaiveDate>(key, get(key));

        let train = DateSpan {
            start: date("train_start")?.ok_or_else(|| invalid("missing `train_start`"))?,
            end: date("train_end")?.ok_or_else(|| invalid("missing `train_end`"))?,
        };
        let test = match (date("test_start")?, date("test_end")?) {
            (Some(start), Some(end)) => Some(DateSpan { start, end }),
            (None, None) => None,
            _ => {
                return Err(invalid(
                    "`test_start` and `test_end` must be given together",
                ))
            }
        };
        let k = match get("k").unwrap_or("auto") {
            "auto" => KSelection::Auto {
                k_min: parse("k_min", get("k_min"))?.unwrap_or(1),
                k_max: parse("k_max", get("k_max"))?.unwrap_or(7),
            },
            fixed => KSelection::Fixed {
                k: parse("k", Some(fixed))?.expect("present"),
            },
        };
        let weights = MonetaryWeights::new(
            parse("pdp_weight", get("pdp_weight"))?.unwrap_or(1),
            parse("lead_weight", get("lead_weight"))?.unwrap_or(7),
        )
        .map_err(|e| invalid(e.to_string()))?;

        let config = RunConfig {
            input: PathBuf::from(required("input")?),
            format: parse("format", get("format"))?.unwrap_or(Format::Csv),
            platform: parse("platform", get("platform"))?.unwrap_or(PlatformFilter::Both),
            train,
            test,
            window_days: parse("window_days", get("window_days"))?.unwrap_or(DEFAULT_WINDOW_DAYS),
            session_gap_minutes: parse("session_gap_minutes", get("session_gap_minutes"))?
                .unwrap_or(DEFAULT_GAP_MINUTES),
            weights,
            k,
            seed: parse("seed", get("seed"))?,
            n_init: parse("n_init", get("n_init"))?.unwrap_or(KMeansConfig::DEFAULT_N_INIT),
            max_iter: parse("max_iter", get("max_iter"))?.unwrap_or(KMeansConfig::DEFAULT_MAX_ITER),
            tol: parse("tol", get("tol"))?.unwrap_or(KMeansConfig::DEFAULT_TOL),
            standardize: parse("standardize", get("standardize"))?.unwrap_or(true),
            output_dir: PathBuf::from(get("output_dir").unwrap_or("out")),
            workers: parse("workers", get("workers"))?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let span_ok = |name: &str, span: &DateSpan| {
            if span.start > span.end {
                Err(invalid(format!("{name} span starts after it ends")))
            } else {
                Ok(())
            }
        };
        span_ok("train", &self.train)?;
        if let Some(test) = &self.test {
            span_ok("test", test)?;
            if self.train.end >= test.start {
                return Err(invalid(format!(
                    "train end {} must precede test start {}",
                    self.train.end, test.start
                )));
            }
        }
        if self.window_days == 0 {
            return Err(invalid("window_days must be at least 1"));
        }
        if self.session_gap_minutes <= 0 {
            return Err(invalid("session_gap_minutes must be positive"));
        }
        match self.k {
            KSelection::Fixed { k: 0 } => return Err(invalid("k must be at least 1")),
            KSelection::Auto { k_min, k_max } if k_min == 0 || k_min > k_max => {
                return Err(invalid(format!("bad k range {k_min}..={k_max}")))
            }
            _ => {}
        }
        if self.n_init == 0 || self.max_iter == 0 {
            return Err(invalid("n_init and max_iter must be at least 1"));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(invalid("tol must be non-negative"));
        }
        if self.workers == Some(0) {
            return Err(invalid("workers must be at least 1"));
        }
        Ok(())
    }

    pub fn gap(&self) -> Duration {
        Duration::minutes(self.session_gap_minutes)
    }

    fn kmeans_config(&self, k: usize) -> Result<KMeansConfig, PipelineError> {
        let seed = self
            .seed
            .ok_or_else(|| invalid("`seed` is required for training"))?;
        Ok(KMeansConfig {
            k,
            seed,
            n_init: self.n_init,
            max_iter: self.max_iter,
            tol: self.tol,
        })
    }

    /// Window ending on the span's last day, clipped to the span's length.
    pub fn window_for(&self, span: &DateSpan) -> WindowSpec {
        WindowSpec {
            reference_date: span.end,
            window_days: self.window_days.min(span.days()),
        }
    }

    fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
        match self.workers {
            None => Ok(f()),
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map(|pool| pool.install(f))
                .map_err(|e| invalid(format!("cannot start {n} workers: {e}"))),
        }
    }
}

/// The JSON model document written by `run_train` and read by `run_score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub feature_order: Vec<String>,
    pub k: usize,
    pub segments: Vec<String>,
    pub centroids_standardized: Vec<Point>,
    pub centroids_raw: Vec<Point>,
    pub standardize: bool,
    pub standardization: StandardizationParams,
    pub seed: u64,
    pub n_init: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub iterations_run: usize,
    pub converged: bool,
    pub wcss: f64,
    pub session_gap_minutes: i64,
    pub weights: MonetaryWeights,
}

impl ModelArtifact {
    fn new(model: &KMeansModel, segments: Vec<String>, config: &RunConfig) -> Self {
        Self {
            feature_order: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            k: model.k,
            segments,
            centroids_standardized: model.centroids.clone(),
            centroids_raw: model.raw_centroids(),
            standardize: model.standardized,
            standardization: model.standardization.clone(),
            seed: model.seed,
            n_init: model.n_init,
            max_iter: model.max_iter,
            tol: model.tol,
            iterations_run: model.iterations_run,
            converged: model.converged,
            wcss: model.wcss,
            session_gap_minutes: config.session_gap_minutes,
            weights: config.weights,
        }
    }

    pub fn model(&self) -> KMeansModel {
        KMeansModel {
            k: self.k,
            centroids: self.centroids_standardized.clone(),
            standardized: self.standardize,
            standardization: self.standardization.clone(),
            seed: self.seed,
            n_init: self.n_init,
            max_iter: self.max_iter,
            tol: self.tol,
            iterations_run: self.iterations_run,
            converged: self.converged,
            wcss: self.wcss,
        }
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = match fs::read_to_string(path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(PipelineError::ModelMissing(path.display().to_string()))
            }
            Err(e) => return Err(io_error(path)(e)),
        };
        let artifact: ModelArtifact =
            serde_json::from_str(&text).map_err(|e| PipelineError::ModelFormat {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        let expected: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
        if artifact.feature_order != expected {
            return Err(PipelineError::FeatureOrderMismatch {
                found: artifact.feature_order,
                expected,
            });
        }
        let consistent = artifact.k >= 1
            && artifact.centroids_standardized.len() == artifact.k
            && artifact.segments.len() == artifact.k;
        if !consistent {
            return Err(PipelineError::ModelFormat {
                path: path.display().to_string(),
                reason: "k, centroids and segments disagree".into(),
            });
        }
        Ok(artifact)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentRow {
    pub cluster_id: usize,
    pub segment: String,
    pub means: FeatureMeans,
    pub count: usize,
    pub share: f64,
}

fn segment_rows(profiles: &[ClusterProfile], names: &[String]) -> Vec<SegmentRow> {
    profiles
        .iter()
        .zip(names)
        .map(|(p, name)| SegmentRow {
            cluster_id: p.cluster_id,
            segment: name.clone(),
            means: p.means,
            count: p.count,
            share: p.share,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub split: &'static str,
    pub span: DateSpan,
    pub reference_date: NaiveDate,
    pub window_days_requested: u32,
    pub window_days_effective: u32,
    pub window_clipped: bool,
    pub user_count: usize,
    pub segments: Vec<SegmentRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Convergence {
    pub iterations_run: usize,
    pub converged: bool,
    pub wcss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub platform: PlatformFilter,
    pub standardize: bool,
    pub k_selection: KSelection,
    pub selected_k: usize,
    pub elbow: Option<ElbowCurve>,
    pub convergence: Convergence,
    pub split: SplitReport,
}

/// Ingestion statistics, kept out of the byte-stable artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSummary {
    pub events_loaded: usize,
    pub events_on_platform: usize,
    pub rejections: RejectionReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub artifact: ModelArtifact,
    pub vectors: Vec<RfmeVector>,
    pub assignments: Vec<usize>,
    pub load: LoadSummary,
}

#[derive(Debug, Clone)]
pub struct ScoreOutcome {
    pub report: RunReport,
    pub vectors: Vec<RfmeVector>,
    pub assignments: Vec<usize>,
    pub load: LoadSummary,
}

fn load_platform_log(config: &RunConfig) -> Result<(EventLog, LoadSummary), PipelineError> {
    let (log, rejections) = load_event_log(&config.input, config.format)?;
    let events_loaded = log.len();
    let log = log.filter(|e| config.platform.admits(e.platform));
    let summary = LoadSummary {
        events_loaded,
        events_on_platform: log.len(),
        rejections,
    };
    Ok((log, summary))
}

fn split_features(
    config: &RunConfig,
    log: &EventLog,
    span: &DateSpan,
    split: &'static str,
) -> Result<(WindowSpec, Vec<RfmeVector>), PipelineError> {
    let window = config.window_for(span);
    match build_feature_matrix(log, &window, config.gap(), config.weights) {
        Ok(vectors) => Ok((window, vectors)),
        Err(FeatureError::EmptyWindow) => Err(PipelineError::EmptyWindow { split }),
        Err(e) => Err(e.into()),
    }
}

/// Builds features and fits a model from already loaded events. Writes nothing.
pub fn train_on_log(config: &RunConfig, log: &EventLog) -> Result<TrainOutcome, PipelineError> {
    config.validate()?;
    config.in_pool(|| train_inner(config, log))?
}

fn train_inner(config: &RunConfig, log: &EventLog) -> Result<TrainOutcome, PipelineError> {
    let (window, vectors) = split_features(config, log, &config.train, "train")?;
    let raw: Vec<Point> = vectors.iter().map(RfmeVector::as_point).collect();
    let scaling = Scaling::fit(&raw, config.standardize)?;
    let points = scaling.apply(&raw);

    let (fit, base, elbow) = match config.k {
        KSelection::Fixed { k } => {
            let cfg = config.kmeans_config(k)?;
            (kmeans_fit(&points, &cfg)?, cfg, None)
        }
        KSelection::Auto { k_min, k_max } => {
            let cfg = config.kmeans_config(k_min)?;
            let distinct = count_distinct(&points);
            if k_max > distinct {
                return Err(ClusterError::KExceedsDistinctPoints { k: k_max, distinct }.into());
            }
            let search = elbow_curve(&points, k_min, k_max, &cfg)?;
            let k = search.curve.selected_k;
            let fit = search.fit_for(k).expect("selected k was fitted").clone();
            (fit, cfg.with_k(k), Some(search.curve))
        }
    };
    let model = KMeansModel::from_fit(&fit, &base, scaling);
    let profiles = profile_clusters(model.k, &vectors, &fit.assignments)?;
    let names = cluster_names(&profiles);
    let artifact = ModelArtifact::new(&model, names.clone(), config);
    let report = RunReport {
        platform: config.platform,
        standardize: config.standardize,
        k_selection: config.k,
        selected_k: model.k,
        elbow,
        convergence: Convergence {
            iterations_run: model.iterations_run,
            converged: model.converged,
            wcss: model.wcss,
        },
        split: SplitReport {
            split: "train",
            span: config.train,
            reference_date: window.reference_date,
            window_days_requested: config.window_days,
            window_days_effective: window.window_days,
            window_clipped: window.window_days < config.window_days,
            user_count: vectors.len(),
            segments: segment_rows(&profiles, &names),
        },
    };
    Ok(TrainOutcome {
        report,
        artifact,
        vectors,
        assignments: fit.assignments,
        load: LoadSummary {
            events_loaded: log.len(),
            events_on_platform: log.len(),
            rejections: RejectionReport::default(),
        },
    })
}

/// Scores already loaded events against a model. Writes nothing.
pub fn score_on_log(
    config: &RunConfig,
    artifact: &ModelArtifact,
    log: &EventLog,
) -> Result<ScoreOutcome, PipelineError> {
    config.validate()?;
    let test = config
        .test
        .ok_or_else(|| invalid("`test_start` and `test_end` are required for scoring"))?;
    if artifact.session_gap_minutes != config.session_gap_minutes
        || artifact.weights != config.weights
    {
        return Err(invalid(
            "session_gap_minutes and monetary weights must match the trained model",
        ));
    }
    config.in_pool(|| {
        let (window, vectors) = split_features(config, log, &test, "test")?;
        let model = artifact.model();
        let raw: Vec<Point> = vectors.iter().map(RfmeVector::as_point).collect();
        let assignments = kmeans_predict(&model, &raw);
        let profiles = profile_assignments(model.k, &vectors, &assignments)?;
        let report = RunReport {
            platform: config.platform,
            standardize: artifact.standardize,
            k_selection: KSelection::Fixed { k: artifact.k },
            selected_k: artifact.k,
            elbow: None,
            convergence: Convergence {
                iterations_run: artifact.iterations_run,
                converged: artifact.converged,
                wcss: artifact.wcss,
            },
            split: SplitReport {
                split: "test",
                span: test,
                reference_date: window.reference_date,
                window_days_requested: config.window_days,
                window_days_effective: window.window_days,
                window_clipped: window.window_days < config.window_days,
                user_count: vectors.len(),
                segments: segment_rows(&profiles, &artifact.segments),
            },
        };
        Ok(ScoreOutcome {
            report,
            vectors,
            assignments,
            load: LoadSummary {
                events_loaded: log.len(),
                events_on_platform: log.len(),
                rejections: RejectionReport::default(),
            },
        })
    })?
}

/// Loads the configured log, trains, and writes every training output.
pub fn run_train(config: &RunConfig) -> Result<TrainOutcome, PipelineError> {
    config.validate()?;
    config.kmeans_config(1)?;
    let (log, load) = load_platform_log(config)?;
    let mut outcome = train_on_log(config, &log)?;
    outcome.load = load;
    write_train_outputs(config, &outcome)?;
    Ok(outcome)
}

/// Loads the configured log, scores the test span, and writes test outputs.
pub fn run_score(config: &RunConfig, model_path: &Path) -> Result<ScoreOutcome, PipelineError> {
    config.validate()?;
    let artifact = ModelArtifact::load(model_path)?;
    let (log, load) = load_platform_log(config)?;
    let mut outcome = score_on_log(config, &artifact, &log)?;
    outcome.load = load;
    write_score_outputs(config, &outcome)?;
    Ok(outcome)
}

pub mod files {
    pub const MODEL: &str = "model.json";
    pub const SEGMENTS_TRAIN: &str = "segments_train.csv";
    pub const SEGMENTS_TEST: &str = "segments_test.csv";
    pub const ELBOW: &str = "elbow.csv";
    pub const SCATTER_RF: &str = "scatter_rf.csv";
    pub const SCATTER_ME: &str = "scatter_me.csv";
    pub const SCATTER_RF_TEST: &str = "scatter_rf_test.csv";
    pub const SCATTER_ME_TEST: &str = "scatter_me_test.csv";
    pub const FEATURES_TRAIN: &str = "features_train.csv";
    pub const FEATURES_TEST: &str = "features_test.csv";
    pub const REPORT: &str = "run_report.json";
    pub const REPORT_TEST: &str = "run_report_test.json";
}

fn write_file(
    dir: &Path,
    name: &str,
    body: impl FnOnce(&mut BufWriter<File>) -> Result<(), Box<dyn std::error::Error>>,
) -> Result<(), PipelineError> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(io_error(&path))?;
    let mut out = BufWriter::new(file);
    body(&mut out).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    out.flush().map_err(io_error(&path))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), PipelineError> {
    write_file(dir, name, |out| {
        serde_json::to_writer_pretty(&mut *out, value)?;
        writeln!(out)?;
        Ok(())
    })
}

pub const ELBOW_CSV_HEADER: &str = "k,wcss,selected";

pub fn write_elbow_csv<W: Write>(out: W, curve: &ElbowCurve) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ELBOW_CSV_HEADER.split(','))?;
    for p in &curve.points {
        w.write_record([
            p.k.to_string(),
            p.wcss.to_string(),
            u8::from(p.k == curve.selected_k).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-user scatter data: two feature columns plus cluster and segment.
pub fn write_scatter_csv<W: Write>(
    out: W,
    axes: [&str; 2],
    vectors: &[RfmeVector],
    assignments: &[usize],
    names: &[String],
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["user_id", axes[0], axes[1], "cluster_id", "segment"])?;
    for (v, &a) in vectors.iter().zip(assignments) {
        let value = |axis: &str| match axis {
            "recency" => v.recency.to_string(),
            "frequency" => v.frequency.to_string(),
            "monetary" => v.monetary.to_string(),
            "engagement" => v.engagement.to_string(),
            other => unreachable!("unknown axis {other}"),
        };
        w.write_record([
            v.user_id.clone(),
            value(axes[0]),
            value(axes[1]),
            a.to_string(),
            names[a].clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn profiles_of(rows: &[SegmentRow]) -> Vec<ClusterProfile> {
    rows.iter()
        .map(|r| ClusterProfile {
            cluster_id: r.cluster_id,
            means: r.means,
            count: r.count,
            share: r.share,
        })
        .collect()
}

fn write_split_outputs(
    dir: &Path,
    names: &[String],
    report: &RunReport,
    vectors: &[RfmeVector],
    assignments: &[usize],
    [segments, features, scatter_rf, scatter_me, report_name]: [&str; 5],
) -> Result<(), PipelineError> {
    let profiles = profiles_of(&report.split.segments);
    write_file(dir, segments, |out| {
        Ok(write_segment_report(out, &profiles, names)?)
    })?;
    write_file(dir, features, |out| Ok(write_features_csv(out, vectors)?))?;
    write_file(dir, scatter_rf, |out| {
        Ok(write_scatter_csv(
            out,
            ["recency", "frequency"],
            vectors,
            assignments,
            names,
        )?)
    })?;
    write_file(dir, scatter_me, |out| {
        Ok(write_scatter_csv(
            out,
            ["monetary", "engagement"],
            vectors,
            assignments,
            names,
        )?)
    })?;
    write_json(dir, report_name, report)
}

pub fn write_train_outputs(
    config: &RunConfig,
    outcome: &TrainOutcome,
) -> Result<(), PipelineError> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    write_json(dir, files::MODEL, &outcome.artifact)?;
    if let Some(curve) = &outcome.report.elbow {
        write_file(dir, files::ELBOW, |out| Ok(write_elbow_csv(out, curve)?))?;
    }
    write_split_outputs(
        dir,
        &outcome.artifact.segments,
        &outcome.report,
        &outcome.vectors,
        &outcome.assignments,
        [
            files::SEGMENTS_TRAIN,
            files::FEATURES_TRAIN,
            files::SCATTER_RF,
            files::SCATTER_ME,
            files::REPORT,
        ],
    )
}

pub fn write_score_outputs(
    config: &RunConfig,
    outcome: &ScoreOutcome,
) -> Result<(), PipelineError> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let names: Vec<String> = outcome
        .report
        .split
        .segments
        .iter()
        .map(|s| s.segment.clone())
        .collect();
    write_split_outputs(
        dir,
        &names,
        &outcome.report,
        &outcome.vectors,
        &outcome.assignments,
        [
            files::SEGMENTS_TEST,
            files::FEATURES_TEST,
            files::SCATTER_RF_TEST,
            files::SCATTER_ME_TEST,
            files::REPORT_TEST,
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_toml() -> String {
        r#"
input = "events.csv"
train_start = 2022-12-24
train_end = "2023-01-11"
test_start = 2023-01-12
test_end = 2023-01-22
seed = 7
"#
        .to_string()
    }

    #[test]
    fn parses_defaults() {
        let c = RunConfig::from_toml_str(&base_toml(), &[]).unwrap();
        assert_eq!(c.window_days, 45);
        assert_eq!(c.session_gap_minutes, 30);
        assert_eq!(c.weights, MonetaryWeights::default());
        assert_eq!(c.k, KSelection::Auto { k_min: 1, k_max: 7 });
        assert_eq!((c.n_init, c.max_iter, c.tol), (10, 300, 1e-4));
        assert!(c.standardize);
        assert_eq!(c.platform, PlatformFilter::Both);
        assert_eq!(c.train.days(), 19);
        let w = c.window_for(&c.train);
        assert_eq!((w.window_days, w.reference_date), (19, c.train.end));
    }

    #[test]
    fn overrides_win() {
        let c = RunConfig::from_toml_str(
            &base_toml(),
            &[
                ("k".into(), "4".into()),
                ("platform".into(), "web".into()),
                ("seed".into(), "9".into()),
            ],
        )
        .unwrap();
        assert_eq!(c.k, KSelection::Fixed { k: 4 });
        assert_eq!(c.platform, PlatformFilter::Web);
        assert_eq!(c.seed, Some(9));
    }

    #[test]
    fn rejects_overlapping_splits_and_bad_keys() {
        let overlap = [("test_start".to_string(), "2023-01-11".to_string())];
        assert!(matches!(
            RunConfig::from_toml_str(&base_toml(), &overlap),
            Err(PipelineError::ConfigInvalid(_))
        ));
        let typo = format!("{}\nwindow_dayz = 3\n", base_toml());
        assert!(matches!(
            RunConfig::from_toml_str(&typo, &[]),
            Err(PipelineError::ConfigInvalid(_))
        ));
        let bad_k = [
            ("k_min".to_string(), "5".to_string()),
            ("k_max".to_string(), "3".to_string()),
        ];
        assert!(RunConfig::from_toml_str(&base_toml(), &bad_k).is_err());
        let half = [("test_end".to_string(), String::new())];
        assert!(RunConfig::from_toml_str(
            &base_toml().replace("test_end = 2023-01-22", ""),
            &half[..0]
        )
        .is_err());
    }

    #[test]
    fn seed_is_required_to_train() {
        let c = RunConfig::from_toml_str(&base_toml().replace("seed = 7", ""), &[]).unwrap();
        assert!(
            matches!(run_train(&c), Err(PipelineError::ConfigInvalid(m)) if m.contains("seed"))
        );
    }

    #[test]
    fn missing_model() {
        assert!(matches!(
            ModelArtifact::load(Path::new("/nonexistent/model.json")),
            Err(PipelineError::ModelMissing(_))
        ));
    }
}
