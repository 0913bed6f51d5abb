use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use dialoglens::audio::AudioTrack;
use dialoglens::audiosync::{split_session, SplitConfig, WindowLabel};
use dialoglens::corpus::{load_corpus_dir, load_rosters};
use dialoglens::pipeline::{
    self, aggregate_sessions, common_digest, load_features_dir, read_outcomes_file, read_table_file, run_until,
    speaking_students, write_json, EvaluationReport, PipelineConfig, PipelineError, SessionsFile,
};
use dialoglens::predict::{
    nested_cv, ClassifierKind, CvConfig, Dataset, ProjectionConfig, ProjectionKind, SearchStrategy, TrainedModel,
};
use dialoglens::grouping::load_outcomes_dir;
use dialoglens::stats::ScreeningConfig;
use dialoglens::synth::{self, PlantedEffect, RecordingSpec, SyntheticSpec};

#[derive(Parser)]
#[command(name = "dialoglens", version, about = "Group-discussion analytics for code-switched classroom transcripts")]
struct Cli {
    /// Upper bound on parallel work items (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Separate lecture audio from group discussion across simultaneous recordings.
    Split(SplitArgs),
    /// Validate transcripts and write them as canonical JSONL.
    Parse(ParseArgs),
    /// Run parse and feature extraction from a pipeline config.
    Extract(ConfigArgs),
    /// Aggregate per-segment features into the session × feature table.
    Aggregate(AggregateArgs),
    /// Normalize and screen group features against outcomes.
    Analyze(AnalyzeArgs),
    /// Fit a classifier on a feature table.
    Train(TrainArgs),
    /// Nested cross-validation with a trained model's settings.
    Evaluate(EvaluateArgs),
    /// Write a synthetic corpus with planted effects, plus a matching config.
    Synth(SynthArgs),
    /// Run every stage from a pipeline config.
    Run(ConfigArgs),
}

#[derive(Args)]
struct SplitArgs {
    /// Directory of simultaneous WAV recordings; the first in name order is the reference.
    #[arg(long)]
    session_dir: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    window: f64,
    #[arg(long, default_value_t = 2.5)]
    hop: f64,
    #[arg(long, default_value_t = 2.0)]
    search_radius: f64,
    #[arg(long, default_value_t = 60.0)]
    max_lag: f64,
    /// Also write the excised discussion audio.
    #[arg(long)]
    write_audio: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    rosters: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AggregateArgs {
    /// Directory of per-session feature JSONL files.
    #[arg(long)]
    features: PathBuf,
    /// Outcomes directory (topics_map.csv and marks_<group>.csv).
    #[arg(long)]
    outcomes: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    outcomes: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    bonferroni: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long, default_value = "svm")]
    model: String,
    /// `grid`, `grid:default` or `random:<draws>`.
    #[arg(long, default_value = "random:30")]
    search: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    outer: usize,
    #[arg(long, default_value_t = 5)]
    inner: usize,
    /// `gaussian`, `sparse` or `none`.
    #[arg(long, default_value = "gaussian")]
    projection: String,
    #[arg(long)]
    d_out: Option<usize>,
}

impl CvArgs {
    fn config(&self) -> anyhow::Result<(ClassifierKind, SearchStrategy, CvConfig)> {
        let kind: ClassifierKind = self.model.parse()?;
        let search = SearchStrategy::parse(&self.search, kind)?;
        let kind_of = |k| ProjectionConfig { kind: k, d_out: self.d_out };
        let projection = match self.projection.as_str() {
            "gaussian" => Some(kind_of(ProjectionKind::Gaussian)),
            "sparse" => Some(kind_of(ProjectionKind::Sparse)),
            "none" => None,
            other => return Err(anyhow!("unknown projection {other:?} (gaussian, sparse, none)")),
        };
        if self.outer < 2 || self.inner < 2 {
            return Err(anyhow!("outer and inner fold counts must be >= 2"));
        }
        Ok((
            kind,
            search,
            CvConfig {
                outer: self.outer,
                inner: self.inner,
                seed: self.seed,
                projection,
            },
        ))
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Normalized feature table CSV.
    #[arg(long)]
    features: PathBuf,
    /// Outcomes CSV.
    #[arg(long)]
    labels: PathBuf,
    /// Restrict to the features a screening report selected.
    #[arg(long)]
    screening: Option<PathBuf>,
    #[command(flatten)]
    cv: CvArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Write the result here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    groups: usize,
    #[arg(long, default_value_t = 2)]
    weeks: u32,
    #[arg(long, default_value_t = 4)]
    students: usize,
    #[arg(long, default_value_t = 30)]
    segments_min: usize,
    #[arg(long, default_value_t = 60)]
    segments_max: usize,
    /// `feature:+|-:strength`, repeatable. Defaults to DialogSum__MT:+:0.8.
    #[arg(long = "plant")]
    plants: Vec<String>,
    #[arg(long, default_value_t = 0.2)]
    noise_level: f64,
    #[arg(long)]
    no_acoustics: bool,
    /// Also write a 3-device recording with planted lecture spans under `<out>/recording`.
    #[arg(long)]
    recording: bool,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Validation(anyhow::Error),
    Stage(anyhow::Error),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Validation(_) => Failure::Validation(e.into()),
            PipelineError::Stage { .. } => Failure::Stage(e.into()),
        }
    }
}

type Outcome = Result<(), Failure>;

trait Phase<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn failed(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Phase<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Validation(e.into()))
    }
    fn failed(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Stage(e.into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            writeln!(
                buf,
                "{} {} {}",
                record.level().as_str().to_ascii_lowercase(),
                record.target(),
                record.args()
            )
        })
        .init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            log::error!(target: "cli", "error=\"--jobs must be >= 1\"");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::error!(target: "cli", "error={:?}", e.to_string());
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Split(a) => split(a),
        Command::Parse(a) => parse(a),
        Command::Extract(a) => staged(a, "extract"),
        Command::Aggregate(a) => aggregate(a),
        Command::Analyze(a) => analyze(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Synth(a) => synthesize(a),
        Command::Run(a) => staged(a, "evaluate"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            log::error!(target: "cli", "kind=validation error={:?}", chain(&e));
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            log::error!(target: "cli", "kind=stage error={:?}", chain(&e));
            ExitCode::from(3)
        }
    }
}

/// The error chain joined with ": ", skipping causes already quoted by
/// their parent.
fn chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn split(a: SplitArgs) -> Outcome {
    let config = SplitConfig {
        window_seconds: a.window,
        hop_seconds: a.hop,
        search_radius_seconds: a.search_radius,
        max_lag_seconds: a.max_lag,
    };
    config.validate().invalid()?;
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.session_dir)
        .with_context(|| format!("reading {}", a.session_dir.display()))
        .invalid()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    let tracks = paths
        .iter()
        .map(|p| AudioTrack::read_wav(p).with_context(|| p.display().to_string()))
        .collect::<anyhow::Result<Vec<_>>>()
        .invalid()?;
    if tracks.len() < 2 {
        return Err(Failure::Validation(anyhow!(
            "{} holds {} WAV files; need at least two",
            a.session_dir.display(),
            tracks.len()
        )));
    }
    let splits = split_session(&tracks, &config).failed()?;
    fs::create_dir_all(&a.out).failed()?;
    let mut summary = Vec::new();
    for (s, track) in splits.iter().zip(&tracks) {
        let cuts = a.out.join(format!("{}_cuts.csv", s.device_id));
        s.excised.write_cut_list(fs::File::create(&cuts).failed()?).failed()?;
        if a.write_audio {
            AudioTrack::write_wav(
                &a.out.join(format!("{}_discussion.wav", s.device_id)),
                &s.excised.samples,
                track.sample_rate(),
            )
            .failed()?;
        }
        let lecture = s.thresholding.labels.iter().filter(|l| **l == WindowLabel::Lecture).count();
        log::info!(
            target: "split",
            "device={} lag_s={:.3} confidence={:.3} lecture_windows={} windows={} excised_s={:.2}",
            s.device_id,
            s.offset.lag_seconds,
            s.offset.confidence,
            lecture,
            s.thresholding.labels.len(),
            s.excised.excised_seconds
        );
        for w in s.offset.low_confidence.then_some("low offset confidence").into_iter().chain(
            s.thresholding.warnings.iter().chain(&s.excised.warnings).map(String::as_str),
        ) {
            log::warn!(target: "split", "device={} diagnostic={w:?}", s.device_id);
        }
        summary.push(serde_json::json!({
            "device_id": s.device_id,
            "offset": s.offset,
            "threshold": s.thresholding.threshold,
            "labels": s.thresholding.labels,
            "similarity": s.profile.values,
            "excised_seconds": s.excised.excised_seconds,
            "warnings": s.thresholding.warnings.iter().chain(&s.excised.warnings).collect::<Vec<_>>(),
        }));
    }
    write_json(
        &a.out.join("split.json"),
        &serde_json::json!({ "config": config, "tracks": summary }),
    )
    .failed()
}

fn parse(a: ParseArgs) -> Outcome {
    let rosters = a.rosters.as_deref().map(load_rosters).transpose().invalid()?;
    let dialogs = load_corpus_dir(&a.corpus, rosters.as_ref()).invalid()?;
    if dialogs.is_empty() {
        return Err(Failure::Validation(anyhow!("no transcripts in {}", a.corpus.display())));
    }
    let dir = a.out.join("transcripts");
    fs::create_dir_all(&dir).failed()?;
    for d in &dialogs {
        d.write_jsonl(std::io::BufWriter::new(fs::File::create(dir.join(d.key.file_name())).failed()?))
            .failed()?;
        for w in &d.warnings {
            log::warn!(target: "parse", "session={} diagnostic={w:?}", d.key);
        }
    }
    write_json(
        &a.out.join(pipeline::SESSIONS_FILE),
        &SessionsFile {
            config_digest: None,
            sessions: pipeline::session_summaries(&dialogs),
        },
    )
    .failed()?;
    log::info!(target: "parse", "status=ok sessions={}", dialogs.len());
    Ok(())
}

fn staged(a: ConfigArgs, last: &str) -> Outcome {
    let mut cfg = PipelineConfig::load(&a.config).invalid()?;
    if let Some(out) = a.out {
        cfg.out_dir = out;
    }
    let manifest = run_until(&cfg, last)?;
    log::info!(
        target: "run",
        "status=ok sessions={} out={:?} config_digest={}",
        manifest.sessions.len(),
        cfg.out_dir.display().to_string(),
        manifest.config_digest
    );
    Ok(())
}

fn aggregate(a: AggregateArgs) -> Outcome {
    let (sessions, digest) = load_features_dir(&a.features).invalid()?;
    if sessions.is_empty() {
        return Err(Failure::Validation(anyhow!("no feature files in {}", a.features.display())));
    }
    let outcomes = a.outcomes.as_deref().map(load_outcomes_dir).transpose().invalid()?;
    let rows: Vec<_> = sessions
        .into_iter()
        .map(|(key, f)| (key, speaking_students(&f), f))
        .collect();
    let table = aggregate_sessions(&rows).failed()?;
    fs::create_dir_all(&a.out).failed()?;
    pipeline::write_table_file(&a.out.join(pipeline::GROUP_FEATURES_FILE), &table, digest.as_deref()).failed()?;
    if let Some(outcomes) = outcomes {
        let outcomes = pipeline::outcomes_for(&table, &outcomes).invalid()?;
        pipeline::write_outcomes_file(&a.out.join(pipeline::OUTCOMES_FILE), &outcomes, digest.as_deref()).failed()?;
    }
    log::info!(target: "aggregate", "status=ok sessions={} features={}", table.rows.len(), table.columns.len());
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Outcome {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(Failure::Validation(anyhow!("alpha must be in (0, 1)")));
    }
    let (table, d1) = read_table_file(&a.features).invalid()?;
    let (outcomes, d2) = read_outcomes_file(&a.outcomes).invalid()?;
    let digest = common_digest([("features", d1), ("outcomes", d2)]).invalid()?;
    let outcomes = pipeline::outcomes_for(&table, &outcomes).invalid()?;
    fs::create_dir_all(&a.out).failed()?;
    let config = ScreeningConfig {
        alpha: a.alpha,
        bonferroni: a.bonferroni,
    };
    let (_, report) = pipeline::analyze(&table, &outcomes, config, &a.out, digest.as_deref()).failed()?;
    log::info!(
        target: "analyze",
        "status=ok sessions={} features={} selected={}",
        report.n_sessions,
        table.columns.len(),
        report.selected().len()
    );
    Ok(())
}

fn read_selected(path: &Path) -> anyhow::Result<(Vec<String>, Option<String>)> {
    let report: dialoglens::stats::ScreeningReport =
        serde_json::from_str(&fs::read_to_string(path).with_context(|| path.display().to_string())?)
            .with_context(|| path.display().to_string())?;
    Ok((report.selected(), report.config_digest.clone()))
}

fn train(a: TrainArgs) -> Outcome {
    let (kind, search, cv) = a.cv.config().invalid()?;
    let (table, d1) = read_table_file(&a.features).invalid()?;
    let (outcomes, d2) = read_outcomes_file(&a.labels).invalid()?;
    let (columns, d3) = match &a.screening {
        Some(p) => read_selected(p).invalid()?,
        None => (table.columns.clone(), None),
    };
    let digest = common_digest([("features", d1), ("labels", d2), ("screening", d3)]).invalid()?;
    let outcomes = pipeline::outcomes_for(&table, &outcomes).invalid()?;
    let (data, imputation) = pipeline::selected_dataset(&table, &outcomes, &columns).invalid()?;
    let mut model = TrainedModel::train(&data, imputation, kind, &search, &cv).failed()?;
    model.config_digest = digest;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).failed()?;
    }
    fs::write(&a.out, model.to_json().failed()? + "\n").failed()?;
    log::info!(
        target: "train",
        "status=ok sessions={} features={} model={} validation_accuracy={:.4}",
        data.len(),
        columns.len(),
        kind,
        model.validation_score
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Outcome {
    let text = fs::read_to_string(&a.model)
        .with_context(|| a.model.display().to_string())
        .invalid()?;
    let model = TrainedModel::from_json(&text).invalid()?;
    let (table, d1) = read_table_file(&a.features).invalid()?;
    let (outcomes, d2) = read_outcomes_file(&a.labels).invalid()?;
    let digest =
        common_digest([("model", model.config_digest.clone()), ("features", d1), ("labels", d2)]).invalid()?;
    let outcomes = pipeline::outcomes_for(&table, &outcomes).invalid()?;
    let (data, _) = Dataset::from_table(&table, &outcomes, &model.feature_names).invalid()?;
    let result = nested_cv(&data, model.classifier, &model.search, &model.cv).failed()?;
    log::info!(
        target: "evaluate",
        "status=ok sessions={} mean_accuracy={:.4} pooled_accuracy={:.4}",
        data.len(),
        result.mean_accuracy,
        result.pooled_accuracy
    );
    let report = EvaluationReport {
        config_digest: digest,
        result,
    };
    match &a.out {
        Some(p) => write_json(p, &report).failed(),
        None => {
            let mut out = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, &report).failed()?;
            writeln!(out).failed()
        }
    }
}

fn synthesize(a: SynthArgs) -> Outcome {
    let plants = if a.plants.is_empty() {
        SyntheticSpec::default().plants
    } else {
        a.plants
            .iter()
            .map(|p| p.parse::<PlantedEffect>())
            .collect::<Result<_, _>>()
            .invalid()?
    };
    let spec = SyntheticSpec {
        groups: a.groups,
        weeks: a.weeks,
        students_per_group: a.students,
        segments_min: a.segments_min,
        segments_max: a.segments_max,
        plants,
        noise_level: a.noise_level,
        acoustics: !a.no_acoustics,
        seed: a.seed,
    };
    spec.validate().invalid()?;
    let manifest = synth::generate_corpus(&spec, &a.out).failed()?;
    let cfg = PipelineConfig::for_synthetic(&spec);
    fs::write(a.out.join("config.json"), cfg.to_json().failed()?).failed()?;
    if a.recording {
        let rec = RecordingSpec {
            seed: a.seed,
            ..RecordingSpec::default()
        };
        let dir = a.out.join("recording");
        fs::create_dir_all(&dir).failed()?;
        for t in synth::synthetic_recording(&rec).failed()? {
            AudioTrack::write_wav(&dir.join(format!("{}.wav", t.device_id)), t.samples(), t.sample_rate())
                .failed()?;
        }
    }
    log::info!(
        target: "synth",
        "status=ok sessions={} predict={} out={:?}",
        manifest.sessions.len(),
        cfg.predict.is_some(),
        a.out.display().to_string()
    );
    Ok(())
}
