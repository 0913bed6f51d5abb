//! End-to-end orchestration: configuration, the parse → extract → aggregate →
//! analyze → train → evaluate stages, artifact digests and the run manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustics::FrameFeatures;
use crate::audiosync::SplitConfig;
use crate::corpus::{load_corpus_dir, load_rosters, SessionDialog, SessionKey, SpeakerLabel};
use crate::embedding::{average_vector, tfidf_keywords, tokenize_english, train_cbow, EmbeddingTable, KeywordSet, TrainingConfig, TrainingReport};
use crate::error::{read_file, Error, Result};
use crate::features::{extract_segment_features, normalize_acoustics, read_features_jsonl, segment_matrix, write_features_jsonl, Resources, SegmentFeatures, SpeakingRateParams};
use crate::grouping::{aggregate_group, load_outcomes_dir, read_outcomes_csv, split_digest, write_outcomes_csv, GroupFeatureTable, OutcomeRecord};
use crate::predict::{nested_cv, ClassifierKind, CvConfig, Dataset, EvaluationResult, SearchStrategy, TrainedModel, CLASSES};
use crate::semantics::{CategoryLexicon, Glossary, LexiconLanguage, OfflineTranslator, RemoteTranslator, Translator, MT_KEY_ENV};
use crate::stats::{emit_plot_data, screen_features, ScreeningConfig, ScreeningReport};
use crate::synth;

pub const FEATURES_DIR: &str = "features";
pub const SESSIONS_FILE: &str = "sessions.json";
pub const KEYWORDS_FILE: &str = "keywords.json";
pub const EMBEDDING_FILE: &str = "embedding.txt";
pub const EMBEDDING_REPORT_FILE: &str = "embedding_report.json";
pub const GROUP_FEATURES_FILE: &str = "group_features.csv";
pub const OUTCOMES_FILE: &str = "outcomes.csv";
pub const NORMALIZED_FILE: &str = "normalized_features.csv";
pub const SCREENING_FILE: &str = "screening.json";
pub const PLOTS_DIR: &str = "plots";
pub const MODEL_FILE: &str = "model.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILED_MARKER: &str = "FAILED";

pub const STAGES: [&str; 6] = ["parse", "extract", "aggregate", "analyze", "train", "evaluate"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum TranslationConfig {
    /// Dictionary translation; `None` uses the bundled demo lexicon.
    Offline {
        #[serde(default)]
        lexicon: Option<PathBuf>,
    },
    /// HTTP service; the key comes from the environment.
    Remote { url: String, max_in_flight: usize },
}

impl Default for TranslationConfig {
    fn default() -> Self {
        Self::Offline { lexicon: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbeddingSource {
    Table {
        path: PathBuf,
    },
    Train {
        corpus: PathBuf,
        #[serde(default)]
        training: TrainingConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    pub classifier: ClassifierKind,
    /// `grid` or `random:N`.
    pub search: String,
    #[serde(default)]
    pub cv: CvConfig,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierKind::Svm,
            search: "random:30".into(),
            cv: CvConfig::default(),
        }
    }
}

fn default_alpha() -> f64 {
    0.05
}

fn default_top_k() -> usize {
    10
}

/// Relative paths are resolved against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus_dir: PathBuf,
    #[serde(default)]
    pub rosters: Option<PathBuf>,
    /// `None` uses the bundled demo glossary.
    #[serde(default)]
    pub glossary: Option<PathBuf>,
    #[serde(default)]
    pub lexicon_en: Option<PathBuf>,
    #[serde(default)]
    pub lexicon_zh: Option<PathBuf>,
    #[serde(default)]
    pub translation: TranslationConfig,
    pub embedding: EmbeddingSource,
    /// Per-week `week<NN>.txt` exercise texts for topic keywords.
    #[serde(default)]
    pub exercises_dir: Option<PathBuf>,
    /// Per-session `<group>_week<NN>.csv` frame features.
    #[serde(default)]
    pub acoustics_dir: Option<PathBuf>,
    pub outcomes_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub bonferroni: bool,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub speaking_rate: SpeakingRateParams,
    #[serde(default)]
    pub split: SplitConfig,
    /// `None` stops after screening.
    #[serde(default)]
    pub predict: Option<PredictConfig>,
    #[serde(skip)]
    written_digest: Option<String>,
}

impl PipelineConfig {
    /// A config with bundled resources and default parameters.
    pub fn new(corpus_dir: PathBuf, outcomes_dir: PathBuf, embedding: EmbeddingSource, out_dir: PathBuf) -> Self {
        Self {
            corpus_dir,
            rosters: None,
            glossary: None,
            lexicon_en: None,
            lexicon_zh: None,
            translation: TranslationConfig::default(),
            embedding,
            exercises_dir: None,
            acoustics_dir: None,
            outcomes_dir,
            out_dir,
            alpha: default_alpha(),
            bonferroni: false,
            top_k: default_top_k(),
            speaking_rate: SpeakingRateParams::default(),
            split: SplitConfig::default(),
            predict: None,
            written_digest: None,
        }
    }

    /// Reads a JSON config and resolves its relative paths against the
    /// config's directory. The digest is taken before resolution.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(&read_file(path)?)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        cfg.written_digest = Some(cfg.compute_digest()?);
        cfg.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// SHA-256 of the canonical config JSON without `out_dir`.
    pub fn digest(&self) -> Result<String> {
        match &self.written_digest {
            Some(d) => Ok(d.clone()),
            None => self.compute_digest(),
        }
    }

    fn compute_digest(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("out_dir");
        }
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus_dir);
        fix(&mut self.outcomes_dir);
        fix(&mut self.out_dir);
        for p in [
            &mut self.rosters,
            &mut self.glossary,
            &mut self.lexicon_en,
            &mut self.lexicon_zh,
            &mut self.exercises_dir,
            &mut self.acoustics_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if let TranslationConfig::Offline { lexicon: Some(p) } = &mut self.translation {
            fix(p);
        }
        match &mut self.embedding {
            EmbeddingSource::Table { path } => fix(path),
            EmbeddingSource::Train { corpus, .. } => fix(corpus),
        }
    }

    /// Checks every referenced path and parameter before any stage runs.
    pub fn validate(&self) -> Result<()> {
        let dir = |p: &Path, what: &str| {
            if p.is_dir() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{what} {} is not a directory", p.display())))
            }
        };
        let file = |p: &Path, what: &str| {
            if p.is_file() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{what} {} does not exist", p.display())))
            }
        };
        dir(&self.corpus_dir, "corpus_dir")?;
        dir(&self.outcomes_dir, "outcomes_dir")?;
        for (p, what) in [
            (&self.rosters, "rosters"),
            (&self.glossary, "glossary"),
            (&self.lexicon_en, "lexicon_en"),
            (&self.lexicon_zh, "lexicon_zh"),
        ] {
            if let Some(p) = p {
                file(p, what)?;
            }
        }
        for (p, what) in [(&self.exercises_dir, "exercises_dir"), (&self.acoustics_dir, "acoustics_dir")] {
            if let Some(p) = p {
                dir(p, what)?;
            }
        }
        match &self.translation {
            TranslationConfig::Offline { lexicon: Some(p) } => file(p, "translation lexicon")?,
            TranslationConfig::Offline { lexicon: None } => {}
            TranslationConfig::Remote { url, max_in_flight } => {
                if url.trim().is_empty() || *max_in_flight == 0 {
                    return Err(Error::invalid("remote translation needs a url and max_in_flight >= 1"));
                }
            }
        }
        match &self.embedding {
            EmbeddingSource::Table { path } => file(path, "embedding table")?,
            EmbeddingSource::Train { corpus, training } => {
                file(corpus, "embedding training corpus")?;
                training.validate()?;
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha must be in (0, 1)"));
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top_k must be >= 1"));
        }
        self.speaking_rate.validate()?;
        self.split.validate()?;
        if let Some(p) = &self.predict {
            SearchStrategy::parse(&p.search, p.classifier)?;
            if p.cv.outer < 2 || p.cv.inner < 2 {
                return Err(Error::invalid("outer and inner fold counts must be >= 2"));
            }
        }
        Ok(())
    }

    /// Config for a corpus written by [`synth::generate_corpus`], relative to
    /// the corpus root. Prediction is enabled when nested 5×5 CV is feasible
    /// for the label counts the spec implies.
    pub fn for_synthetic(spec: &synth::SyntheticSpec) -> Self {
        let mut cfg = Self::new(
            synth::TRANSCRIPTS_DIR.into(),
            synth::OUTCOMES_DIR.into(),
            EmbeddingSource::Train {
                corpus: synth::TEXTBOOK_FILE.into(),
                training: TrainingConfig {
                    dim: 32,
                    window: 3,
                    seed: spec.seed,
                    ..TrainingConfig::default()
                },
            },
            "out".into(),
        );
        cfg.rosters = Some(synth::ROSTERS_FILE.into());
        cfg.exercises_dir = Some(synth::EXERCISES_DIR.into());
        cfg.acoustics_dir = spec.acoustics.then(|| synth::ACOUSTICS_DIR.into());
        let predict = PredictConfig {
            cv: CvConfig {
                seed: spec.seed,
                ..CvConfig::default()
            },
            ..PredictConfig::default()
        };
        if nested_cv_feasible(&label_counts(spec.groups, spec.weeks), predict.cv.outer, predict.cv.inner) {
            cfg.predict = Some(predict);
        }
        cfg
    }
}

/// High/Mid/Low counts for `groups` ranked over `weeks`.
pub fn label_counts(groups: usize, weeks: u32) -> [usize; CLASSES] {
    let tail = (3 * groups).div_ceil(10);
    let w = weeks as usize;
    [tail * w, groups.saturating_sub(2 * tail) * w, tail * w]
}

/// Whether stratified outer and inner splits keep every present class in
/// every fold.
pub fn nested_cv_feasible(counts: &[usize], outer: usize, inner: usize) -> bool {
    counts.iter().filter(|&&c| c > 0).count() >= 2
        && counts
            .iter()
            .filter(|&&c| c > 0)
            .all(|&c| c >= outer && c - c.div_ceil(outer) >= inner)
}

// ---------------------------------------------------------------------------
// Resources

pub struct LoadedResources {
    pub glossary: Glossary,
    pub english: CategoryLexicon,
    pub chinese: CategoryLexicon,
    pub translator: Box<dyn Translator>,
    pub table: EmbeddingTable,
    pub training: Option<TrainingReport>,
    pub rate: SpeakingRateParams,
}

impl LoadedResources {
    /// Loads lexicons and the translator, then loads or trains embeddings.
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let glossary = match &cfg.glossary {
            Some(p) => Glossary::parse(&read_file(p)?)?,
            None => Glossary::demo(),
        };
        let english = match &cfg.lexicon_en {
            Some(p) => CategoryLexicon::parse(&read_file(p)?, LexiconLanguage::English)?,
            None => CategoryLexicon::demo_english(),
        };
        let chinese = match &cfg.lexicon_zh {
            Some(p) => CategoryLexicon::parse(&read_file(p)?, LexiconLanguage::Chinese)?,
            None => CategoryLexicon::demo_chinese(),
        };
        let translator: Box<dyn Translator> = match &cfg.translation {
            TranslationConfig::Offline { lexicon: Some(p) } => Box::new(OfflineTranslator::parse(&read_file(p)?)?),
            TranslationConfig::Offline { lexicon: None } => Box::new(OfflineTranslator::demo()),
            TranslationConfig::Remote { url, max_in_flight } => Box::new(RemoteTranslator::new(
                url.clone(),
                std::env::var(MT_KEY_ENV).ok(),
                *max_in_flight,
            )),
        };
        let (table, training) = match &cfg.embedding {
            EmbeddingSource::Table { path } => (EmbeddingTable::read_text(open(path)?)?, None),
            EmbeddingSource::Train { corpus, training } => {
                let sentences = read_file(corpus)?
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| Ok(tokenize_english(&translator.translate(l)?.text)))
                    .collect::<Result<Vec<_>>>()?;
                let (table, report) = train_cbow(&sentences, training)?;
                (table, Some(report))
            }
        };
        Ok(Self {
            glossary,
            english,
            chinese,
            translator,
            table,
            training,
            rate: cfg.speaking_rate,
        })
    }

    pub fn view(&self) -> Resources<'_> {
        Resources {
            glossary: &self.glossary,
            english: &self.english,
            chinese: &self.chinese,
            table: &self.table,
            translator: self.translator.as_ref(),
            rate: self.rate,
        }
    }
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::File::create(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Topics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topics {
    pub keywords: BTreeMap<u32, KeywordSet>,
    #[serde(skip)]
    pub vectors: BTreeMap<u32, Vec<f64>>,
    pub warnings: Vec<String>,
}

/// TF-IDF keywords of every `week<NN>.txt` in `dir` (after translation),
/// against the other weeks, and their averaged embedding per week.
pub fn topic_vectors(dir: &Path, translator: &dyn Translator, table: &EmbeddingTable, top_k: usize) -> Result<Topics> {
    let mut weeks: Vec<(u32, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(w) = name.strip_prefix("week").and_then(|n| n.strip_suffix(".txt")) {
            let w: u32 = w
                .parse()
                .map_err(|_| Error::invalid(format!("bad exercise file name {name}")))?;
            weeks.push((w, path));
        }
    }
    weeks.sort();
    let docs: Vec<Vec<String>> = weeks
        .iter()
        .map(|(_, p)| Ok(tokenize_english(&translator.translate(&read_file(p)?)?.text)))
        .collect::<Result<_>>()?;
    let mut topics = Topics {
        keywords: BTreeMap::new(),
        vectors: BTreeMap::new(),
        warnings: Vec::new(),
    };
    for (i, (w, _)) in weeks.iter().enumerate() {
        let kw = tfidf_keywords(&docs, i, *w, top_k)?;
        match average_vector(&kw.tokens(), table) {
            Some(v) => {
                topics.vectors.insert(*w, v);
            }
            None => topics.warnings.push(format!("week {w}: no keyword has an embedding")),
        }
        topics.keywords.insert(*w, kw);
    }
    Ok(topics)
}

// ---------------------------------------------------------------------------
// Stage helpers

/// Per-segment features of every dialog, with acoustic aggregates
/// gender-normalized across the whole corpus.
pub fn extract_sessions(
    dialogs: &[SessionDialog],
    topics: Option<&Topics>,
    acoustics_dir: Option<&Path>,
    resources: &Resources<'_>,
) -> Result<(Vec<Vec<SegmentFeatures>>, Vec<String>)> {
    let per: Vec<(Vec<SegmentFeatures>, Vec<String>)> = dialogs
        .par_iter()
        .map(|d| {
            let mut notes = Vec::new();
            let frames = match acoustics_dir {
                Some(dir) => {
                    let path = dir.join(format!("{}_week{:02}.csv", d.key.group_id, d.key.week));
                    if path.is_file() {
                        let f = FrameFeatures::read_csv(open(&path)?)
                            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
                        notes.extend(f.warnings.iter().map(|w| format!("{}: {w}", d.key)));
                        Some(f)
                    } else {
                        notes.push(format!("{}: no frame features, acoustics absent", d.key));
                        None
                    }
                }
                None => None,
            };
            let topic = topics.and_then(|t| t.vectors.get(&d.key.week)).map(Vec::as_slice);
            let out = extract_segment_features(d, topic, frames.as_ref(), resources);
            notes.extend(out.diagnostics.into_iter().map(|n| format!("{}: {n}", d.key)));
            Ok((out.segments, notes))
        })
        .collect::<Result<_>>()?;
    let mut notes = Vec::new();
    let mut features = Vec::with_capacity(per.len());
    for (f, n) in per {
        features.push(f);
        notes.extend(n);
    }
    let (_, warnings) = normalize_acoustics(&mut features);
    notes.extend(warnings);
    Ok((features, notes))
}

/// In-group students speaking in a feature list.
pub fn speaking_students(features: &[SegmentFeatures]) -> BTreeSet<SpeakerLabel> {
    features.iter().map(|f| f.speaker).filter(SpeakerLabel::is_in_group).collect()
}

/// The 7 aggregates of every per-segment feature, one row per session.
pub fn aggregate_sessions(sessions: &[(SessionKey, BTreeSet<SpeakerLabel>, Vec<SegmentFeatures>)]) -> Result<GroupFeatureTable> {
    let rows = sessions
        .par_iter()
        .map(|(key, roster, feats)| {
            let groups = aggregate_group(&segment_matrix(feats), roster).map_err(|e| Error::invalid(format!("{key}: {e}")))?;
            Ok((key.clone(), groups))
        })
        .collect::<Result<Vec<_>>>()?;
    GroupFeatureTable::from_sessions(rows)
}

/// Outcomes restricted to the table's sessions; every session needs one.
pub fn outcomes_for(table: &GroupFeatureTable, outcomes: &[OutcomeRecord]) -> Result<Vec<OutcomeRecord>> {
    let by_key: BTreeMap<SessionKey, &OutcomeRecord> = outcomes.iter().map(|o| (o.key(), o)).collect();
    let missing: Vec<String> = table.rows.iter().filter(|k| !by_key.contains_key(k)).map(|k| k.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!("no outcome for sessions {}", missing.join(", "))));
    }
    Ok(table.rows.iter().map(|k| by_key[k].clone()).collect())
}

/// Normalizes and screens, writing the normalized table, the report and plot
/// data under `out_dir`.
pub fn analyze(
    table: &GroupFeatureTable,
    outcomes: &[OutcomeRecord],
    config: ScreeningConfig,
    out_dir: &Path,
    digest: Option<&str>,
) -> Result<(GroupFeatureTable, ScreeningReport)> {
    let (normalized, mut report) = screen_features(table, outcomes, config)?;
    report.config_digest = digest.map(str::to_string);
    normalized.table.write_csv(create(&out_dir.join(NORMALIZED_FILE))?, digest)?;
    write_json(&out_dir.join(SCREENING_FILE), &report)?;
    emit_plot_data(&report, &normalized.table, outcomes, &out_dir.join(PLOTS_DIR))?;
    Ok((normalized.table, report))
}

/// Selected columns of the normalized table joined with labels.
pub fn selected_dataset(
    normalized: &GroupFeatureTable,
    outcomes: &[OutcomeRecord],
    columns: &[String],
) -> Result<(Dataset, crate::predict::Imputation)> {
    if columns.is_empty() {
        return Err(Error::invalid("no feature selected by screening; nothing to train on"));
    }
    Dataset::from_table(normalized, outcomes, columns)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    pub result: EvaluationResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub group_id: String,
    pub week: u32,
    pub segments: usize,
    pub roster: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionsFile {
    pub config_digest: Option<String>,
    pub sessions: Vec<SessionSummary>,
}

pub fn session_summaries(dialogs: &[SessionDialog]) -> Vec<SessionSummary> {
    dialogs
        .iter()
        .map(|d| SessionSummary {
            group_id: d.key.group_id.clone(),
            week: d.key.week,
            segments: d.segments.len(),
            roster: d.roster.iter().map(ToString::to_string).collect(),
            warnings: d.warnings.clone(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Digested artifacts

/// Writes per-segment features behind a `# config_digest=` line.
pub fn write_features_file(path: &Path, features: &[SegmentFeatures], digest: Option<&str>) -> Result<()> {
    let mut f = std::io::BufWriter::new(create(path)?);
    if let Some(d) = digest {
        writeln!(f, "# config_digest={d}")?;
    }
    write_features_jsonl(features, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn read_features_file(path: &Path) -> Result<(Vec<SegmentFeatures>, Option<String>)> {
    let (body, digest) = split_digest(open(path)?)?;
    let features = read_features_jsonl(body.as_bytes()).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    Ok((features, digest))
}
/// Per-segment features of one session.
pub type SessionFeatures = (SessionKey, Vec<SegmentFeatures>);


/// Every `<group>_week<NN>.jsonl` features file in `dir`, sorted by session.
pub fn load_features_dir(dir: &Path) -> Result<(Vec<SessionFeatures>, Option<String>)> {
    let mut out = Vec::new();
    let mut digests = Vec::new();
    for entry in fs::read_dir(dir).map_err(|source| Error::File {
        path: dir.to_path_buf(),
        source,
    })? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if !name.ends_with(".jsonl") {
            continue;
        }
        let key = SessionKey::from_file_name(name)?;
        let (features, digest) = read_features_file(&path)?;
        digests.push((name.to_string(), digest));
        out.push((key, features));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    let digest = common_digest(digests)?;
    Ok((out, digest))
}

pub fn read_table_file(path: &Path) -> Result<(GroupFeatureTable, Option<String>)> {
    GroupFeatureTable::read_csv(open(path)?).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

pub fn read_outcomes_file(path: &Path) -> Result<(Vec<OutcomeRecord>, Option<String>)> {
    read_outcomes_csv(open(path)?).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

pub fn write_table_file(path: &Path, table: &GroupFeatureTable, digest: Option<&str>) -> Result<()> {
    table.write_csv(create(path)?, digest)
}

pub fn write_outcomes_file(path: &Path, outcomes: &[OutcomeRecord], digest: Option<&str>) -> Result<()> {
    write_outcomes_csv(outcomes, create(path)?, digest)
}

/// The shared digest of a set of artifacts; artifacts without one are
/// ignored, differing digests are an error.
pub fn common_digest<S: AsRef<str>>(artifacts: impl IntoIterator<Item = (S, Option<String>)>) -> Result<Option<String>> {
    let mut seen: Option<(String, String)> = None;
    for (name, digest) in artifacts {
        let Some(d) = digest else { continue };
        match &seen {
            None => seen = Some((name.as_ref().to_string(), d)),
            Some((first, prev)) if *prev != d => {
                return Err(Error::invalid(format!(
                    "artifacts come from different configs: {first} has digest {prev}, {} has {d}",
                    name.as_ref()
                )));
            }
            Some(_) => {}
        }
    }
    Ok(seen.map(|s| s.1))
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?)))
}

fn digest_dir(role: &str, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.sort();
    for p in files.into_iter().filter(|p| p.is_file()) {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        out.insert(format!("{role}/{name}"), sha256_file(&p)?);
    }
    Ok(())
}

fn input_digests(cfg: &PipelineConfig) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    digest_dir("corpus", &cfg.corpus_dir, &mut out)?;
    digest_dir("outcomes", &cfg.outcomes_dir, &mut out)?;
    if let Some(d) = &cfg.exercises_dir {
        digest_dir("exercises", d, &mut out)?;
    }
    if let Some(d) = &cfg.acoustics_dir {
        digest_dir("acoustics", d, &mut out)?;
    }
    for (role, p) in [
        ("rosters", &cfg.rosters),
        ("glossary", &cfg.glossary),
        ("lexicon_en", &cfg.lexicon_en),
        ("lexicon_zh", &cfg.lexicon_zh),
    ] {
        if let Some(p) = p {
            out.insert(role.to_string(), sha256_file(p)?);
        }
    }
    if let TranslationConfig::Offline { lexicon: Some(p) } = &cfg.translation {
        out.insert("translation".into(), sha256_file(p)?);
    }
    let (role, p) = match &cfg.embedding {
        EmbeddingSource::Table { path } => ("embedding", path),
        EmbeddingSource::Train { corpus, .. } => ("embedding_corpus", corpus),
    };
    out.insert(role.into(), sha256_file(p)?);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Run

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Skipped,
    #[serde(rename = "FAILED")]
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub seconds: f64,
    /// Sessions (or sessions × folds for evaluation) processed.
    pub items: usize,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub sessions: Vec<String>,
    pub stages: Vec<StageRecord>,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Validation(Error),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        source: Error,
        manifest: Box<RunManifest>,
    },
}

impl PipelineError {
    /// 2 for validation errors, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 2,
            Self::Stage { .. } => 3,
        }
    }
}

struct Run {
    out_dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<(T, usize, Vec<String>)>) -> std::result::Result<T, PipelineError> {
        let t0 = Instant::now();
        log::info!(target: name, "status=start");
        match f() {
            Ok((value, items, diagnostics)) => {
                let seconds = t0.elapsed().as_secs_f64();
                for d in &diagnostics {
                    log::debug!(target: name, "diagnostic={d:?}");
                }
                log::info!(
                    target: name,
                    "status=ok items={items} diagnostics={} seconds={seconds:.3}",
                    diagnostics.len()
                );
                self.manifest.stages.push(StageRecord {
                    name: name.to_string(),
                    status: StageStatus::Ok,
                    seconds,
                    items,
                    diagnostics,
                });
                Ok(value)
            }
            Err(e) => {
                let seconds = t0.elapsed().as_secs_f64();
                log::error!(target: name, "status=FAILED seconds={seconds:.3} error={:?}", e.to_string());
                self.manifest.stages.push(StageRecord {
                    name: name.to_string(),
                    status: StageStatus::Failed,
                    seconds,
                    items: 0,
                    diagnostics: vec![e.to_string()],
                });
                self.manifest.status = StageStatus::Failed;
                self.manifest.failed_stage = Some(name.to_string());
                let _ = write_json(&self.out_dir.join(MANIFEST_FILE), &self.manifest);
                let _ = fs::write(self.out_dir.join(FAILED_MARKER), format!("stage={name}\nerror={e}\n"));
                Err(PipelineError::Stage {
                    stage: name.to_string(),
                    source: e,
                    manifest: Box::new(self.manifest.clone()),
                })
            }
        }
    }

    fn finish(self) -> std::result::Result<RunManifest, PipelineError> {
        write_json(&self.out_dir.join(MANIFEST_FILE), &self.manifest).map_err(|e| PipelineError::Stage {
            stage: "manifest".into(),
            source: e,
            manifest: Box::new(self.manifest.clone()),
        })?;
        Ok(self.manifest)
    }

    fn skip(&mut self, name: &str, why: &str) {
        log::info!(target: name, "status=skipped reason={why:?}");
        self.manifest.stages.push(StageRecord {
            name: name.to_string(),
            status: StageStatus::Skipped,
            seconds: 0.0,
            items: 0,
            diagnostics: vec![why.to_string()],
        });
    }
}

/// Runs every stage in order, writing stage outputs and `manifest.json` under
/// the config's `out_dir`. A failing stage halts the run, leaves earlier
/// outputs in place and writes a `FAILED` marker.
pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<RunManifest, PipelineError> {
    run_until(cfg, "evaluate")
}

/// Like [`run_pipeline`] but stops after stage `last`.
pub fn run_until(cfg: &PipelineConfig, last: &str) -> std::result::Result<RunManifest, PipelineError> {
    let Some(last) = STAGES.iter().position(|s| *s == last) else {
        return Err(PipelineError::Validation(Error::invalid(format!("unknown stage {last:?}"))));
    };
    cfg.validate().map_err(PipelineError::Validation)?;
    let digest = cfg.digest().map_err(PipelineError::Validation)?;
    let inputs = input_digests(cfg).map_err(PipelineError::Validation)?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| PipelineError::Validation(e.into()))?;
    let _ = fs::remove_file(out.join(FAILED_MARKER));

    let mut seeds = BTreeMap::new();
    if let EmbeddingSource::Train { training, .. } = &cfg.embedding {
        seeds.insert("embedding".to_string(), training.seed);
    }
    if let Some(p) = &cfg.predict {
        seeds.insert("cv".to_string(), p.cv.seed);
    }
    let mut run = Run {
        out_dir: out.clone(),
        manifest: RunManifest {
            tool: "dialoglens".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_digest: digest.clone(),
            seeds,
            inputs,
            sessions: Vec::new(),
            stages: Vec::new(),
            status: StageStatus::Ok,
            failed_stage: None,
        },
    };
    let d = Some(digest.as_str());

    let dialogs = run.stage("parse", || {
        let rosters = cfg.rosters.as_deref().map(load_rosters).transpose()?;
        let dialogs = load_corpus_dir(&cfg.corpus_dir, rosters.as_ref())?;
        if dialogs.is_empty() {
            return Err(Error::invalid(format!("no transcripts in {}", cfg.corpus_dir.display())));
        }
        write_json(
            &out.join(SESSIONS_FILE),
            &SessionsFile {
                config_digest: Some(digest.clone()),
                sessions: session_summaries(&dialogs),
            },
        )?;
        let notes = dialogs
            .iter()
            .flat_map(|s| s.warnings.iter().map(move |w| format!("{}: {w}", s.key)))
            .collect();
        let n = dialogs.len();
        Ok((dialogs, n, notes))
    })?;
    run.manifest.sessions = dialogs.iter().map(|s| s.key.to_string()).collect();
    if last == 0 {
        return run.finish();
    }

    let features = run.stage("extract", || {
        let resources = LoadedResources::load(cfg)?;
        let mut notes = Vec::new();
        if let Some(report) = &resources.training {
            resources.table.write_text(std::io::BufWriter::new(create(&out.join(EMBEDDING_FILE))?))?;
            write_json(
                &out.join(EMBEDDING_REPORT_FILE),
                &serde_json::json!({ "config_digest": digest, "report": report }),
            )?;
        }
        let topics = match &cfg.exercises_dir {
            Some(dir) => {
                let t = topic_vectors(dir, resources.translator.as_ref(), &resources.table, cfg.top_k)?;
                write_json(&out.join(KEYWORDS_FILE), &serde_json::json!({ "config_digest": digest, "topics": t }))?;
                notes.extend(t.warnings.iter().cloned());
                Some(t)
            }
            None => None,
        };
        let (features, extract_notes) =
            extract_sessions(&dialogs, topics.as_ref(), cfg.acoustics_dir.as_deref(), &resources.view())?;
        notes.extend(extract_notes);
        for (dlg, f) in dialogs.iter().zip(&features) {
            write_features_file(&out.join(FEATURES_DIR).join(dlg.key.file_name()), f, d)?;
        }
        let n = features.len();
        Ok((features, n, notes))
    })?;
    if last == 1 {
        return run.finish();
    }

    let (table, outcomes) = run.stage("aggregate", || {
        let sessions: Vec<_> = dialogs
            .iter()
            .zip(&features)
            .map(|(dlg, f)| (dlg.key.clone(), dlg.roster.clone(), f.clone()))
            .collect();
        let table = aggregate_sessions(&sessions)?;
        let outcomes = outcomes_for(&table, &load_outcomes_dir(&cfg.outcomes_dir)?)?;
        write_table_file(&out.join(GROUP_FEATURES_FILE), &table, d)?;
        write_outcomes_file(&out.join(OUTCOMES_FILE), &outcomes, d)?;
        let n = table.rows.len();
        Ok(((table, outcomes), n, Vec::new()))
    })?;
    if last == 2 {
        return run.finish();
    }

    let (normalized, report) = run.stage("analyze", || {
        let config = ScreeningConfig {
            alpha: cfg.alpha,
            bonferroni: cfg.bonferroni,
        };
        let (normalized, report) = analyze(&table, &outcomes, config, &out, d)?;
        let notes = report
            .degenerate_weeks
            .iter()
            .map(|(f, w)| format!("{f}: constant in week {w}, normalized to 0"))
            .collect();
        let n = report.n_sessions;
        Ok(((normalized, report), n, notes))
    })?;
    if last == 3 {
        return run.finish();
    }

    match &cfg.predict {
        None => {
            run.skip("train", "no predict section in config");
            run.skip("evaluate", "no predict section in config");
        }
        Some(p) => {
            let search = SearchStrategy::parse(&p.search, p.classifier).map_err(PipelineError::Validation)?;
            let data = run.stage("train", || {
                let (data, imputation) = selected_dataset(&normalized, &outcomes, &report.selected())?;
                let filled = imputation.filled;
                let mut model = TrainedModel::train(&data, imputation, p.classifier, &search, &p.cv)?;
                model.config_digest = Some(digest.clone());
                fs::write(out.join(MODEL_FILE), model.to_json()? + "\n")?;
                let n = data.len();
                let notes = if filled > 0 {
                    vec![format!("imputed {filled} absent values")]
                } else {
                    Vec::new()
                };
                Ok((data, n, notes))
            })?;
            if last == 4 {
                return run.finish();
            }
            run.stage("evaluate", || {
                let result = nested_cv(&data, p.classifier, &search, &p.cv)?;
                write_json(
                    &out.join(EVALUATION_FILE),
                    &EvaluationReport {
                        config_digest: Some(digest.clone()),
                        result,
                    },
                )?;
                Ok(((), data.len(), Vec::new()))
            })?;
        }
    }

    run.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo(dir: &Path) -> PipelineConfig {
        let spec = synth::SyntheticSpec::default();
        synth::generate_corpus(&spec, dir).unwrap();
        let cfg = PipelineConfig::for_synthetic(&spec);
        let path = dir.join("config.json");
        fs::write(&path, cfg.to_json().unwrap()).unwrap();
        PipelineConfig::load(&path).unwrap()
    }

    #[test]
    fn label_counts_and_feasibility() {
        assert_eq!(label_counts(3, 2), [2, 2, 2]);
        assert_eq!(label_counts(10, 9), [27, 36, 27]);
        assert!(!nested_cv_feasible(&label_counts(3, 2), 5, 5));
        assert!(nested_cv_feasible(&label_counts(10, 9), 5, 5));
        assert!(!nested_cv_feasible(&[30, 0, 0], 5, 5));
    }

    #[test]
    fn digest_ignores_out_dir() {
        let mut a = PipelineConfig::for_synthetic(&synth::SyntheticSpec::default());
        let d0 = a.digest().unwrap();
        a.out_dir = "elsewhere".into();
        assert_eq!(a.digest().unwrap(), d0);
        a.alpha = 0.01;
        assert_ne!(a.digest().unwrap(), d0);
    }

    #[test]
    fn common_digest_rejects_mixed_artifacts() {
        assert_eq!(
            common_digest([("a", Some("x".to_string())), ("b", None), ("c", Some("x".into()))]).unwrap(),
            Some("x".into())
        );
        assert!(common_digest([("a", Some("x".to_string())), ("b", Some("y".into()))]).is_err());
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let text = r#"{"corpus_dir":"c","outcomes_dir":"o","out_dir":"x","embedding":{"source":"table","path":"e"},"alpah":0.1}"#;
        assert!(serde_json::from_str::<PipelineConfig>(text).is_err());
    }

    #[test]
    fn missing_glossary_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = demo(dir.path());
        cfg.glossary = Some(dir.path().join("nope.txt"));
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("glossary"));
        assert!(!cfg.out_dir.join(MANIFEST_FILE).exists());
    }

    #[test]
    fn demo_run_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = demo(dir.path());
        let manifest = run_pipeline(&cfg).unwrap();
        assert_eq!(manifest.sessions.len(), 6);
        assert_eq!(manifest.status, StageStatus::Ok);
        let names: Vec<_> = manifest.stages.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, STAGES);
        assert_eq!(manifest.stages[4].status, StageStatus::Skipped);
        let out = &cfg.out_dir;
        for f in [SESSIONS_FILE, KEYWORDS_FILE, GROUP_FEATURES_FILE, NORMALIZED_FILE, SCREENING_FILE, MANIFEST_FILE] {
            assert!(out.join(f).is_file(), "{f}");
        }
        let (feats, digest) = load_features_dir(&out.join(FEATURES_DIR)).unwrap();
        assert_eq!(feats.len(), 6);
        assert_eq!(digest.as_deref(), Some(manifest.config_digest.as_str()));
        let (table, d2) = read_table_file(&out.join(GROUP_FEATURES_FILE)).unwrap();
        assert_eq!(table.rows.len(), 6);
        assert_eq!(d2, digest);
    }

    #[test]
    fn stage_failure_leaves_marker() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = demo(dir.path());
        fs::remove_file(dir.path().join(synth::OUTCOMES_DIR).join("marks_G02.csv")).unwrap();
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let PipelineError::Stage { stage, manifest, .. } = err else { panic!() };
        assert_eq!(stage, "aggregate");
        assert_eq!(manifest.failed_stage.as_deref(), Some("aggregate"));
        assert!(cfg.out_dir.join(FAILED_MARKER).is_file());
        assert!(cfg.out_dir.join(SESSIONS_FILE).is_file());
    }
}
