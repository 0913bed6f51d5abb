//! Synthetic corpora, feature tables and multi-device recordings with planted
//! effects, for exercising the pipeline without private data.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::acoustics::{FrameFeatureRow, FrameFeatures, FRAME_SECONDS};
use crate::audio::AudioTrack;
use crate::audiosync::WindowLabel;
use crate::corpus::{count_tokens, language_proportions, write_jsonl, Gender, Segment, SessionKey, SpeakerLabel};
use crate::error::{Error, Result};
use crate::grouping::{outcomes_from_scores, GroupFeatureTable, OutcomeRecord};
use crate::stats::{mean, population_variance};

pub const TRANSCRIPTS_DIR: &str = "transcripts";
pub const OUTCOMES_DIR: &str = "outcomes";
pub const EXERCISES_DIR: &str = "exercises";
pub const ACOUSTICS_DIR: &str = "acoustics";
pub const ROSTERS_FILE: &str = "rosters.json";
pub const TEXTBOOK_FILE: &str = "textbook.txt";
pub const PLANTS_FILE: &str = "plants.json";

/// Group-level features the corpus generator can plant.
pub const PLANTABLE: [&str; 2] = ["DialogSum__MT", "DialogSum__NoT"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffect {
    pub feature: String,
    /// +1 or -1.
    pub direction: i8,
    /// Target correlation with E_s, in [0, 1].
    pub strength: f64,
}

impl PlantedEffect {
    pub fn new(feature: impl Into<String>, direction: i8, strength: f64) -> Self {
        Self {
            feature: feature.into(),
            direction,
            strength,
        }
    }

    pub fn signed_strength(&self) -> f64 {
        f64::from(self.direction) * self.strength
    }

    pub fn validate(&self) -> Result<()> {
        if self.direction != 1 && self.direction != -1 {
            return Err(Error::invalid(format!("plant {}: direction must be + or -", self.feature)));
        }
        if !self.strength.is_finite() || self.strength < 0.0 {
            return Err(Error::invalid(format!("plant {}: strength must be finite and >= 0", self.feature)));
        }
        if self.strength > 1.0 {
            return Err(Error::invalid(format!(
                "infeasible plant {}: strength {} implies a correlation above 1",
                self.feature, self.strength
            )));
        }
        Ok(())
    }
}

/// Parses `feature:+:0.8`.
impl FromStr for PlantedEffect {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let [feature, dir, strength] = parts.as_slice() else {
            return Err(Error::invalid(format!("plant {s:?}: expected feature:+|-:strength")));
        };
        let direction = match *dir {
            "+" => 1,
            "-" => -1,
            other => return Err(Error::invalid(format!("plant {s:?}: bad direction {other:?}"))),
        };
        let strength: f64 = strength
            .parse()
            .map_err(|_| Error::invalid(format!("plant {s:?}: bad strength")))?;
        let p = Self::new(*feature, direction, strength);
        p.validate()?;
        Ok(p)
    }
}

fn group_id(g: usize) -> String {
    format!("G{:02}", g + 1)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// One E_s per (group, week), uniform on [0.3, 0.95], in key order.
fn draw_scores(groups: usize, weeks: u32, rng: &mut ChaCha8Rng) -> Vec<(SessionKey, f64)> {
    let mut out = Vec::new();
    for g in 0..groups {
        for w in 1..=weeks {
            out.push((SessionKey::new(group_id(g), w), rng.random_range(0.3..0.95)));
        }
    }
    out
}

fn standardize(xs: &[f64]) -> Vec<f64> {
    let m = mean(xs);
    let sd = population_variance(xs).sqrt();
    xs.iter().map(|x| if sd > 0.0 { (x - m) / sd } else { 0.0 }).collect()
}

/// `s·z + √(1−s²)·ε`: correlation s with `z` in expectation.
fn planted_latent(z: &[f64], s: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let e = (1.0 - s * s).max(0.0).sqrt();
    z.iter().map(|v| s * v + e * normal(rng)).collect()
}

// ---------------------------------------------------------------------------
// Feature-table level

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTable {
    pub table: GroupFeatureTable,
    pub outcomes: Vec<OutcomeRecord>,
    pub planted: Vec<String>,
    pub noise: Vec<String>,
}

/// A group feature table whose planted columns correlate with E_s at their
/// signed strength and whose `noise_NNN` columns are independent of it.
pub fn synthetic_table(
    groups: usize,
    weeks: u32,
    plants: &[PlantedEffect],
    noise_features: usize,
    seed: u64,
) -> Result<SyntheticTable> {
    if groups < 3 || weeks == 0 {
        return Err(Error::invalid("need at least 3 groups and 1 week"));
    }
    for p in plants {
        p.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = draw_scores(groups, weeks, &mut rng);
    let z = standardize(&scores.iter().map(|s| s.1).collect::<Vec<_>>());
    let mut cols: Vec<(String, Vec<f64>)> = plants
        .iter()
        .map(|p| (p.feature.clone(), planted_latent(&z, p.signed_strength(), &mut rng)))
        .collect();
    let noise: Vec<String> = (0..noise_features).map(|j| format!("noise_{j:03}")).collect();
    for name in &noise {
        cols.push((name.clone(), (0..z.len()).map(|_| normal(&mut rng)).collect()));
    }
    cols.sort_by(|a, b| a.0.cmp(&b.0));
    if cols.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::invalid("duplicate planted feature name"));
    }
    let table = GroupFeatureTable {
        rows: scores.iter().map(|s| s.0.clone()).collect(),
        columns: cols.iter().map(|c| c.0.clone()).collect(),
        values: (0..z.len()).map(|i| cols.iter().map(|c| Some(c.1[i])).collect()).collect(),
    };
    Ok(SyntheticTable {
        table,
        outcomes: outcomes_from_scores(&scores)?,
        planted: plants.iter().map(|p| p.feature.clone()).collect(),
        noise,
    })
}

// ---------------------------------------------------------------------------
// Corpus level

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub groups: usize,
    pub weeks: u32,
    pub students_per_group: usize,
    pub segments_min: usize,
    pub segments_max: usize,
    pub plants: Vec<PlantedEffect>,
    /// Relative jitter on unplanted dialog statistics (speaking rate, length).
    pub noise_level: f64,
    /// Also write frame-feature CSVs.
    pub acoustics: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            groups: 3,
            weeks: 2,
            students_per_group: 4,
            segments_min: 30,
            segments_max: 60,
            plants: vec![PlantedEffect::new("DialogSum__MT", 1, 0.8)],
            noise_level: 0.2,
            acoustics: true,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.groups < 3 {
            return Err(Error::invalid("synthetic corpus needs at least 3 groups"));
        }
        if self.weeks == 0 {
            return Err(Error::invalid("synthetic corpus needs at least 1 week"));
        }
        if self.students_per_group == 0 || self.students_per_group > 18 {
            return Err(Error::invalid("students per group must be in 1..=18"));
        }
        if self.segments_min < self.students_per_group || self.segments_min > self.segments_max {
            return Err(Error::invalid("need students_per_group <= segments_min <= segments_max"));
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return Err(Error::invalid("noise level must be finite and >= 0"));
        }
        let mut seen = BTreeSet::new();
        for p in &self.plants {
            p.validate()?;
            if !PLANTABLE.contains(&p.feature.as_str()) {
                return Err(Error::invalid(format!(
                    "cannot plant {}: supported features are {}",
                    p.feature,
                    PLANTABLE.join(", ")
                )));
            }
            if !seen.insert(p.feature.as_str()) {
                return Err(Error::invalid(format!("feature {} planted twice", p.feature)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSession {
    pub group_id: String,
    pub week: u32,
    pub e_s: f64,
    /// Generated value of every planted feature.
    pub planted: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantManifest {
    pub spec: SyntheticSpec,
    pub sessions: Vec<PlantedSession>,
}

const TOPIC_TERMS: [(&str, &str); 20] = [
    ("matrix", "矩陣"),
    ("vector", "向量"),
    ("eigenvalue", "特徵值"),
    ("eigenvector", "特徵向量"),
    ("determinant", "行列式"),
    ("integral", "積分"),
    ("derivative", "導數"),
    ("differential equation", "微分方程"),
    ("equation", "方程"),
    ("function", "函數"),
    ("series", "級數"),
    ("fourier series", "傅立葉級數"),
    ("laplace transform", "拉普拉斯變換"),
    ("gradient", "梯度"),
    ("divergence", "散度"),
    ("limit", "極限"),
    ("polynomial", "多項式"),
    ("coefficient", "係數"),
    ("boundary condition", "邊界條件"),
    ("initial value", "初值"),
];

const EN_WORDS: [&str; 40] = [
    "we", "need", "to", "find", "the", "first", "step", "then", "check", "answer", "question", "part", "so", "maybe",
    "ok", "yes", "think", "right", "use", "value", "compute", "solve", "because", "but", "and", "this", "that", "is",
    "not", "good", "can", "let", "try", "again", "wait", "here", "sign", "two", "one", "know",
];

const ZH_WORDS: [&str; 30] = [
    "我們", "你", "我", "他", "這個", "那個", "是", "不是", "對", "好", "可以", "不", "可能", "因為", "所以", "但是",
    "怎麼", "什麼", "為什麼", "問題", "答案", "算", "解", "第一", "題", "知道", "覺得", "明白", "嗯", "的",
];

const CONTEXT_WORDS: [[&str; 4]; 5] = [
    ["rows", "columns", "entries", "square"],
    ["rate", "slope", "tangent", "area"],
    ["terms", "sum", "converge", "periodic"],
    ["direction", "field", "flux", "norm"],
    ["degree", "roots", "factor", "boundary"],
];

fn week_topic(week: u32) -> Vec<(&'static str, &'static str)> {
    let start = ((week as usize - 1) * 4) % TOPIC_TERMS.len();
    (0..4).map(|j| TOPIC_TERMS[(start + j) % TOPIC_TERMS.len()]).collect()
}

fn week_context(week: u32) -> [&'static str; 4] {
    CONTEXT_WORDS[(week as usize - 1) % CONTEXT_WORDS.len()]
}

#[derive(Debug, Clone)]
struct Student {
    label: SpeakerLabel,
    f0: f64,
}

fn roster_for(g: usize, students: usize, seed: u64) -> Vec<Student> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5EED_0000 + g as u64));
    let (mut m, mut f) = (0u32, 0u32);
    (0..students)
        .map(|_| {
            if rng.random_bool(0.5) {
                m += 1;
                Student {
                    label: SpeakerLabel::student(Gender::Male, m),
                    f0: 120.0 + 15.0 * normal(&mut rng),
                }
            } else {
                f += 1;
                Student {
                    label: SpeakerLabel::student(Gender::Female, f),
                    f0: 210.0 + 20.0 * normal(&mut rng),
                }
            }
        })
        .collect()
}

fn staff() -> [(SpeakerLabel, f64); 2] {
    let ta: SpeakerLabel = "TM1".parse().expect("valid label");
    [(SpeakerLabel::professor(), 110.0), (ta, 130.0)]
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

struct GeneratedDialog {
    segments: Vec<Segment>,
    frames: Option<FrameFeatures>,
}

fn dialog_text(rng: &mut ChaCha8Rng, terms: usize, topic: &[(&str, &str)], noise: f64) -> String {
    let base = ((7.0 * (1.0 + noise * normal(rng))).round() as i64).clamp(2, 16) as usize;
    let p_en: f64 = rng.random();
    let mut words: Vec<String> = (0..base)
        .map(|_| {
            if rng.random_bool(p_en) {
                EN_WORDS.choose(rng).expect("non-empty").to_string()
            } else {
                ZH_WORDS.choose(rng).expect("non-empty").to_string()
            }
        })
        .collect();
    for _ in 0..terms {
        let (en, zh) = *topic.choose(rng).expect("non-empty");
        let at = rng.random_range(0..=words.len());
        words.insert(at, if rng.random_bool(0.5) { en } else { zh }.to_string());
    }
    words.join(" ")
}

#[allow(clippy::too_many_arguments)]
fn generate_dialog(
    rng: &mut ChaCha8Rng,
    students: &[Student],
    n_segments: usize,
    math_terms: usize,
    topic: &[(&str, &str)],
    noise: f64,
    acoustics: bool,
) -> Result<GeneratedDialog> {
    let mut per_segment = vec![0usize; n_segments];
    for _ in 0..math_terms {
        per_segment[rng.random_range(0..n_segments)] += 1;
    }
    let mut order: Vec<usize> = (0..students.len()).collect();
    order.shuffle(rng);
    let staff = staff();
    let mut t = round2(rng.random_range(0.0..2.0));
    let mut segments: Vec<Segment> = Vec::with_capacity(n_segments);
    let mut voices = Vec::with_capacity(n_segments);
    for (i, &terms) in per_segment.iter().enumerate() {
        let prev = segments.last().map(|s| s.speaker);
        let (speaker, f0) = if i < order.len() {
            let s = &students[order[i]];
            (s.label, s.f0)
        } else {
            let u: f64 = rng.random();
            let pick = if u < 0.85 {
                let s = students.choose(rng).expect("non-empty roster");
                (s.label, s.f0)
            } else if u < 0.95 {
                staff[0]
            } else {
                staff[1]
            };
            if Some(pick.0) == prev {
                let next = students
                    .iter()
                    .position(|s| s.label == pick.0)
                    .map_or(0, |j| (j + 1) % students.len());
                (students[next].label, students[next].f0)
            } else {
                pick
            }
        };
        if Some(speaker) == prev {
            // Only reachable with a single-student roster.
            t = round2(t + 1.2);
        }
        let text = dialog_text(rng, terms, topic, noise);
        let tokens = count_tokens(&text).total as f64;
        let (en, cn) = language_proportions(&text)?;
        let rate = (en * 110.0 + cn * 240.0) * (noise * normal(rng)).exp();
        let duration = round2((tokens * 60.0 / rate).max(0.3));
        segments.push(Segment::new(t, round2(t + duration), speaker, text)?);
        voices.push(f0);
        t = round2(t + duration + rng.random_range(0.2..1.8));
    }
    let frames = acoustics.then(|| synthetic_frames(rng, &segments, &voices));
    Ok(GeneratedDialog { segments, frames })
}

fn synthetic_frames(rng: &mut ChaCha8Rng, segments: &[Segment], voices: &[f64]) -> FrameFeatures {
    let round3 = |x: f64| (x * 1000.0).round() / 1000.0;
    let mut rows = Vec::new();
    for (seg, &f0) in segments.iter().zip(voices) {
        let k0 = (seg.start / FRAME_SECONDS).ceil() as u64;
        let k1 = (seg.end / FRAME_SECONDS).ceil() as u64;
        for k in k0..k1 {
            let voiced = rng.random_bool(0.85);
            let f1 = 500.0 + 50.0 * normal(rng);
            let f2 = 1500.0 + 100.0 * normal(rng);
            let f3 = 2500.0 + 150.0 * normal(rng);
            rows.push(FrameFeatureRow {
                time: k as f64 * FRAME_SECONDS,
                values: vec![
                    voiced.then(|| round3((f0 * (1.0 + 0.05 * normal(rng))).clamp(60.0, 500.0))),
                    Some(round3((0.5 * (0.6 * normal(rng)).exp()).max(0.0))),
                    voiced.then(|| round3(f1.max(200.0))),
                    voiced.then(|| round3(f2.max(1000.0))),
                    voiced.then(|| round3(f3.max(2100.0))),
                ],
            });
        }
    }
    FrameFeatures {
        columns: ["F0", "Energy", "F1", "F2", "F3"].map(String::from).to_vec(),
        rows,
        warnings: Vec::new(),
    }
}

fn exercise_text(rng: &mut ChaCha8Rng, week: u32) -> String {
    let topic = week_topic(week);
    let context = week_context(week);
    let mut lines = Vec::new();
    for _ in 0..12 {
        let (a, _) = *topic.choose(rng).expect("non-empty");
        let (b, _) = *topic.choose(rng).expect("non-empty");
        let c = context.choose(rng).expect("non-empty");
        let g = EN_WORDS.choose(rng).expect("non-empty");
        lines.push(format!("find the {a} of the given {b} and check the {c} {g}"));
    }
    lines.join("\n") + "\n"
}

fn textbook_sentence(rng: &mut ChaCha8Rng, weeks: u32) -> String {
    let week = rng.random_range(1..=weeks);
    let topic = week_topic(week);
    let context = week_context(week);
    let mut words = Vec::new();
    for _ in 0..rng.random_range(8..14) {
        let u: f64 = rng.random();
        if u < 0.35 {
            words.push(topic.choose(rng).expect("non-empty").0.to_string());
        } else if u < 0.6 {
            words.push(context.choose(rng).expect("non-empty").to_string());
        } else {
            words.push(EN_WORDS.choose(rng).expect("non-empty").to_string());
        }
    }
    words.join(" ")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a complete corpus under `out_dir` (transcripts, rosters, outcome
/// files, weekly exercises, an embedding training text, optional frame CSVs)
/// and the plant manifest. Planted statistics follow `s·z(E_s) + √(1−s²)·ε`
/// mapped onto the feature's natural scale.
pub fn generate_corpus(spec: &SyntheticSpec, out_dir: &Path) -> Result<PlantManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scores = draw_scores(spec.groups, spec.weeks, &mut rng);
    let z = standardize(&scores.iter().map(|s| s.1).collect::<Vec<_>>());
    let latents: BTreeMap<&str, Vec<f64>> = spec
        .plants
        .iter()
        .map(|p| (p.feature.as_str(), planted_latent(&z, p.signed_strength(), &mut rng)))
        .collect();

    for d in [TRANSCRIPTS_DIR, OUTCOMES_DIR, EXERCISES_DIR] {
        fs::create_dir_all(out_dir.join(d))?;
    }
    if spec.acoustics {
        fs::create_dir_all(out_dir.join(ACOUSTICS_DIR))?;
    }

    let rosters: Vec<Vec<Student>> = (0..spec.groups)
        .map(|g| roster_for(g, spec.students_per_group, spec.seed))
        .collect();
    let mid_segments = (spec.segments_min + spec.segments_max) as f64 / 2.0;
    let spread_segments = (spec.segments_max - spec.segments_min) as f64 / 6.0;
    let mut sessions = Vec::with_capacity(scores.len());
    for (i, (key, e_s)) in scores.iter().enumerate() {
        let g = key.group_id[1..].parse::<usize>().expect("generated id") - 1;
        let mut planted = BTreeMap::new();
        let n_segments = match latents.get("DialogSum__NoT") {
            Some(l) => (mid_segments + spread_segments * l[i]).round(),
            None => rng.random_range(spec.segments_min..=spec.segments_max) as f64,
        }
        .clamp(spec.segments_min as f64, spec.segments_max as f64) as usize;
        let base_terms = 0.5 * mid_segments;
        let math_terms = match latents.get("DialogSum__MT") {
            Some(l) => (base_terms + base_terms / 3.0 * l[i]).round().max(0.0) as usize,
            None => (base_terms * (1.0 + spec.noise_level * normal(&mut rng))).round().max(0.0) as usize,
        };
        for p in &spec.plants {
            let v = match p.feature.as_str() {
                "DialogSum__NoT" => n_segments,
                _ => math_terms,
            };
            planted.insert(p.feature.clone(), v as f64);
        }
        let topic = week_topic(key.week);
        let dialog = generate_dialog(
            &mut rng,
            &rosters[g],
            n_segments,
            math_terms,
            &topic,
            spec.noise_level,
            spec.acoustics,
        )?;
        let mut buf = Vec::new();
        write_jsonl(&dialog.segments, &mut buf)?;
        fs::write(out_dir.join(TRANSCRIPTS_DIR).join(key.file_name()), buf)?;
        if let Some(frames) = dialog.frames {
            let name = format!("{}_week{:02}.csv", key.group_id, key.week);
            frames.write_csv(fs::File::create(out_dir.join(ACOUSTICS_DIR).join(name))?)?;
        }
        sessions.push(PlantedSession {
            group_id: key.group_id.clone(),
            week: key.week,
            e_s: *e_s,
            planted,
        });
    }

    let roster_map: BTreeMap<String, BTreeSet<SpeakerLabel>> = rosters
        .iter()
        .enumerate()
        .map(|(g, r)| (group_id(g), r.iter().map(|s| s.label).collect()))
        .collect();
    write_text(&out_dir.join(ROSTERS_FILE), &(serde_json::to_string_pretty(&roster_map)? + "\n"))?;

    let mut topics = String::from("week,exam,question_id,full_marks\n");
    for w in 1..=spec.weeks {
        topics.push_str(&format!("{w},mid,w{w:02}m,10\n{w},final,w{w:02}f,10\n"));
    }
    write_text(&out_dir.join(OUTCOMES_DIR).join("topics_map.csv"), &topics)?;
    for g in 0..spec.groups {
        let id = group_id(g);
        let mut marks = String::from("exam,question_id,earned\n");
        for s in sessions.iter().filter(|s| s.group_id == id) {
            let earned = 10.0 * s.e_s;
            marks.push_str(&format!("mid,w{:02}m,{earned}\nfinal,w{:02}f,{earned}\n", s.week, s.week));
        }
        write_text(&out_dir.join(OUTCOMES_DIR).join(format!("marks_{id}.csv")), &marks)?;
    }

    for w in 1..=spec.weeks {
        let text = exercise_text(&mut rng, w);
        write_text(&out_dir.join(EXERCISES_DIR).join(format!("week{w:02}.txt")), &text)?;
    }
    let textbook: Vec<String> = (0..1500).map(|_| textbook_sentence(&mut rng, spec.weeks)).collect();
    write_text(&out_dir.join(TEXTBOOK_FILE), &(textbook.join("\n") + "\n"))?;

    let manifest = PlantManifest {
        spec: spec.clone(),
        sessions,
    };
    write_text(&out_dir.join(PLANTS_FILE), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Multi-device recordings

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingSpec {
    pub sample_rate: u32,
    pub duration: f64,
    /// Lecture spans in the reference (first device's) time base.
    pub lecture_spans: Vec<(f64, f64)>,
    /// Per-device lag against the first device; the first entry is 0.
    pub lags: Vec<f64>,
    /// Shared lecture power over each device's own speech during lecture spans.
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for RecordingSpec {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            duration: 180.0,
            lecture_spans: vec![(0.0, 40.0), (110.0, 140.0)],
            lags: vec![0.0, 1.37, -2.64],
            snr_db: 10.0,
            seed: 1,
        }
    }
}

/// Amplitude-modulated noise with a 4 Hz syllable envelope.
pub fn speech_like(rng: &mut ChaCha8Rng, n: usize, sample_rate: u32) -> Vec<f32> {
    let syllable = (sample_rate as usize / 4).max(1);
    let gains: Vec<f32> = (0..n / syllable + 2).map(|_| normal(rng).abs() as f32).collect();
    (0..n)
        .map(|i| 0.2 * normal(rng) as f32 * (0.3 + gains[i / syllable]))
        .collect()
}

fn power(x: &[f32]) -> f64 {
    x.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>() / x.len().max(1) as f64
}

/// Devices that share a lecture during the planted spans and otherwise record
/// only their own group. Device `k` hears reference time `t` at `t + lags[k]`.
pub fn synthetic_recording(spec: &RecordingSpec) -> Result<Vec<AudioTrack>> {
    if spec.lags.is_empty() || spec.lags[0] != 0.0 {
        return Err(Error::invalid("lags must start with 0 for the reference device"));
    }
    if !(spec.duration > 0.0 && spec.snr_db.is_finite()) {
        return Err(Error::invalid("duration must be positive and SNR finite"));
    }
    let sr = spec.sample_rate;
    let margin = spec.lags.iter().fold(0.0f64, |m, l| m.max(l.abs())) + 1.0;
    let n = (spec.duration * sr as f64).round() as usize;
    let pad = (margin * sr as f64).round() as usize;
    let total = n + 2 * pad;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lecture = speech_like(&mut rng, total, sr);
    let in_lecture = |j: usize| {
        let t = (j as f64 - pad as f64) / sr as f64;
        spec.lecture_spans.iter().any(|&(a, b)| t >= a && t < b)
    };
    let gain = (power(&lecture) / power(&speech_like(&mut rng, total, sr)) / 10f64.powf(spec.snr_db / 10.0)).sqrt() as f32;
    spec.lags
        .iter()
        .enumerate()
        .map(|(k, &lag)| {
            let own = speech_like(&mut rng, total, sr);
            let floor: Vec<f32> = (0..total).map(|_| 0.002 * normal(&mut rng) as f32).collect();
            let reference: Vec<f32> = (0..total)
                .map(|j| {
                    let base = if in_lecture(j) { lecture[j] + gain * own[j] } else { own[j] };
                    base + floor[j]
                })
                .collect();
            let shift = (lag * sr as f64).round() as i64;
            let samples: Vec<f32> = (0..n as i64)
                .map(|i| reference[(i - shift + pad as i64) as usize])
                .collect();
            AudioTrack::new(samples, sr, format!("dev{}", k + 1))
        })
        .collect()
}

/// Ground-truth window labels for device `k`: a window is Lecture when more
/// than half of it lies inside a lecture span.
pub fn recording_truth(spec: &RecordingSpec, device: usize, window: f64, hop: f64, count: usize) -> Vec<WindowLabel> {
    let lag = spec.lags[device];
    (0..count)
        .map(|i| {
            let a = i as f64 * hop - lag;
            let b = a + window;
            let overlap: f64 = spec
                .lecture_spans
                .iter()
                .map(|&(s, e)| (b.min(e) - a.max(s)).max(0.0))
                .sum();
            if overlap > window / 2.0 {
                WindowLabel::Lecture
            } else {
                WindowLabel::Discussion
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::pearson;

    #[test]
    fn plant_parsing() {
        let p: PlantedEffect = "DialogSum__MT:+:0.8".parse().unwrap();
        assert_eq!(p, PlantedEffect::new("DialogSum__MT", 1, 0.8));
        assert_eq!("x:-:0.5".parse::<PlantedEffect>().unwrap().signed_strength(), -0.5);
        assert!("x:+:1.2".parse::<PlantedEffect>().is_err());
        assert!("x:*:0.2".parse::<PlantedEffect>().is_err());
        assert!("x:+".parse::<PlantedEffect>().is_err());
        assert!("x:+:nan".parse::<PlantedEffect>().is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(SyntheticSpec::default().validate().is_ok());
        let bad = |f: fn(&mut SyntheticSpec)| {
            let mut s = SyntheticSpec::default();
            f(&mut s);
            s.validate().is_err()
        };
        assert!(bad(|s| s.groups = 2));
        assert!(bad(|s| s.weeks = 0));
        assert!(bad(|s| s.plants[0].strength = f64::INFINITY));
        assert!(bad(|s| s.plants[0].strength = 1.5));
        assert!(bad(|s| s.plants[0].feature = "DialogVar__ST".into()));
        assert!(bad(|s| s.plants.push(PlantedEffect::new("DialogSum__MT", -1, 0.2))));
        assert!(bad(|s| s.segments_min = 2));
    }

    #[test]
    fn table_plants_reach_their_strength() {
        let plants = [PlantedEffect::new("a", 1, 0.7), PlantedEffect::new("b", -1, 0.5)];
        let t = synthetic_table(10, 90, &plants, 3, 5).unwrap();
        assert_eq!(t.table.rows.len(), 900);
        assert_eq!(t.table.columns, ["a", "b", "noise_000", "noise_001", "noise_002"]);
        let es: Vec<f64> = t.outcomes.iter().map(|o| o.e_s).collect();
        let col = |j: usize| -> Vec<f64> { t.table.column(j).into_iter().map(Option::unwrap).collect() };
        assert!((pearson(&col(0), &es).unwrap().r - 0.7).abs() < 0.06);
        assert!((pearson(&col(1), &es).unwrap().r + 0.5).abs() < 0.06);
        assert!(pearson(&col(2), &es).unwrap().r.abs() < 0.1);
    }

    #[test]
    fn table_is_seed_deterministic() {
        let plants = [PlantedEffect::new("a", 1, 0.7)];
        assert_eq!(synthetic_table(4, 3, &plants, 2, 9).unwrap(), synthetic_table(4, 3, &plants, 2, 9).unwrap());
        assert_ne!(synthetic_table(4, 3, &plants, 2, 9).unwrap(), synthetic_table(4, 3, &plants, 2, 10).unwrap());
    }

    #[test]
    fn corpus_files_and_determinism() {
        let spec = SyntheticSpec::default();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_corpus(&spec, a.path()).unwrap();
        let mb = generate_corpus(&spec, b.path()).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.sessions.len(), 6);
        let list = |d: &Path| {
            let mut v: Vec<_> = walk(d).into_iter().map(|p| p.strip_prefix(d).unwrap().to_path_buf()).collect();
            v.sort();
            v
        };
        assert_eq!(list(a.path()), list(b.path()));
        for rel in list(a.path()) {
            assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap(), "{rel:?}");
        }
        let dialogs = crate::corpus::load_corpus_dir(
            &a.path().join(TRANSCRIPTS_DIR),
            Some(&crate::corpus::load_rosters(&a.path().join(ROSTERS_FILE)).unwrap()),
        )
        .unwrap();
        assert_eq!(dialogs.len(), 6);
        let outcomes = crate::grouping::load_outcomes_dir(&a.path().join(OUTCOMES_DIR)).unwrap();
        for (o, s) in outcomes.iter().zip(&ma.sessions) {
            assert!((o.e_s - s.e_s).abs() < 1e-12);
        }
        let frames = FrameFeatures::read_csv(fs::File::open(a.path().join(ACOUSTICS_DIR).join("G01_week01.csv")).unwrap()).unwrap();
        assert!(frames.warnings.is_empty());
        assert!(frames.rows.len() > 100);
    }

    fn walk(d: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn planted_math_terms_match_the_text() {
        let spec = SyntheticSpec {
            acoustics: false,
            ..SyntheticSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(&spec, dir.path()).unwrap();
        let glossary = crate::semantics::Glossary::demo();
        for s in &m.sessions {
            let key = SessionKey::new(s.group_id.clone(), s.week);
            let f = fs::File::open(dir.path().join(TRANSCRIPTS_DIR).join(key.file_name())).unwrap();
            let segs = crate::corpus::parse_segments(f, crate::corpus::TranscriptFormat::Jsonl).unwrap();
            let mt: usize = segs.iter().map(|x| glossary.count_math_terms(&x.text)).sum();
            assert_eq!(mt as f64, s.planted["DialogSum__MT"], "{key}");
        }
    }

    #[test]
    fn recording_truth_follows_lags() {
        let spec = RecordingSpec {
            lecture_spans: vec![(0.0, 10.0)],
            lags: vec![0.0, 2.0],
            ..RecordingSpec::default()
        };
        let t0 = recording_truth(&spec, 0, 4.0, 2.0, 6);
        let t1 = recording_truth(&spec, 1, 4.0, 2.0, 6);
        use WindowLabel::*;
        assert_eq!(t0, [Lecture, Lecture, Lecture, Lecture, Discussion, Discussion]);
        assert_eq!(t1, [Discussion, Lecture, Lecture, Lecture, Lecture, Discussion]);
    }

    #[test]
    fn recording_devices_are_shifted_copies_during_lecture() {
        let spec = RecordingSpec {
            duration: 20.0,
            lecture_spans: vec![(0.0, 20.0)],
            lags: vec![0.0, 0.5],
            snr_db: 40.0,
            ..RecordingSpec::default()
        };
        let tracks = synthetic_recording(&spec).unwrap();
        let sr = spec.sample_rate as usize;
        let a = &tracks[0].samples()[sr..sr * 2];
        let b = &tracks[1].samples()[sr + sr / 2..sr * 2 + sr / 2];
        let r = pearson(
            &a.iter().map(|v| *v as f64).collect::<Vec<_>>(),
            &b.iter().map(|v| *v as f64).collect::<Vec<_>>(),
        )
        .unwrap()
        .r;
        assert!(r > 0.95, "{r}");
        assert!(synthetic_recording(&RecordingSpec {
            lags: vec![1.0],
            ..RecordingSpec::default()
        })
        .is_err());
    }
}
