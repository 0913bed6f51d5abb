//! Per-segment features: speech (ST, NoW, NoT, SRS), math terms, topic
//! relevance and cohesion, category counts, and acoustic aggregates.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acoustics::{aggregate_segment, FrameFeatures, NormalizationAccumulator, NormalizationStats, SegmentAcoustics};
use crate::corpus::{count_tokens, language_proportions, Segment, SessionDialog, SpeakerLabel};
use crate::embedding::{average_vector, cosine, tokenize_english, EmbeddingTable};
use crate::error::{Error, Result};
use crate::grouping::SegmentMatrix;
use crate::semantics::{count_categories, CategoryCounts, CategoryLexicon, Glossary, Translator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeakingRateParams {
    pub eng_slow: f64,
    pub eng_fast: f64,
    pub cn_slow: f64,
    pub cn_fast: f64,
}

impl Default for SpeakingRateParams {
    fn default() -> Self {
        Self {
            eng_slow: 100.0,
            eng_fast: 120.0,
            cn_slow: 225.0,
            cn_fast: 255.0,
        }
    }
}

impl SpeakingRateParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.eng_slow, self.eng_fast, self.cn_slow, self.cn_fast];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.eng_slow >= self.eng_fast || self.cn_slow >= self.cn_fast {
            return Err(Error::invalid("speaking rate thresholds must be positive with slow < fast"));
        }
        Ok(())
    }

    /// (slow/normal, normal/fast) thresholds in tokens per minute.
    pub fn thresholds(&self, eng_prop: f64, cn_prop: f64) -> (f64, f64) {
        (
            self.eng_slow * eng_prop + self.cn_slow * cn_prop,
            self.eng_fast * eng_prop + self.cn_fast * cn_prop,
        )
    }
}

/// 0 slow, 1 normal (thresholds inclusive), 2 fast; `None` without tokens or
/// duration.
pub fn speaking_rate_score(text: &str, duration: f64, params: &SpeakingRateParams) -> Option<u8> {
    if duration.is_nan() || duration <= 0.0 {
        return None;
    }
    let (eng, cn) = language_proportions(text).ok()?;
    let rate = count_tokens(text).total as f64 / (duration / 60.0);
    let (slow, fast) = params.thresholds(eng, cn);
    Some(if rate < slow {
        0
    } else if rate > fast {
        2
    } else {
        1
    })
}

/// The segment's text with one neighbour on each side, space-joined.
pub fn merge_context<S: AsRef<str>>(texts: &[S], index: usize) -> String {
    let lo = index.saturating_sub(1);
    let hi = (index + 2).min(texts.len());
    texts[lo..hi].iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

/// TRS: cosine against the topic vector, clamped to [0, 1].
pub fn topic_relevance(segment_vector: &[f64], topic_vector: &[f64]) -> Option<f64> {
    cosine(segment_vector, topic_vector).ok().map(|c| c.clamp(0.0, 1.0))
}

/// CS: signed cosine between consecutive segment vectors.
pub fn cohesion(current: &[f64], next: &[f64]) -> Option<f64> {
    cosine(current, next).ok()
}

/// Shared, read-only inputs for extraction.
pub struct Resources<'a> {
    pub glossary: &'a Glossary,
    pub english: &'a CategoryLexicon,
    pub chinese: &'a CategoryLexicon,
    pub table: &'a EmbeddingTable,
    pub translator: &'a dyn Translator,
    pub rate: SpeakingRateParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFeatures {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    pub speaker: SpeakerLabel,
    #[serde(rename = "ST")]
    pub st: f64,
    #[serde(rename = "NoW")]
    pub now: usize,
    #[serde(rename = "NoT")]
    pub not: usize,
    #[serde(rename = "SRS")]
    pub srs: Option<u8>,
    #[serde(rename = "MT")]
    pub mt: usize,
    #[serde(rename = "TRS")]
    pub trs: Option<f64>,
    #[serde(rename = "CS")]
    pub cs: Option<f64>,
    pub categories: CategoryCounts,
    pub acoustics: Option<SegmentAcoustics>,
}

pub const SPEECH_FEATURES: [&str; 7] = ["ST", "NoW", "NoT", "SRS", "MT", "TRS", "CS"];

impl SegmentFeatures {
    /// Named numeric values in a fixed order: speech, categories, acoustics.
    pub fn values(&self) -> Vec<(String, Option<f64>)> {
        let mut out: Vec<(String, Option<f64>)> = vec![
            ("ST".into(), Some(self.st)),
            ("NoW".into(), Some(self.now as f64)),
            ("NoT".into(), Some(self.not as f64)),
            ("SRS".into(), self.srs.map(f64::from)),
            ("MT".into(), Some(self.mt as f64)),
            ("TRS".into(), self.trs),
            ("CS".into(), self.cs),
        ];
        out.extend(self.categories.iter().map(|(k, v)| (k.clone(), Some(*v as f64))));
        if let Some(a) = &self.acoustics {
            out.extend(a.values.iter().map(|(k, v)| (k.clone(), *v)));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogFeatures {
    pub segments: Vec<SegmentFeatures>,
    pub diagnostics: Vec<String>,
}

/// Extracts every segment of one dialog. `topic_vector` is the week's keyword
/// vector; `frames` are acoustic rows in the dialog's time base. Failures on a
/// single segment are recorded in `diagnostics` and leave its values absent.
pub fn extract_segment_features(
    dialog: &SessionDialog,
    topic_vector: Option<&[f64]>,
    frames: Option<&FrameFeatures>,
    resources: &Resources<'_>,
) -> DialogFeatures {
    let texts: Vec<&str> = dialog.segments.iter().map(|s| s.text.as_str()).collect();
    let vectors: Vec<(Option<Vec<f64>>, Vec<String>)> = (0..texts.len())
        .into_par_iter()
        .map(|i| {
            let merged = merge_context(&texts, i);
            match resources.translator.translate(&merged) {
                Ok(t) => {
                    let tokens = tokenize_english(&t.text);
                    let v = average_vector(&tokens, resources.table);
                    let notes = t.warnings.into_iter().map(|w| format!("segment {i}: {w}")).collect();
                    (v, notes)
                }
                Err(e) => (None, vec![format!("segment {i}: translation failed: {e}")]),
            }
        })
        .collect();

    let mut diagnostics = Vec::new();
    for (_, notes) in &vectors {
        diagnostics.extend(notes.iter().cloned());
    }
    if topic_vector.is_none() {
        diagnostics.push(format!("{}: no topic vector, TRS absent", dialog.key));
    }

    let segments = dialog
        .segments
        .iter()
        .enumerate()
        .map(|(i, seg)| {
            let vec = vectors[i].0.as_deref();
            let trs = match (vec, topic_vector) {
                (Some(v), Some(t)) => topic_relevance(v, t),
                _ => None,
            };
            let cs = match (vec, vectors.get(i + 1).and_then(|n| n.0.as_deref())) {
                (Some(a), Some(b)) => cohesion(a, b),
                _ => None,
            };
            segment_record(i, seg, trs, cs, frames, resources)
        })
        .collect();
    DialogFeatures {
        segments,
        diagnostics,
    }
}

fn segment_record(
    index: usize,
    seg: &Segment,
    trs: Option<f64>,
    cs: Option<f64>,
    frames: Option<&FrameFeatures>,
    r: &Resources<'_>,
) -> SegmentFeatures {
    SegmentFeatures {
        index,
        start: seg.start,
        end: seg.end,
        speaker: seg.speaker,
        st: seg.duration(),
        now: count_tokens(&seg.text).total,
        not: 1,
        srs: speaking_rate_score(&seg.text, seg.duration(), &r.rate),
        mt: r.glossary.count_math_terms(&seg.text),
        trs,
        cs,
        categories: count_categories(&seg.text, r.english, r.chinese),
        acoustics: frames.map(|f| aggregate_segment(f, seg.start, seg.end)),
    }
}

/// Replaces raw acoustic aggregates with gender z-scores computed over every
/// segment of every dialog given. Per-dialog moments are merged in dialog
/// order, so the result does not depend on scheduling.
pub fn normalize_acoustics(dialogs: &mut [Vec<SegmentFeatures>]) -> (NormalizationStats, Vec<String>) {
    let acc = dialogs
        .par_iter()
        .map(|segs| {
            let mut a = NormalizationAccumulator::new();
            for s in segs {
                if let Some(ac) = &s.acoustics {
                    a.add(s.speaker.gender, ac);
                }
            }
            a
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(NormalizationAccumulator::new(), NormalizationAccumulator::merge);
    let stats = acc.finish();
    let mut warnings = Vec::new();
    for segs in dialogs.iter_mut() {
        for s in segs.iter_mut() {
            if let Some(ac) = &s.acoustics {
                let (n, w) = stats.normalize(s.speaker.gender, ac);
                warnings.extend(w);
                s.acoustics = Some(n);
            }
        }
    }
    warnings.sort();
    warnings.dedup();
    (stats, warnings)
}

pub fn write_features_jsonl<W: Write>(features: &[SegmentFeatures], mut out: W) -> Result<()> {
    for f in features {
        serde_json::to_writer(&mut out, f)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_features_jsonl<R: Read>(input: R) -> Result<Vec<SegmentFeatures>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Column-aligned matrix for group aggregation. Columns are the union of all
/// feature names, in first-seen order.
pub fn segment_matrix(features: &[SegmentFeatures]) -> SegmentMatrix {
    let mut names: Vec<String> = Vec::new();
    let mut pos: BTreeMap<String, usize> = BTreeMap::new();
    let rows_named: Vec<Vec<(String, Option<f64>)>> = features.iter().map(SegmentFeatures::values).collect();
    for row in &rows_named {
        for (k, _) in row {
            if !pos.contains_key(k) {
                pos.insert(k.clone(), names.len());
                names.push(k.clone());
            }
        }
    }
    let rows = rows_named
        .into_iter()
        .map(|row| {
            let mut r = vec![None; names.len()];
            for (k, v) in row {
                r[pos[&k]] = v;
            }
            r
        })
        .collect();
    SegmentMatrix {
        names,
        speakers: features.iter().map(|f| f.speaker).collect(),
        rows,
    }
}
