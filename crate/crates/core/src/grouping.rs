//! Group-level features (the 7 student/dialog aggregations), exam-derived
//! outcome scores, weekly ranks and High/Mid/Low labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{SessionKey, SpeakerLabel};
use crate::error::{Error, Result};
use crate::stats::{mean, population_variance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Aggregation {
    StudentSumMean,
    StudentSumVar,
    StudentMeanMean,
    StudentMeanVar,
    DialogSum,
    DialogMean,
    DialogVar,
}

impl Aggregation {
    pub const ALL: [Aggregation; 7] = [
        Aggregation::StudentSumMean,
        Aggregation::StudentSumVar,
        Aggregation::StudentMeanMean,
        Aggregation::StudentMeanVar,
        Aggregation::DialogSum,
        Aggregation::DialogMean,
        Aggregation::DialogVar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::StudentSumMean => "StudentSumMean",
            Aggregation::StudentSumVar => "StudentSumVar",
            Aggregation::StudentMeanMean => "StudentMeanMean",
            Aggregation::StudentMeanVar => "StudentMeanVar",
            Aggregation::DialogSum => "DialogSum",
            Aggregation::DialogMean => "DialogMean",
            Aggregation::DialogVar => "DialogVar",
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Aggregation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown aggregation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFeature {
    pub base: String,
    pub aggregation: Aggregation,
    pub value: Option<f64>,
}

impl GroupFeature {
    /// Canonical column name `<agg>__<base>`.
    pub fn name(&self) -> String {
        feature_name(self.aggregation, &self.base)
    }
}

pub fn feature_name(agg: Aggregation, base: &str) -> String {
    format!("{}__{}", agg.name(), base)
}

/// Per-segment values for one session, one row per segment, columns named by
/// base feature. `None` marks an absent value.
#[derive(Debug, Clone, Default)]
pub struct SegmentMatrix {
    pub names: Vec<String>,
    pub speakers: Vec<SpeakerLabel>,
    pub rows: Vec<Vec<Option<f64>>>,
}

/// Derives the 7 group-level aggregates for every base feature.
///
/// Student-aspect values are computed over in-group students of `roster`
/// only; dialog-aspect values over every segment, including professor, TA and
/// out-of-group speakers. Absent values are skipped; a student with no present
/// value for a feature does not contribute to that feature.
pub fn aggregate_group(matrix: &SegmentMatrix, roster: &BTreeSet<SpeakerLabel>) -> Result<Vec<GroupFeature>> {
    if roster.is_empty() {
        return Err(Error::invalid("empty roster"));
    }
    let mut out = Vec::with_capacity(matrix.names.len() * 7);
    for (col, base) in matrix.names.iter().enumerate() {
        let mut per_student: BTreeMap<SpeakerLabel, (f64, usize)> = BTreeMap::new();
        let mut dialog = Vec::new();
        for (speaker, row) in matrix.speakers.iter().zip(&matrix.rows) {
            let Some(v) = row[col] else { continue };
            dialog.push(v);
            if roster.contains(speaker) {
                let e = per_student.entry(*speaker).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        let sums: Vec<f64> = per_student.values().map(|(s, _)| *s).collect();
        let means: Vec<f64> = per_student.values().map(|(s, n)| s / *n as f64).collect();
        let opt = |xs: &[f64], f: fn(&[f64]) -> f64| (!xs.is_empty()).then(|| f(xs));
        let values = [
            opt(&sums, mean),
            opt(&sums, population_variance),
            opt(&means, mean),
            opt(&means, population_variance),
            opt(&dialog, |xs| xs.iter().sum()),
            opt(&dialog, mean),
            opt(&dialog, population_variance),
        ];
        for (aggregation, value) in Aggregation::ALL.into_iter().zip(values) {
            out.push(GroupFeature {
                base: base.clone(),
                aggregation,
                value,
            });
        }
    }
    Ok(out)
}

/// Exam-derived group learning outcome, weighting midterm 0.4 and final 0.6.
pub fn outcome_score(s_m: f64, f_m: f64, s_f: f64, f_f: f64) -> Result<f64> {
    if [s_m, f_m, s_f, f_f].iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("marks must be finite and non-negative"));
    }
    if f_m + f_f <= 0.0 {
        return Err(Error::invalid("zero full marks"));
    }
    if s_m > f_m || s_f > f_f {
        return Err(Error::invalid("earned marks exceed full marks"));
    }
    Ok((0.4 * s_m + 0.6 * s_f) / (0.4 * f_m + 0.6 * f_f))
}

/// Ranks groups of one week: the best score gets rank G, the worst rank 1.
/// Ties go to the lexicographically smaller group id.
pub fn rank_week(scores: &[(String, f64)]) -> Vec<(String, u32)> {
    let mut order: Vec<&(String, f64)> = scores.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let g = order.len() as u32;
    order
        .into_iter()
        .enumerate()
        .map(|(i, (id, _))| (id.clone(), g - i as u32))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OutcomeLabel {
    High,
    Mid,
    Low,
}

impl OutcomeLabel {
    pub const ALL: [OutcomeLabel; 3] = [OutcomeLabel::High, OutcomeLabel::Mid, OutcomeLabel::Low];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

impl fmt::Display for OutcomeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutcomeLabel::High => "High",
            OutcomeLabel::Mid => "Mid",
            OutcomeLabel::Low => "Low",
        })
    }
}

impl FromStr for OutcomeLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "High" => Ok(Self::High),
            "Mid" => Ok(Self::Mid),
            "Low" => Ok(Self::Low),
            _ => Err(Error::invalid(format!("unknown label {s:?}"))),
        }
    }
}

/// Label for a rank within a week of `g` groups: the top ⌈0.3G⌉ are High,
/// the bottom ⌈0.3G⌉ Low, the rest Mid.
pub fn label_for_rank(rank: u32, g: u32) -> Result<OutcomeLabel> {
    if g < 3 {
        return Err(Error::invalid(format!("need at least 3 groups per week, got {g}")));
    }
    if rank == 0 || rank > g {
        return Err(Error::invalid(format!("rank {rank} out of 1..={g}")));
    }
    // ceil(0.3 g) in integer arithmetic
    let band = (3 * g).div_ceil(10);
    Ok(if rank > g - band {
        OutcomeLabel::High
    } else if rank <= band {
        OutcomeLabel::Low
    } else {
        OutcomeLabel::Mid
    })
}

pub fn label_week(ranked: &[(String, u32)]) -> Result<Vec<(String, OutcomeLabel)>> {
    let g = ranked.len() as u32;
    ranked
        .iter()
        .map(|(id, r)| Ok((id.clone(), label_for_rank(*r, g)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub group_id: String,
    pub week: u32,
    pub e_s: f64,
    pub rank: u32,
    pub label: OutcomeLabel,
}

impl OutcomeRecord {
    pub fn key(&self) -> SessionKey {
        SessionKey::new(self.group_id.clone(), self.week)
    }
}

/// Ranks and labels raw scores week by week. Output is sorted by (group, week).
pub fn outcomes_from_scores(scores: &[(SessionKey, f64)]) -> Result<Vec<OutcomeRecord>> {
    let mut by_week: BTreeMap<u32, Vec<(String, f64)>> = BTreeMap::new();
    for (k, e) in scores {
        by_week.entry(k.week).or_default().push((k.group_id.clone(), *e));
    }
    let mut out = Vec::with_capacity(scores.len());
    for (week, groups) in by_week {
        let ranked = rank_week(&groups);
        let labels = label_week(&ranked)?;
        for ((id, rank), (_, label)) in ranked.into_iter().zip(labels) {
            let e_s = groups.iter().find(|(g, _)| *g == id).map(|(_, e)| *e).unwrap_or(f64::NAN);
            out.push(OutcomeRecord {
                group_id: id,
                week,
                e_s,
                rank,
                label,
            });
        }
    }
    out.sort_by_key(|o| o.key());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exam {
    Mid,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicQuestion {
    pub week: u32,
    pub exam: Exam,
    pub question_id: String,
    pub full_marks: f64,
}

pub fn read_topics_map<R: Read>(input: R) -> Result<Vec<TopicQuestion>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let rows: Vec<TopicQuestion> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    if let Some(q) = rows.iter().find(|q| q.full_marks.is_nan() || q.full_marks <= 0.0) {
        return Err(Error::invalid(format!("question {} has non-positive full marks", q.question_id)));
    }
    Ok(rows)
}

#[derive(Debug, Deserialize)]
struct MarkRow {
    exam: Exam,
    question_id: String,
    earned: f64,
}

/// Reads a group's earned marks: `exam,question_id,earned` with an optional
/// leading `student` column. Multiple rows for one question (one per member)
/// are averaged.
pub fn read_marks<R: Read>(input: R) -> Result<BTreeMap<(String, String), f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut acc: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for row in rdr.deserialize::<MarkRow>() {
        let row = row?;
        let exam = match row.exam {
            Exam::Mid => "mid",
            Exam::Final => "final",
        };
        let e = acc.entry((exam.to_string(), row.question_id)).or_insert((0.0, 0));
        e.0 += row.earned;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

/// Computes every (group, week) outcome from the topic map and per-group marks.
pub fn compute_outcomes(
    topics: &[TopicQuestion],
    marks: &BTreeMap<String, BTreeMap<(String, String), f64>>,
) -> Result<Vec<OutcomeRecord>> {
    let weeks: BTreeSet<u32> = topics.iter().map(|t| t.week).collect();
    let mut scores = Vec::new();
    for (group, group_marks) in marks {
        for &week in &weeks {
            let (mut s_m, mut f_m, mut s_f, mut f_f) = (0.0, 0.0, 0.0, 0.0);
            for q in topics.iter().filter(|t| t.week == week) {
                let exam = match q.exam {
                    Exam::Mid => "mid",
                    Exam::Final => "final",
                };
                let earned = group_marks
                    .get(&(exam.to_string(), q.question_id.clone()))
                    .copied()
                    .ok_or_else(|| {
                        Error::invalid(format!("group {group}: no marks for {exam} question {}", q.question_id))
                    })?;
                match q.exam {
                    Exam::Mid => {
                        s_m += earned;
                        f_m += q.full_marks;
                    }
                    Exam::Final => {
                        s_f += earned;
                        f_f += q.full_marks;
                    }
                }
            }
            let e = outcome_score(s_m, f_m, s_f, f_f)
                .map_err(|e| Error::invalid(format!("group {group} week {week}: {e}")))?;
            scores.push((SessionKey::new(group.clone(), week), e));
        }
    }
    outcomes_from_scores(&scores)
}

/// Loads `topics_map.csv` and every `marks_<group>.csv` in `dir`.
pub fn load_outcomes_dir(dir: &Path) -> Result<Vec<OutcomeRecord>> {
    let open = |p: &Path| {
        std::fs::File::open(p).map_err(|source| Error::File {
            path: p.to_path_buf(),
            source,
        })
    };
    let topics = read_topics_map(open(&dir.join("topics_map.csv"))?)?;
    let mut marks = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(group) = name.strip_prefix("marks_").and_then(|n| n.strip_suffix(".csv")) {
            marks.insert(group.to_string(), read_marks(open(&path)?)?);
        }
    }
    compute_outcomes(&topics, &marks)
}

pub fn write_outcomes_csv<W: Write>(records: &[OutcomeRecord], out: W, digest: Option<&str>) -> Result<()> {
    let mut out = out;
    if let Some(d) = digest {
        writeln!(out, "# config_digest={d}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group_id", "week", "e_s", "rank", "label"])?;
    for r in records {
        w.write_record([
            r.group_id.clone(),
            r.week.to_string(),
            r.e_s.to_string(),
            r.rank.to_string(),
            r.label.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_outcomes_csv<R: Read>(input: R) -> Result<(Vec<OutcomeRecord>, Option<String>)> {
    let (body, digest) = split_digest(input)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let field = |i: usize| row.get(i).ok_or_else(|| Error::invalid("short outcomes row"));
        out.push(OutcomeRecord {
            group_id: field(0)?.to_string(),
            week: field(1)?.parse().map_err(|_| Error::invalid("bad week"))?,
            e_s: field(2)?.parse().map_err(|_| Error::invalid("bad e_s"))?,
            rank: field(3)?.parse().map_err(|_| Error::invalid("bad rank"))?,
            label: field(4)?.parse()?,
        });
    }
    Ok((out, digest))
}

/// Strips a leading `# config_digest=<hex>` line if present.
pub(crate) fn split_digest<R: Read>(mut input: R) -> Result<(String, Option<String>)> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    if let Some(rest) = text.strip_prefix("# config_digest=") {
        let (digest, body) = rest.split_once('\n').unwrap_or((rest, ""));
        return Ok((body.to_string(), Some(digest.trim().to_string())));
    }
    Ok((text, None))
}

/// Sessions × group-level features, with `None` for absent cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupFeatureTable {
    pub rows: Vec<SessionKey>,
    pub columns: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl GroupFeatureTable {
    /// Assembles a rectangular table from per-session feature lists; the column
    /// set is the sorted union of names.
    pub fn from_sessions(sessions: Vec<(SessionKey, Vec<GroupFeature>)>) -> Result<Self> {
        let columns: BTreeSet<String> = sessions.iter().flat_map(|(_, f)| f.iter().map(GroupFeature::name)).collect();
        let columns: Vec<String> = columns.into_iter().collect();
        let index: BTreeMap<&str, usize> = columns.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let mut sessions = sessions;
        sessions.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rows = Vec::with_capacity(sessions.len());
        let mut values = Vec::with_capacity(sessions.len());
        for (key, feats) in sessions {
            if rows.last() == Some(&key) {
                return Err(Error::invalid(format!("duplicate session {key}")));
            }
            let mut row = vec![None; columns.len()];
            for f in feats {
                row[index[f.name().as_str()]] = f.value;
            }
            rows.push(key);
            values.push(row);
        }
        Ok(Self { rows, columns, values })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, j: usize) -> Vec<Option<f64>> {
        self.values.iter().map(|r| r[j]).collect()
    }

    pub fn select_columns(&self, names: &[String]) -> Result<Self> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| self.column_index(n).ok_or_else(|| Error::invalid(format!("unknown feature {n}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            rows: self.rows.clone(),
            columns: names.to_vec(),
            values: self.values.iter().map(|r| idx.iter().map(|&j| r[j]).collect()).collect(),
        })
    }

    pub fn write_csv<W: Write>(&self, mut out: W, digest: Option<&str>) -> Result<()> {
        if let Some(d) = digest {
            writeln!(out, "# config_digest={d}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["group_id".to_string(), "week".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (key, row) in self.rows.iter().zip(&self.values) {
            let mut rec = vec![key.group_id.clone(), key.week.to_string()];
            rec.extend(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<(Self, Option<String>)> {
        let (body, digest) = split_digest(input)?;
        let mut rdr = csv::ReaderBuilder::new().from_reader(body.as_bytes());
        let header = rdr.headers()?.clone();
        if header.len() < 2 || &header[0] != "group_id" || &header[1] != "week" {
            return Err(Error::invalid("feature table header must start with group_id,week"));
        }
        let columns: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
        let unique: BTreeSet<&String> = columns.iter().collect();
        if unique.len() != columns.len() {
            return Err(Error::invalid("duplicate feature column"));
        }
        let mut table = Self {
            columns,
            ..Self::default()
        };
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            if rec.len() != header.len() {
                return Err(Error::parse(line, "row width differs from header"));
            }
            let week = rec[1].parse().map_err(|_| Error::parse(line, "bad week"))?;
            table.rows.push(SessionKey::new(&rec[0], week));
            let row = rec
                .iter()
                .skip(2)
                .map(|c| {
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        c.parse::<f64>().map(Some).map_err(|_| Error::parse(line, format!("bad number {c:?}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            table.values.push(row);
        }
        Ok((table, digest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Gender;
    use proptest::prelude::*;

    fn sm(i: u32) -> SpeakerLabel {
        SpeakerLabel::student(Gender::Male, i)
    }

    fn get(feats: &[GroupFeature], agg: Aggregation) -> Option<f64> {
        feats.iter().find(|f| f.aggregation == agg).unwrap().value
    }

    #[test]
    fn student_and_dialog_aggregates() {
        let a = sm(1);
        let b = sm(2);
        let matrix = SegmentMatrix {
            names: vec!["MT".into()],
            speakers: vec![a, b, a, b, a],
            rows: [2.0, 1.0, 0.0, 1.0, 4.0].iter().map(|v| vec![Some(*v)]).collect(),
        };
        let roster = [a, b].into();
        let f = aggregate_group(&matrix, &roster).unwrap();
        let close = |x: Option<f64>, y: f64| (x.unwrap() - y).abs() <= 1e-9 * y.abs().max(1.0);
        assert!(close(get(&f, Aggregation::StudentSumMean), 4.0));
        assert!(close(get(&f, Aggregation::StudentSumVar), 4.0));
        assert!(close(get(&f, Aggregation::StudentMeanMean), 1.5));
        assert!(close(get(&f, Aggregation::StudentMeanVar), 0.25));
        assert!(close(get(&f, Aggregation::DialogSum), 8.0));
        assert!(close(get(&f, Aggregation::DialogMean), 1.6));
        assert!(close(get(&f, Aggregation::DialogVar), 1.84));
        assert_eq!(f[0].name(), "StudentSumMean__MT");
    }

    #[test]
    fn staff_only_in_dialog_aspect() {
        let a = sm(1);
        let ta: SpeakerLabel = "TF1".parse().unwrap();
        let matrix = SegmentMatrix {
            names: vec!["MT".into()],
            speakers: vec![a, ta],
            rows: vec![vec![Some(1.0)], vec![Some(5.0)]],
        };
        let f = aggregate_group(&matrix, &[a].into()).unwrap();
        assert_eq!(get(&f, Aggregation::StudentSumMean), Some(1.0));
        assert_eq!(get(&f, Aggregation::StudentSumVar), Some(0.0));
        assert_eq!(get(&f, Aggregation::DialogSum), Some(6.0));
    }

    #[test]
    fn absent_values_are_masked() {
        let a = sm(1);
        let b = sm(2);
        let matrix = SegmentMatrix {
            names: vec!["TRS".into()],
            speakers: vec![a, b, a],
            rows: vec![vec![Some(0.5)], vec![None], vec![None]],
        };
        let f = aggregate_group(&matrix, &[a, b].into()).unwrap();
        assert_eq!(get(&f, Aggregation::StudentSumMean), Some(0.5));
        assert_eq!(get(&f, Aggregation::DialogMean), Some(0.5));
        let none = SegmentMatrix {
            names: vec!["TRS".into()],
            speakers: vec![a],
            rows: vec![vec![None]],
        };
        let f = aggregate_group(&none, &[a].into()).unwrap();
        assert!(f.iter().all(|g| g.value.is_none()));
        assert!(aggregate_group(&none, &BTreeSet::new()).is_err());
    }

    #[test]
    fn constant_input_zero_variance() {
        let a = sm(1);
        let b = sm(2);
        let matrix = SegmentMatrix {
            names: vec!["X".into()],
            speakers: vec![a, b, a, b],
            rows: vec![vec![Some(3.0)]; 4],
        };
        let f = aggregate_group(&matrix, &[a, b].into()).unwrap();
        assert_eq!(get(&f, Aggregation::StudentSumMean), Some(6.0));
        assert_eq!(get(&f, Aggregation::StudentMeanMean), Some(3.0));
        assert_eq!(get(&f, Aggregation::DialogMean), Some(3.0));
        for agg in [Aggregation::StudentSumVar, Aggregation::StudentMeanVar, Aggregation::DialogVar] {
            assert_eq!(get(&f, agg), Some(0.0));
        }
    }

    #[test]
    fn outcome_scores() {
        assert_eq!(outcome_score(20.0, 20.0, 30.0, 30.0).unwrap(), 1.0);
        assert_eq!(outcome_score(0.0, 20.0, 0.0, 30.0).unwrap(), 0.0);
        assert!((outcome_score(10.0, 20.0, 15.0, 30.0).unwrap() - 0.5).abs() <= 1e-9 * 0.5);
        assert!(outcome_score(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(outcome_score(21.0, 20.0, 0.0, 30.0).is_err());
        // final-only topics
        assert_eq!(outcome_score(0.0, 0.0, 3.0, 6.0).unwrap(), 0.5);
    }

    #[test]
    fn ranking_and_ties() {
        let scores: Vec<(String, f64)> = (0..10).map(|i| (format!("g{i}"), i as f64 / 10.0)).collect();
        let ranked = rank_week(&scores);
        let mut ranks: Vec<u32> = ranked.iter().map(|r| r.1).collect();
        ranks.sort();
        assert_eq!(ranks, (1..=10).collect::<Vec<_>>());
        assert_eq!(ranked[0], ("g9".to_string(), 10));

        let tied = vec![("b".to_string(), 0.9), ("a".to_string(), 0.9), ("c".to_string(), 0.1)];
        let ranked = rank_week(&tied);
        assert_eq!(ranked, vec![("a".into(), 3), ("b".into(), 2), ("c".into(), 1)]);
    }

    #[test]
    fn week_labels() {
        let count = |g: u32| {
            let mut c = [0; 3];
            for r in 1..=g {
                c[label_for_rank(r, g).unwrap().index()] += 1;
            }
            c
        };
        assert_eq!(count(10), [3, 4, 3]);
        assert_eq!(count(3), [1, 1, 1]);
        assert_eq!(count(7), [3, 1, 3]);
        assert!(label_for_rank(1, 2).is_err());
        assert_eq!(label_for_rank(10, 10).unwrap(), OutcomeLabel::High);
        assert_eq!(label_for_rank(1, 10).unwrap(), OutcomeLabel::Low);
    }

    #[test]
    fn nine_weeks_of_ten_groups_split_27_36_27() {
        let mut scores = Vec::new();
        for w in 1..=9 {
            for g in 0..10 {
                scores.push((SessionKey::new(format!("g{g:02}"), w), ((g * 7 + w * 3) % 11) as f64));
            }
        }
        let out = outcomes_from_scores(&scores).unwrap();
        let mut c = [0; 3];
        for r in &out {
            c[r.label.index()] += 1;
        }
        assert_eq!(c, [27, 36, 27]);
    }

    #[test]
    fn outcomes_from_exam_files() {
        let topics = "week,exam,question_id,full_marks\n1,mid,q1,20\n1,final,q10,30\n2,final,q15,10\n";
        let topics = read_topics_map(topics.as_bytes()).unwrap();
        let mut marks = BTreeMap::new();
        for (g, m1, f10, f15) in [("a", 10.0, 15.0, 10.0), ("b", 20.0, 30.0, 5.0), ("c", 0.0, 0.0, 0.0)] {
            let csv = format!("student,exam,question_id,earned\ns1,mid,q1,{m1}\ns2,mid,q1,{m1}\ns1,final,q10,{f10}\ns1,final,q15,{f15}\n");
            marks.insert(g.to_string(), read_marks(csv.as_bytes()).unwrap());
        }
        let out = compute_outcomes(&topics, &marks).unwrap();
        assert_eq!(out.len(), 6);
        let a1 = out.iter().find(|r| r.group_id == "a" && r.week == 1).unwrap();
        assert!((a1.e_s - 0.5).abs() < 1e-12);
        assert_eq!(a1.rank, 2);
        let b2 = out.iter().find(|r| r.group_id == "b" && r.week == 2).unwrap();
        assert_eq!((b2.e_s, b2.rank), (0.5, 2));

        let mut buf = Vec::new();
        write_outcomes_csv(&out, &mut buf, Some("abc")).unwrap();
        let (back, digest) = read_outcomes_csv(buf.as_slice()).unwrap();
        assert_eq!(back, out);
        assert_eq!(digest.as_deref(), Some("abc"));
    }

    #[test]
    fn table_csv_round_trip_keeps_absence() {
        let k1 = SessionKey::new("g1", 1);
        let k2 = SessionKey::new("g2", 1);
        let f = |b: &str, v| GroupFeature {
            base: b.into(),
            aggregation: Aggregation::DialogSum,
            value: v,
        };
        let table = GroupFeatureTable::from_sessions(vec![
            (k2.clone(), vec![f("MT", Some(2.5)), f("TRS", None)]),
            (k1.clone(), vec![f("MT", Some(-0.125)), f("TRS", Some(0.1))]),
        ])
        .unwrap();
        assert_eq!(table.rows, vec![k1, k2]);
        let mut buf = Vec::new();
        table.write_csv(&mut buf, None).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("group_id,week,DialogSum__MT,DialogSum__TRS\n"));
        assert!(text.contains("g2,1,2.5,\n"));
        let (back, digest) = GroupFeatureTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, table);
        assert!(digest.is_none());
    }

    proptest! {
        #[test]
        fn outcome_monotone_and_scale_invariant(
            f_m in 1.0f64..50.0, f_f in 1.0f64..50.0,
            a in 0.0f64..1.0, b in 0.0f64..1.0, bump in 0.0f64..1.0, k in 0.1f64..10.0
        ) {
            let (s_m, s_f) = (a * f_m, b * f_f);
            let e = outcome_score(s_m, f_m, s_f, f_f).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            let s_m2 = s_m + bump * (f_m - s_m);
            prop_assert!(outcome_score(s_m2, f_m, s_f, f_f).unwrap() >= e - 1e-15);
            let scaled = outcome_score(k * s_m, k * f_m, k * s_f, k * f_f).unwrap();
            prop_assert!((scaled - e).abs() < 1e-12);
        }

        #[test]
        fn student_sum_mean_times_roster(values in proptest::collection::vec((0usize..3, 0.0f64..10.0), 1..30)) {
            let speakers: Vec<SpeakerLabel> = values.iter().map(|(s, _)| sm(*s as u32 + 1)).collect();
            let roster: BTreeSet<SpeakerLabel> = speakers.iter().copied().collect();
            let matrix = SegmentMatrix {
                names: vec!["X".into()],
                speakers: speakers.clone(),
                rows: values.iter().map(|(_, v)| vec![Some(*v)]).collect(),
            };
            let f = aggregate_group(&matrix, &roster).unwrap();
            let total: f64 = values.iter().map(|(_, v)| v).sum();
            let ssm = get(&f, Aggregation::StudentSumMean).unwrap();
            prop_assert!((ssm * roster.len() as f64 - total).abs() < 1e-9);
            for agg in [Aggregation::StudentSumVar, Aggregation::StudentMeanVar, Aggregation::DialogVar] {
                prop_assert!(get(&f, agg).unwrap() >= 0.0);
            }
        }
    }
}
