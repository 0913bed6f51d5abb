//! Diarized bilingual transcripts: speaker labels, segments, sessions, and
//! the code-switched token counting rule (English in words, Chinese in
//! characters, punctuation ignored).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{read_file, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    InGroupStudent,
    Professor,
    TeachingAssistant,
    OutOfGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

/// A generic speaker identifier such as `SM1`, `TF2`, `OM1` or `P`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SpeakerLabel {
    pub role: Role,
    pub gender: Gender,
    /// `None` only for the professor.
    pub index: Option<u32>,
}

impl SpeakerLabel {
    pub fn student(gender: Gender, index: u32) -> Self {
        Self {
            role: Role::InGroupStudent,
            gender,
            index: Some(index),
        }
    }

    pub fn professor() -> Self {
        Self {
            role: Role::Professor,
            gender: Gender::Unknown,
            index: None,
        }
    }

    pub fn is_in_group(&self) -> bool {
        self.role == Role::InGroupStudent
    }
}

impl FromStr for SpeakerLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::SpeakerLabel(s.to_string());
        if s == "P" {
            return Ok(Self::professor());
        }
        let mut chars = s.chars();
        let role = match chars.next() {
            Some('S') => Role::InGroupStudent,
            Some('T') => Role::TeachingAssistant,
            Some('O') => Role::OutOfGroup,
            _ => return Err(bad()),
        };
        let gender = match chars.next() {
            Some('M') => Gender::Male,
            Some('F') => Gender::Female,
            _ => return Err(bad()),
        };
        let digits = chars.as_str();
        if digits.is_empty() || digits.starts_with('0') || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let index: u32 = digits.parse().map_err(|_| bad())?;
        Ok(Self {
            role,
            gender,
            index: Some(index),
        })
    }
}

impl fmt::Display for SpeakerLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let role = match self.role {
            Role::Professor => return f.write_str("P"),
            Role::InGroupStudent => 'S',
            Role::TeachingAssistant => 'T',
            Role::OutOfGroup => 'O',
        };
        let gender = match self.gender {
            Gender::Male => 'M',
            Gender::Female => 'F',
            Gender::Unknown => '?',
        };
        write!(f, "{role}{gender}{}", self.index.unwrap_or(0))
    }
}

impl Serialize for SpeakerLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SpeakerLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub speaker: SpeakerLabel,
    pub text: String,
}

impl Segment {
    pub fn new(start: f64, end: f64, speaker: SpeakerLabel, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if !start.is_finite() || !end.is_finite() || start < 0.0 {
            return Err(Error::invalid(format!("bad segment times {start}..{end}")));
        }
        if end <= start {
            return Err(Error::invalid(format!(
                "zero or negative duration segment {start}..{end}"
            )));
        }
        if text.trim().is_empty() {
            return Err(Error::invalid("empty segment text"));
        }
        Ok(Self {
            start,
            end,
            speaker,
            text,
        })
    }

    /// Speech time in seconds.
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranscriptFormat {
    Jsonl,
    Tsv,
}

impl FromStr for TranscriptFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(Self::Jsonl),
            "tsv" => Ok(Self::Tsv),
            other => Err(Error::invalid(format!("unknown transcript format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionKey {
    pub group_id: String,
    pub week: u32,
}

impl SessionKey {
    pub fn new(group_id: impl Into<String>, week: u32) -> Self {
        Self {
            group_id: group_id.into(),
            week,
        }
    }

    /// Parses `<group_id>_week<NN>.jsonl` (or `.tsv`).
    pub fn from_file_name(name: &str) -> Result<Self> {
        let stem = name
            .strip_suffix(".jsonl")
            .or_else(|| name.strip_suffix(".tsv"))
            .ok_or_else(|| Error::invalid(format!("not a transcript file name: {name}")))?;
        let (group, week) = stem
            .rsplit_once("_week")
            .ok_or_else(|| Error::invalid(format!("missing _week<NN> in {name}")))?;
        let week: u32 = week
            .parse()
            .map_err(|_| Error::invalid(format!("bad week number in {name}")))?;
        if group.is_empty() || week == 0 {
            return Err(Error::invalid(format!("bad session file name {name}")));
        }
        Ok(Self::new(group, week))
    }

    pub fn file_name(&self) -> String {
        format!("{}_week{:02}.jsonl", self.group_id, self.week)
    }
}

impl fmt::Display for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/week{}", self.group_id, self.week)
    }
}

/// One group's discussion for one week.
#[derive(Debug, Clone)]
pub struct SessionDialog {
    pub key: SessionKey,
    pub segments: Vec<Segment>,
    pub roster: BTreeSet<SpeakerLabel>,
    /// Non-fatal validation findings gathered while building the session.
    pub warnings: Vec<String>,
}

impl PartialEq for SessionDialog {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key && self.segments == other.segments && self.roster == other.roster
    }
}

impl SessionDialog {
    /// Builds a session, sorting segments by start time. The roster defaults to
    /// every in-group student that speaks.
    pub fn new(key: SessionKey, mut segments: Vec<Segment>, roster: Option<BTreeSet<SpeakerLabel>>) -> Result<Self> {
        let mut warnings = Vec::new();
        if segments.windows(2).any(|w| w[1].start < w[0].start) {
            warnings.push("segments out of start-time order; sorted".to_string());
            segments.sort_by(|a, b| a.start.total_cmp(&b.start));
        }
        let speaking: BTreeSet<SpeakerLabel> = segments
            .iter()
            .map(|s| s.speaker)
            .filter(SpeakerLabel::is_in_group)
            .collect();
        let roster = match roster {
            Some(r) => {
                if let Some(bad) = r.iter().find(|l| !speaking.contains(l)) {
                    return Err(Error::invalid(format!(
                        "{key}: roster member {bad} is not an in-group speaker of this session"
                    )));
                }
                r
            }
            None => speaking,
        };
        for w in segments.windows(2) {
            if w[0].speaker == w[1].speaker && w[1].start - w[0].end <= 1.0 && w[1].start >= w[0].end {
                warnings.push(format!(
                    "segments at {} and {} share speaker {} with a pause of at most 1 s",
                    w[0].start, w[1].start, w[0].speaker
                ));
            }
        }
        for w in &warnings {
            log::warn!(target: "parse", "session={key} warning={w:?}");
        }
        Ok(Self {
            key,
            segments,
            roster,
            warnings,
        })
    }

    pub fn write_jsonl<W: Write>(&self, out: W) -> Result<()> {
        write_jsonl(&self.segments, out)
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    start: f64,
    end: f64,
    speaker: String,
    text: String,
}

fn record_to_segment(line: usize, r: Record) -> Result<Segment> {
    let speaker: SpeakerLabel = r
        .speaker
        .parse()
        .map_err(|_| Error::parse(line, format!("unparsable speaker label {:?}", r.speaker)))?;
    Segment::new(r.start, r.end, speaker, r.text).map_err(|e| Error::parse(line, e.to_string()))
}

/// Parses transcript records, rejecting (never dropping) invalid ones.
pub fn parse_segments<R: Read>(input: R, format: TranscriptFormat) -> Result<Vec<Segment>> {
    let reader = BufReader::new(input);
    let mut segments = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::parse(lineno, format!("unreadable line: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = match format {
            TranscriptFormat::Jsonl => serde_json::from_str::<Record>(&line)
                .map_err(|e| Error::parse(lineno, format!("malformed record: {e}")))?,
            TranscriptFormat::Tsv => {
                let fields: Vec<&str> = line.splitn(4, '\t').collect();
                if fields.len() != 4 {
                    return Err(Error::parse(lineno, "malformed record: expected 4 tab-separated fields"));
                }
                if lineno == 1 && fields[0] == "start" {
                    continue;
                }
                let num = |s: &str| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::parse(lineno, format!("malformed record: bad number {s:?}")))
                };
                Record {
                    start: num(fields[0])?,
                    end: num(fields[1])?,
                    speaker: fields[2].trim().to_string(),
                    text: fields[3].to_string(),
                }
            }
        };
        let dup_key = (record.start.to_bits(), record.end.to_bits(), record.speaker.clone(), record.text.clone());
        let segment = record_to_segment(lineno, record)?;
        if !seen.insert(dup_key) {
            return Err(Error::parse(lineno, "duplicate record"));
        }
        segments.push(segment);
    }
    Ok(segments)
}

/// Parses and validates one session transcript.
pub fn parse_transcript<R: Read>(input: R, format: TranscriptFormat, key: SessionKey) -> Result<SessionDialog> {
    SessionDialog::new(key, parse_segments(input, format)?, None)
}

pub fn write_jsonl<W: Write>(segments: &[Segment], mut out: W) -> Result<()> {
    for s in segments {
        let rec = Record {
            start: s.start,
            end: s.end,
            speaker: s.speaker.to_string(),
            text: s.text.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Roster sidecar: group id → in-group speaker labels.
pub type Rosters = BTreeMap<String, BTreeSet<SpeakerLabel>>;

pub fn load_rosters(path: &Path) -> Result<Rosters> {
    Ok(serde_json::from_str(&read_file(path)?)?)
}

/// Loads every `<group>_week<NN>.jsonl` / `.tsv` transcript in `dir`, sorted by key.
/// A group's roster, when present, is intersected with the session's speakers.
pub fn load_corpus_dir(dir: &Path, rosters: Option<&Rosters>) -> Result<Vec<SessionDialog>> {
    let mut files: Vec<(SessionKey, PathBuf, TranscriptFormat)> = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|source| Error::File {
        path: dir.to_path_buf(),
        source,
    })? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let format = if name.ends_with(".jsonl") {
            TranscriptFormat::Jsonl
        } else if name.ends_with(".tsv") {
            TranscriptFormat::Tsv
        } else {
            continue;
        };
        files.push((SessionKey::from_file_name(name)?, path, format));
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    let mut sessions = Vec::with_capacity(files.len());
    for (key, path, format) in files {
        let file = std::fs::File::open(&path).map_err(|source| Error::File {
            path: path.clone(),
            source,
        })?;
        let segments = parse_segments(file, format).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let roster = rosters.and_then(|r| r.get(&key.group_id)).map(|r| {
            r.iter()
                .filter(|l| segments.iter().any(|s| s.speaker == **l))
                .copied()
                .collect::<BTreeSet<_>>()
        });
        sessions.push(SessionDialog::new(key, segments, roster)?);
    }
    Ok(sessions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenCount {
    pub english_words: usize,
    pub chinese_chars: usize,
    pub total: usize,
}

impl std::ops::Add for TokenCount {
    type Output = TokenCount;
    fn add(self, o: TokenCount) -> TokenCount {
        TokenCount {
            english_words: self.english_words + o.english_words,
            chinese_chars: self.chinese_chars + o.chinese_chars,
            total: self.total + o.total,
        }
    }
}

/// CJK Unified Ideographs, including the extension blocks.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF
        | 0x3400..=0x4DBF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EBEF
        | 0x30000..=0x3134F)
}

/// ASCII letters and digits plus the Latin-1/Latin Extended letters.
pub fn is_latin_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric()
        || (matches!(c as u32, 0x00C0..=0x024F) && c != '\u{00D7}' && c != '\u{00F7}')
}

pub fn count_tokens(text: &str) -> TokenCount {
    let mut english_words = 0;
    let mut chinese_chars = 0;
    let mut in_word = false;
    for c in text.chars() {
        if is_latin_word_char(c) {
            if !in_word {
                english_words += 1;
                in_word = true;
            }
            continue;
        }
        in_word = false;
        if is_cjk(c) {
            chinese_chars += 1;
        }
    }
    TokenCount {
        english_words,
        chinese_chars,
        total: english_words + chinese_chars,
    }
}

/// Latin word runs of `text`, in order.
pub fn latin_words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !is_latin_word_char(c)).filter(|w| !w.is_empty())
}

/// Fractions of English words and Chinese characters in `text`.
pub fn language_proportions(text: &str) -> Result<(f64, f64)> {
    let counts = count_tokens(text);
    if counts.total == 0 {
        return Err(Error::NoTokens);
    }
    let eng = counts.english_words as f64 / counts.total as f64;
    Ok((eng, 1.0 - eng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key() -> SessionKey {
        SessionKey::new("g1", 1)
    }

    #[test]
    fn speaker_labels_round_trip() {
        for s in ["SM1", "SF2", "TM1", "TF1", "P", "OM1", "OF1", "SM12"] {
            let label: SpeakerLabel = s.parse().unwrap();
            assert_eq!(label.to_string(), s);
        }
        let p: SpeakerLabel = "P".parse().unwrap();
        assert_eq!(p.role, Role::Professor);
        assert_eq!(p.gender, Gender::Unknown);
        assert_eq!(p.index, None);
        for bad in ["", "S", "SM", "SM0", "SM01", "XM1", "SX1", "P1", "sm1", "SM1a"] {
            assert!(bad.parse::<SpeakerLabel>().is_err(), "{bad}");
        }
    }

    #[test]
    fn parses_jsonl_record() {
        let input = r#"{"start": 0.0, "end": 2.5, "speaker": "SM1", "text": "我們 solve question one"}"#;
        let d = parse_transcript(input.as_bytes(), TranscriptFormat::Jsonl, key()).unwrap();
        assert_eq!(d.segments.len(), 1);
        let s = &d.segments[0];
        assert_eq!((s.start, s.end), (0.0, 2.5));
        assert_eq!(s.speaker, SpeakerLabel::student(Gender::Male, 1));
        assert_eq!(s.text, "我們 solve question one");
    }

    #[test]
    fn parses_tsv_with_header() {
        let input = "start\tend\tspeaker\ttext\n0.0\t2.5\tP\tok everyone\n";
        let d = parse_transcript(input.as_bytes(), TranscriptFormat::Tsv, key()).unwrap();
        assert_eq!(d.segments[0].speaker, SpeakerLabel::professor());
    }

    #[test]
    fn rejects_bad_records() {
        let zero = r#"{"start": 3.0, "end": 3.0, "speaker": "SF1", "text": "ok"}"#;
        let err = parse_transcript(zero.as_bytes(), TranscriptFormat::Jsonl, key()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");

        let bad_speaker = "{\"start\": 0.0, \"end\": 1.0, \"speaker\": \"SM1\", \"text\": \"a\"}\n\
                           {\"start\": 1.0, \"end\": 2.0, \"speaker\": \"Q9\", \"text\": \"b\"}";
        let err = parse_transcript(bad_speaker.as_bytes(), TranscriptFormat::Jsonl, key()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

        let malformed = "{\"start\": 0.0";
        assert!(parse_transcript(malformed.as_bytes(), TranscriptFormat::Jsonl, key()).is_err());

        let dup = "{\"start\": 0.0, \"end\": 1.0, \"speaker\": \"SM1\", \"text\": \"a\"}\n\
                   {\"start\": 0.0, \"end\": 1.0, \"speaker\": \"SM1\", \"text\": \"a\"}";
        let err = parse_transcript(dup.as_bytes(), TranscriptFormat::Jsonl, key()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

        let blank = r#"{"start": 0.0, "end": 1.0, "speaker": "SM1", "text": "   "}"#;
        assert!(parse_transcript(blank.as_bytes(), TranscriptFormat::Jsonl, key()).is_err());
    }

    #[test]
    fn sorts_and_warns() {
        let input = "{\"start\": 5.0, \"end\": 6.0, \"speaker\": \"SM1\", \"text\": \"b\"}\n\
                     {\"start\": 0.0, \"end\": 1.0, \"speaker\": \"SM1\", \"text\": \"a\"}\n\
                     {\"start\": 5.5, \"end\": 7.0, \"speaker\": \"SM1\", \"text\": \"overlapping c\"}";
        let d = parse_transcript(input.as_bytes(), TranscriptFormat::Jsonl, key()).unwrap();
        let starts: Vec<f64> = d.segments.iter().map(|s| s.start).collect();
        assert_eq!(starts, vec![0.0, 5.0, 5.5]);
        assert!(d.warnings.iter().any(|w| w.contains("sorted")));
        // 5.0..6.0 then 5.5 overlaps: not a pause, so no same-speaker warning for it
        assert_eq!(d.warnings.len(), 1);

        let close = "{\"start\": 0.0, \"end\": 1.0, \"speaker\": \"SM1\", \"text\": \"a\"}\n\
                     {\"start\": 1.5, \"end\": 2.0, \"speaker\": \"SM1\", \"text\": \"b\"}";
        let d = parse_transcript(close.as_bytes(), TranscriptFormat::Jsonl, key()).unwrap();
        assert_eq!(d.warnings.len(), 1);
    }

    #[test]
    fn roster_must_be_speaking_students() {
        let seg = Segment::new(0.0, 1.0, SpeakerLabel::student(Gender::Female, 1), "hi").unwrap();
        let ok: BTreeSet<_> = [SpeakerLabel::student(Gender::Female, 1)].into();
        assert!(SessionDialog::new(key(), vec![seg.clone()], Some(ok)).is_ok());
        let bad: BTreeSet<_> = [SpeakerLabel::student(Gender::Male, 2)].into();
        assert!(SessionDialog::new(key(), vec![seg], Some(bad)).is_err());
    }

    #[test]
    fn session_file_names() {
        let k = SessionKey::from_file_name("angry_bird_week09.jsonl").unwrap();
        assert_eq!(k, SessionKey::new("angry_bird", 9));
        assert_eq!(k.file_name(), "angry_bird_week09.jsonl");
        assert!(SessionKey::from_file_name("g1.jsonl").is_err());
    }

    #[test]
    fn token_counting() {
        let c = count_tokens("solve 方程");
        assert_eq!((c.english_words, c.chinese_chars, c.total), (1, 2, 3));
        assert_eq!(count_tokens(""), TokenCount::default());
        let c = count_tokens("x + y = 4");
        assert_eq!((c.english_words, c.chinese_chars, c.total), (3, 0, 3));
        let c = count_tokens("我們，solve！2x。");
        assert_eq!((c.english_words, c.chinese_chars), (2, 2));
    }

    #[test]
    fn proportions() {
        let (e, c) = language_proportions("solve 方程").unwrap();
        assert!((e - 1.0 / 3.0).abs() < 1e-15 && (c - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(language_proportions("all english here").unwrap(), (1.0, 0.0));
        assert!(matches!(language_proportions("！？"), Err(Error::NoTokens)));
    }

    fn text_strategy() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            prop_oneof![
                "[a-zA-Z0-9]{1,6}",
                "[\u{4e00}-\u{9fa5}]{1,4}",
                Just(" ".to_string()),
                Just("，".to_string()),
                Just("+".to_string()),
            ],
            0..12,
        )
        .prop_map(|parts| parts.concat())
    }

    proptest! {
        #[test]
        fn counts_additive_over_space(a in text_strategy(), b in text_strategy()) {
            prop_assert_eq!(count_tokens(&format!("{a} {b}")), count_tokens(&a) + count_tokens(&b));
        }

        #[test]
        fn proportions_sum_to_one(t in text_strategy()) {
            if let Ok((e, c)) = language_proportions(&t) {
                prop_assert!((e + c - 1.0).abs() <= f64::EPSILON);
            }
        }

        #[test]
        fn jsonl_round_trip(
            recs in proptest::collection::vec((0.0f64..1e4, 0.01f64..30.0, 0usize..4, "[a-z ]{0,8}[a-z]"), 1..10)
        ) {
            let labels = ["SM1", "SF2", "P", "TM1"];
            let segments: Vec<Segment> = recs
                .iter()
                .map(|(s, d, l, t)| Segment::new(*s, s + d, labels[*l].parse().unwrap(), t.clone()).unwrap())
                .collect();
            let mut buf = Vec::new();
            write_jsonl(&segments, &mut buf).unwrap();
            let first = parse_transcript(buf.as_slice(), TranscriptFormat::Jsonl, key()).unwrap();
            let mut again = Vec::new();
            first.write_jsonl(&mut again).unwrap();
            let second = parse_transcript(again.as_slice(), TranscriptFormat::Jsonl, key()).unwrap();
            prop_assert_eq!(first, second);
        }
    }
}
