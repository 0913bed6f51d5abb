//! Lexicon-driven measurements: math glossary hits, LIWC-style bilingual
//! category counts, and translation of Chinese spans to English.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};

use crate::corpus::{is_cjk, is_latin_word_char, latin_words};
use crate::error::{Error, Result};

/// The categories used for social/cognitive dialog measurements.
pub const CATEGORIES: [&str; 19] = [
    "PE", "NE", "Anger", "Anxiety", "Risk", "Assent", "Negation", "Affect", "Tent", "Cert", "Insight", "Caus",
    "Conj", "Filler", "Int", "Diff", "Comp", "QU", "Leisure",
];

const DEMO_GLOSSARY: &str = include_str!("../data/glossary.txt");
const DEMO_LIWC_EN: &str = include_str!("../data/liwc_en.dic");
const DEMO_LIWC_ZH: &str = include_str!("../data/liwc_zh.dic");
const DEMO_TRANSLATIONS: &str = include_str!("../data/zh_en.tsv");

fn normalize_term(s: &str) -> Vec<char> {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .chars()
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Bilingual math-term glossary, matched longest-first.
#[derive(Debug, Clone, Default)]
pub struct Glossary {
    terms: HashSet<Vec<char>>,
    max_len: usize,
}

impl Glossary {
    pub fn new<I, S>(terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut g = Glossary::default();
        for t in terms {
            let t = normalize_term(t.as_ref());
            if t.is_empty() {
                return Err(Error::invalid("empty glossary term"));
            }
            g.max_len = g.max_len.max(t.len());
            g.terms.insert(t);
        }
        Ok(g)
    }

    /// One term per line; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn demo() -> Self {
        Self::parse(DEMO_GLOSSARY).expect("bundled glossary is valid")
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Non-overlapping matches scanning left to right, longest first. Latin
    /// terms must sit on word boundaries; CJK terms match as substrings.
    pub fn matches(&self, text: &str) -> Vec<(usize, usize)> {
        let chars = normalize_term(text);
        let mut found = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let longest = self.max_len.min(chars.len() - i);
            let hit = (1..=longest).rev().find(|&len| {
                let span = &chars[i..i + len];
                if !self.terms.contains(span) {
                    return false;
                }
                let starts_ok = !is_latin_word_char(span[0]) || i == 0 || !is_latin_word_char(chars[i - 1]);
                let ends_ok = !is_latin_word_char(span[len - 1])
                    || i + len == chars.len()
                    || !is_latin_word_char(chars[i + len]);
                starts_ok && ends_ok
            });
            match hit {
                Some(len) => {
                    found.push((i, len));
                    i += len;
                }
                None => i += 1,
            }
        }
        found
    }

    pub fn count_math_terms(&self, text: &str) -> usize {
        self.matches(text).len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LexiconLanguage {
    English,
    Chinese,
}

/// A LIWC-shaped lexicon: `%`-delimited header of `id name` lines, then
/// `pattern<TAB>id[ id...]` entries where `stem*` is a prefix pattern.
#[derive(Debug, Clone)]
pub struct CategoryLexicon {
    pub language: LexiconLanguage,
    categories: Vec<String>,
    exact: HashMap<String, BTreeSet<usize>>,
    prefixes: Vec<(String, BTreeSet<usize>)>,
}

impl CategoryLexicon {
    pub fn parse(text: &str, language: LexiconLanguage) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, l)) if l.trim() == "%" => {}
            _ => return Err(Error::parse(1, "lexicon must start with a % line")),
        }
        let mut ids: HashMap<String, usize> = HashMap::new();
        let mut categories = Vec::new();
        for (i, line) in lines.by_ref() {
            let line = line.trim();
            if line == "%" {
                break;
            }
            let mut parts = line.split_whitespace();
            let (Some(id), Some(name)) = (parts.next(), parts.next()) else {
                return Err(Error::parse(i + 1, "expected `id name` in lexicon header"));
            };
            ids.insert(id.to_string(), categories.len());
            categories.push(name.to_string());
        }
        let mut lex = Self {
            language,
            categories,
            exact: HashMap::new(),
            prefixes: Vec::new(),
        };
        let mut prefixes: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        for (i, line) in lines {
            let mut parts = line.split('\t');
            let pattern = parts.next().unwrap_or_default().trim().to_lowercase();
            let cats: BTreeSet<usize> = parts
                .flat_map(str::split_whitespace)
                .map(|id| {
                    ids.get(id)
                        .copied()
                        .ok_or_else(|| Error::parse(i + 1, format!("unknown category id {id}")))
                })
                .collect::<Result<_>>()?;
            if pattern.is_empty() || pattern == "*" {
                return Err(Error::parse(i + 1, "empty pattern"));
            }
            if cats.is_empty() {
                return Err(Error::parse(i + 1, format!("pattern {pattern:?} has no category")));
            }
            match pattern.strip_suffix('*') {
                Some(stem) => prefixes.entry(stem.to_string()).or_default().extend(cats),
                None => lex.exact.entry(pattern).or_default().extend(cats),
            }
        }
        lex.prefixes = prefixes.into_iter().collect();
        Ok(lex)
    }

    pub fn demo_english() -> Self {
        Self::parse(DEMO_LIWC_EN, LexiconLanguage::English).expect("bundled lexicon is valid")
    }

    pub fn demo_chinese() -> Self {
        Self::parse(DEMO_LIWC_ZH, LexiconLanguage::Chinese).expect("bundled lexicon is valid")
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    /// Categories a single (lower-cased) word belongs to.
    fn word_categories(&self, word: &str) -> BTreeSet<usize> {
        let mut cats = self.exact.get(word).cloned().unwrap_or_default();
        for (stem, c) in &self.prefixes {
            if word.starts_with(stem.as_str()) {
                cats.extend(c);
            }
        }
        cats
    }

    /// Patterns (stems included) of one category, as char vectors.
    fn category_patterns(&self, cat: usize) -> Vec<Vec<char>> {
        self.exact
            .iter()
            .filter(|(_, c)| c.contains(&cat))
            .map(|(p, _)| p.chars().collect())
            .chain(
                self.prefixes
                    .iter()
                    .filter(|(_, c)| c.contains(&cat))
                    .map(|(p, _)| p.chars().collect()),
            )
            .collect()
    }
}

pub type CategoryCounts = BTreeMap<String, usize>;

fn count_cjk_run(run: &[char], patterns: &HashSet<Vec<char>>, max_len: usize) -> usize {
    let mut i = 0;
    let mut n = 0;
    while i < run.len() {
        let longest = max_len.min(run.len() - i);
        match (1..=longest).rev().find(|&len| patterns.contains(&run[i..i + len])) {
            Some(len) => {
                n += 1;
                i += len;
            }
            None => i += 1,
        }
    }
    n
}

/// Per-category matches: Latin words against the English lexicon
/// (case-insensitive, `stem*` prefix), CJK runs against the Chinese lexicon
/// (longest-first, non-overlapping within a category). Every category of
/// both lexicons is present in the result.
pub fn count_categories(text: &str, english: &CategoryLexicon, chinese: &CategoryLexicon) -> CategoryCounts {
    let mut counts: CategoryCounts = english
        .categories()
        .iter()
        .chain(chinese.categories())
        .map(|c| (c.clone(), 0))
        .collect();
    for word in latin_words(text) {
        for cat in english.word_categories(&word.to_lowercase()) {
            *counts.get_mut(&english.categories[cat]).expect("category registered") += 1;
        }
    }
    let runs: Vec<Vec<char>> = text
        .split(|c: char| !is_cjk(c))
        .filter(|r| !r.is_empty())
        .map(|r| r.chars().collect())
        .collect();
    if !runs.is_empty() {
        for (cat, name) in chinese.categories.iter().enumerate() {
            let patterns: HashSet<Vec<char>> = chinese.category_patterns(cat).into_iter().collect();
            let max_len = patterns.iter().map(Vec::len).max().unwrap_or(0);
            if max_len == 0 {
                continue;
            }
            let n: usize = runs.iter().map(|r| count_cjk_run(r, &patterns, max_len)).sum();
            *counts.get_mut(name).expect("category registered") += n;
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Translation {
    pub text: String,
    pub warnings: Vec<String>,
}

pub trait Translator: Send + Sync {
    /// Replaces Chinese spans by English; English passes through.
    fn translate(&self, text: &str) -> Result<Translation>;
}

/// Deterministic dictionary translator, longest match first. Unknown CJK
/// characters pass through unchanged with a warning.
#[derive(Debug, Clone, Default)]
pub struct OfflineTranslator {
    entries: HashMap<Vec<char>, String>,
    max_len: usize,
}

impl OfflineTranslator {
    pub fn new<I: IntoIterator<Item = (String, String)>>(pairs: I) -> Self {
        let mut t = Self::default();
        for (zh, en) in pairs {
            let key: Vec<char> = zh.chars().collect();
            t.max_len = t.max_len.max(key.len());
            t.entries.insert(key, en);
        }
        t
    }

    /// `中文<TAB>english` per line, `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (zh, en) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(i + 1, "expected `chinese<TAB>english`"))?;
            pairs.push((zh.trim().to_string(), en.trim().to_string()));
        }
        Ok(Self::new(pairs))
    }

    pub fn demo() -> Self {
        Self::parse(DEMO_TRANSLATIONS).expect("bundled translations are valid")
    }
}

impl Translator for OfflineTranslator {
    fn translate(&self, text: &str) -> Result<Translation> {
        if !text.chars().any(is_cjk) {
            return Ok(Translation {
                text: text.to_string(),
                warnings: Vec::new(),
            });
        }
        let chars: Vec<char> = text.chars().collect();
        let mut out = String::with_capacity(text.len() * 2);
        let mut unknown = String::new();
        let mut i = 0;
        while i < chars.len() {
            if !is_cjk(chars[i]) {
                out.push(chars[i]);
                i += 1;
                continue;
            }
            let longest = self.max_len.min(chars.len() - i);
            match (1..=longest).rev().find(|&len| self.entries.contains_key(&chars[i..i + len])) {
                Some(len) => {
                    out.push(' ');
                    out.push_str(&self.entries[&chars[i..i + len]]);
                    out.push(' ');
                    i += len;
                }
                None => {
                    unknown.push(chars[i]);
                    out.push(chars[i]);
                    i += 1;
                }
            }
        }
        let warnings = if unknown.is_empty() {
            Vec::new()
        } else {
            vec![format!("untranslatable characters passed through: {unknown}")]
        };
        Ok(Translation {
            text: out.split_whitespace().collect::<Vec<_>>().join(" "),
            warnings,
        })
    }
}

/// Counting semaphore bounding in-flight remote requests.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().expect("permit lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("permit lock");
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permit lock") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct MtRequest<'a> {
    q: &'a str,
    source: &'a str,
    target: &'a str,
}

#[derive(Deserialize)]
struct MtResponse {
    text: String,
}

/// HTTP client for a remote machine-translation endpoint. Requests are
/// `POST {"q", "source": "zh", "target": "en"}`, responses `{"text"}`.
#[derive(Debug)]
pub struct RemoteTranslator {
    url: String,
    key: Option<String>,
    agent: ureq::Agent,
    permits: Permits,
}

pub const MT_URL_ENV: &str = "DIALOGLENS_MT_URL";
pub const MT_KEY_ENV: &str = "DIALOGLENS_MT_KEY";

impl RemoteTranslator {
    pub fn new(url: impl Into<String>, key: Option<String>, max_in_flight: usize) -> Self {
        Self {
            url: url.into(),
            key,
            agent: ureq::AgentBuilder::new()
                .timeout(std::time::Duration::from_secs(30))
                .build(),
            permits: Permits {
                free: Mutex::new(max_in_flight.max(1)),
                cv: Condvar::new(),
            },
        }
    }

    /// Reads the endpoint and key from the environment; 4 requests in flight.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(MT_URL_ENV).map_err(|_| Error::invalid(format!("{MT_URL_ENV} is not set")))?;
        Ok(Self::new(url, std::env::var(MT_KEY_ENV).ok(), 4))
    }
}

impl Translator for RemoteTranslator {
    fn translate(&self, text: &str) -> Result<Translation> {
        if !text.chars().any(is_cjk) {
            return Ok(Translation {
                text: text.to_string(),
                warnings: Vec::new(),
            });
        }
        let _permit = self.permits.acquire();
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = req
            .send_json(MtRequest {
                q: text,
                source: "zh",
                target: "en",
            })
            .map_err(|e| Error::Transport(e.to_string()))?;
        let body: MtResponse = resp.into_json().map_err(|e| Error::Transport(e.to_string()))?;
        if body.text.trim().is_empty() {
            return Ok(Translation {
                text: text.to_string(),
                warnings: vec!["remote translator returned nothing; passed through".to_string()],
            });
        }
        Ok(Translation {
            text: body.text,
            warnings: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::{BufRead, BufReader, Read, Write};

    fn lex_en() -> CategoryLexicon {
        CategoryLexicon::parse("%\n1\tAssent\n2\tPE\n3\tAffect\n%\nyes\t1\nok*\t1\nhappy\t2 3\n", LexiconLanguage::English)
            .unwrap()
    }

    fn lex_zh() -> CategoryLexicon {
        CategoryLexicon::parse("%\n1\tAssent\n4\tCert\n%\n對\t1\n對對\t1\n一定\t4\n", LexiconLanguage::Chinese).unwrap()
    }

    #[test]
    fn glossary_matching() {
        let g = Glossary::new(["matrix", "eigenvalue", "特徵值"]).unwrap();
        assert_eq!(g.count_math_terms("the matrix eigenvalue 特徵值"), 3);
        assert_eq!(g.count_math_terms("matrices"), 0);
        assert_eq!(g.count_math_terms("submatrix"), 0);
        assert_eq!(g.count_math_terms("MATRIX, Matrix!"), 2);
        let g = Glossary::new(["行列式"]).unwrap();
        assert_eq!(g.count_math_terms("行列式的行列式"), 2);
        let g = Glossary::new(["linear", "linear algebra"]).unwrap();
        assert_eq!(g.count_math_terms("Linear  algebra is linear"), 2);
        assert_eq!(g.matches("linear algebra")[0], (0, 14));
        assert!(Glossary::new([" "]).is_err());
        let parsed = Glossary::parse("# comment\nmatrix\nMatrix\n\n矩陣\n").unwrap();
        assert_eq!(parsed.len(), 2);
    }

    #[test]
    fn category_counting() {
        let counts = count_categories("Yes okay ok!", &lex_en(), &lex_zh());
        assert_eq!(counts["Assent"], 3);
        assert_eq!(counts["PE"], 0);
        let counts = count_categories("happy", &lex_en(), &lex_zh());
        assert_eq!((counts["PE"], counts["Affect"]), (1, 1));
        let empty = count_categories("", &lex_en(), &lex_zh());
        assert!(empty.values().all(|&v| v == 0));
        assert_eq!(empty.len(), 4);
        // longest-first inside CJK runs: 對對 then 對
        let counts = count_categories("對對對，一定 yes", &lex_en(), &lex_zh());
        assert_eq!(counts["Assent"], 3);
        assert_eq!(counts["Cert"], 1);
    }

    #[test]
    fn lexicon_format_errors() {
        assert!(CategoryLexicon::parse("1 PE\n", LexiconLanguage::English).is_err());
        assert!(CategoryLexicon::parse("%\n1 PE\n%\nhappy\t9\n", LexiconLanguage::English).is_err());
        assert!(CategoryLexicon::parse("%\n1 PE\n%\nhappy\n", LexiconLanguage::English).is_err());
    }

    #[test]
    fn demo_resources_cover_every_category() {
        let en = CategoryLexicon::demo_english();
        let zh = CategoryLexicon::demo_chinese();
        for c in CATEGORIES {
            assert!(en.categories().iter().any(|x| x == c), "english lexicon lacks {c}");
            assert!(zh.categories().iter().any(|x| x == c), "chinese lexicon lacks {c}");
            assert!(!en.category_patterns(en.categories().iter().position(|x| x == c).unwrap()).is_empty());
            assert!(!zh.category_patterns(zh.categories().iter().position(|x| x == c).unwrap()).is_empty());
        }
        assert!(Glossary::demo().len() > 20);
        assert_eq!(OfflineTranslator::demo().translate("方程").unwrap().text, "equation");
    }

    #[test]
    fn offline_translation() {
        let t = OfflineTranslator::new([("方程".to_string(), "equation".to_string())]);
        let out = t.translate("solve 方程").unwrap();
        assert_eq!(out.text, "solve equation");
        assert!(out.warnings.is_empty());
        let text = "all  english, untouched";
        assert_eq!(t.translate(text).unwrap().text, text);
        let out = t.translate("解方程").unwrap();
        assert_eq!(out.text, "解 equation");
        assert_eq!(out.warnings.len(), 1);
    }

    /// Serves `responses` in order, one connection each, and returns the
    /// request bodies it saw.
    fn fake_server(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/translate", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    #[test]
    fn remote_translator_wire_format() {
        let (url, server) = fake_server(vec![(200, r#"{"text": "solve the equation"}"#.to_string())]);
        let t = RemoteTranslator::new(url, Some("k".into()), 4);
        assert_eq!(t.translate("solve 方程").unwrap().text, "solve the equation");
        // English-only text never reaches the network
        assert_eq!(t.translate("plain").unwrap().text, "plain");
        let bodies = server.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent, serde_json::json!({"q": "solve 方程", "source": "zh", "target": "en"}));
    }

    #[test]
    fn remote_failure_is_retriable_transport_error() {
        let (url, server) = fake_server(vec![(503, "{}".to_string())]);
        let t = RemoteTranslator::new(url, None, 1);
        assert!(matches!(t.translate("方程"), Err(Error::Transport(_))));
        server.join().unwrap();
        let dead = RemoteTranslator::new("http://127.0.0.1:9/none", None, 1);
        assert!(matches!(dead.translate("方程"), Err(Error::Transport(_))));
    }

    proptest! {
        #[test]
        fn counts_case_and_punctuation_invariant(words in proptest::collection::vec(
            prop_oneof![Just("yes"), Just("okay"), Just("happy"), Just("matrix"), Just("對"), Just("一定"), Just("x")], 0..10)
        ) {
            let g = Glossary::new(["matrix", "一定"]).unwrap();
            let plain = words.join(" ");
            let shouty = words.iter().map(|w| w.to_uppercase()).collect::<Vec<_>>().join(" , ");
            prop_assert_eq!(count_categories(&plain, &lex_en(), &lex_zh()), count_categories(&shouty, &lex_en(), &lex_zh()));
            prop_assert_eq!(g.count_math_terms(&plain), g.count_math_terms(&shouty));
            let more = format!("{plain} happy matrix");
            let before = count_categories(&plain, &lex_en(), &lex_zh());
            let after = count_categories(&more, &lex_en(), &lex_zh());
            for (k, v) in before {
                prop_assert!(after[&k] >= v);
            }
            prop_assert!(g.count_math_terms(&more) >= g.count_math_terms(&plain));
            let span: usize = g.matches(&plain).iter().map(|m| m.1).sum();
            prop_assert!(span <= plain.chars().count());
        }
    }
}
