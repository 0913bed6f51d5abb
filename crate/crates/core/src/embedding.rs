//! Word embeddings (CBOW with negative sampling), TF-IDF weekly keywords, and
//! the vector averaging / cosine utilities behind topic relevance and cohesion.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::latin_words;
use crate::error::{Error, Result};

/// Lower-cased Latin word tokens.
pub fn tokenize_english(text: &str) -> Vec<String> {
    latin_words(text).map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    vectors: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(tokens: Vec<String>, dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("embedding dimension must be at least 2"));
        }
        if vectors.len() != tokens.len() * dim {
            return Err(Error::Dimension {
                expected: tokens.len() * dim,
                actual: vectors.len(),
            });
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite embedding value"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            dim,
            vectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.index
            .get(token)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    /// Text format: `|V| d` header, then `token v1 ... vd` per line.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{} {}", self.tokens.len(), self.dim)?;
        for (i, t) in self.tokens.iter().enumerate() {
            write!(out, "{t}")?;
            for v in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_text<R: Read>(input: R) -> Result<Self> {
        let mut lines = BufReader::new(input).lines();
        let header = lines.next().ok_or_else(|| Error::parse(1, "empty embedding file"))??;
        let mut parts = header.split_whitespace();
        let mut num = |what: &str| -> Result<usize> {
            parts
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| Error::parse(1, format!("bad header: missing {what}")))
        };
        let (n, dim) = (num("|V|")?, num("d")?);
        let mut tokens = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n * dim);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 2;
            let mut fields = line.split(' ');
            let token = fields.next().unwrap_or_default().to_string();
            let row: Vec<f32> = fields
                .filter(|f| !f.is_empty())
                .map(|f| f.parse::<f32>().map_err(|_| Error::parse(lineno, format!("bad value {f:?}"))))
                .collect::<Result<_>>()?;
            if row.len() != dim {
                return Err(Error::parse(lineno, format!("expected {dim} values, got {}", row.len())));
            }
            tokens.push(token);
            vectors.extend(row);
        }
        if tokens.len() != n {
            return Err(Error::invalid(format!("header says {n} rows, found {}", tokens.len())));
        }
        Self::new(tokens, dim, vectors)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub dim: usize,
    /// Context tokens on each side.
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr_start: f32,
    pub lr_end: f32,
    pub min_count: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr_start: 0.025,
            lr_end: 0.0001,
            min_count: 2,
            seed: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.window == 0 || self.negatives == 0 || self.min_count == 0 {
            return Err(Error::invalid("dim >= 2, window, negatives and min_count must be positive"));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(Error::invalid("learning rates must be positive with start >= end"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean negative-sampling loss per prediction, per epoch.
    pub epoch_losses: Vec<f64>,
}

const MIN_VOCAB: usize = 50;
const UNIGRAM_POWER: f64 = 0.75;

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Trains CBOW embeddings with negative sampling. Updates are strictly
/// sequential, so the result is bit-identical for a fixed seed.
pub fn train_cbow(corpus: &[Vec<String>], config: &TrainingConfig) -> Result<(EmbeddingTable, TrainingReport)> {
    config.validate()?;
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        for t in doc {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut vocab: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= config.min_count).collect();
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if vocab.len() < MIN_VOCAB {
        return Err(Error::invalid(format!(
            "vocabulary too small: {} tokens with frequency >= {} (need {MIN_VOCAB})",
            vocab.len(),
            config.min_count
        )));
    }
    let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, (t, _))| (*t, i)).collect();
    let docs: Vec<Vec<usize>> = corpus
        .iter()
        .map(|d| d.iter().filter_map(|t| index.get(t.as_str()).copied()).collect())
        .collect();

    // Cumulative unigram^0.75 distribution for negative draws.
    let mut cumulative = Vec::with_capacity(vocab.len());
    let mut acc = 0.0;
    for (_, c) in &vocab {
        acc += (*c as f64).powf(UNIGRAM_POWER);
        cumulative.push(acc);
    }

    let dim = config.dim;
    let v = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut input: Vec<f32> = (0..v * dim)
        .map(|_| (rng.random::<f32>() - 0.5) / dim as f32)
        .collect();
    let mut output = vec![0.0f32; v * dim];

    let total_steps = (config.epochs * docs.iter().map(Vec::len).sum::<usize>()).max(1);
    let mut step = 0usize;
    let mut hidden = vec![0.0f32; dim];
    let mut grad = vec![0.0f32; dim];
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0f64;
        let mut predictions = 0usize;
        for doc in &docs {
            for pos in 0..doc.len() {
                let progress = step as f32 / total_steps as f32;
                let lr = config.lr_start - (config.lr_start - config.lr_end) * progress;
                step += 1;
                let reach = rng.random_range(1..=config.window);
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(doc.len() - 1);
                let context: Vec<usize> = (lo..=hi).filter(|&j| j != pos).map(|j| doc[j]).collect();
                if context.is_empty() {
                    continue;
                }
                hidden.iter_mut().for_each(|h| *h = 0.0);
                for &c in &context {
                    for (h, x) in hidden.iter_mut().zip(&input[c * dim..(c + 1) * dim]) {
                        *h += x;
                    }
                }
                let inv = 1.0 / context.len() as f32;
                hidden.iter_mut().for_each(|h| *h *= inv);
                grad.iter_mut().for_each(|g| *g = 0.0);

                let target = doc[pos];
                for k in 0..=config.negatives {
                    let (word, label) = if k == 0 {
                        (target, 1.0f32)
                    } else {
                        let r = rng.random::<f64>() * acc;
                        let w = cumulative.partition_point(|&c| c < r).min(v - 1);
                        if w == target {
                            continue;
                        }
                        (w, 0.0)
                    };
                    let out = &mut output[word * dim..(word + 1) * dim];
                    let score: f32 = hidden.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
                    let p = sigmoid(score);
                    let prob = if label > 0.5 { p } else { 1.0 - p };
                    loss_sum -= (prob.max(1e-7) as f64).ln();
                    let g = (label - p) * lr;
                    for ((e, o), h) in grad.iter_mut().zip(out.iter_mut()).zip(&hidden) {
                        *e += g * *o;
                        *o += g * h;
                    }
                }
                predictions += 1;
                for &c in &context {
                    for (x, e) in input[c * dim..(c + 1) * dim].iter_mut().zip(&grad) {
                        *x += e;
                    }
                }
            }
        }
        let mean_loss = loss_sum / predictions.max(1) as f64;
        if !mean_loss.is_finite() || input.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite loss at epoch {epoch} (lr_start {})",
                config.lr_start
            )));
        }
        log::debug!(target: "embedding", "epoch={epoch} loss={mean_loss}");
        epoch_losses.push(mean_loss);
    }
    let tokens = vocab.into_iter().map(|(t, _)| t.to_string()).collect();
    Ok((EmbeddingTable::new(tokens, dim, input)?, TrainingReport { epoch_losses }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordSet {
    pub week: u32,
    pub keywords: Vec<(String, f64)>,
}

impl KeywordSet {
    pub fn tokens(&self) -> Vec<String> {
        self.keywords.iter().map(|(t, _)| t.clone()).collect()
    }
}

/// Ranks the tokens of `documents[doc_index]` by tf × ln(N / df), keeping the
/// `top_k` with positive weight. Ties are broken lexicographically.
pub fn tfidf_keywords(documents: &[Vec<String>], doc_index: usize, week: u32, top_k: usize) -> Result<KeywordSet> {
    if documents.len() < 2 {
        return Err(Error::invalid("tf-idf needs at least 2 documents"));
    }
    let doc = documents
        .get(doc_index)
        .ok_or_else(|| Error::invalid(format!("no document {doc_index}")))?;
    if doc.is_empty() {
        return Err(Error::invalid(format!("empty document for week {week}")));
    }
    let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
    for t in doc {
        *tf.entry(t.as_str()).or_default() += 1;
    }
    let n = documents.len() as f64;
    let mut weighted: Vec<(String, f64)> = tf
        .into_iter()
        .map(|(t, count)| {
            let df = documents.iter().filter(|d| d.iter().any(|x| x == t)).count() as f64;
            (t.to_string(), count as f64 * (n / df).ln())
        })
        .filter(|(_, w)| *w > 0.0)
        .collect();
    weighted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    weighted.truncate(top_k);
    Ok(KeywordSet {
        week,
        keywords: weighted,
    })
}

/// Mean of the vectors of in-vocabulary tokens; `None` if none is known.
pub fn average_vector<S: AsRef<str>>(tokens: &[S], table: &EmbeddingTable) -> Option<Vec<f64>> {
    let mut sum = vec![0.0f64; table.dim()];
    let mut n = 0usize;
    for t in tokens {
        if let Some(v) = table.get(t.as_ref()) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += *x as f64;
            }
            n += 1;
        }
    }
    (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn small_table() -> EmbeddingTable {
        EmbeddingTable::new(
            vec!["a".into(), "b".into(), "c".into()],
            2,
            vec![1.0, 0.0, -1.0, 0.0, 0.0, 2.0],
        )
        .unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn averaging() {
        let t = small_table();
        assert_eq!(average_vector(&["c"], &t).unwrap(), vec![0.0, 2.0]);
        assert_eq!(average_vector(&["a", "b"], &t).unwrap(), vec![0.0, 0.0]);
        assert_eq!(average_vector(&["a", "zzz", "c"], &t).unwrap(), vec![0.5, 1.0]);
        assert!(average_vector(&["zzz"], &t).is_none());
        assert!(average_vector::<&str>(&[], &t).is_none());
    }

    #[test]
    fn table_text_round_trip() {
        let t = small_table();
        let mut buf = Vec::new();
        t.write_text(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("3 2\na 1 0\n"));
        assert_eq!(EmbeddingTable::read_text(buf.as_slice()).unwrap(), t);
        assert!(EmbeddingTable::read_text("2 2\na 1 0\n".as_bytes()).is_err());
        assert!(EmbeddingTable::read_text("1 2\na 1\n".as_bytes()).is_err());
    }

    #[test]
    fn tfidf_examples() {
        let docs = vec![
            toks("matrix matrix matrix the the"),
            toks("the vector"),
            toks("the integral"),
            toks("the series"),
        ];
        let k = tfidf_keywords(&docs, 0, 1, 10).unwrap();
        assert_eq!(k.keywords.len(), 1, "ubiquitous 'the' has weight 0");
        assert_eq!(k.keywords[0].0, "matrix");
        assert!((k.keywords[0].1 - 3.0 * 4f64.ln()).abs() < 1e-12);

        let docs = vec![toks("b a c"), toks("x")];
        let k = tfidf_keywords(&docs, 0, 1, 2).unwrap();
        assert_eq!(k.tokens(), vec!["a", "b"]);
        assert!(tfidf_keywords(&[toks("a")], 0, 1, 3).is_err());
        assert!(tfidf_keywords(&[vec![], toks("a")], 0, 1, 3).is_err());
    }

    fn planted_corpus() -> Vec<Vec<String>> {
        // a and b always appear together; c lives in a disjoint context.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fillers: Vec<String> = (0..60).map(|i| format!("w{i}")).collect();
        let mut docs = Vec::new();
        for _ in 0..200 {
            let mut d: Vec<String> = (0..8).map(|_| fillers[rng.random_range(0..30)].clone()).collect();
            d.insert(3, "a".into());
            d.insert(4, "b".into());
            docs.push(d);
            let mut d: Vec<String> = (0..8).map(|_| fillers[rng.random_range(30..60)].clone()).collect();
            d.insert(4, "c".into());
            docs.push(d);
        }
        docs
    }

    #[test]
    fn cbow_learns_planted_cooccurrence() {
        let config = TrainingConfig {
            dim: 20,
            epochs: 5,
            ..TrainingConfig::default()
        };
        let (table, report) = train_cbow(&planted_corpus(), &config).unwrap();
        let v = |t: &str| table.get(t).unwrap().iter().map(|x| *x as f64).collect::<Vec<_>>();
        assert!(cosine(&v("a"), &v("b")).unwrap() > cosine(&v("a"), &v("c")).unwrap());
        assert!(report.epoch_losses.windows(2).all(|w| w[1] < w[0]), "{:?}", report.epoch_losses);
    }

    #[test]
    fn cbow_is_deterministic_and_zero_epochs_is_init() {
        let corpus = planted_corpus();
        let config = TrainingConfig {
            dim: 8,
            epochs: 2,
            ..TrainingConfig::default()
        };
        let (a, _) = train_cbow(&corpus, &config).unwrap();
        let (b, _) = train_cbow(&corpus, &config).unwrap();
        assert_eq!(a, b);

        let zero = TrainingConfig { epochs: 0, ..config.clone() };
        let (init, report) = train_cbow(&corpus, &zero).unwrap();
        assert!(report.epoch_losses.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let expected: Vec<f32> = (0..init.len() * 8).map(|_| (rng.random::<f32>() - 0.5) / 8.0).collect();
        let got: Vec<f32> = init.tokens().iter().flat_map(|t| init.get(t).unwrap().to_vec()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn cbow_errors() {
        let tiny = vec![toks("a b c a b c")];
        assert!(train_cbow(&tiny, &TrainingConfig::default()).is_err());
        let bad = TrainingConfig {
            lr_start: 0.001,
            lr_end: 0.01,
            ..TrainingConfig::default()
        };
        assert!(train_cbow(&planted_corpus(), &bad).is_err());
        let explode = TrainingConfig {
            dim: 8,
            epochs: 1,
            lr_start: 1e30,
            lr_end: 1e29,
            ..TrainingConfig::default()
        };
        assert!(matches!(train_cbow(&planted_corpus(), &explode), Err(Error::Diverged(_))));
    }

    proptest! {
        #[test]
        fn cosine_symmetric_scale_invariant(
            u in proptest::collection::vec(-5.0f64..5.0, 4),
            v in proptest::collection::vec(-5.0f64..5.0, 4),
            a in 0.01f64..100.0, b in 0.01f64..100.0,
        ) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let c = cosine(&u, &v).unwrap();
            prop_assert!((c - cosine(&v, &u).unwrap()).abs() < 1e-12);
            let su: Vec<f64> = u.iter().map(|x| a * x).collect();
            let sv: Vec<f64> = v.iter().map(|x| b * x).collect();
            prop_assert!((c - cosine(&su, &sv).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn average_permutation_invariant(mut picks in proptest::collection::vec(0usize..4, 1..8)) {
            let t = small_table();
            let names = ["a", "b", "c", "zz"];
            let fwd: Vec<&str> = picks.iter().map(|&i| names[i]).collect();
            picks.reverse();
            let rev: Vec<&str> = picks.iter().map(|&i| names[i]).collect();
            let (x, y) = (average_vector(&fwd, &t), average_vector(&rev, &t));
            prop_assert_eq!(x.is_some(), y.is_some());
            if let (Some(x), Some(y)) = (x, y) {
                for (p, q) in x.iter().zip(&y) {
                    prop_assert!((p - q).abs() < 1e-12);
                }
            }
        }
    }
}
