//! Per-week min-max normalization, Pearson correlation and two-group one-way
//! ANOVA with exact p-values, feature screening, and box/scatter plot data.
//!
//! p-values use the regularized incomplete beta function, evaluated with a
//! continued fraction (modified Lentz) to a relative tolerance of 1e-12.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::{GroupFeatureTable, OutcomeLabel, OutcomeRecord};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Variance dividing by the count (population variance).
pub fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Quantile of sorted data by linear interpolation between closest ranks
/// (h = (n - 1) p).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

// ---------------------------------------------------------------------------
// Special functions

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const TOL: f64 = 1e-12;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < TOL {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Two-tailed p-value of Student's t with `df` degrees of freedom.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Upper-tail probability P(F > f) for F(d1, d2).
pub fn f_survival(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if !f.is_finite() {
        return 0.0;
    }
    regularized_incomplete_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov test of `samples` against Uniform(0, 1).
/// Returns (D, asymptotic p-value with Stephens' small-sample correction).
pub fn ks_uniform(samples: &[f64]) -> (f64, f64) {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in v.iter().enumerate() {
        let x = x.clamp(0.0, 1.0);
        d = d.max((i as f64 + 1.0) / n - x).max(x - i as f64 / n);
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    (d, p.clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Normalization

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTable {
    pub table: GroupFeatureTable,
    /// (feature, week) pairs whose values were constant within the week.
    pub degenerate: Vec<(String, u32)>,
}

/// Rescales every feature within each week to [-1, 1]:
/// x' = 2 (x - min) / (max - min) - 1. Constant weeks map to 0 and are flagged.
pub fn normalize_weekly(table: &GroupFeatureTable) -> NormalizedTable {
    let mut weeks: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, k) in table.rows.iter().enumerate() {
        weeks.entry(k.week).or_default().push(i);
    }
    let mut out = table.clone();
    let mut degenerate = Vec::new();
    for (j, name) in table.columns.iter().enumerate() {
        for (week, rows) in &weeks {
            let present: Vec<f64> = rows.iter().filter_map(|&i| table.values[i][j]).collect();
            if present.is_empty() {
                continue;
            }
            let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            if span <= 0.0 {
                degenerate.push((name.clone(), *week));
            }
            for &i in rows {
                if let Some(x) = table.values[i][j] {
                    out.values[i][j] = Some(if span > 0.0 { 2.0 * (x - lo) / span - 1.0 } else { 0.0 });
                }
            }
        }
    }
    NormalizedTable { table: out, degenerate }
}

// ---------------------------------------------------------------------------
// Tests

/// JSON has no inf/NaN; those round-trip as the strings "inf", "-inf", "NaN".
mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("NaN")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "NaN" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => Err(serde::de::Error::custom(format!("expected a number, got {t:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    #[serde(with = "nonfinite")]
    pub r: f64,
    #[serde(with = "nonfinite")]
    pub p: f64,
    pub n: usize,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            actual: y.len(),
        });
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::invalid(format!("pearson needs n >= 3, got {n}")));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantInput);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        student_t_two_tailed(r * (df / (1.0 - r * r)).sqrt(), df)
    };
    Ok(CorrelationResult { r, p, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    #[serde(with = "nonfinite")]
    pub f: f64,
    #[serde(with = "nonfinite")]
    pub p: f64,
    pub n_high: usize,
    pub n_low: usize,
    pub ss_between: f64,
    pub ss_within: f64,
    /// Zero within-group variance with unequal means.
    pub degenerate: bool,
}

/// One-way ANOVA between two groups, df = (1, n1 + n2 - 2).
pub fn anova_two(high: &[f64], low: &[f64]) -> Result<AnovaResult> {
    let (n1, n2) = (high.len(), low.len());
    if n1 < 2 || n2 < 2 {
        return Err(Error::invalid(format!("anova needs >= 2 values per group, got {n1} and {n2}")));
    }
    let (m1, m2) = (mean(high), mean(low));
    let grand = (m1 * n1 as f64 + m2 * n2 as f64) / (n1 + n2) as f64;
    let ss_between = n1 as f64 * (m1 - grand).powi(2) + n2 as f64 * (m2 - grand).powi(2);
    let ss_within =
        high.iter().map(|x| (x - m1).powi(2)).sum::<f64>() + low.iter().map(|x| (x - m2).powi(2)).sum::<f64>();
    let df_w = (n1 + n2 - 2) as f64;
    let (f, p, degenerate) = if ss_between == 0.0 {
        (0.0, 1.0, false)
    } else if ss_within == 0.0 {
        (f64::INFINITY, 0.0, true)
    } else {
        let f = ss_between / (ss_within / df_w);
        (f, f_survival(f, 1.0, df_w), false)
    };
    Ok(AnovaResult {
        f,
        p,
        n_high: n1,
        n_low: n2,
        ss_between,
        ss_within,
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// Screening

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreeningConfig {
    pub alpha: f64,
    /// Divide alpha by the number of features.
    pub bonferroni: bool,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            bonferroni: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScreen {
    pub feature: String,
    pub pearson_score: Option<CorrelationResult>,
    pub pearson_rank: Option<CorrelationResult>,
    pub anova: Option<AnovaResult>,
    /// +1 / -1 from the sign of r against the exam score (0 if undefined).
    pub direction: i8,
    pub selected: bool,
    /// Which tests passed: any of "pearson_score", "pearson_rank", "anova".
    pub selected_by: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub alpha: f64,
    pub effective_alpha: f64,
    pub bonferroni: bool,
    pub n_sessions: usize,
    pub features: Vec<FeatureScreen>,
    pub degenerate_weeks: Vec<(String, u32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl ScreeningReport {
    pub fn selected(&self) -> Vec<String> {
        self.features.iter().filter(|f| f.selected).map(|f| f.feature.clone()).collect()
    }
}

fn align_outcomes<'a>(table: &GroupFeatureTable, outcomes: &'a [OutcomeRecord]) -> Result<Vec<&'a OutcomeRecord>> {
    let by_key: BTreeMap<_, _> = outcomes.iter().map(|o| (o.key(), o)).collect();
    table
        .rows
        .iter()
        .map(|k| {
            by_key
                .get(k)
                .copied()
                .ok_or_else(|| Error::invalid(format!("no outcome for session {k}")))
        })
        .collect()
}

pub fn screen_feature(name: &str, values: &[Option<f64>], outcomes: &[&OutcomeRecord], alpha: f64) -> FeatureScreen {
    let mut xs = Vec::new();
    let mut es = Vec::new();
    let mut ranks = Vec::new();
    let mut high = Vec::new();
    let mut low = Vec::new();
    for (v, o) in values.iter().zip(outcomes) {
        let Some(v) = *v else { continue };
        xs.push(v);
        es.push(o.e_s);
        ranks.push(o.rank as f64);
        match o.label {
            OutcomeLabel::High => high.push(v),
            OutcomeLabel::Low => low.push(v),
            OutcomeLabel::Mid => {}
        }
    }
    let pearson_score = pearson(&xs, &es).ok();
    let pearson_rank = pearson(&xs, &ranks).ok();
    let anova = anova_two(&high, &low).ok();
    let mut selected_by = Vec::new();
    if pearson_score.is_some_and(|c| c.p < alpha) {
        selected_by.push("pearson_score".to_string());
    }
    if pearson_rank.is_some_and(|c| c.p < alpha) {
        selected_by.push("pearson_rank".to_string());
    }
    if anova.is_some_and(|a| a.p < alpha) {
        selected_by.push("anova".to_string());
    }
    let direction = match pearson_score.or(pearson_rank) {
        Some(c) if c.r > 0.0 => 1,
        Some(c) if c.r < 0.0 => -1,
        _ => 0,
    };
    FeatureScreen {
        feature: name.to_string(),
        pearson_score,
        pearson_rank,
        anova,
        direction,
        selected: !selected_by.is_empty(),
        selected_by,
    }
}

/// Normalizes `table` per week and screens every feature against the outcomes:
/// a feature is selected when its Pearson p (against exam score or rank) or its
/// High-vs-Low ANOVA p falls below alpha.
pub fn screen_features(
    table: &GroupFeatureTable,
    outcomes: &[OutcomeRecord],
    config: ScreeningConfig,
) -> Result<(NormalizedTable, ScreeningReport)> {
    let normalized = normalize_weekly(table);
    let aligned = align_outcomes(table, outcomes)?;
    let m = table.columns.len().max(1);
    let effective_alpha = if config.bonferroni {
        config.alpha / m as f64
    } else {
        config.alpha
    };
    let mut features: Vec<FeatureScreen> = (0..table.columns.len())
        .map(|j| {
            screen_feature(
                &table.columns[j],
                &normalized.table.column(j),
                &aligned,
                effective_alpha,
            )
        })
        .collect();
    features.sort_by(|a, b| a.feature.cmp(&b.feature));
    let report = ScreeningReport {
        alpha: config.alpha,
        effective_alpha,
        bonferroni: config.bonferroni,
        n_sessions: table.rows.len(),
        features,
        degenerate_weeks: normalized.degenerate.clone(),
        config_digest: None,
    };
    Ok((normalized, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn box_summary(values: &[f64]) -> Option<BoxSummary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(BoxSummary {
        count: v.len(),
        min: v[0],
        q1: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q3: quantile_sorted(&v, 0.75),
        max: v[v.len() - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotManifest {
    pub features: Vec<String>,
    pub files: Vec<PathBuf>,
}

/// Writes, for every selected feature, `scatter/<feature>.csv` (one row per
/// session) and `box/<feature>.csv` (five-number summary per label), plus
/// `plots.json` listing the files relative to `out_dir`.
pub fn emit_plot_data(
    report: &ScreeningReport,
    normalized: &GroupFeatureTable,
    outcomes: &[OutcomeRecord],
    out_dir: &Path,
) -> Result<PlotManifest> {
    let aligned = align_outcomes(normalized, outcomes)?;
    let mut manifest = PlotManifest {
        features: report.selected(),
        files: Vec::new(),
    };
    for feature in &manifest.features {
        let j = normalized
            .column_index(feature)
            .ok_or_else(|| Error::invalid(format!("feature {feature} missing from table")))?;
        std::fs::create_dir_all(out_dir.join("scatter"))?;
        std::fs::create_dir_all(out_dir.join("box"))?;
        let scatter = PathBuf::from("scatter").join(format!("{feature}.csv"));
        let mut w = csv::Writer::from_path(out_dir.join(&scatter))?;
        w.write_record(["feature_value", "e_s", "rank", "label", "week", "group_id"])?;
        let mut by_label: BTreeMap<OutcomeLabel, Vec<f64>> = BTreeMap::new();
        for (i, o) in aligned.iter().enumerate() {
            let Some(v) = normalized.values[i][j] else { continue };
            by_label.entry(o.label).or_default().push(v);
            w.write_record([
                v.to_string(),
                o.e_s.to_string(),
                o.rank.to_string(),
                o.label.to_string(),
                o.week.to_string(),
                o.group_id.clone(),
            ])?;
        }
        w.flush()?;
        let boxfile = PathBuf::from("box").join(format!("{feature}.csv"));
        let mut w = csv::Writer::from_path(out_dir.join(&boxfile))?;
        w.write_record(["label", "count", "min", "q1", "median", "q3", "max"])?;
        for label in OutcomeLabel::ALL {
            let Some(b) = by_label.get(&label).and_then(|v| box_summary(v)) else { continue };
            w.write_record([
                label.to_string(),
                b.count.to_string(),
                b.min.to_string(),
                b.q1.to_string(),
                b.median.to_string(),
                b.q3.to_string(),
                b.max.to_string(),
            ])?;
        }
        w.flush()?;
        manifest.files.push(scatter);
        manifest.files.push(boxfile);
    }
    std::fs::create_dir_all(out_dir)?;
    let mut f = std::fs::File::create(out_dir.join("plots.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(manifest)
}
