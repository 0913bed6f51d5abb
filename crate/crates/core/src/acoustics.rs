//! Frame-level acoustic features: energy and F0 computed from audio, the rest
//! ingested from CSV; segment Max/Min/Avg aggregation; gender z-scoring.

use std::collections::BTreeMap;
use std::io::Read;
use std::ops::Range;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::AudioTrack;
use crate::corpus::Gender;
use crate::error::{Error, Result};

pub const FRAME_SECONDS: f64 = 0.01;
pub const F0_MIN_HZ: f64 = 50.0;
pub const F0_MAX_HZ: f64 = 600.0;

pub const KNOWN_FEATURES: [&str; 12] = [
    "F0", "Energy", "F1", "F2", "F3", "NAQ", "QOQ", "H1H2", "PS", "MDQ", "rd", "creak",
];

const FORMANTS: [&str; 3] = ["F1", "F2", "F3"];

/// Σ x² over the frame.
pub fn frame_energy(frame: &[f32]) -> f64 {
    frame.iter().map(|&x| (x as f64) * (x as f64)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F0Config {
    pub window_seconds: f64,
    pub voicing_threshold: f64,
    pub min_hz: f64,
    pub max_hz: f64,
}

impl Default for F0Config {
    fn default() -> Self {
        Self {
            window_seconds: 0.04,
            voicing_threshold: 0.45,
            min_hz: F0_MIN_HZ,
            max_hz: F0_MAX_HZ,
        }
    }
}

/// Normalized-autocorrelation pitch tracker. Reusable across frames of one
/// sample rate.
pub struct PitchTracker {
    config: F0Config,
    sample_rate: u32,
    fft_len: usize,
    forward: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inverse: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl PitchTracker {
    pub fn new(sample_rate: u32, config: F0Config) -> Result<Self> {
        if sample_rate == 0 || config.min_hz <= 0.0 || config.max_hz <= config.min_hz {
            return Err(Error::invalid("bad pitch tracker configuration"));
        }
        if config.window_seconds * config.min_hz < 2.0 - 1e-9 {
            return Err(Error::invalid("analysis window must cover two periods of the lowest pitch"));
        }
        let window = (config.window_seconds * sample_rate as f64).round() as usize;
        let fft_len = (2 * window).next_power_of_two();
        let mut planner = FftPlanner::new();
        Ok(Self {
            forward: planner.plan_fft_forward(fft_len),
            inverse: planner.plan_fft_inverse(fft_len),
            config,
            sample_rate,
            fft_len,
        })
    }

    pub fn window_len(&self) -> usize {
        (self.config.window_seconds * self.sample_rate as f64).round() as usize
    }

    /// F0 in Hz, or `None` when the window is silent or aperiodic.
    pub fn estimate(&self, window: &[f32]) -> Option<f64> {
        let n = window.len();
        let sr = self.sample_rate as f64;
        let min_lag = (sr / self.config.max_hz).floor().max(1.0) as usize;
        let max_lag = ((sr / self.config.min_hz).ceil() as usize).min(n.saturating_sub(2));
        if max_lag <= min_lag + 1 || n > self.fft_len / 2 {
            return None;
        }
        let m = window.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let x: Vec<f64> = window.iter().map(|&v| v as f64 - m).collect();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        if energy <= 1e-12 * n as f64 {
            return None;
        }

        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        buf.resize(self.fft_len, Complex::new(0.0, 0.0));
        self.forward.process(&mut buf);
        for c in buf.iter_mut() {
            *c = Complex::new(c.norm_sqr(), 0.0);
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.fft_len as f64;

        // prefix[i] = Σ_{k<i} x_k²
        let mut prefix = vec![0.0; n + 1];
        for (i, v) in x.iter().enumerate() {
            prefix[i + 1] = prefix[i] + v * v;
        }
        let r = |lag: usize| -> f64 {
            let head = prefix[n - lag];
            let tail = prefix[n] - prefix[lag];
            let denom = (head * tail).sqrt();
            if denom <= 0.0 {
                0.0
            } else {
                buf[lag].re * scale / denom
            }
        };
        let rs: Vec<f64> = (min_lag - 1..=max_lag + 1).map(r).collect();
        let at = |lag: usize| rs[lag + 1 - min_lag];
        let best = (min_lag..=max_lag).map(at).fold(f64::NEG_INFINITY, f64::max);
        if best < self.config.voicing_threshold {
            return None;
        }
        let lag = (min_lag..=max_lag)
            .find(|&l| at(l) >= 0.9 * best && at(l) >= at(l - 1) && at(l) >= at(l + 1))?;
        let (a, b, c) = (at(lag - 1), at(lag), at(lag + 1));
        let curvature = a - 2.0 * b + c;
        let offset = if curvature.abs() > 1e-12 {
            (0.5 * (a - c) / curvature).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        let f0 = sr / (lag as f64 + offset);
        (self.config.min_hz..=self.config.max_hz).contains(&f0).then_some(f0)
    }
}

/// Convenience wrapper around [`PitchTracker`].
pub fn frame_f0(window: &[f32], sample_rate: u32) -> Option<f64> {
    PitchTracker::new(sample_rate, F0Config::default())
        .ok()?
        .estimate(window)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureRow {
    pub time: f64,
    /// Parallel to [`FrameFeatures::columns`].
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub columns: Vec<String>,
    pub rows: Vec<FrameFeatureRow>,
    pub warnings: Vec<String>,
}

impl FrameFeatures {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Row range with `start <= time < end`.
    pub fn interval(&self, start: f64, end: f64) -> Range<usize> {
        let lo = self.rows.partition_point(|r| r.time < start);
        let hi = self.rows.partition_point(|r| r.time < end);
        lo..hi.max(lo)
    }

    pub fn rows_in(&self, start: f64, end: f64) -> &[FrameFeatureRow] {
        &self.rows[self.interval(start, end)]
    }

    /// Energy and F0 per 10 ms frame; frames tile the track and the F0 window
    /// is centred on each frame.
    pub fn from_audio(track: &AudioTrack, config: &F0Config) -> Result<Self> {
        use rayon::prelude::*;

        let sr = track.sample_rate();
        let frame_len = ((FRAME_SECONDS * sr as f64).round() as usize).max(1);
        let tracker = PitchTracker::new(sr, config.clone())?;
        let win = tracker.window_len();
        let samples = track.samples();
        let n_frames = samples.len().div_ceil(frame_len);
        let rows = (0..n_frames)
            .into_par_iter()
            .map(|i| {
                let start = i * frame_len;
                let frame = &samples[start..(start + frame_len).min(samples.len())];
                let centre = start + frame_len / 2;
                let w0 = centre.saturating_sub(win / 2).min(samples.len().saturating_sub(win));
                let w1 = (w0 + win).min(samples.len());
                FrameFeatureRow {
                    time: i as f64 * FRAME_SECONDS,
                    values: vec![tracker.estimate(&samples[w0..w1]), Some(frame_energy(frame))],
                }
            })
            .collect();
        Ok(Self {
            columns: vec!["F0".into(), "Energy".into()],
            rows,
            warnings: Vec::new(),
        })
    }

    /// Reads `time,<feature>...` CSV; empty cells are absent values.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = reader.headers()?.clone();
        if header.get(0).map(str::trim) != Some("time") {
            return Err(Error::parse(1, "first column must be `time`"));
        }
        let columns: Vec<String> = header.iter().skip(1).map(|c| c.trim().to_string()).collect();
        let mut warnings = Vec::new();
        for c in &columns {
            if !KNOWN_FEATURES.contains(&c.as_str()) {
                warnings.push(format!("unknown frame feature column {c:?} kept"));
            }
        }
        let f0 = columns.iter().position(|c| c == "F0");
        let formants: Vec<usize> = FORMANTS
            .iter()
            .filter_map(|f| columns.iter().position(|c| c == f))
            .collect();

        let mut rows: Vec<FrameFeatureRow> = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let line = i + 2;
            let cell = |j: usize| -> Result<Option<f64>> {
                let s = record.get(j).unwrap_or("").trim();
                if s.is_empty() {
                    return Ok(None);
                }
                let v: f64 = s.parse().map_err(|_| Error::parse(line, format!("bad number {s:?}")))?;
                if !v.is_finite() {
                    return Err(Error::parse(line, "non-finite value"));
                }
                Ok(Some(v))
            };
            let time = cell(0)?.ok_or_else(|| Error::parse(line, "missing time"))?;
            if time < 0.0 {
                return Err(Error::parse(line, "negative time"));
            }
            if let Some(prev) = rows.last() {
                if time <= prev.time {
                    return Err(Error::parse(line, format!("time {time} not after {}", prev.time)));
                }
            }
            let mut values = (1..=columns.len()).map(cell).collect::<Result<Vec<_>>>()?;
            if let Some(j) = f0 {
                if let Some(v) = values[j] {
                    if !(F0_MIN_HZ..=F0_MAX_HZ).contains(&v) {
                        warnings.push(format!("line {line}: F0 {v} outside [{F0_MIN_HZ}, {F0_MAX_HZ}] dropped"));
                        values[j] = None;
                    }
                }
            }
            let present: Vec<f64> = formants.iter().filter_map(|&j| values[j]).collect();
            let valid = present.iter().all(|&v| v > 0.0) && present.windows(2).all(|w| w[0] < w[1]);
            if !valid {
                warnings.push(format!("line {line}: formants not positive and increasing, triple dropped"));
                for &j in &formants {
                    values[j] = None;
                }
            }
            rows.push(FrameFeatureRow { time, values });
        }
        Ok(Self {
            columns,
            rows,
            warnings,
        })
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![format!("{:.2}", row.time)];
            rec.extend(row.values.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `Max_<f>`, `Min_<f>`, `Avg_<f>` per base feature; `None` when no frame in
/// the segment carries the feature.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentAcoustics {
    pub values: BTreeMap<String, Option<f64>>,
}

impl SegmentAcoustics {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied().flatten()
    }

    pub fn is_all_absent(&self) -> bool {
        self.values.values().all(Option::is_none)
    }
}

pub const STAT_PREFIXES: [&str; 3] = ["Max", "Min", "Avg"];

pub fn stat_name(prefix: &str, feature: &str) -> String {
    format!("{prefix}_{feature}")
}

pub fn aggregate_segment(frames: &FrameFeatures, start: f64, end: f64) -> SegmentAcoustics {
    let rows = frames.rows_in(start, end);
    let mut values = BTreeMap::new();
    for (j, feature) in frames.columns.iter().enumerate() {
        let present: Vec<f64> = rows.iter().filter_map(|r| r.values[j]).collect();
        let (max, min, avg) = if present.is_empty() {
            (None, None, None)
        } else {
            let max = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = present.iter().copied().fold(f64::INFINITY, f64::min);
            let avg = (present.iter().sum::<f64>() / present.len() as f64).clamp(min, max);
            (Some(max), Some(min), Some(avg))
        };
        values.insert(stat_name("Max", feature), max);
        values.insert(stat_name("Min", feature), min);
        values.insert(stat_name("Avg", feature), avg);
    }
    SegmentAcoustics { values }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GenderGroup {
    Male,
    Female,
    Pooled,
}

impl GenderGroup {
    /// Statistics used to normalize a speaker of this gender.
    pub fn reference(gender: Gender) -> Self {
        match gender {
            Gender::Male => GenderGroup::Male,
            Gender::Female => GenderGroup::Female,
            Gender::Unknown => GenderGroup::Pooled,
        }
    }
}

/// Running count/mean/M2, mergeable across partitions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, o: Moments) -> Moments {
        if self.n == 0 {
            return o;
        }
        if o.n == 0 {
            return self;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + d * o.n as f64 / n as f64,
            m2: self.m2 + o.m2 + d * d * (self.n as f64 * o.n as f64) / n as f64,
        }
    }
}

/// First phase of gender normalization. Partitions can be accumulated
/// independently and combined with [`NormalizationAccumulator::merge`].
#[derive(Debug, Clone, Default)]
pub struct NormalizationAccumulator {
    moments: BTreeMap<(GenderGroup, String), Moments>,
}

impl NormalizationAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, gender: Gender, segment: &SegmentAcoustics) {
        let groups: &[GenderGroup] = match gender {
            Gender::Male => &[GenderGroup::Male, GenderGroup::Pooled],
            Gender::Female => &[GenderGroup::Female, GenderGroup::Pooled],
            Gender::Unknown => &[GenderGroup::Pooled],
        };
        for (name, v) in &segment.values {
            if let Some(v) = v {
                for &g in groups {
                    self.moments.entry((g, name.clone())).or_default().push(*v);
                }
            }
        }
    }

    pub fn merge(mut self, other: NormalizationAccumulator) -> Self {
        for (k, m) in other.moments {
            let e = self.moments.entry(k).or_default();
            *e = e.merge(m);
        }
        self
    }

    pub fn finish(self) -> NormalizationStats {
        let mut groups: BTreeMap<GenderGroup, BTreeMap<String, FeatureMoments>> = BTreeMap::new();
        for ((g, name), m) in self.moments {
            groups.entry(g).or_default().insert(
                name,
                FeatureMoments {
                    mean: m.mean,
                    std: (m.m2 / m.n as f64).max(0.0).sqrt(),
                    count: m.n,
                },
            );
        }
        NormalizationStats { groups }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMoments {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: u64,
}

/// Second phase: frozen per-gender statistics, persisted as the sidecar JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub groups: BTreeMap<GenderGroup, BTreeMap<String, FeatureMoments>>,
}

impl NormalizationStats {
    pub fn normalize(&self, gender: Gender, segment: &SegmentAcoustics) -> (SegmentAcoustics, Vec<String>) {
        let group = GenderGroup::reference(gender);
        let stats = self.groups.get(&group);
        let mut warnings = Vec::new();
        let values = segment
            .values
            .iter()
            .map(|(name, v)| {
                let z = v.and_then(|v| {
                    let m = stats?.get(name)?;
                    if m.std > 0.0 {
                        Some((v - m.mean) / m.std)
                    } else {
                        warnings.push(format!("{name}: zero spread for {group:?}, normalized to 0"));
                        Some(0.0)
                    }
                });
                (name.clone(), z)
            })
            .collect();
        (SegmentAcoustics { values }, warnings)
    }
}

/// Both phases in one call.
pub fn gender_normalize(segments: &[(Gender, SegmentAcoustics)]) -> (Vec<SegmentAcoustics>, NormalizationStats, Vec<String>) {
    let mut acc = NormalizationAccumulator::new();
    for (g, s) in segments {
        acc.add(*g, s);
    }
    let stats = acc.finish();
    let mut warnings = Vec::new();
    let out = segments
        .iter()
        .map(|(g, s)| {
            let (n, w) = stats.normalize(*g, s);
            warnings.extend(w);
            n
        })
        .collect();
    warnings.sort();
    warnings.dedup();
    (out, stats, warnings)
}
