//! Synchronizing simultaneous classroom recordings and separating broadcast
//! lecture windows from group discussion by cross-recording similarity.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioTrack;
use crate::error::{Error, Result};

const ENVELOPE_RATE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub window_seconds: f64,
    pub hop_seconds: f64,
    pub search_radius_seconds: f64,
    pub max_lag_seconds: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            window_seconds: 5.0,
            hop_seconds: 2.5,
            search_radius_seconds: 2.0,
            max_lag_seconds: 60.0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.window_seconds > 0.0
            && self.hop_seconds > 0.0
            && self.search_radius_seconds >= 0.0
            && self.max_lag_seconds >= 0.0;
        if !ok {
            return Err(Error::invalid("window and hop must be positive; radius and max lag non-negative"));
        }
        Ok(())
    }
}

fn fft_pair(len: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(len), planner.plan_fft_inverse(len))
}

/// `out[k] = Σ_t a[t]·b[t+k]` for `k` in `-(a.len()-1)..b.len()`, returned as a
/// vector indexed by `k + a.len() - 1`.
fn cross_correlate(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = (a.len() + b.len()).next_power_of_two();
    let (fwd, inv) = fft_pair(n);
    cross_correlate_with(a, b, n, &*fwd, &*inv)
}

fn cross_correlate_with(a: &[f64], b: &[f64], n: usize, fwd: &dyn Fft<f64>, inv: &dyn Fft<f64>) -> Vec<f64> {
    let mut fa: Vec<Complex<f64>> = a.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fa.resize(n, Complex::default());
    let mut fb: Vec<Complex<f64>> = b.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fb.resize(n, Complex::default());
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x = x.conj() * y;
    }
    inv.process(&mut fa);
    let scale = 1.0 / n as f64;
    let la = a.len() as isize;
    (-(la - 1)..b.len() as isize)
        .map(|k| fa[k.rem_euclid(n as isize) as usize].re * scale)
        .collect()
}

fn prefix_squares(x: &[f64]) -> Vec<f64> {
    let mut p = Vec::with_capacity(x.len() + 1);
    p.push(0.0);
    let mut acc = 0.0;
    for v in x {
        acc += v * v;
        p.push(acc);
    }
    p
}

/// Zero-mean mean-absolute envelope at 1 kHz.
fn envelope(track: &AudioTrack) -> Vec<f64> {
    let block = ((track.sample_rate() as f64 / ENVELOPE_RATE).round() as usize).max(1);
    let env: Vec<f64> = track
        .samples()
        .chunks(block)
        .map(|c| c.iter().map(|v| v.abs() as f64).sum::<f64>() / c.len() as f64)
        .collect();
    let m = env.iter().sum::<f64>() / env.len() as f64;
    env.into_iter().map(|v| v - m).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetEstimate {
    /// Seconds by which `b` lags `a`; `b.shifted(lag)` lines up with `a`.
    pub lag_seconds: f64,
    /// Normalized envelope correlation over the overlap at the chosen lag.
    pub confidence: f64,
    pub low_confidence: bool,
}

/// Finds the lag in ±`max_lag` seconds maximizing the envelope
/// cross-correlation of `a` against `b`.
pub fn estimate_offset(a: &AudioTrack, b: &AudioTrack, max_lag: f64) -> Result<OffsetEstimate> {
    if a.sample_rate() != b.sample_rate() {
        return Err(Error::invalid(format!(
            "sample rate mismatch: {} vs {}",
            a.sample_rate(),
            b.sample_rate()
        )));
    }
    if !(max_lag >= 0.0 && max_lag < a.duration().min(b.duration())) {
        return Err(Error::invalid("max lag must be below both track durations"));
    }
    let ea = envelope(a);
    let eb = envelope(b);
    let max_k = (max_lag * ENVELOPE_RATE).round() as isize;
    // A correlation needs at least one envelope second of overlap.
    let min_overlap = ENVELOPE_RATE as usize;
    if ea.len() < min_overlap || eb.len() < min_overlap {
        return Err(Error::invalid("tracks shorter than one correlation window"));
    }
    let cc = cross_correlate(&ea, &eb);
    let pa = prefix_squares(&ea);
    let pb = prefix_squares(&eb);
    let (na, nb) = (ea.len() as isize, eb.len() as isize);

    let mut rs: Vec<(isize, f64)> = Vec::new();
    for k in -max_k..=max_k {
        // Overlap: a[t] with b[t+k], 0 <= t < na, 0 <= t+k < nb.
        let t0 = 0.max(-k);
        let t1 = na.min(nb - k);
        if t1 - t0 < min_overlap as isize {
            continue;
        }
        let ea2 = pa[t1 as usize] - pa[t0 as usize];
        let eb2 = pb[(t1 + k) as usize] - pb[(t0 + k) as usize];
        let denom = (ea2 * eb2).sqrt();
        rs.push((k, if denom > 0.0 { cc[(k + na - 1) as usize] / denom } else { 0.0 }));
    }
    let &(k, r) = rs
        .iter()
        .reduce(|a, b| if b.1 > a.1 { b } else { a })
        .ok_or_else(|| Error::invalid("tracks shorter than one correlation window"))?;
    // Empirical null from the spread of correlations across all tested lags.
    let mut sorted: Vec<f64> = rs.iter().map(|p| p.1).collect();
    sorted.sort_by(f64::total_cmp);
    let med = crate::stats::quantile_sorted(&sorted, 0.5);
    let mut dev: Vec<f64> = sorted.iter().map(|v| (v - med).abs()).collect();
    dev.sort_by(f64::total_cmp);
    let spread = 1.4826 * crate::stats::quantile_sorted(&dev, 0.5);
    let null_max = (2.0 * (rs.len().max(2) as f64).ln()).sqrt();
    let z = if spread > 0.0 { (r - med) / spread } else { f64::INFINITY };
    Ok(OffsetEstimate {
        lag_seconds: k as f64 / ENVELOPE_RATE,
        confidence: r.clamp(-1.0, 1.0),
        low_confidence: r <= 0.0 || z < null_max + 3.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub window_seconds: f64,
    pub hop_seconds: f64,
    pub values: Vec<f64>,
}

pub fn window_count(duration: f64, window: f64, hop: f64) -> usize {
    if duration + 1e-9 < window {
        0
    } else {
        (((duration - window) / hop) + 1e-9).floor() as usize + 1
    }
}

/// Per target window, the best zero-mean normalized cross-correlation against
/// any other track at any sample offset within ±`search_radius`.
pub fn similarity_profile(
    target: &AudioTrack,
    others: &[AudioTrack],
    window: f64,
    hop: f64,
    search_radius: f64,
) -> Result<SimilarityProfile> {
    if others.is_empty() {
        return Err(Error::invalid("similarity needs at least one other track"));
    }
    if !(window > 0.0 && hop > 0.0 && search_radius >= 0.0) {
        return Err(Error::invalid("window and hop must be positive"));
    }
    if others.iter().any(|o| o.sample_rate() != target.sample_rate()) {
        return Err(Error::invalid("sample rate mismatch"));
    }
    if window > target.duration() + 1e-9 {
        return Err(Error::invalid("window longer than track"));
    }
    let sr = target.sample_rate() as f64;
    let wlen = (window * sr).round() as usize;
    let radius = (search_radius * sr).round() as usize;
    let count = window_count(target.duration(), window, hop);
    let fft_len = (2 * wlen + 2 * radius).next_power_of_two();
    let (fwd, inv) = fft_pair(fft_len);
    let others_f64: Vec<Vec<f64>> = others
        .iter()
        .map(|o| o.samples().iter().map(|&v| v as f64).collect())
        .collect();
    let others_prefix: Vec<(Vec<f64>, Vec<f64>)> = others_f64
        .iter()
        .map(|o| {
            let mut s = Vec::with_capacity(o.len() + 1);
            s.push(0.0);
            let mut acc = 0.0;
            for v in o {
                acc += v;
                s.push(acc);
            }
            (s, prefix_squares(o))
        })
        .collect();

    let values = (0..count)
        .into_par_iter()
        .map(|i| {
            let start = ((i as f64 * hop) * sr).round() as usize;
            let end = (start + wlen).min(target.samples().len());
            let w: Vec<f64> = target.samples()[start..end].iter().map(|&v| v as f64).collect();
            let m = w.iter().sum::<f64>() / w.len() as f64;
            let w: Vec<f64> = w.into_iter().map(|v| v - m).collect();
            let wnorm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if wnorm <= 0.0 {
                return 0.0;
            }
            let len = w.len();
            let mut best = f64::NEG_INFINITY;
            for (o, (sum, sq)) in others_f64.iter().zip(&others_prefix) {
                if o.len() < len {
                    continue;
                }
                let r0 = start.saturating_sub(radius);
                let r1 = (start + radius + len).min(o.len());
                if r1 < r0 + len {
                    continue;
                }
                let region = &o[r0..r1];
                let cc = cross_correlate_with(&w, region, fft_len, &*fwd, &*inv);
                // Window is zero-mean, so Σ w·(o − ō) = Σ w·o.
                for off in 0..=(region.len() - len) {
                    let s0 = r0 + off;
                    let s1 = s0 + len;
                    let s = sum[s1] - sum[s0];
                    let var = (sq[s1] - sq[s0]) - s * s / len as f64;
                    if var <= 1e-12 * len as f64 {
                        continue;
                    }
                    let r = cc[off + len - 1] / (wnorm * var.sqrt());
                    if r > best {
                        best = r;
                    }
                }
            }
            if best.is_finite() {
                best.clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok(SimilarityProfile {
        window_seconds: window,
        hop_seconds: hop,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WindowLabel {
    Lecture,
    Discussion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Thresholding {
    pub labels: Vec<WindowLabel>,
    pub threshold: Option<f64>,
    pub warnings: Vec<String>,
}

const OTSU_BINS: usize = 64;

/// Otsu's two-class split over a 64-bin histogram; values at or above the
/// threshold are lecture.
pub fn threshold_profile(profile: &SimilarityProfile) -> Result<Thresholding> {
    let v = &profile.values;
    if v.len() < 2 {
        return Err(Error::invalid("thresholding needs at least two windows"));
    }
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 {
        return Ok(Thresholding {
            labels: vec![WindowLabel::Discussion; v.len()],
            threshold: None,
            warnings: vec!["degenerate similarity profile: all windows labeled discussion".into()],
        });
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let bin = |x: f64| (((x - lo) / width) as usize).min(OTSU_BINS - 1);
    let mut hist = [0usize; OTSU_BINS];
    for &x in v {
        hist[bin(x)] += 1;
    }
    let centre = |b: usize| lo + (b as f64 + 0.5) * width;
    let total = v.len() as f64;
    let sum_all: f64 = (0..OTSU_BINS).map(|b| hist[b] as f64 * centre(b)).sum();
    let (mut w0, mut s0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 1usize);
    for t in 1..OTSU_BINS {
        w0 += hist[t - 1] as f64;
        s0 += hist[t - 1] as f64 * centre(t - 1);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = s0 / w0;
        let m1 = (sum_all - s0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 + 1e-12 {
            best = (between, t);
        }
    }
    let t = best.1;
    let labels = v
        .iter()
        .map(|&x| if bin(x) >= t { WindowLabel::Lecture } else { WindowLabel::Discussion })
        .collect();
    Ok(Thresholding {
        labels,
        threshold: Some(lo + t as f64 * width),
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExcisedAudio {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    /// Kept spans in original-track seconds, in order.
    pub keep: Vec<(f64, f64)>,
    pub excised_seconds: f64,
    pub warnings: Vec<String>,
}

impl ExcisedAudio {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn write_cut_list<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["keep_start_s", "keep_end_s"])?;
        for (a, b) in &self.keep {
            w.write_record([format!("{a:.3}"), format!("{b:.3}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Keeps discussion audio. Window `i` owns `[i·hop, (i+1)·hop)`; the last
/// window owns everything to the end of the track.
pub fn excise_lecture(audio: &AudioTrack, labels: &[WindowLabel], window: f64, hop: f64) -> Result<ExcisedAudio> {
    let expected = window_count(audio.duration(), window, hop);
    if labels.len() != expected || labels.is_empty() {
        return Err(Error::invalid(format!(
            "labels do not cover the track: expected {expected} windows, got {}",
            labels.len()
        )));
    }
    let n = audio.samples().len();
    let sr = audio.sample_rate() as f64;
    let cell = |i: usize| -> (usize, usize) {
        let s = ((i as f64 * hop) * sr).round() as usize;
        let e = if i + 1 == labels.len() {
            n
        } else {
            (((i + 1) as f64 * hop) * sr).round() as usize
        };
        (s.min(n), e.min(n))
    };
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        if *l != WindowLabel::Discussion {
            continue;
        }
        let (s, e) = cell(i);
        match spans.last_mut() {
            Some(last) if last.1 == s => last.1 = e,
            _ => spans.push((s, e)),
        }
    }
    let mut samples = Vec::new();
    for &(s, e) in &spans {
        samples.extend_from_slice(&audio.samples()[s..e]);
    }
    let mut warnings = Vec::new();
    if samples.is_empty() {
        warnings.push(format!("{}: every window labeled lecture, no discussion audio kept", audio.device_id));
    }
    let kept = samples.len();
    Ok(ExcisedAudio {
        samples,
        sample_rate: audio.sample_rate(),
        keep: spans.iter().map(|&(s, e)| (s as f64 / sr, e as f64 / sr)).collect(),
        excised_seconds: (n - kept) as f64 / sr,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackSplit {
    pub device_id: String,
    /// Seconds this track lags the reference (first) track.
    pub offset: OffsetEstimate,
    pub profile: SimilarityProfile,
    pub thresholding: Thresholding,
    pub excised: ExcisedAudio,
}

/// Aligns every track to the first, then labels and excises each one against
/// the rest. Labels and cut lists are in each track's own time base.
pub fn split_session(tracks: &[AudioTrack], config: &SplitConfig) -> Result<Vec<TrackSplit>> {
    config.validate()?;
    if tracks.len() < 2 {
        return Err(Error::invalid("a session needs at least two simultaneous recordings"));
    }
    let reference = &tracks[0];
    let max_lag = config
        .max_lag_seconds
        .min(tracks.iter().map(AudioTrack::duration).fold(f64::INFINITY, f64::min) * 0.5);
    let offsets: Vec<OffsetEstimate> = tracks
        .par_iter()
        .map(|t| estimate_offset(reference, t, max_lag))
        .collect::<Result<_>>()?;

    (0..tracks.len())
        .into_par_iter()
        .map(|i| {
            // Others moved into track i's time base.
            let others: Vec<AudioTrack> = (0..tracks.len())
                .filter(|&j| j != i)
                .map(|j| tracks[j].shifted(offsets[j].lag_seconds - offsets[i].lag_seconds))
                .collect();
            let profile = similarity_profile(
                &tracks[i],
                &others,
                config.window_seconds,
                config.hop_seconds,
                config.search_radius_seconds,
            )?;
            let thresholding = threshold_profile(&profile)?;
            let excised = excise_lecture(&tracks[i], &thresholding.labels, config.window_seconds, config.hop_seconds)?;
            Ok(TrackSplit {
                device_id: tracks[i].device_id.clone(),
                offset: offsets[i],
                profile,
                thresholding,
                excised,
            })
        })
        .collect()
}
