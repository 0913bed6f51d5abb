//! Mono PCM audio tracks and WAV I/O.

use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    samples: Vec<f32>,
    sample_rate: u32,
    pub device_id: String,
}

impl AudioTrack {
    pub fn new(samples: Vec<f32>, sample_rate: u32, device_id: impl Into<String>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("audio track has no samples"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("non-finite audio sample"));
        }
        Ok(Self {
            samples,
            sample_rate,
            device_id: device_id.into(),
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn seconds_to_samples(&self, s: f64) -> usize {
        (s * self.sample_rate as f64).round().max(0.0) as usize
    }

    /// Shifts the track earlier by `lag` seconds (later for negative lag),
    /// zero-filling so the length is unchanged.
    pub fn shifted(&self, lag: f64) -> Self {
        let n = self.samples.len();
        let shift = (lag * self.sample_rate as f64).round() as i64;
        let samples = (0..n as i64)
            .map(|i| {
                let j = i + shift;
                if (0..n as i64).contains(&j) {
                    self.samples[j as usize]
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            samples,
            sample_rate: self.sample_rate,
            device_id: self.device_id.clone(),
        }
    }

    /// Reads 8/16/24/32-bit integer or 32-bit float PCM; multi-channel input is
    /// averaged down to mono.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        let channels = spec.channels.max(1) as usize;
        let interleaved: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 / scale))
                    .collect::<std::result::Result<_, _>>()?
            }
        };
        let samples = interleaved
            .chunks(channels)
            .map(|frame| frame.iter().sum::<f32>() / frame.len() as f32)
            .collect();
        let device = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("track")
            .to_string();
        Self::new(samples, spec.sample_rate, device)
    }

    /// Writes 16-bit mono PCM.
    pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for s in samples {
            w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
        }
        w.finalize()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_and_downmix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dev1.wav");
        let samples: Vec<f32> = (0..800).map(|i| ((i as f32) * 0.05).sin() * 0.5).collect();
        AudioTrack::write_wav(&path, &samples, 8000).unwrap();
        let t = AudioTrack::read_wav(&path).unwrap();
        assert_eq!(t.sample_rate(), 8000);
        assert_eq!(t.device_id, "dev1");
        assert!(t.samples().iter().zip(&samples).all(|(a, b)| (a - b).abs() < 1e-4));

        let stereo = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(1 << 22).unwrap();
            w.write_sample(0).unwrap();
        }
        w.finalize().unwrap();
        let t = AudioTrack::read_wav(&stereo).unwrap();
        assert_eq!(t.samples().len(), 10);
        assert!((t.samples()[0] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn invariants_and_shift() {
        assert!(AudioTrack::new(vec![], 8000, "x").is_err());
        assert!(AudioTrack::new(vec![0.0], 0, "x").is_err());
        let t = AudioTrack::new(vec![1.0, 2.0, 3.0, 4.0], 1, "x").unwrap();
        assert_eq!(t.shifted(1.0).samples(), &[2.0, 3.0, 4.0, 0.0]);
        assert_eq!(t.shifted(-2.0).samples(), &[0.0, 0.0, 1.0, 2.0]);
    }
}
