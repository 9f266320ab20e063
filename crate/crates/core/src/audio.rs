//! Sliding-window segmentation of mono PCM audio and energy/ZCR voice
//! activity detection.
//!
//! Window `i` starts at sample `i * hop` and spans `window` samples, where
//! both lengths are derived from the configured durations at the stream's
//! sample rate. A trailing partial window is discarded rather than padded.
//! Energy is the sum of squared amplitudes after normalizing 16-bit samples
//! to `[-1, 1)`; ZCR is the number of sign changes over `N - 1` adjacent
//! pairs, with zero counted as positive.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SAMPLE_RATE_HZ: u32 = 16_000;

const I16_SCALE: f64 = 32768.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("invalid segmenter config: {0}")]
    InvalidConfig(String),
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error("cannot classify an empty window")]
    EmptyWindow,
    #[error("unsupported wav format: {0}")]
    UnsupportedFormat(String),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A mono 16-bit PCM signal.
#[derive(Debug, Clone, PartialEq)]
pub struct PcmStream {
    pub samples: Vec<i16>,
    pub sample_rate_hz: u32,
    pub start_time_s: f64,
}

impl PcmStream {
    pub fn new(samples: Vec<i16>, sample_rate_hz: u32) -> Result<Self, AudioError> {
        if sample_rate_hz == 0 {
            return Err(AudioError::InvalidSampleRate);
        }
        Ok(Self {
            samples,
            sample_rate_hz,
            start_time_s: 0.0,
        })
    }

    /// Builds a stream from normalized amplitudes, clamping to the i16 range.
    pub fn from_normalized(samples: &[f64], sample_rate_hz: u32) -> Result<Self, AudioError> {
        let pcm = samples
            .iter()
            .map(|s| (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16)
            .collect();
        Self::new(pcm, sample_rate_hz)
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Reads a 16-bit mono WAV file.
    pub fn from_wav(path: impl AsRef<Path>) -> Result<Self, AudioError> {
        let reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(AudioError::UnsupportedFormat(format!(
                "{} channels, expected mono",
                spec.channels
            )));
        }
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(AudioError::UnsupportedFormat(format!(
                "{:?} {}-bit, expected 16-bit integer PCM",
                spec.sample_format, spec.bits_per_sample
            )));
        }
        let samples = reader.into_samples::<i16>().collect::<Result<Vec<_>, _>>()?;
        Self::new(samples, spec.sample_rate)
    }

    /// Reads headerless little-endian 16-bit PCM. An odd trailing byte is ignored.
    pub fn from_raw(path: impl AsRef<Path>, sample_rate_hz: u32) -> Result<Self, AudioError> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        let samples = bytes
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]))
            .collect();
        Self::new(samples, sample_rate_hz)
    }

    /// Opens `.wav` files through the WAV reader and anything else as raw PCM.
    pub fn open(path: impl AsRef<Path>, raw_rate_hz: u32) -> Result<Self, AudioError> {
        let path = path.as_ref();
        let is_wav = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if is_wav {
            Self::from_wav(path)
        } else {
            Self::from_raw(path, raw_rate_hz)
        }
    }

    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<(), AudioError> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate_hz,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            writer.write_sample(s)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub window_duration_s: f64,
    pub hop_s: f64,
    pub energy_threshold: f64,
    pub zcr_threshold: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            window_duration_s: 1.0,
            hop_s: 0.5,
            energy_threshold: 2.0,
            zcr_threshold: 0.35,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<(), AudioError> {
        let bad = |m: &str| Err(AudioError::InvalidConfig(m.to_string()));
        if !(self.window_duration_s.is_finite() && self.window_duration_s > 0.0) {
            return bad("window_duration_s must be positive");
        }
        if !(self.hop_s.is_finite() && self.hop_s > 0.0) {
            return bad("hop_s must be positive");
        }
        if self.hop_s > self.window_duration_s {
            return bad("hop_s must not exceed window_duration_s");
        }
        if !(self.energy_threshold >= 0.0) {
            return bad("energy_threshold must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.zcr_threshold) {
            return bad("zcr_threshold must lie in [0, 1]");
        }
        Ok(())
    }

    /// Window and hop lengths in samples at `rate`.
    pub fn sample_lengths(&self, rate: u32) -> Result<(usize, usize), AudioError> {
        self.validate()?;
        let window = (self.window_duration_s * rate as f64).round() as usize;
        let hop = (self.hop_s * rate as f64).round() as usize;
        if hop == 0 || window == 0 {
            return Err(AudioError::InvalidConfig(format!(
                "window or hop shorter than one sample at {rate} Hz"
            )));
        }
        Ok((window, hop.min(window)))
    }
}

/// Fraction of each window shared with the next one.
pub fn overlap_ratio(cfg: &SegmenterConfig) -> Result<f64, AudioError> {
    cfg.validate()?;
    Ok((cfg.window_duration_s - cfg.hop_s) / cfg.window_duration_s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioWindow {
    pub index: usize,
    pub start_time_s: f64,
    pub end_time_s: f64,
    /// Offset of the first sample within the stream.
    pub start_sample: usize,
    pub samples: Vec<i16>,
    pub energy: f64,
    pub zcr: f64,
}

impl AudioWindow {
    pub fn new(index: usize, start_time_s: f64, end_time_s: f64, start_sample: usize, samples: Vec<i16>) -> Self {
        let (energy, zcr) = features(&samples);
        Self {
            index,
            start_time_s,
            end_time_s,
            start_sample,
            samples,
            energy,
            zcr,
        }
    }
}

/// Energy and zero-crossing rate of a slice of PCM samples.
pub fn features(samples: &[i16]) -> (f64, f64) {
    let energy = samples
        .iter()
        .map(|&s| {
            let a = s as f64 / I16_SCALE;
            a * a
        })
        .sum();
    let zcr = if samples.len() < 2 {
        0.0
    } else {
        let crossings = samples
            .windows(2)
            .filter(|p| (p[0] >= 0) != (p[1] >= 0))
            .count();
        crossings as f64 / (samples.len() - 1) as f64
    };
    (energy, zcr)
}

/// Returns window `index` of `stream`, or `None` once less than a full window remains.
pub fn next_window(
    stream: &PcmStream,
    cfg: &SegmenterConfig,
    index: usize,
) -> Result<Option<AudioWindow>, AudioError> {
    if stream.sample_rate_hz == 0 {
        return Err(AudioError::InvalidSampleRate);
    }
    let (window, hop) = cfg.sample_lengths(stream.sample_rate_hz)?;
    let Some(start) = index.checked_mul(hop) else {
        return Ok(None);
    };
    let end = start + window;
    if end > stream.samples.len() {
        return Ok(None);
    }
    let rate = stream.sample_rate_hz as f64;
    Ok(Some(AudioWindow::new(
        index,
        stream.start_time_s + start as f64 / rate,
        stream.start_time_s + end as f64 / rate,
        start,
        stream.samples[start..end].to_vec(),
    )))
}

/// Iterator over all full windows of a stream.
pub struct Windows<'a> {
    stream: &'a PcmStream,
    cfg: SegmenterConfig,
    index: usize,
}

impl<'a> Windows<'a> {
    pub fn new(stream: &'a PcmStream, cfg: SegmenterConfig) -> Result<Self, AudioError> {
        if stream.sample_rate_hz == 0 {
            return Err(AudioError::InvalidSampleRate);
        }
        cfg.sample_lengths(stream.sample_rate_hz)?;
        Ok(Self { stream, cfg, index: 0 })
    }
}

impl Iterator for Windows<'_> {
    type Item = AudioWindow;

    fn next(&mut self) -> Option<AudioWindow> {
        // config was validated in `new`
        let w = next_window(self.stream, &self.cfg, self.index).ok().flatten()?;
        self.index += 1;
        Some(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VadDecision {
    pub window_index: usize,
    pub is_speech: bool,
    pub energy: f64,
    pub zcr: f64,
}

/// Speech iff energy exceeds the energy threshold and ZCR is below the ZCR threshold.
pub fn vad_classify(window: &AudioWindow, cfg: &SegmenterConfig) -> Result<VadDecision, AudioError> {
    if window.samples.is_empty() {
        return Err(AudioError::EmptyWindow);
    }
    let (energy, zcr) = features(&window.samples);
    Ok(VadDecision {
        window_index: window.index,
        is_speech: energy > cfg.energy_threshold && zcr < cfg.zcr_threshold,
        energy,
        zcr,
    })
}

/// One line of the segmenter's NDJSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VadRecord {
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub energy: f64,
    pub zcr: f64,
    pub is_speech: bool,
}

impl VadRecord {
    pub fn new(window: &AudioWindow, decision: &VadDecision) -> Self {
        Self {
            index: window.index,
            start_s: window.start_time_s,
            end_s: window.end_time_s,
            energy: decision.energy,
            zcr: decision.zcr,
            is_speech: decision.is_speech,
        }
    }
}

/// Segments and classifies a whole stream.
pub fn segment(stream: &PcmStream, cfg: &SegmenterConfig) -> Result<Vec<VadRecord>, AudioError> {
    Windows::new(stream, *cfg)?
        .map(|w| vad_classify(&w, cfg).map(|d| VadRecord::new(&w, &d)))
        .collect()
}

/// Seeded test signals.
pub mod synth {
    use std::f64::consts::TAU;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{AudioError, PcmStream};

    /// Low-level background hiss, well under the speech energy threshold.
    pub fn silence(seconds: f64, rate: u32, seed: u64) -> Result<PcmStream, AudioError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (seconds * rate as f64).round() as usize;
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.002..0.002)).collect();
        PcmStream::from_normalized(&s, rate)
    }

    /// Voiced-speech stand-in: a harmonic series on a drifting pitch with
    /// syllable-rate amplitude modulation, padded by `pad_s` of hiss.
    pub fn voiced(seconds: f64, pad_s: f64, rate: u32, seed: u64) -> Result<PcmStream, AudioError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fs = rate as f64;
        let (pad, body) = ((pad_s * fs).round() as usize, (seconds * fs).round() as usize);
        let f0 = rng.gen_range(110.0..180.0);
        let mut phase = 0.0f64;
        let mut out = Vec::with_capacity(body + 2 * pad);
        for i in 0..body + 2 * pad {
            let hiss = rng.gen_range(-0.002..0.002);
            if i < pad || i >= pad + body {
                out.push(hiss);
                continue;
            }
            let t = (i - pad) as f64 / fs;
            let f = f0 * (1.0 + 0.08 * (TAU * 0.7 * t).sin());
            phase += TAU * f / fs;
            let harmonics: f64 = (1..=5).map(|h| (h as f64 * phase).sin() / h as f64).sum();
            let envelope = 0.55 + 0.45 * (TAU * 4.0 * t).sin();
            out.push(0.25 * envelope * harmonics + hiss);
        }
        PcmStream::from_normalized(&out, rate)
    }
}
