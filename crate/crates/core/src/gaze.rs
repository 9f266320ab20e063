//! Binocular gaze fusion and streaming.
//!
//! Each eye is weighted by `c² / (c² + σ²)` where `c` is the tracker
//! confidence and `σ` the noise standard deviation; the weighted mean of the
//! two directions is renormalized and mapped to world space with the
//! per-user calibration `R·g + t`. The transform is applied to the direction
//! exactly as configured, so with a non-zero `t` the output is a point
//! offset from the calibration origin.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{BusError, Envelope, MessageSink, ReconnectingPublisher};

pub const DEFAULT_RATE_HZ: f64 = 30.0;
pub const DEFAULT_PAIRING_WINDOW_US: u64 = 5_000;
pub const DEFAULT_BUFFER_S: f64 = 10.0;

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GazeError {
    #[error("gaze vector is not unit length (norm {0})")]
    NotUnit(f64),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("invalid calibration: {0}")]
    BadCalibration(String),
    #[error("samples {delta_us} us apart exceed the {window_us} us pairing window")]
    Pairing { delta_us: u64, window_us: u64 },
    #[error("expected one left and one right sample")]
    WrongEyes,
    #[error("both eyes have zero weight; sample dropped")]
    ZeroWeight,
    #[error("bus: {0}")]
    Bus(#[from] BusError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eye {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonocularSample {
    pub eye: Eye,
    pub gaze: Vector3<f64>,
    pub confidence: f64,
    /// Standard deviation; squared into a variance when weighting.
    pub noise_sigma: f64,
    pub timestamp_us: u64,
}

impl MonocularSample {
    pub fn new(eye: Eye, gaze: Vector3<f64>, confidence: f64, noise_sigma: f64, timestamp_us: u64) -> Result<Self, GazeError> {
        let s = Self {
            eye,
            gaze,
            confidence,
            noise_sigma,
            timestamp_us,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), GazeError> {
        let n = self.gaze.norm();
        if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(GazeError::NotUnit(n));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(GazeError::InvalidSample(format!("confidence {}", self.confidence)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(GazeError::InvalidSample(format!("noise_sigma {}", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn weight(&self) -> f64 {
        eye_weight(self.confidence, self.noise_sigma)
    }
}

/// `c² / (c² + σ²)`, taken as 0 when both are 0.
pub fn eye_weight(confidence: f64, noise_sigma: f64) -> f64 {
    let c2 = confidence * confidence;
    let denom = c2 + noise_sigma * noise_sigma;
    if denom == 0.0 {
        0.0
    } else {
        c2 / denom
    }
}

/// Weighted mean of two directions, renormalized. `None` when the weights
/// sum to zero or the mean vanishes.
pub fn fuse_directions(left: &Vector3<f64>, w_left: f64, right: &Vector3<f64>, w_right: f64) -> Option<Vector3<f64>> {
    let total = w_left + w_right;
    if !(total > 0.0) {
        return None;
    }
    let mean = (left * w_left + right * w_right) / total;
    let n = mean.norm();
    (n > 0.0).then(|| mean / n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibrationFile {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl Default for Calibration {
    fn default() -> Self {
        Self::identity()
    }
}

impl Calibration {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rejects anything that is not a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GazeError> {
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho_err <= 1e-6) {
            return Err(GazeError::BadCalibration(format!("R^T R deviates from I by {ortho_err}")));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= 1e-6) {
            return Err(GazeError::BadCalibration(format!("det(R) = {det}")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GazeError::BadCalibration("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    /// Reads `{"rotation": [9 floats, row-major], "translation": [3 floats]}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GazeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self, GazeError> {
        let f: CalibrationFile = serde_json::from_str(text)?;
        Self::new(Matrix3::from_row_slice(&f.rotation), Vector3::from(f.translation))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }
}

pub fn to_world(g: &Vector3<f64>, cal: &Calibration) -> Vector3<f64> {
    cal.rotation * g + cal.translation
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedGaze {
    pub gaze_combined: Vector3<f64>,
    pub p_world: Vector3<f64>,
    pub w_left: f64,
    pub w_right: f64,
    pub timestamp_us: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct GazeFuser {
    pub calibration: Calibration,
    pub pairing_window_us: u64,
}

impl Default for GazeFuser {
    fn default() -> Self {
        Self {
            calibration: Calibration::identity(),
            pairing_window_us: DEFAULT_PAIRING_WINDOW_US,
        }
    }
}

impl GazeFuser {
    pub fn new(calibration: Calibration) -> Self {
        Self {
            calibration,
            ..Default::default()
        }
    }

    pub fn fuse(&self, left: &MonocularSample, right: &MonocularSample) -> Result<FusedGaze, GazeError> {
        if left.eye != Eye::Left || right.eye != Eye::Right {
            return Err(GazeError::WrongEyes);
        }
        left.validate()?;
        right.validate()?;
        let delta_us = left.timestamp_us.abs_diff(right.timestamp_us);
        if delta_us > self.pairing_window_us {
            return Err(GazeError::Pairing {
                delta_us,
                window_us: self.pairing_window_us,
            });
        }
        let (w_left, w_right) = (left.weight(), right.weight());
        let g = fuse_directions(&left.gaze, w_left, &right.gaze, w_right).ok_or(GazeError::ZeroWeight)?;
        Ok(FusedGaze {
            gaze_combined: g,
            p_world: to_world(&g, &self.calibration),
            w_left,
            w_right,
            timestamp_us: left.timestamp_us.min(right.timestamp_us) + delta_us / 2,
        })
    }
}

/// Payload published on `gaze.<device_id>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeMessage {
    pub ts_us: u64,
    pub gaze: [f64; 3],
    pub p_world: [f64; 3],
    pub w_l: f64,
    pub w_r: f64,
    pub seq: u64,
}

impl GazeMessage {
    pub fn new(f: &FusedGaze, seq: u64) -> Self {
        Self {
            ts_us: f.timestamp_us,
            gaze: f.gaze_combined.into(),
            p_world: f.p_world.into(),
            w_l: f.w_left,
            w_r: f.w_right,
            seq,
        }
    }
}

/// One scripted stretch of eye movement. Angles are in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GazeSegment {
    Fixation { duration_s: f64, yaw_deg: f64, pitch_deg: f64 },
    Saccade { duration_s: f64, to_yaw_deg: f64, to_pitch_deg: f64 },
}

impl GazeSegment {
    fn duration_s(&self) -> f64 {
        match self {
            GazeSegment::Fixation { duration_s, .. } | GazeSegment::Saccade { duration_s, .. } => *duration_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeScript {
    #[serde(default = "default_device")]
    pub device_id: String,
    #[serde(default = "default_rate")]
    pub rate_hz: f64,
    pub segments: Vec<GazeSegment>,
}

fn default_device() -> String {
    "glasses-01".into()
}

fn default_rate() -> f64 {
    DEFAULT_RATE_HZ
}

impl GazeScript {
    pub fn fixation(seconds: f64) -> Self {
        Self {
            device_id: default_device(),
            rate_hz: DEFAULT_RATE_HZ,
            segments: vec![GazeSegment::Fixation {
                duration_s: seconds,
                yaw_deg: 0.0,
                pitch_deg: 0.0,
            }],
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.segments.iter().map(GazeSegment::duration_s).sum()
    }

    /// Yaw and pitch at time `t`, interpolating linearly through saccades.
    fn angles_at(&self, t: f64) -> (f64, f64) {
        let mut start = 0.0;
        let mut pose = (0.0, 0.0);
        for seg in &self.segments {
            let d = seg.duration_s();
            match seg {
                GazeSegment::Fixation { yaw_deg, pitch_deg, .. } => {
                    pose = (*yaw_deg, *pitch_deg);
                    if t < start + d {
                        return pose;
                    }
                }
                GazeSegment::Saccade {
                    to_yaw_deg, to_pitch_deg, ..
                } => {
                    if t < start + d {
                        let f = if d > 0.0 { (t - start) / d } else { 1.0 };
                        return (pose.0 + f * (to_yaw_deg - pose.0), pose.1 + f * (to_pitch_deg - pose.1));
                    }
                    pose = (*to_yaw_deg, *to_pitch_deg);
                }
            }
            start += d;
        }
        pose
    }
}

fn direction(yaw_deg: f64, pitch_deg: f64) -> Vector3<f64> {
    let (y, p) = (yaw_deg.to_radians(), pitch_deg.to_radians());
    Vector3::new(y.sin() * p.cos(), p.sin(), y.cos() * p.cos()).normalize()
}

/// Scripted binocular samples with seeded jitter, confidence and noise.
/// At most one eye blinks (confidence 0) per frame.
pub struct SyntheticGaze {
    script: GazeScript,
    rng: ChaCha8Rng,
    tick: u64,
    ticks: u64,
}

impl SyntheticGaze {
    pub fn new(script: GazeScript, seed: u64) -> Self {
        let ticks = (script.duration_s() * script.rate_hz + 1e-9).floor() as u64;
        Self {
            script,
            rng: ChaCha8Rng::seed_from_u64(seed),
            tick: 0,
            ticks,
        }
    }

    fn eye(&mut self, eye: Eye, yaw: f64, pitch: f64, ts: u64, blink: bool) -> MonocularSample {
        let vergence = match eye {
            Eye::Left => 1.0,
            Eye::Right => -1.0,
        };
        let jitter = self.rng.gen_range(-0.3..0.3);
        let g = direction(yaw + vergence + jitter, pitch + self.rng.gen_range(-0.3..0.3));
        let confidence = if blink { 0.0 } else { self.rng.gen_range(0.7..1.0) };
        let noise_sigma = self.rng.gen_range(0.02..0.2);
        let skew = self.rng.gen_range(0..=1_000u64);
        MonocularSample {
            eye,
            gaze: g,
            confidence,
            noise_sigma,
            timestamp_us: ts + skew,
        }
    }
}

impl Iterator for SyntheticGaze {
    type Item = (MonocularSample, MonocularSample);

    fn next(&mut self) -> Option<Self::Item> {
        if self.tick >= self.ticks {
            return None;
        }
        let t = self.tick as f64 / self.script.rate_hz;
        let ts = (t * 1e6).round() as u64;
        let (yaw, pitch) = self.script.angles_at(t);
        let blink: f64 = self.rng.gen();
        let (blink_l, blink_r) = (blink < 0.02, (0.02..0.04).contains(&blink));
        let l = self.eye(Eye::Left, yaw, pitch, ts, blink_l);
        let r = self.eye(Eye::Right, yaw, pitch, ts, blink_r);
        self.tick += 1;
        Some((l, r))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GazeStreamStats {
    pub fused: u64,
    pub published: u64,
    pub zero_weight_dropped: u64,
    pub pairing_errors: u64,
    pub overflow_dropped: u64,
}

/// Fuses sample pairs and publishes them on `gaze.<device_id>`, buffering
/// up to `buffer_s` seconds of messages while the bus is unreachable.
pub struct GazeStream<S: MessageSink> {
    device_id: String,
    topic: String,
    fuser: GazeFuser,
    publisher: ReconnectingPublisher<S>,
    seq: u64,
    stats: GazeStreamStats,
}

impl<S: MessageSink> GazeStream<S> {
    pub fn new(sink: S, device_id: &str, fuser: GazeFuser, rate_hz: f64, buffer_s: f64) -> Self {
        let cap = (rate_hz * buffer_s).ceil().max(1.0) as usize;
        Self {
            device_id: device_id.to_string(),
            topic: format!("gaze.{device_id}"),
            fuser,
            publisher: ReconnectingPublisher::new(sink, cap),
            seq: 0,
            stats: GazeStreamStats::default(),
        }
    }

    pub fn topic(&self) -> &str {
        &self.topic
    }

    pub fn stats(&self) -> GazeStreamStats {
        GazeStreamStats {
            overflow_dropped: self.publisher.overflow_dropped(),
            ..self.stats
        }
    }

    pub fn disconnect(&mut self) {
        self.publisher.disconnect();
    }

    pub fn reconnect(&mut self) -> Result<(), GazeError> {
        let n = self.publisher.reconnect()?.len() as u64;
        self.stats.published += n;
        Ok(())
    }

    pub fn is_connected(&self) -> bool {
        self.publisher.is_connected()
    }

    /// Fuses one pair and sends it. Returns the message, or `None` when the
    /// pair was dropped as unusable.
    pub fn push(&mut self, left: &MonocularSample, right: &MonocularSample) -> Result<Option<GazeMessage>, GazeError> {
        let fused = match self.fuser.fuse(left, right) {
            Ok(f) => f,
            Err(GazeError::ZeroWeight) => {
                self.stats.zero_weight_dropped += 1;
                return Ok(None);
            }
            Err(GazeError::Pairing { .. }) => {
                self.stats.pairing_errors += 1;
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        self.stats.fused += 1;
        let msg = GazeMessage::new(&fused, self.seq);
        self.seq += 1;
        let env = Envelope::new(&self.topic, "gaze", &self.device_id, serde_json::to_value(&msg)?).with_ts(msg.ts_us.max(1));
        if self.publisher.send(env)?.is_some() {
            self.stats.published += 1;
        }
        Ok(Some(msg))
    }

    pub fn into_sink(self) -> S {
        self.publisher.into_inner()
    }
}
