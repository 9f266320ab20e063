//! Connection-method scoring, adaptive streaming rate and a replayable
//! simulated link.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rate re-evaluation period.
pub const DEFAULT_TICK_S: f64 = 0.1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("no candidate paths")]
    NoCandidates,
    #[error("invalid link metrics: {0}")]
    InvalidMetrics(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid rate config: {0}")]
    InvalidRateConfig(String),
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("trace: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub latency_s: f64,
    /// Fraction of the reference capacity, in `[0, 1]`.
    pub bandwidth: f64,
    pub reliability: f64,
}

impl LinkMetrics {
    pub fn new(latency_s: f64, bandwidth: f64, reliability: f64) -> Result<Self, NetError> {
        let m = Self {
            latency_s,
            bandwidth,
            reliability,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.latency_s.is_finite() && self.latency_s >= 0.0) {
            return Err(NetError::InvalidMetrics(format!("latency {}", self.latency_s)));
        }
        if !(0.0..=1.0).contains(&self.bandwidth) {
            return Err(NetError::InvalidMetrics(format!("bandwidth {}", self.bandwidth)));
        }
        if !(0.0..=1.0).contains(&self.reliability) {
            return Err(NetError::InvalidMetrics(format!("reliability {}", self.reliability)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub epsilon: f64,
}

impl Default for PathWeights {
    fn default() -> Self {
        Self {
            w1: 0.5,
            w2: 0.3,
            w3: 0.2,
            epsilon: 1e-3,
        }
    }
}

impl PathWeights {
    pub fn validate(&self) -> Result<(), NetError> {
        let ws = [self.w1, self.w2, self.w3];
        if ws.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(NetError::InvalidWeights(format!("{ws:?} not all in [0, 1]")));
        }
        if (ws.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(NetError::InvalidWeights("weights must sum to 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(NetError::InvalidWeights("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// `w1 / (L + eps) + w2 * B + w3 * R`.
pub fn score_method(m: &LinkMetrics, w: &PathWeights) -> f64 {
    w.w1 / (m.latency_s + w.epsilon) + w.w2 * m.bandwidth + w.w3 * m.reliability
}

/// Connection methods, declared in tie-break preference order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DirectLan,
    PortForward,
    Vpn,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::DirectLan, Method::PortForward, Method::Vpn];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::DirectLan => "direct_lan",
            Method::PortForward => "port_forward",
            Method::Vpn => "vpn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathCandidate {
    method: Method,
    metrics: LinkMetrics,
    score: f64,
}

impl PathCandidate {
    pub fn new(method: Method, metrics: LinkMetrics, w: &PathWeights) -> Self {
        Self {
            method,
            score: score_method(&metrics, w),
            metrics,
        }
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn metrics(&self) -> &LinkMetrics {
        &self.metrics
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn update(&mut self, metrics: LinkMetrics, w: &PathWeights) {
        self.metrics = metrics;
        self.score = score_method(&metrics, w);
    }
}

/// Highest-scoring method, preferring direct LAN, then port forwarding, then VPN on ties.
pub fn select_path(candidates: &[PathCandidate], w: &PathWeights) -> Result<Method, NetError> {
    candidates
        .iter()
        .map(|c| (score_method(&c.metrics, w), c.method))
        .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(_, m)| m)
        .ok_or(NetError::NoCandidates)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateConfig {
    pub r_max: f64,
    pub b_required: f64,
    pub lambda: f64,
}

impl Default for RateConfig {
    fn default() -> Self {
        // kbit/s
        Self {
            r_max: 4000.0,
            b_required: 4000.0,
            lambda: 0.5,
        }
    }
}

impl RateConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.r_max > 0.0) || !(self.b_required > 0.0) || !(self.lambda >= 0.0) {
            return Err(NetError::InvalidRateConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// `r_max * min(1, b_available / b_required) * exp(-lambda * latency)`.
pub fn adaptive_rate(cfg: &RateConfig, b_available: f64, latency_s: f64) -> f64 {
    let fill = (b_available.max(0.0) / cfg.b_required).min(1.0);
    let rate = cfg.r_max * fill * (-cfg.lambda * latency_s.max(0.0)).exp();
    rate.clamp(0.0, cfg.r_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t_s: f64,
    pub b_available: f64,
    pub latency_s: f64,
    pub loss_prob: f64,
}

/// A link whose conditions follow a step-function trace.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSession {
    trace: Vec<TracePoint>,
}

/// Validates a trace and wraps it in a session.
pub fn simulate_link(trace: Vec<TracePoint>) -> Result<LinkSession, NetError> {
    if trace.is_empty() {
        return Err(NetError::InvalidTrace("empty trace".into()));
    }
    for (i, p) in trace.iter().enumerate() {
        if !p.t_s.is_finite() || !(p.b_available >= 0.0) || !(p.latency_s >= 0.0) || !p.latency_s.is_finite() {
            return Err(NetError::InvalidTrace(format!("point {i} out of range: {p:?}")));
        }
        if !(0.0..=1.0).contains(&p.loss_prob) {
            return Err(NetError::InvalidTrace(format!("point {i} loss_prob {}", p.loss_prob)));
        }
        if i > 0 && p.t_s <= trace[i - 1].t_s {
            return Err(NetError::InvalidTrace(format!("times not strictly increasing at point {i}")));
        }
    }
    Ok(LinkSession { trace })
}

impl LinkSession {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetError> {
        simulate_link(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn constant(b_available: f64, latency_s: f64, loss_prob: f64) -> Self {
        simulate_link(vec![TracePoint {
            t_s: 0.0,
            b_available,
            latency_s,
            loss_prob,
        }])
        .expect("valid constant trace")
    }

    pub fn trace(&self) -> &[TracePoint] {
        &self.trace
    }

    pub fn start_s(&self) -> f64 {
        self.trace[0].t_s
    }

    pub fn end_s(&self) -> f64 {
        self.trace[self.trace.len() - 1].t_s
    }

    /// Conditions in force at `t`; times before the first point use the first point.
    pub fn at(&self, t: f64) -> &TracePoint {
        let idx = self.trace.partition_point(|p| p.t_s <= t);
        &self.trace[idx.saturating_sub(1)]
    }

    pub fn rate_at(&self, t: f64, cfg: &RateConfig) -> f64 {
        let p = self.at(t);
        adaptive_rate(cfg, p.b_available, p.latency_s)
    }

    /// Tick times from the first trace point through the last, inclusive.
    pub fn ticks(&self, tick_s: f64) -> impl Iterator<Item = f64> + '_ {
        let start = self.start_s();
        let n = ((self.end_s() - start) / tick_s + 1e-9).floor() as usize;
        (0..=n).map(move |i| start + i as f64 * tick_s)
    }

    /// Seeded drop decisions driven by the trace's loss probability.
    pub fn drops(&self, seed: u64) -> DropSchedule {
        DropSchedule {
            link: self.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dropped: 0,
            passed: 0,
        }
    }
}

pub struct DropSchedule {
    link: LinkSession,
    rng: ChaCha8Rng,
    dropped: u64,
    passed: u64,
}

impl DropSchedule {
    /// Whether a transmission at time `t` is lost. One RNG draw per call.
    pub fn should_drop(&mut self, t: f64) -> bool {
        let p = self.link.at(t).loss_prob;
        let drop = self.rng.gen::<f64>() < p;
        if drop {
            self.dropped += 1;
        } else {
            self.passed += 1;
        }
        drop
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn passed(&self) -> u64 {
        self.passed
    }
}

/// How a connection method alters the measured base link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodProfile {
    pub method: Method,
    pub latency_offset_s: f64,
    pub bandwidth_scale: f64,
    pub reliability_scale: f64,
}

impl MethodProfile {
    pub fn defaults() -> Vec<MethodProfile> {
        vec![
            MethodProfile {
                method: Method::DirectLan,
                latency_offset_s: 0.0,
                bandwidth_scale: 1.0,
                reliability_scale: 1.0,
            },
            MethodProfile {
                method: Method::PortForward,
                latency_offset_s: 0.02,
                bandwidth_scale: 0.95,
                reliability_scale: 0.98,
            },
            MethodProfile {
                method: Method::Vpn,
                latency_offset_s: 0.04,
                bandwidth_scale: 0.85,
                reliability_scale: 0.99,
            },
        ]
    }

    /// Effective `(b_available, latency)` over this method.
    pub fn apply(&self, p: &TracePoint) -> (f64, f64) {
        (p.b_available * self.bandwidth_scale, p.latency_s + self.latency_offset_s)
    }

    /// Metrics with bandwidth normalized against `reference_capacity`.
    pub fn metrics(&self, p: &TracePoint, reference_capacity: f64) -> LinkMetrics {
        let (b, l) = self.apply(p);
        LinkMetrics {
            latency_s: l,
            bandwidth: (b / reference_capacity).clamp(0.0, 1.0),
            reliability: ((1.0 - p.loss_prob) * self.reliability_scale).clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub t: f64,
    pub method: Method,
    pub score: f64,
    pub rate: f64,
}

/// Picks a method and rate on every tick of the session.
pub fn evaluate_session(
    link: &LinkSession,
    profiles: &[MethodProfile],
    weights: &PathWeights,
    rate: &RateConfig,
    tick_s: f64,
) -> Result<Vec<TickReport>, NetError> {
    weights.validate()?;
    rate.validate()?;
    if profiles.is_empty() {
        return Err(NetError::NoCandidates);
    }
    let mut candidates: Vec<PathCandidate> = profiles
        .iter()
        .map(|p| PathCandidate::new(p.method, p.metrics(link.at(link.start_s()), rate.b_required), weights))
        .collect();
    link.ticks(tick_s)
        .map(|t| {
            let point = link.at(t);
            for (c, p) in candidates.iter_mut().zip(profiles) {
                c.update(p.metrics(point, rate.b_required), weights);
            }
            let method = select_path(&candidates, weights)?;
            let profile = profiles.iter().find(|p| p.method == method).expect("selected from profiles");
            let (b, l) = profile.apply(point);
            let score = candidates
                .iter()
                .find(|c| c.method == method)
                .map(|c| c.score)
                .unwrap_or_default();
            Ok(TickReport {
                t,
                method,
                score,
                rate: adaptive_rate(rate, b, l),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(l: f64, b: f64, r: f64) -> LinkMetrics {
        LinkMetrics::new(l, b, r).unwrap()
    }

    #[test]
    fn score_examples() {
        let w = PathWeights::default();
        let far = score_method(&m(1e6, 0.8, 0.9), &w);
        assert!((far - (0.3 * 0.8 + 0.2 * 0.9)).abs() < 1e-6);
        assert!((score_method(&m(0.1, 0.8, 0.9), &w) - 5.37050).abs() < 1e-4);
        assert!(score_method(&m(0.05, 0.5, 0.5), &w) > score_method(&m(0.06, 0.5, 0.5), &w));
    }

    #[test]
    fn selection_examples() {
        let w = PathWeights::default();
        let same = m(0.1, 0.5, 0.9);
        let one = [PathCandidate::new(Method::Vpn, same, &w)];
        assert_eq!(select_path(&one, &w).unwrap(), Method::Vpn);
        let all: Vec<_> = Method::ALL.iter().rev().map(|&k| PathCandidate::new(k, same, &w)).collect();
        assert_eq!(select_path(&all, &w).unwrap(), Method::DirectLan);
        let mixed = [
            PathCandidate::new(Method::DirectLan, m(1.0, 0.5, 0.9), &w),
            PathCandidate::new(Method::PortForward, m(1.0, 0.5, 0.9), &w),
            PathCandidate::new(Method::Vpn, m(0.01, 0.5, 0.9), &w),
        ];
        assert_eq!(select_path(&mixed, &w).unwrap(), Method::Vpn);
        assert!(matches!(select_path(&[], &w), Err(NetError::NoCandidates)));
    }

    #[test]
    fn candidate_score_tracks_metrics() {
        let w = PathWeights::default();
        let mut c = PathCandidate::new(Method::DirectLan, m(0.1, 0.5, 0.5), &w);
        c.update(m(0.2, 0.5, 0.5), &w);
        assert_eq!(c.score(), score_method(&m(0.2, 0.5, 0.5), &w));
    }

    #[test]
    fn rate_examples() {
        let cfg = RateConfig {
            r_max: 1000.0,
            b_required: 10.0,
            lambda: 0.5,
        };
        assert_eq!(adaptive_rate(&cfg, 12.0, 0.0), 1000.0);
        assert!((adaptive_rate(&cfg, 10.0, 1.0) / 1000.0 - 0.60653).abs() < 1e-5);
        assert_eq!(adaptive_rate(&cfg, 0.0, 0.3), 0.0);
    }

    #[test]
    fn trace_must_increase() {
        let p = |t| TracePoint {
            t_s: t,
            b_available: 1.0,
            latency_s: 0.0,
            loss_prob: 0.0,
        };
        assert!(simulate_link(vec![p(0.0), p(0.0)]).is_err());
        assert!(simulate_link(vec![p(1.0), p(0.5)]).is_err());
        assert!(simulate_link(vec![]).is_err());
        assert!(simulate_link(vec![p(0.0), p(0.5)]).is_ok());
    }

    #[test]
    fn constant_trace_constant_rate() {
        let link = simulate_link(vec![
            TracePoint { t_s: 0.0, b_available: 3000.0, latency_s: 0.05, loss_prob: 0.0 },
            TracePoint { t_s: 2.0, b_available: 3000.0, latency_s: 0.05, loss_prob: 0.0 },
        ])
        .unwrap();
        let cfg = RateConfig::default();
        let rates: Vec<f64> = link.ticks(DEFAULT_TICK_S).map(|t| link.rate_at(t, &cfg)).collect();
        assert_eq!(rates.len(), 21);
        assert!(rates.iter().all(|&r| r == rates[0]));
    }

    #[test]
    fn latency_spike_dips_by_exp_factor() {
        let cfg = RateConfig::default();
        let link = simulate_link(vec![
            TracePoint { t_s: 0.0, b_available: 5000.0, latency_s: 0.02, loss_prob: 0.0 },
            TracePoint { t_s: 1.0, b_available: 5000.0, latency_s: 0.42, loss_prob: 0.0 },
            TracePoint { t_s: 1.5, b_available: 5000.0, latency_s: 0.02, loss_prob: 0.0 },
        ])
        .unwrap();
        let base = link.rate_at(0.5, &cfg);
        let spike = link.rate_at(1.2, &cfg);
        assert!((spike / base - (-cfg.lambda * 0.4f64).exp()).abs() < 1e-12);
        assert_eq!(link.rate_at(1.6, &cfg), base);
    }

    #[test]
    fn drop_schedule_is_seeded() {
        let link = LinkSession::constant(1.0, 0.0, 0.3);
        let run = |seed| {
            let mut d = link.drops(seed);
            (0..500).map(|i| d.should_drop(i as f64 * 0.01)).collect::<Vec<_>>()
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
        let drops = run(42).iter().filter(|&&d| d).count();
        assert!((100..200).contains(&drops), "{drops}");
    }

    #[test]
    fn session_picks_vpn_only_when_it_wins() {
        let link = LinkSession::constant(4000.0, 0.01, 0.0);
        let w = PathWeights::default();
        let ticks = evaluate_session(&link, &MethodProfile::defaults(), &w, &RateConfig::default(), DEFAULT_TICK_S).unwrap();
        assert_eq!(ticks.len(), 1);
        assert_eq!(ticks[0].method, Method::DirectLan);
        let json = serde_json::to_value(&ticks[0]).unwrap();
        assert_eq!(json["method"], "direct_lan");
    }

    proptest! {
        #[test]
        fn rate_bounded(b in 0.0f64..1e5, l in 0.0f64..100.0, lambda in 0.0f64..5.0) {
            let cfg = RateConfig { r_max: 500.0, b_required: 1000.0, lambda };
            let r = adaptive_rate(&cfg, b, l);
            prop_assert!((0.0..=cfg.r_max).contains(&r));
        }

        #[test]
        fn selection_ignores_order(ls in proptest::collection::vec(0.0f64..1.0, 3), rot in 0usize..3) {
            let w = PathWeights::default();
            let mut cs: Vec<_> = Method::ALL.iter().zip(&ls)
                .map(|(&k, &l)| PathCandidate::new(k, m(l, 0.5, 0.5), &w)).collect();
            let a = select_path(&cs, &w).unwrap();
            cs.rotate_left(rot);
            prop_assert_eq!(a, select_path(&cs, &w).unwrap());
        }
    }
}
