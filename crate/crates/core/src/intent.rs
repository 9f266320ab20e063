//! Intent scoring.
//!
//! Each candidate intent gets three component scores in `[0, 1]`:
//!
//! - a pattern score, the best ratio of longest common contiguous substring
//!   to pattern length over the intent's patterns,
//! - a language-model score from a pluggable [`LlmScorer`] (the shipped
//!   [`JaccardScorer`] compares token sets),
//! - a context score, the best cosine similarity against conversation
//!   history held in a [`MemoryStore`].
//!
//! The three are fused with convex weights and candidates are ranked by the
//! result, ties broken by `intent_id`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::MemoryStore;
use crate::text;

const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum IntentError {
    #[error("intent registry is empty")]
    EmptyRegistry,
    #[error("no language-model scorer registered")]
    NoScorer,
    #[error("invalid intent {id:?}: {reason}")]
    InvalidIntent { id: String, reason: String },
    #[error("invalid fusion weights: {0}")]
    InvalidWeights(String),
    #[error("context k must be at least 1")]
    InvalidK,
    #[error("registry: {0}")]
    Registry(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One entry of the intent registry.
///
/// Beyond the matching data, an intent carries the template for the task it
/// produces: the group it is routed to, a static payload and its resource
/// needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentDef {
    pub intent_id: String,
    pub patterns: Vec<String>,
    pub task_type: String,
    #[serde(default = "default_group")]
    pub group: String,
    #[serde(default)]
    pub payload: serde_json::Value,
    #[serde(default)]
    pub resources: BTreeMap<String, f64>,
}

fn default_group() -> String {
    "default".to_string()
}

impl IntentDef {
    pub fn new(intent_id: &str, patterns: &[&str], task_type: &str) -> Self {
        Self {
            intent_id: intent_id.to_string(),
            patterns: patterns.iter().map(|p| p.to_string()).collect(),
            task_type: task_type.to_string(),
            group: default_group(),
            payload: serde_json::Value::Null,
            resources: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), IntentError> {
        let invalid = |reason: &str| IntentError::InvalidIntent {
            id: self.intent_id.clone(),
            reason: reason.to_string(),
        };
        if self.patterns.is_empty() {
            return Err(invalid("no patterns"));
        }
        if self.patterns.iter().any(|p| text::normalize(p).is_empty()) {
            return Err(invalid("empty pattern"));
        }
        Ok(())
    }

    fn vocabulary(&self) -> HashSet<String> {
        self.patterns.iter().flat_map(|p| text::tokens(p).collect::<Vec<_>>()).collect()
    }
}

/// Reads a JSON array of intents.
pub fn load_registry(path: impl AsRef<Path>) -> Result<Vec<IntentDef>, IntentError> {
    let intents: Vec<IntentDef> = serde_json::from_slice(&std::fs::read(path)?)?;
    intents.iter().try_for_each(IntentDef::validate)?;
    Ok(intents)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w_pattern: f64,
    pub w_llm: f64,
    pub w_context: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            w_pattern: 0.5,
            w_llm: 0.3,
            w_context: 0.2,
        }
    }
}

impl FusionWeights {
    pub fn new(w_pattern: f64, w_llm: f64, w_context: f64) -> Result<Self, IntentError> {
        let w = Self {
            w_pattern,
            w_llm,
            w_context,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), IntentError> {
        let all = [self.w_pattern, self.w_llm, self.w_context];
        if all.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(IntentError::InvalidWeights(format!("{all:?} not all in [0, 1]")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(IntentError::InvalidWeights(format!("sum is {sum}, expected 1")));
        }
        Ok(())
    }

    pub fn fuse(&self, p_s: f64, l_s: f64, c_context: f64) -> f64 {
        self.w_pattern * p_s + self.w_llm * l_s + self.w_context * c_context
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentScore {
    pub intent_id: String,
    pub c_intent: f64,
    pub p_s: f64,
    pub l_s: f64,
    pub c_context: f64,
}

/// Length in chars of the longest common contiguous substring.
pub fn longest_common_substring(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    let mut best = 0;
    for &ca in &a {
        for (j, &cb) in b.iter().enumerate() {
            cur[j + 1] = if ca == cb { prev[j] + 1 } else { 0 };
            best = best.max(cur[j + 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// Best substring match ratio of the command against the intent's patterns.
pub fn pattern_score(command: &str, intent: &IntentDef) -> f64 {
    let command = text::normalize(command);
    if command.is_empty() {
        return 0.0;
    }
    intent
        .patterns
        .iter()
        .map(|p| text::normalize(p))
        .filter(|p| !p.is_empty())
        .map(|p| longest_common_substring(&command, &p) as f64 / p.chars().count() as f64)
        .fold(0.0, f64::max)
}

/// Stand-in for a language-model judgement of how well a command fits an intent.
pub trait LlmScorer: Send + Sync {
    fn score(&self, command: &str, intent: &IntentDef) -> f64;
}

/// Jaccard overlap between the command's tokens and the intent's pattern vocabulary.
#[derive(Debug, Default, Clone, Copy)]
pub struct JaccardScorer;

impl LlmScorer for JaccardScorer {
    fn score(&self, command: &str, intent: &IntentDef) -> f64 {
        let cmd: HashSet<String> = text::tokens(command).collect();
        let vocab = intent.vocabulary();
        let union = cmd.union(&vocab).count();
        if union == 0 {
            return 0.0;
        }
        cmd.intersection(&vocab).count() as f64 / union as f64
    }
}

/// Best cosine similarity between the command and its top-k history matches, clamped to `[0, 1]`.
pub fn contextual_relevance(command: &str, history: &MemoryStore, k: usize) -> Result<f64, IntentError> {
    if k == 0 {
        return Err(IntentError::InvalidK);
    }
    let hits = history.query(command, k).map_err(|_| IntentError::InvalidK)?;
    Ok(hits.first().map_or(0.0, |r| r.similarity.clamp(0.0, 1.0)))
}

pub struct IntentEngine {
    intents: Vec<IntentDef>,
    weights: FusionWeights,
    scorer: Option<Box<dyn LlmScorer>>,
    context_k: usize,
    cutoff: f64,
}

impl IntentEngine {
    /// Engine with the Jaccard stub scorer, context k = 3 and cutoff 0.25.
    pub fn new(intents: Vec<IntentDef>, weights: FusionWeights) -> Result<Self, IntentError> {
        Self::builder(intents, weights).scorer(Box::new(JaccardScorer)).build()
    }

    pub fn builder(intents: Vec<IntentDef>, weights: FusionWeights) -> IntentEngineBuilder {
        IntentEngineBuilder {
            engine: IntentEngine {
                intents,
                weights,
                scorer: None,
                context_k: 3,
                cutoff: 0.25,
            },
        }
    }

    pub fn intents(&self) -> &[IntentDef] {
        &self.intents
    }

    pub fn intent(&self, id: &str) -> Option<&IntentDef> {
        self.intents.iter().find(|i| i.intent_id == id)
    }

    pub fn weights(&self) -> FusionWeights {
        self.weights
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn llm_score(&self, command: &str, intent: &IntentDef) -> Result<f64, IntentError> {
        let scorer = self.scorer.as_ref().ok_or(IntentError::NoScorer)?;
        Ok(scorer.score(command, intent).clamp(0.0, 1.0))
    }

    /// Scores every intent and ranks them best first.
    pub fn classify(&self, command: &str, history: &MemoryStore) -> Result<Vec<IntentScore>, IntentError> {
        // context does not depend on the intent
        let c_context = contextual_relevance(command, history, self.context_k)?;
        let mut scores = self
            .intents
            .iter()
            .map(|intent| {
                let p_s = pattern_score(command, intent);
                let l_s = self.llm_score(command, intent)?;
                Ok(IntentScore {
                    intent_id: intent.intent_id.clone(),
                    c_intent: self.weights.fuse(p_s, l_s, c_context),
                    p_s,
                    l_s,
                    c_context,
                })
            })
            .collect::<Result<Vec<_>, IntentError>>()?;
        rank(&mut scores);
        Ok(scores)
    }

    /// Top intent if its fused confidence reaches the cutoff.
    pub fn best_match(&self, command: &str, history: &MemoryStore) -> Result<Option<IntentScore>, IntentError> {
        Ok(self
            .classify(command, history)?
            .into_iter()
            .next()
            .filter(|s| s.c_intent >= self.cutoff))
    }
}

/// Sorts by fused confidence descending, then intent_id ascending.
pub fn rank(scores: &mut [IntentScore]) {
    scores.sort_by(|a, b| b.c_intent.total_cmp(&a.c_intent).then_with(|| a.intent_id.cmp(&b.intent_id)));
}

pub struct IntentEngineBuilder {
    engine: IntentEngine,
}

impl IntentEngineBuilder {
    pub fn scorer(mut self, scorer: Box<dyn LlmScorer>) -> Self {
        self.engine.scorer = Some(scorer);
        self
    }

    pub fn context_k(mut self, k: usize) -> Self {
        self.engine.context_k = k;
        self
    }

    pub fn cutoff(mut self, cutoff: f64) -> Self {
        self.engine.cutoff = cutoff;
        self
    }

    pub fn build(self) -> Result<IntentEngine, IntentError> {
        let e = self.engine;
        if e.intents.is_empty() {
            return Err(IntentError::EmptyRegistry);
        }
        if e.scorer.is_none() {
            return Err(IntentError::NoScorer);
        }
        if e.context_k == 0 {
            return Err(IntentError::InvalidK);
        }
        e.weights.validate()?;
        e.intents.iter().try_for_each(IntentDef::validate)?;
        Ok(e)
    }
}
