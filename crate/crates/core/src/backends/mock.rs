//! Deterministic in-process backends for tests and offline sweeps.

use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{BackendCapabilities, BackendError, EmbeddingBackend, GenerationRequest, TextBackend};
use crate::prompts;
use crate::text::{fnv1a, split_sentences};

fn caps(name: &str, max_temperature: f64) -> BackendCapabilities {
    BackendCapabilities {
        max_temperature,
        supports_seed: true,
        model_name: name.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptedReply {
    Text(String),
    Error(BackendError),
}

impl From<&str> for ScriptedReply {
    fn from(s: &str) -> Self {
        ScriptedReply::Text(s.to_string())
    }
}

#[derive(Debug, Clone)]
enum Matcher {
    Exact(String),
    Contains(String),
}

impl Matcher {
    fn matches(&self, prompt: &str) -> bool {
        match self {
            Matcher::Exact(p) => prompt == p,
            Matcher::Contains(s) => prompt.contains(s.as_str()),
        }
    }
}

#[derive(Debug)]
struct Rule {
    matcher: Matcher,
    replies: Vec<ScriptedReply>,
    hits: usize,
}

/// Answers from a fixed table of prompt rules.
///
/// Rules are tried in insertion order. A rule with several replies returns them
/// in sequence and then keeps repeating the last one.
#[derive(Debug)]
pub struct ScriptedBackend {
    caps: BackendCapabilities,
    rules: Mutex<Vec<Rule>>,
    fallback: Option<ScriptedReply>,
    seen: Mutex<Vec<GenerationRequest>>,
}

impl ScriptedBackend {
    pub fn new(name: &str) -> Self {
        Self {
            caps: caps(name, 100.0),
            rules: Mutex::new(Vec::new()),
            fallback: None,
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn max_temperature(mut self, max: f64) -> Self {
        self.caps.max_temperature = max;
        self
    }

    pub fn supports_seed(mut self, supported: bool) -> Self {
        self.caps.supports_seed = supported;
        self
    }

    fn push(self, matcher: Matcher, replies: Vec<ScriptedReply>) -> Self {
        assert!(!replies.is_empty(), "scripted rule needs at least one reply");
        self.rules.lock().unwrap().push(Rule {
            matcher,
            replies,
            hits: 0,
        });
        self
    }

    pub fn exact(self, prompt: &str, reply: &str) -> Self {
        self.push(Matcher::Exact(prompt.into()), vec![reply.into()])
    }

    pub fn exact_seq(self, prompt: &str, replies: Vec<ScriptedReply>) -> Self {
        self.push(Matcher::Exact(prompt.into()), replies)
    }

    pub fn contains(self, fragment: &str, reply: &str) -> Self {
        self.push(Matcher::Contains(fragment.into()), vec![reply.into()])
    }

    pub fn contains_seq(self, fragment: &str, replies: Vec<ScriptedReply>) -> Self {
        self.push(Matcher::Contains(fragment.into()), replies)
    }

    pub fn default_reply(mut self, reply: &str) -> Self {
        self.fallback = Some(reply.into());
        self
    }

    pub fn default_error(mut self, error: BackendError) -> Self {
        self.fallback = Some(ScriptedReply::Error(error));
        self
    }

    pub fn call_count(&self) -> usize {
        self.seen.lock().unwrap().len()
    }

    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl TextBackend for ScriptedBackend {
    fn capabilities(&self) -> &BackendCapabilities {
        &self.caps
    }

    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        self.seen.lock().unwrap().push(request.clone());
        let reply = {
            let mut rules = self.rules.lock().unwrap();
            rules.iter_mut().find(|r| r.matcher.matches(&request.prompt)).map(|rule| {
                let idx = rule.hits.min(rule.replies.len() - 1);
                rule.hits += 1;
                rule.replies[idx].clone()
            })
        };
        match reply.or_else(|| self.fallback.clone()) {
            Some(ScriptedReply::Text(t)) => Ok(t),
            Some(ScriptedReply::Error(e)) => Err(e),
            None => Err(BackendError::InvalidRequest(format!(
                "{}: no scripted reply for prompt {:?}",
                self.caps.model_name,
                truncate(&request.prompt, 80)
            ))),
        }
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

const VOCABULARY: &[&str] = &[
    "the", "idea", "of", "relation", "between", "two", "concepts", "structure", "meaning", "shared",
    "pattern", "form", "order", "change", "space", "time", "system", "model", "view", "each",
    "both", "reveals", "suggests", "connects", "frames", "balance", "flow", "surface", "depth", "measure",
    "rule", "symbol", "grid", "cycle", "memory", "signal", "field", "network", "thread", "layer",
    "density", "motion", "boundary", "emergence", "tension", "resonance", "mirror", "lens", "archive", "map",
    "weave", "drift", "echo", "fracture", "spiral", "lattice", "tide", "ember", "prism", "orbit",
    "seed", "ritual", "alloy", "cipher", "glyph", "chorus", "vessel", "horizon", "loom", "compass",
    "mosaic", "cascade", "fold", "knot", "hinge", "veil", "furnace", "garden", "clock", "river",
    "crystal", "oracle", "engine", "labyrinth", "mycelium", "tessellation", "entropy", "archetype", "quasicrystal", "synesthesia",
    "palimpsest", "chimera", "murmuration", "isotope", "kaleidoscope", "apophenia", "hieroglyph", "counterpoint", "bioluminescence", "metamorphosis",
    "interstice", "penumbra", "anamorphosis", "holography", "serendipity", "topology", "alchemy", "reverie", "catalysis", "superposition",
];

/// Pseudo-random sentence generator.
///
/// Output is a pure function of (role, prompt, temperature, seed). Higher
/// temperature samples from a wider slice of the vocabulary, so low
/// temperatures stay on common words and high ones drift into rare ones.
#[derive(Debug)]
pub struct SeededStochasticBackend {
    caps: BackendCapabilities,
    sentences: usize,
}

impl SeededStochasticBackend {
    pub fn new(name: &str) -> Self {
        Self {
            caps: caps(name, 100.0),
            sentences: 3,
        }
    }

    pub fn max_temperature(mut self, max: f64) -> Self {
        self.caps.max_temperature = max;
        self
    }

    pub fn sentences(mut self, n: usize) -> Self {
        self.sentences = n.max(1);
        self
    }

    /// Number of vocabulary words reachable at `temperature`.
    pub fn vocabulary_width(temperature: f64) -> usize {
        let width = 12.0 + 20.0 * temperature.max(0.0);
        (width.ceil() as usize).clamp(1, VOCABULARY.len())
    }
}

impl TextBackend for SeededStochasticBackend {
    fn capabilities(&self) -> &BackendCapabilities {
        &self.caps
    }

    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let mut hasher = Sha256::new();
        hasher.update(request.role.to_string().as_bytes());
        hasher.update([0]);
        hasher.update(request.temperature.to_bits().to_le_bytes());
        hasher.update(request.seed.unwrap_or(0).to_le_bytes());
        hasher.update(request.prompt.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
        let width = Self::vocabulary_width(request.temperature);

        let sentences: Vec<String> = (0..self.sentences)
            .map(|_| {
                let len = rng.gen_range(6..=12);
                let words: Vec<&str> = (0..len).map(|_| VOCABULARY[rng.gen_range(0..width)]).collect();
                let mut s = words.join(" ");
                if let Some(first) = s.get_mut(0..1) {
                    first.make_ascii_uppercase();
                }
                s.push('.');
                s
            })
            .collect();
        Ok(sentences.join(" "))
    }
}

/// Stand-in judge: scores the candidate by hash and quotes its longest sentence.
///
/// Replies with prose when the prompt carries no candidate block, which lets
/// tests exercise the re-ask path.
#[derive(Debug)]
pub struct HeuristicJudge {
    caps: BackendCapabilities,
}

impl HeuristicJudge {
    pub fn new(name: &str) -> Self {
        Self { caps: caps(name, 2.0) }
    }

    /// Verdict the judge gives for `candidate`.
    pub fn verdict_for(candidate: &str) -> (u8, Option<String>) {
        let consistency = (1 + fnv1a(candidate.as_bytes()) % 5) as u8;
        let idea = (consistency >= 3)
            .then(|| {
                split_sentences(candidate)
                    .into_iter()
                    .max_by_key(|s| s.len())
            })
            .flatten();
        (consistency, idea)
    }
}

impl TextBackend for HeuristicJudge {
    fn capabilities(&self) -> &BackendCapabilities {
        &self.caps
    }

    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let Some(candidate) = prompts::judge_candidate(&request.prompt) else {
            return Ok("I could not find a candidate text to evaluate.".into());
        };
        let (consistency, idea) = Self::verdict_for(candidate);
        Ok(serde_json::json!({ "consistency": consistency, "idea": idea }).to_string())
    }
}

/// Stand-in reviewer: derives three scores from a hash of the output text.
#[derive(Debug)]
pub struct HeuristicReviewer {
    caps: BackendCapabilities,
}

impl HeuristicReviewer {
    pub fn new(name: &str) -> Self {
        let mut caps = caps(name, 2.0);
        caps.supports_seed = false;
        Self { caps }
    }

    pub fn scores_for(output: &str) -> (u8, u8, u8) {
        let h = fnv1a(output.as_bytes());
        (
            3 + (h % 3) as u8,
            3 + ((h >> 8) % 3) as u8,
            2 + ((h >> 16) % 4) as u8,
        )
    }
}

impl TextBackend for HeuristicReviewer {
    fn capabilities(&self) -> &BackendCapabilities {
        &self.caps
    }

    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let Some((_, output)) = prompts::review_parts(&request.prompt) else {
            return Ok("Missing review material.".into());
        };
        let (alignment, coherence, novelty) = Self::scores_for(output);
        Ok(serde_json::json!({
            "alignment": alignment,
            "coherence": coherence,
            "novelty": novelty,
        })
        .to_string())
    }
}

/// Bag-of-features embedder: lower-cased words and character trigrams hashed
/// into `dim` buckets, then scaled to unit length.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    name: String,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            name: format!("hash-embedder-{dim}"),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn model_name(&self) -> &str {
        &self.name
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let lower = text.to_lowercase();
        let mut v = vec![0.0; self.dim];
        let mut bump = |feature: &[u8]| {
            v[(fnv1a(feature) % self.dim as u64) as usize] += 1.0;
        };
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let mut f = b"w:".to_vec();
            f.extend_from_slice(word.as_bytes());
            bump(&f);
        }
        let chars: Vec<char> = format!("  {lower} ").chars().collect();
        for tri in chars.windows(3) {
            let mut f = b"c:".to_vec();
            f.extend_from_slice(tri.iter().collect::<String>().as_bytes());
            bump(&f);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(BackendError::InvalidRequest("text produced no features".into()));
        }
        Ok(v.into_iter().map(|x| x / norm).collect())
    }
}
