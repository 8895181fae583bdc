//! Deterministic offline backend.
//!
//! Chat replies are chosen from the shape of the JSON user payload:
//!
//! - `{review, sentiment}`: aspect extraction from a keyword lexicon
//! - `{"0": [...], "1": [...]}`: cluster naming from the most common phrase
//! - `{prediction, key_features}`: a templated explanation
//! - `{review, user_need, item_feature}`: alignment judgment
//! - `{explanation, sentiment}`: structure judgment
//!
//! Embeddings hash tokens into a fixed number of signed buckets, so phrases
//! sharing words land close together. Sentiment is a smoothed ratio of
//! positive to negative lexicon hits.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::time::Duration;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use super::{Backend, ChatRequest, Result};

pub const MOCK_DIMENSION: usize = 64;

/// (keyword, user need, item feature). The feature phrase always contains
/// the keyword.
pub const ASPECTS: &[(&str, &str, &str)] = &[
    ("bed", "restful sleep", "bed comfort"),
    ("breakfast", "satisfying morning meal", "breakfast buffet"),
    ("staff", "feeling welcomed", "staff friendliness"),
    ("location", "easy access to sights", "central location"),
    ("wifi", "staying connected", "wifi reliability"),
    ("pool", "relaxing downtime", "pool area"),
    ("bathroom", "hygiene", "bathroom cleanliness"),
    ("parking", "hassle free arrival", "parking availability"),
    ("view", "scenic surroundings", "room view"),
    ("price", "value for money", "room price"),
    ("noise", "quiet nights", "noise insulation"),
    ("plot", "engaging story", "plot structure"),
    ("acting", "believable characters", "acting performances"),
    ("soundtrack", "emotional immersion", "soundtrack"),
    ("pacing", "sustained attention", "pacing"),
    ("food", "tasty meal", "food flavor"),
    ("service", "attentive care", "service speed"),
    ("ambiance", "pleasant atmosphere", "ambiance"),
    ("dessert", "sweet treat", "dessert menu"),
];

pub const POSITIVE_WORDS: &[&str] = &[
    "good", "great", "wonderful", "excellent", "love", "loved", "enjoy", "enjoyed", "perfect", "amazing",
    "comfortable", "friendly", "delicious", "clean", "recommend", "pleasant", "ideal", "delightful",
    "fantastic", "helpful", "fulfills", "spotless", "lovely", "superb",
];

pub const NEGATIVE_WORDS: &[&str] = &[
    "bad", "terrible", "awful", "poor", "dirty", "rude", "noisy", "disappointing", "broken", "unsuitable",
    "lacking", "fails", "worst", "horrible", "slow", "mismatch", "unhelpful", "cramped", "stale", "boring",
];

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "the", "of", "for", "to", "in", "on", "with", "was", "is", "it", "this", "that", "your",
    "you", "my", "our", "we", "i", "very", "but", "so", "at", "as", "be", "are", "were", "user", "need",
    "item", "feature",
];

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn content_tokens(text: &str) -> BTreeSet<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| t.len() > 2 && !STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// Needs and features whose keyword occurs in `text`, in lexicon order.
pub fn mock_extract(text: &str) -> (Vec<String>, Vec<String>) {
    let tokens: BTreeSet<String> = tokenize(text).into_iter().collect();
    ASPECTS
        .iter()
        .filter(|(kw, _, _)| tokens.contains(*kw))
        .map(|(_, n, f)| (n.to_string(), f.to_string()))
        .unzip()
}

/// `(pos + 1) / (pos + neg + 2)` over lexicon hits.
pub fn lexicon_score(text: &str) -> f64 {
    let tokens = tokenize(text);
    let pos = tokens.iter().filter(|t| POSITIVE_WORDS.contains(&t.as_str())).count() as f64;
    let neg = tokens.iter().filter(|t| NEGATIVE_WORDS.contains(&t.as_str())).count() as f64;
    (pos + 1.0) / (pos + neg + 2.0)
}

fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

pub struct MockBackend {
    seed: u64,
    fault_rate: f64,
    delay: Option<Duration>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(seed: u64, fault_rate: f64) -> Self {
        MockBackend {
            seed,
            fault_rate,
            delay: None,
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            calls: AtomicU64::new(0),
        }
    }

    /// Sleeps inside every call so concurrent requests overlap.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Whether chat replies for this payload are garbled. Depends on the
    /// payload only, so a re-prompt fails the same way.
    pub fn is_faulted(&self, user_payload: &str) -> bool {
        if self.fault_rate <= 0.0 {
            return false;
        }
        let d = digest(&[b"fault", &self.seed.to_le_bytes(), user_payload.as_bytes()]);
        let u = u64::from_le_bytes(d[..8].try_into().unwrap()) as f64 / u64::MAX as f64;
        u < self.fault_rate
    }

    fn track<R>(&self, f: impl FnOnce() -> R) -> R {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        if let Some(d) = self.delay {
            std::thread::sleep(d);
        }
        let r = f();
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        r
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; MOCK_DIMENSION];
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            tokens.push(text.to_string());
        }
        for t in &tokens {
            let d = digest(&[b"embed", &self.seed.to_le_bytes(), t.as_bytes()]);
            // Two buckets per token keep single-word collisions rare.
            for j in 0..2 {
                let b = u16::from_le_bytes([d[2 * j], d[2 * j + 1]]) as usize % MOCK_DIMENSION;
                let sign = if d[8 + j] & 1 == 0 { 1.0 } else { -1.0 };
                v[b] += sign;
            }
        }
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / norm).collect()
    }
}

impl Backend for MockBackend {
    fn namespace(&self) -> String {
        format!("mock:{}", self.seed)
    }

    fn chat(&self, request: &ChatRequest) -> Result<String> {
        self.track(|| {
            if self.is_faulted(&request.user_payload) {
                return Ok("Sorry, I cannot help with that request.".to_string());
            }
            Ok(respond(&request.user_payload))
        })
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        self.track(|| Ok(texts.iter().map(|t| self.embed_text(t)).collect()))
    }

    fn sentiment(&self, text: &str) -> Result<f64> {
        self.track(|| Ok(lexicon_score(text)))
    }
}

fn respond(payload: &str) -> String {
    let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(payload) else {
        return "I can only answer structured requests.".to_string();
    };
    let text = |k: &str| obj.get(k).and_then(Value::as_str).unwrap_or_default();
    let reply = if obj.contains_key("prediction") && obj.contains_key("key_features") {
        let labels: Vec<String> = obj["key_features"]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
            .unwrap_or_default();
        json!({"explanation": generate(text("prediction"), &labels)})
    } else if obj.contains_key("user_need") || obj.contains_key("item_feature") {
        judge_alignment(text("review"), text("user_need"), text("item_feature"))
    } else if obj.contains_key("explanation") {
        judge_structure(text("explanation"), text("sentiment"))
    } else if obj.contains_key("review") {
        let (needs, features) = mock_extract(text("review"));
        json!({"user_needs": needs, "item_features": features})
    } else if !obj.is_empty() && obj.keys().all(|k| k.parse::<usize>().is_ok()) {
        name_clusters(&obj)
    } else {
        return "I can only answer structured requests.".to_string();
    };
    reply.to_string()
}

fn strip_label(label: &str) -> Option<(&'static str, String)> {
    for (prefix, kind) in [("user need:", "need"), ("item feature:", "feature")] {
        if let Some(rest) = label.strip_prefix(prefix) {
            return Some((kind, rest.trim().to_lowercase()));
        }
    }
    None
}

fn generate(prediction: &str, labels: &[String]) -> String {
    let parsed: Vec<(&str, String)> = labels.iter().filter_map(|l| strip_label(l)).collect();
    let need = parsed.iter().find(|(k, _)| *k == "need").map(|(_, n)| n.clone());
    let feature = parsed.iter().find(|(k, _)| *k == "feature").map(|(_, n)| n.clone());
    match (prediction, need, feature) {
        ("positive", Some(n), Some(f)) => {
            format!("Great match: the {f} fulfills your need for {n}, so you will enjoy a wonderful experience.")
        }
        ("negative", Some(n), Some(f)) => {
            format!("Not a good fit: the {f} fails your need for {n}, making this a disappointing choice.")
        }
        (_, Some(n), Some(f)) => {
            format!("Mixed fit: the {f} partly meets your need for {n}, though it neither clearly helps nor hurts.")
        }
        ("positive", None, Some(f)) => format!("Great pick: the {f} stands out and makes this a lovely choice."),
        ("negative", None, Some(f)) => format!("Not ideal: the {f} is lacking and disappointing here."),
        (_, None, Some(f)) => format!("Mixed: the {f} is worth weighing against other options."),
        ("positive", Some(n), None) => format!("Great pick for anyone who values {n}; a lovely choice."),
        ("negative", Some(n), None) => format!("Not ideal if you value {n}; a disappointing choice."),
        (_, Some(n), None) => format!("A balanced option for anyone weighing {n}."),
        _ => "This option has mixed qualities.".to_string(),
    }
}

fn judge_alignment(review: &str, need: &str, feature: &str) -> Value {
    let (found_needs, found_features) = mock_extract(review);
    let review_tokens = content_tokens(review);
    let matched = |target: &str, found: &[String]| {
        target.split(';').map(str::trim).filter(|t| !t.is_empty()).any(|t| {
            found.iter().any(|f| f == t) || content_tokens(t).iter().any(|w| review_tokens.contains(w))
        })
    };
    let verdict = |m: bool| if m { "Y" } else { "N" };
    let n = matched(need, &found_needs);
    let f = matched(feature, &found_features);
    json!({
        "need_verdict": verdict(n),
        "need_reason": if n { "The text refers to this need." } else { "The text does not touch on this need." },
        "feature_verdict": verdict(f),
        "feature_reason": if f { "The text refers to this feature." } else { "The text does not mention this feature." },
    })
}

fn between<'a>(text: &'a str, start: &str, ends: &[&str]) -> &'a str {
    let Some(i) = text.find(start) else {
        return "";
    };
    let rest = &text[i + start.len()..];
    let end = ends.iter().filter_map(|e| rest.find(e)).min().unwrap_or(rest.len());
    rest[..end].trim()
}

fn judge_structure(explanation: &str, sentiment: &str) -> Value {
    let need = between(explanation, "your need for ", &[",", ".", ";"]);
    let features = between(explanation, ": the ", &[" fulfills", " fails", " partly"]);
    let score = lexicon_score(explanation);
    let tone_ok = match sentiment {
        "positive" => score > 0.5,
        "negative" => score < 0.5,
        _ => true,
    };
    let linked = !need.is_empty() && !features.is_empty();
    let reason = if !linked {
        "The explanation does not state both a need and a feature."
    } else if !tone_ok {
        "The connection contradicts the stated sentiment."
    } else {
        "The feature is explicitly linked to the need, consistent with the sentiment."
    };
    json!({
        "need": need,
        "features": features,
        "reason": reason,
        "verdict": if linked && tone_ok { "Y" } else { "N" },
    })
}

fn title_case(s: &str) -> String {
    s.split_whitespace()
        .map(|w| {
            let mut c = w.chars();
            match c.next() {
                Some(f) => f.to_uppercase().chain(c).collect(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn name_clusters(obj: &Map<String, Value>) -> Value {
    let mut out = Map::new();
    for (k, v) in obj {
        let phrases: Vec<&str> = v
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_str).collect())
            .unwrap_or_default();
        let best = phrases
            .iter()
            .fold(None, |best: Option<(&str, usize)>, p| {
                let n = phrases.iter().filter(|q| *q == p).count();
                match best {
                    Some((_, m)) if m >= n => best,
                    _ => Some((p, n)),
                }
            });
        if let Some((p, _)) = best {
            out.insert(k.clone(), Value::String(title_case(p)));
        }
    }
    Value::Object(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ResponseFormat;

    fn ask(payload: Value) -> Value {
        let m = MockBackend::new(0, 0.0);
        let r = ChatRequest {
            system_prompt: "s".into(),
            user_payload: payload.to_string(),
            temperature: 0.0,
            max_tokens: 10,
            response_format: ResponseFormat::JsonObject,
        };
        serde_json::from_str(&m.chat(&r).unwrap()).unwrap()
    }

    #[test]
    fn extraction_from_keywords() {
        let v = ask(json!({"review": "The bed was great and the staff friendly.", "sentiment": "positive"}));
        assert_eq!(v["user_needs"], json!(["restful sleep", "feeling welcomed"]));
        assert_eq!(v["item_features"], json!(["bed comfort", "staff friendliness"]));
        for (kw, _, f) in ASPECTS {
            assert!(f.contains(kw));
        }
    }

    #[test]
    fn lexicon_direction() {
        assert!(lexicon_score("terrible awful") < 0.5);
        assert!(lexicon_score("wonderful") > 0.5);
        assert_eq!(lexicon_score("neutral words only"), 0.5);
    }

    #[test]
    fn generation_and_structure_round_trip() {
        for (pred, verdict) in [("positive", "Y"), ("negative", "Y"), ("neutral", "Y")] {
            let e = ask(json!({"prediction": pred, "key_features": ["user need: Restful Sleep", "item feature: Bed Comfort"]}));
            let text = e["explanation"].as_str().unwrap();
            let s = ask(json!({"explanation": text, "sentiment": pred}));
            assert_eq!(s["verdict"], verdict, "{text}");
            assert_eq!(s["need"], "restful sleep");
            assert_eq!(s["features"], "bed comfort");
        }
        let e = ask(json!({"prediction": "positive", "key_features": ["user need: Restful Sleep", "item feature: Bed Comfort"]}));
        let s = ask(json!({"explanation": e["explanation"], "sentiment": "negative"}));
        assert_eq!(s["verdict"], "N");
        let e = ask(json!({"prediction": "positive", "key_features": ["item feature: Bed Comfort"]}));
        let s = ask(json!({"explanation": e["explanation"], "sentiment": "positive"}));
        assert_eq!(s["verdict"], "N");
        assert_eq!(s["need"], "");
    }

    #[test]
    fn alignment_identical_text_matches() {
        let review = "Noise from the street and a broken bed.";
        let (needs, features) = mock_extract(review);
        let v = ask(json!({"review": review, "user_need": needs.join("; "), "item_feature": features.join("; ")}));
        assert_eq!(v["need_verdict"], "Y");
        assert_eq!(v["feature_verdict"], "Y");
        let v = ask(json!({"review": "Lovely pool.", "user_need": "restful sleep", "item_feature": "bed comfort"}));
        assert_eq!(v["need_verdict"], "N");
        assert_eq!(v["feature_verdict"], "N");
    }

    #[test]
    fn naming_covers_every_key() {
        let mut payload = Map::new();
        for i in 0..52 {
            payload.insert(i.to_string(), json!(["wifi reliability", "wifi speed", "wifi reliability"]));
        }
        let v = ask(Value::Object(payload));
        let obj = v.as_object().unwrap();
        assert_eq!(obj.len(), 52);
        assert_eq!(obj["7"], "Wifi Reliability");
    }

    #[test]
    fn faults_are_persistent_and_rate_bounded() {
        let m = MockBackend::new(11, 0.05);
        let hits = (0..4000).filter(|i| m.is_faulted(&format!("payload {i}"))).count();
        assert!((120..=280).contains(&hits), "{hits}");
        assert_eq!(m.is_faulted("payload 1"), m.is_faulted("payload 1"));
        assert!(!MockBackend::new(11, 0.0).is_faulted("x"));
    }

    #[test]
    fn embeddings_share_words() {
        let m = MockBackend::new(0, 0.0);
        let a = m.embed_text("wifi reliability");
        let b = m.embed_text("wifi speed");
        let c = m.embed_text("breakfast buffet");
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        assert!(dot(&a, &b) > dot(&a, &c));
        assert_eq!(a, m.embed_text("wifi reliability"));
        assert_ne!(a, MockBackend::new(1, 0.0).embed_text("wifi reliability"));
    }
}
