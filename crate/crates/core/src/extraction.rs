//! LLM extraction of user needs and item features from training reviews.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{Review, SentimentLabel, SplitTag};
use crate::llm::{ChatRequest, Gateway, GatewayError, ResponseFormat, TaskKind};
pub use crate::prompts::{DomainName, DomainProfile};
use crate::prompts::{render, PromptError};

#[derive(Debug, thiserror::Error)]
pub enum ExtractionError {
    #[error("review {0} is not in the training split")]
    NotTrain(String),
    #[error("review {0} has empty text")]
    EmptyText(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

pub type Result<T> = std::result::Result<T, ExtractionError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub review_id: String,
    pub user_needs: Vec<String>,
    pub item_features: Vec<String>,
    pub sentiment_given: SentimentLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ExtractionResult {
    fn failed(review: &Review, reason: String) -> Self {
        ExtractionResult {
            review_id: review.id.clone(),
            user_needs: Vec::new(),
            item_features: Vec::new(),
            sentiment_given: review.sentiment(),
            failure: Some(reason),
        }
    }
}

/// The extraction prompts only know "positive" and "negative"; neutral
/// reviews below 3 stars read as negative, the rest as positive.
pub fn polarity(review: &Review) -> &'static str {
    match review.sentiment() {
        SentimentLabel::Positive => "positive",
        SentimentLabel::Negative => "negative",
        SentimentLabel::Neutral if review.rating < 3.0 => "negative",
        SentimentLabel::Neutral => "positive",
    }
}

/// Lowercase, collapse whitespace, strip trailing punctuation.
pub fn normalize_phrase(raw: &str) -> Option<String> {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let trimmed = collapsed.trim_end_matches(|c: char| c.is_ascii_punctuation()).trim();
    (!trimmed.is_empty()).then(|| trimmed.to_string())
}

pub fn build_extraction_prompt(profile: &DomainProfile, review: &Review, temperature: f64) -> Result<ChatRequest> {
    if review.text.trim().is_empty() {
        return Err(ExtractionError::EmptyText(review.id.clone()));
    }
    let user_payload = render(
        "extraction_user",
        &profile.extraction.user,
        &[("review", json!(review.text)), ("sentiment", json!(polarity(review)))],
    )?;
    Ok(ChatRequest {
        system_prompt: profile.extraction.system.clone(),
        user_payload,
        temperature,
        max_tokens: 512,
        response_format: ResponseFormat::JsonObject,
    })
}

fn phrase_list(reply: &Value, key: &str) -> std::result::Result<Vec<String>, String> {
    let arr = reply
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| format!("reply lacks a {key:?} list"))?;
    Ok(arr.iter().filter_map(Value::as_str).filter_map(normalize_phrase).collect())
}

/// Extracts one review. Malformed replies become failure-recorded empty
/// results; only systemic gateway errors are returned as `Err`.
pub fn extract(profile: &DomainProfile, review: &Review, gateway: &Gateway) -> Result<ExtractionResult> {
    let request = build_extraction_prompt(profile, review, gateway.default_temperature(TaskKind::Judge))?;
    let reply = match gateway.chat_json(&request) {
        Ok(v) => v,
        Err(e) if e.is_systemic() => return Err(e.into()),
        Err(e) => return Ok(ExtractionResult::failed(review, e.to_string())),
    };
    match (phrase_list(&reply, "user_needs"), phrase_list(&reply, "item_features")) {
        (Ok(user_needs), Ok(item_features)) => Ok(ExtractionResult {
            review_id: review.id.clone(),
            user_needs,
            item_features,
            sentiment_given: review.sentiment(),
            failure: None,
        }),
        (Err(e), _) | (_, Err(e)) => Ok(ExtractionResult::failed(review, e)),
    }
}

/// Extracts every training review, fanning out up to the gateway bound.
/// Results follow input order; reviews from other splits are rejected.
pub fn extract_corpus(profile: &DomainProfile, reviews: &[Review], gateway: &Gateway) -> Result<Vec<ExtractionResult>> {
    if let Some(r) = reviews.iter().find(|r| r.split_tag != Some(SplitTag::Train)) {
        return Err(ExtractionError::NotTrain(r.id.clone()));
    }
    let results = gateway.fan_out(reviews, |r| extract(profile, r, gateway));
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let failed = results.iter().filter(|r| r.failure.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} reviews failed extraction", results.len());
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::GatewayConfig;

    fn review(id: &str, rating: f64, text: &str) -> Review {
        let mut r = Review::new(id, "u", "i", rating, text).unwrap();
        r.split_tag = Some(SplitTag::Train);
        r
    }

    fn accommodation() -> DomainProfile {
        DomainProfile::builtin(DomainName::Accommodation).unwrap()
    }

    #[test]
    fn prompt_embeds_review_and_polarity() {
        let p = accommodation();
        let r = review("r1", 5.0, "Lovely bed.");
        let req = build_extraction_prompt(&p, &r, 0.0).unwrap();
        assert!(req.system_prompt.starts_with("You are a professional customer experience analyst."));
        let v: Value = serde_json::from_str(&req.user_payload).unwrap();
        assert_eq!(v["review"], "Lovely bed.");
        assert_eq!(v["sentiment"], "positive");
        assert_eq!(req.response_format, ResponseFormat::JsonObject);
        assert_eq!(polarity(&review("a", 2.8, "x")), "negative");
        assert_eq!(polarity(&review("b", 3.0, "x")), "positive");
        assert_eq!(polarity(&review("c", 1.0, "x")), "negative");
    }

    #[test]
    fn phrase_normalization() {
        assert_eq!(normalize_phrase("  Quiet   Room!! ").as_deref(), Some("quiet room"));
        assert_eq!(normalize_phrase(" ... "), None);
        assert_eq!(normalize_phrase("Wi-Fi speed."), Some("wi-fi speed".into()));
    }

    #[test]
    fn mock_extract_is_deterministic() {
        let g = Gateway::mock(0);
        let r = review("r1", 2.0, "The staff were rude and the bathroom dirty.");
        let a = extract(&accommodation(), &r, &g).unwrap();
        assert_eq!(a.user_needs, vec!["feeling welcomed", "hygiene"]);
        assert_eq!(a.item_features, vec!["staff friendliness", "bathroom cleanliness"]);
        assert_eq!(a.sentiment_given, SentimentLabel::Negative);
        assert_eq!(extract(&accommodation(), &r, &Gateway::mock(0)).unwrap(), a);
    }

    #[test]
    fn missing_key_is_a_recorded_failure() {
        let mut p = accommodation();
        // A payload the mock cannot classify gets a prose reply.
        p.extraction.user = r#"{"text": {review}, "polarity": {sentiment}}"#.into();
        let g = Gateway::mock(0);
        let r = extract(&p, &review("r", 5.0, "bed"), &g).unwrap();
        assert!(r.failure.is_some());
        assert!(r.user_needs.is_empty());
        assert_eq!(g.stats().reprompts, 1);
        // Well-formed JSON without the expected keys fails without a re-prompt.
        p.extraction.user = r#"{"explanation": {review}, "sentiment": {sentiment}}"#.into();
        let r = extract(&p, &review("r", 5.0, "bed"), &g).unwrap();
        assert!(r.failure.unwrap().contains("user_needs"));
        assert_eq!(g.stats().reprompts, 1);
    }

    #[test]
    fn corpus_rejects_non_train_and_preserves_order() {
        let p = accommodation();
        let g = Gateway::from_config(GatewayConfig {
            max_in_flight: 8,
            ..GatewayConfig::default()
        })
        .unwrap();
        let reviews: Vec<Review> = (0..100)
            .map(|i| review(&format!("r{i}"), 1.0 + (i % 5) as f64, ["bed", "pool view", "wifi", "food"][i % 4]))
            .collect();
        let batch = extract_corpus(&p, &reviews, &g).unwrap();
        let seq: Vec<_> = reviews.iter().map(|r| extract(&p, r, &Gateway::mock(0)).unwrap()).collect();
        assert_eq!(batch, seq);
        assert!(extract_corpus(&p, &[], &g).unwrap().is_empty());
        let mut test = reviews[0].clone();
        test.split_tag = Some(SplitTag::Test);
        assert!(matches!(
            extract_corpus(&p, &[test], &g),
            Err(ExtractionError::NotTrain(_))
        ));
    }

    #[test]
    fn warm_cache_rerun_makes_no_calls() {
        let dir = tempfile::tempdir().unwrap();
        let config = GatewayConfig {
            cache_dir: Some(dir.path().to_path_buf()),
            ..GatewayConfig::default()
        };
        let reviews: Vec<Review> = (0..20).map(|i| review(&format!("r{i}"), 4.0, &format!("great bed number {i}"))).collect();
        let g = Gateway::from_config(config.clone()).unwrap();
        // Interrupted run: first half only.
        extract_corpus(&accommodation(), &reviews[..10], &g).unwrap();
        let g2 = Gateway::from_config(config.clone()).unwrap();
        let full = extract_corpus(&accommodation(), &reviews, &g2).unwrap();
        assert_eq!(g2.stats().backend_calls, 10);
        assert_eq!(g2.stats().cache_hits, 10);
        let g3 = Gateway::from_config(config).unwrap();
        assert_eq!(extract_corpus(&accommodation(), &reviews, &g3).unwrap(), full);
        assert_eq!(g3.stats().backend_calls, 0);
    }
}
