//! Prediction, attribution, naming and generation for one pair at a time.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attribution::{attribute, top_k, AttributionError, AttributionRecord, ShapAttribution, TopFeatures};
use crate::classifier::TreeEnsemble;
use crate::clustering::ClusterKind;
use crate::corpus::SentimentLabel;
use crate::featurization::{FeatureMatrix, FeatureSpace, PairVector};
use crate::llm::{ChatRequest, Gateway, GatewayError, ResponseFormat, TaskKind};
use crate::prompts::{render, DomainProfile, PromptError};

pub const MAX_KEY_FEATURES: usize = 5;
/// Upper end of the requested explanation length; longer ones are flagged.
pub const WORD_LIMIT: usize = 30;

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("a generation prompt needs at least one key feature")]
    NoFeatures,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

pub type Result<T> = std::result::Result<T, ExplainError>;

/// `"user need: <name>"` or `"item feature: <name>"` per cluster, in |phi|
/// order, one label per cluster.
pub fn feature_labels(top: &TopFeatures, space: &FeatureSpace) -> Vec<String> {
    top.merged_by_cluster()
        .iter()
        .map(|e| {
            let prefix = match e.cluster_kind {
                ClusterKind::UserNeeds => "user need",
                ClusterKind::ItemFeatures => "item feature",
            };
            format!("{prefix}: {}", space.cluster_name(e.cluster_kind, e.cluster))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationPrompt {
    pub prediction: SentimentLabel,
    pub key_features: Vec<String>,
    pub request: ChatRequest,
}

pub fn build_generation_prompt(
    profile: &DomainProfile,
    prediction: SentimentLabel,
    labels: &[String],
    temperature: f64,
) -> Result<GenerationPrompt> {
    if labels.is_empty() {
        return Err(ExplainError::NoFeatures);
    }
    if labels.len() > MAX_KEY_FEATURES {
        log::warn!("{} key features given; keeping the first {MAX_KEY_FEATURES}", labels.len());
    }
    let key_features: Vec<String> = labels.iter().take(MAX_KEY_FEATURES).cloned().collect();
    let user_payload = render(
        "generation_user",
        &profile.generation.user,
        &[("prediction", json!(prediction.as_str())), ("key_features", json!(key_features))],
    )?;
    Ok(GenerationPrompt {
        prediction,
        key_features,
        request: ChatRequest {
            system_prompt: profile.generation_system(prediction),
            user_payload,
            temperature,
            max_tokens: 128,
            response_format: ResponseFormat::JsonObject,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub review_id: String,
    pub user_id: String,
    pub item_id: String,
    pub prediction: SentimentLabel,
    pub top_features: TopFeatures,
    pub key_features: Vec<String>,
    pub explanation: String,
    pub word_count: usize,
    pub over_length: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ExplanationRecord {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none() && !self.explanation.is_empty()
    }
}

/// A record together with the attribution it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Explained {
    pub record: ExplanationRecord,
    pub attribution: ShapAttribution,
}

/// Predict, attribute, select, name, prompt and generate, in that order.
/// Only systemic gateway errors abort; anything else yields a failed record.
pub fn explain(
    ensemble: &TreeEnsemble,
    review_id: &str,
    pair: &PairVector,
    space: &FeatureSpace,
    profile: &DomainProfile,
    gateway: &Gateway,
    k: usize,
) -> Result<Explained> {
    let attribution = attribute(ensemble, &pair.user_id, &pair.item_id, &pair.values)?;
    let top_features = top_k(&attribution, space, k);
    let labels = feature_labels(&top_features, space);
    let mut record = ExplanationRecord {
        review_id: review_id.to_string(),
        user_id: pair.user_id.clone(),
        item_id: pair.item_id.clone(),
        prediction: attribution.target_class,
        top_features,
        key_features: Vec::new(),
        explanation: String::new(),
        word_count: 0,
        over_length: false,
        failure: None,
    };
    let prompt = match build_generation_prompt(profile, record.prediction, &labels, gateway.default_temperature(TaskKind::Generation)) {
        Ok(p) => p,
        Err(ExplainError::NoFeatures) => {
            record.failure = Some("no feature has a nonzero attribution".into());
            return Ok(Explained { record, attribution });
        }
        Err(e) => return Err(e),
    };
    record.key_features = prompt.key_features.clone();
    match gateway.chat_json(&prompt.request) {
        Ok(reply) => match reply.get("explanation").and_then(|v| v.as_str()).map(str::trim) {
            Some(text) if !text.is_empty() => {
                record.explanation = text.to_string();
                record.word_count = text.split_whitespace().count();
                record.over_length = record.word_count > WORD_LIMIT;
            }
            _ => record.failure = Some("reply lacks a non-empty \"explanation\"".into()),
        },
        Err(e) if e.is_systemic() => return Err(e.into()),
        Err(e) => record.failure = Some(e.to_string()),
    }
    Ok(Explained { record, attribution })
}

/// One record per matrix row, in row order.
pub fn explain_split(
    ensemble: &TreeEnsemble,
    matrix: &FeatureMatrix,
    profile: &DomainProfile,
    gateway: &Gateway,
    k: usize,
) -> Result<Vec<Explained>> {
    let rows: Vec<(&String, &PairVector)> = matrix.review_ids.iter().zip(&matrix.rows).collect();
    let out = gateway
        .fan_out(&rows, |(id, pair)| explain(ensemble, id, pair, &matrix.space, profile, gateway, k))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let failed = out.iter().filter(|e| !e.record.succeeded()).count();
    if failed > 0 {
        log::warn!("{failed} of {} explanations failed", out.len());
    }
    Ok(out)
}

/// Outcome of cross-referencing prompt labels with the attribution dump.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FaithfulnessAudit {
    pub records: usize,
    pub labels_checked: usize,
    pub violations: Vec<String>,
}

impl FaithfulnessAudit {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn parse_label(label: &str) -> Option<(ClusterKind, &str)> {
    if let Some(name) = label.strip_prefix("user need: ") {
        Some((ClusterKind::UserNeeds, name))
    } else {
        label.strip_prefix("item feature: ").map(|n| (ClusterKind::ItemFeatures, n))
    }
}

/// Checks that every key feature of every record names a top-K entry of the
/// same pair in `dump`.
pub fn audit_faithfulness(records: &[ExplanationRecord], dump: &[AttributionRecord]) -> FaithfulnessAudit {
    let by_id: HashMap<&str, &AttributionRecord> = dump.iter().map(|a| (a.review_id.as_str(), a)).collect();
    let mut audit = FaithfulnessAudit {
        records: records.len(),
        ..FaithfulnessAudit::default()
    };
    for rec in records {
        let Some(attr) = by_id.get(rec.review_id.as_str()) else {
            audit.violations.push(format!("{}: no attribution record", rec.review_id));
            continue;
        };
        if attr.user_id != rec.user_id || attr.item_id != rec.item_id || attr.target_class != rec.prediction {
            audit.violations.push(format!("{}: attribution is for a different pair or class", rec.review_id));
        }
        for label in &rec.key_features {
            audit.labels_checked += 1;
            let found = parse_label(label).is_some_and(|(kind, name)| {
                attr.top_k.entries.iter().any(|e| e.cluster_kind == kind && e.cluster_name == name)
            });
            if !found {
                audit.violations.push(format!("{}: {label:?} is not a top-K entry", rec.review_id));
            }
        }
    }
    audit
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{Sign, TopEntry};
    use crate::classifier::{predict, Node, Tree};
    use crate::featurization::{pair_vector, Channel};
    use crate::llm::GatewayConfig;
    use crate::prompts::DomainName;

    fn space() -> FeatureSpace {
        let mut s = FeatureSpace::new(2, 4);
        s.need_names = vec!["Restful Sleep".into(), String::new()];
        s.feature_names = vec!["Bed Comfort".into(), "Wifi".into(), "Pool".into(), "Reliable Service Quality".into()];
        s
    }

    fn entry(feature_index: usize, space: &FeatureSpace, phi: f64) -> TopEntry {
        let slot = space.describe(feature_index).unwrap();
        TopEntry {
            feature_index,
            cluster_kind: slot.kind,
            cluster: slot.cluster,
            cluster_name: space.cluster_name(slot.kind, slot.cluster),
            channel: slot.channel,
            phi_value: phi,
            sign: if phi > 0.0 { Sign::Positive } else { Sign::Negative },
        }
    }

    /// Class trees split on need 0 frequency and feature 0 frequency.
    fn ensemble(s: &FeatureSpace) -> TreeEnsemble {
        let t = |f: usize, lo: f64, hi: f64| {
            Tree::new(
                vec![
                    Node::Split {
                        feature: f,
                        threshold: 0.5,
                        left: 1,
                        right: 2,
                    },
                    Node::Leaf { value: lo },
                    Node::Leaf { value: hi },
                ],
                Some(vec![10.0, 5.0, 5.0]),
            )
            .unwrap()
        };
        let need = s.position(crate::featurization::Slot {
            kind: ClusterKind::UserNeeds,
            cluster: 0,
            channel: Channel::Frequency,
        });
        let feat = s.position(crate::featurization::Slot {
            kind: ClusterKind::ItemFeatures,
            cluster: 0,
            channel: Channel::Frequency,
        });
        let rounds = vec![
            vec![t(need, 1.0, -1.0), Tree::leaf(0.0), t(need, -1.0, 1.0)],
            vec![t(feat, 1.0, -1.0), Tree::leaf(0.0), t(feat, -1.0, 1.0)],
        ];
        TreeEnsemble::new(rounds, 1.0, [0.0; 3], s.dim()).unwrap()
    }

    fn profile() -> DomainProfile {
        DomainProfile::builtin(DomainName::Accommodation).unwrap()
    }

    #[test]
    fn labels_follow_order_and_fallback() {
        let s = space();
        let top = TopFeatures {
            entries: vec![entry(2 * 2 + 6, &s, 2.0), entry(2, &s, -1.0), entry(3, &s, 0.5)],
        };
        assert_eq!(
            feature_labels(&top, &s),
            vec!["item feature: Reliable Service Quality", "user need: cluster-need-1"]
        );
    }

    #[test]
    fn prompt_schema_and_cap() {
        let p = profile();
        let labels: Vec<String> = (0..6).map(|i| format!("user need: n{i}")).collect();
        let g = build_generation_prompt(&p, SentimentLabel::Neutral, &labels, 0.7).unwrap();
        assert_eq!(g.key_features.len(), 5);
        let payload: serde_json::Value = serde_json::from_str(&g.request.user_payload).unwrap();
        assert_eq!(payload["prediction"], "neutral");
        assert_eq!(payload["key_features"].as_array().unwrap().len(), 5);
        assert!(g.request.system_prompt.contains("Balanced and objective"));
        assert!(g.request.system_prompt.starts_with("You are a Customer Service Specialist"));
        assert_eq!(g.request.response_format, ResponseFormat::JsonObject);
        assert!(matches!(
            build_generation_prompt(&p, SentimentLabel::Positive, &[], 0.7),
            Err(ExplainError::NoFeatures)
        ));
    }

    #[test]
    fn explain_runs_the_whole_chain() {
        let s = space();
        let e = ensemble(&s);
        let mut u = vec![0.0; s.user_dim()];
        let mut i = vec![0.0; s.item_dim()];
        u[0] = 2.0;
        u[1] = 9.0;
        i[0] = 1.0;
        i[1] = 5.0;
        let pair = pair_vector(&u, &i, &s, "u1", "i1").unwrap();
        let g = Gateway::mock(0);
        let out = explain(&e, "r1", &pair, &s, &profile(), &g, 5).unwrap();
        let rec = &out.record;
        assert_eq!(rec.prediction, predict(&e, &pair.values).unwrap());
        assert_eq!(rec.prediction, SentimentLabel::Positive);
        assert_eq!(rec.key_features, vec!["user need: Restful Sleep", "item feature: Bed Comfort"]);
        assert_eq!(
            rec.explanation,
            "Great match: the bed comfort fulfills your need for restful sleep, so you will enjoy a wonderful experience."
        );
        assert_eq!(rec.word_count, 18);
        assert!(!rec.over_length && rec.succeeded());
        let again = explain(&e, "r1", &pair, &s, &profile(), &Gateway::mock(0), 5).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn zero_attribution_is_a_failed_record() {
        let s = space();
        let e = TreeEnsemble::new(vec![vec![Tree::leaf(0.0), Tree::leaf(1.0), Tree::leaf(0.0)]], 1.0, [0.0; 3], s.dim()).unwrap();
        let pair = pair_vector(&vec![0.0; 4], &vec![0.0; 8], &s, "u", "i").unwrap();
        let out = explain(&e, "r", &pair, &s, &profile(), &Gateway::mock(0), 5).unwrap();
        assert!(!out.record.succeeded());
        assert_eq!(out.record.prediction, SentimentLabel::Neutral);
    }

    fn matrix(s: &FeatureSpace, n: usize) -> FeatureMatrix {
        let rows: Vec<PairVector> = (0..n)
            .map(|r| {
                let mut u = vec![0.0; s.user_dim()];
                let mut i = vec![0.0; s.item_dim()];
                u[0] = (r % 3) as f64;
                u[1] = 4.0 * u[0];
                i[0] = (r % 2) as f64;
                i[1] = 2.0 * i[0];
                pair_vector(&u, &i, s, &format!("u{r}"), &format!("i{r}")).unwrap()
            })
            .collect();
        FeatureMatrix {
            space: s.clone(),
            review_ids: (0..n).map(|r| format!("r{r}")).collect(),
            labels: vec![SentimentLabel::Positive; n],
            rows,
        }
    }

    #[test]
    fn split_is_ordered_and_cache_resumable() {
        let s = space();
        let e = ensemble(&s);
        let m = matrix(&s, 20);
        let dir = tempfile::tempdir().unwrap();
        let config = GatewayConfig {
            cache_dir: Some(dir.path().to_path_buf()),
            ..GatewayConfig::default()
        };
        let g = Gateway::from_config(config.clone()).unwrap();
        let first = explain_split(&e, &m, &profile(), &g, 5).unwrap();
        assert_eq!(first.len(), 20);
        for (out, id) in first.iter().zip(&m.review_ids) {
            assert_eq!(&out.record.review_id, id);
        }
        let g2 = Gateway::from_config(config).unwrap();
        let second = explain_split(&e, &m, &profile(), &g2, 5).unwrap();
        assert_eq!(g2.stats().backend_calls, 0);
        assert_eq!(first, second);
    }

    #[test]
    fn injected_faults_are_flagged_not_fatal() {
        let s = space();
        let e = ensemble(&s);
        let m = matrix(&s, 30);
        let g = Gateway::from_config(GatewayConfig {
            mock_fault_rate: 1.0,
            ..GatewayConfig::default()
        })
        .unwrap();
        let out = explain_split(&e, &m, &profile(), &g, 5).unwrap();
        assert_eq!(out.len(), 30);
        assert!(out.iter().all(|o| !o.record.succeeded() && o.record.explanation.is_empty()));
        assert!(g.stats().reprompts > 0);
    }

    #[test]
    fn audit_catches_labels_outside_top_k() {
        let s = space();
        let e = ensemble(&s);
        let m = matrix(&s, 6);
        let out = explain_split(&e, &m, &profile(), &Gateway::mock(0), 5).unwrap();
        let records: Vec<ExplanationRecord> = out.iter().map(|o| o.record.clone()).collect();
        let dump: Vec<AttributionRecord> = out
            .iter()
            .map(|o| AttributionRecord::new(&o.record.review_id, &o.attribution, o.record.top_features.clone()))
            .collect();
        let audit = audit_faithfulness(&records, &dump);
        assert!(audit.passed(), "{:?}", audit.violations);
        assert!(audit.labels_checked > 0);

        let mut tampered = records.clone();
        let target = tampered.iter_mut().find(|r| !r.key_features.is_empty()).unwrap();
        target.key_features.push("item feature: Pool".into());
        let audit = audit_faithfulness(&tampered, &dump);
        assert_eq!(audit.violations.len(), 1);
        assert!(!audit_faithfulness(&records, &dump[1..]).passed());
    }
}
