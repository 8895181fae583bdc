//! Metrics over explanation records: unique sentence ratio, judge-based
//! alignment, sentiment consistency and structure verification.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{Review, SentimentLabel};
use crate::explainer::ExplanationRecord;
use crate::extraction::{extract, ExtractionError, ExtractionResult};
use crate::io::{write_atomic, write_json};
use crate::llm::{ChatRequest, Gateway, GatewayError, ResponseFormat, TaskKind};
use crate::prompts::{render, DomainProfile, PromptError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no explanations to score")]
    Empty,
    #[error("every alignment judgment abstained")]
    AllAbstained,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Trim and collapse runs of whitespace; case is kept.
pub fn normalize_sentence(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Distinct normalized explanations over total count.
pub fn usr<S: AsRef<str>>(explanations: &[S]) -> Result<f64> {
    if explanations.is_empty() {
        return Err(EvalError::Empty);
    }
    let unique: HashSet<String> = explanations.iter().map(|s| normalize_sentence(s.as_ref())).collect();
    Ok(unique.len() as f64 / explanations.len() as f64)
}

/// A judge verdict, or an abstention when the reply could not be used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum Judged<T> {
    Verdict(T),
    Abstain { review_id: String, reason: String },
}

impl<T> Judged<T> {
    pub fn verdict(&self) -> Option<&T> {
        match self {
            Judged::Verdict(v) => Some(v),
            Judged::Abstain { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentJudgment {
    pub review_id: String,
    pub need_matched: bool,
    pub feature_matched: bool,
    pub need_reason: String,
    pub feature_reason: String,
}

fn strict_yn(v: Option<&Value>) -> Option<bool> {
    match v?.as_str()?.trim() {
        "Y" => Some(true),
        "N" => Some(false),
        _ => None,
    }
}

fn text_field(reply: &Value, keys: &[&str]) -> Option<String> {
    keys.iter().find_map(|k| reply.get(*k)).and_then(Value::as_str).map(|s| s.trim().to_string())
}

/// Sends the judge request and maps non-systemic failures to an abstention.
fn judge<T>(
    gateway: &Gateway,
    request: &ChatRequest,
    review_id: &str,
    parse: impl FnOnce(&Value) -> std::result::Result<T, String>,
) -> Result<Judged<T>> {
    let abstain = |reason: String| Judged::Abstain {
        review_id: review_id.to_string(),
        reason,
    };
    match gateway.chat_json(request) {
        Ok(reply) => Ok(parse(&reply).map_or_else(abstain, Judged::Verdict)),
        Err(e) if e.is_systemic() => Err(e.into()),
        Err(e) => Ok(abstain(e.to_string())),
    }
}

/// Asks whether `explanation` covers the needs and features extracted from
/// the ground-truth review. Lists are joined with "; ".
pub fn build_alignment_prompt(profile: &DomainProfile, explanation: &str, truth: &ExtractionResult, temperature: f64) -> Result<ChatRequest> {
    let user_payload = render(
        "alignment_user",
        &profile.alignment.user,
        &[
            ("explanation", json!(explanation)),
            ("user_need", json!(truth.user_needs.join("; "))),
            ("item_feature", json!(truth.item_features.join("; "))),
        ],
    )?;
    Ok(ChatRequest {
        system_prompt: profile.alignment.system.clone(),
        user_payload,
        temperature,
        max_tokens: 256,
        response_format: ResponseFormat::JsonObject,
    })
}

pub fn judge_alignment(
    review_id: &str,
    explanation: &str,
    truth: &ExtractionResult,
    profile: &DomainProfile,
    gateway: &Gateway,
) -> Result<Judged<AlignmentJudgment>> {
    let request = build_alignment_prompt(profile, explanation, truth, gateway.default_temperature(TaskKind::Judge))?;
    judge(gateway, &request, review_id, |reply| {
        let need = strict_yn(reply.get("need_verdict")).ok_or("need_verdict is not Y or N")?;
        let feature = strict_yn(reply.get("feature_verdict")).ok_or("feature_verdict is not Y or N")?;
        Ok(AlignmentJudgment {
            review_id: review_id.to_string(),
            need_matched: need,
            feature_matched: feature,
            need_reason: text_field(reply, &["need_reason"]).unwrap_or_default(),
            feature_reason: text_field(reply, &["feature_reason"]).unwrap_or_default(),
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScores {
    pub s_u: f64,
    pub s_i: f64,
    pub judged: usize,
    pub abstained: usize,
}

impl AlignmentScores {
    pub fn abstain_rate(&self) -> f64 {
        let total = self.judged + self.abstained;
        if total == 0 {
            0.0
        } else {
            self.abstained as f64 / total as f64
        }
    }
}

pub fn alignment_scores(judgments: &[Judged<AlignmentJudgment>]) -> Result<AlignmentScores> {
    let judged: Vec<&AlignmentJudgment> = judgments.iter().filter_map(Judged::verdict).collect();
    if judged.is_empty() {
        return Err(EvalError::AllAbstained);
    }
    let mean = |f: fn(&AlignmentJudgment) -> bool| judged.iter().filter(|j| f(j)).count() as f64 / judged.len() as f64;
    Ok(AlignmentScores {
        s_u: mean(|j| j.need_matched),
        s_i: mean(|j| j.feature_matched),
        judged: judged.len(),
        abstained: judgments.len() - judged.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyPoint {
    pub review_id: String,
    pub predicted: SentimentLabel,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub points: Vec<ConsistencyPoint>,
    /// Mean score per class in label order; `None` when a class has no points.
    pub class_means: [Option<f64>; 3],
    pub dropped: usize,
}

pub fn class_means(points: &[ConsistencyPoint]) -> [Option<f64>; 3] {
    SentimentLabel::ALL.map(|label| {
        let scores: Vec<f64> = points.iter().filter(|p| p.predicted == label).map(|p| p.score).collect();
        (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
    })
}

/// Scores every successful explanation; failures drop the point.
pub fn sentiment_consistency(records: &[ExplanationRecord], gateway: &Gateway) -> Result<Consistency> {
    let usable: Vec<&ExplanationRecord> = records.iter().filter(|r| r.succeeded()).collect();
    if usable.is_empty() {
        return Err(EvalError::Empty);
    }
    let scored = gateway.fan_out(&usable, |r| gateway.sentiment_score(&r.explanation));
    let mut points = Vec::new();
    let mut dropped = 0;
    for (r, s) in usable.iter().zip(scored) {
        match s {
            Ok(score) => points.push(ConsistencyPoint {
                review_id: r.review_id.clone(),
                predicted: r.prediction,
                score: score.value(),
            }),
            Err(e) if e.is_systemic() => return Err(e.into()),
            Err(e) => {
                log::warn!("sentiment scoring failed for {}: {e}", r.review_id);
                dropped += 1;
            }
        }
    }
    Ok(Consistency {
        class_means: class_means(&points),
        points,
        dropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Y,
    N,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureVerdict {
    pub review_id: String,
    pub need: String,
    pub features: String,
    pub reason: String,
    pub verdict: Verdict,
    /// The judge said Y without naming both a need and a feature.
    pub judge_inconsistent: bool,
}

pub fn build_structure_prompt(profile: &DomainProfile, explanation: &str, prediction: SentimentLabel, temperature: f64) -> Result<ChatRequest> {
    let user_payload = render(
        "structure_user",
        &profile.structure.user,
        &[("explanation", json!(explanation)), ("sentiment", json!(prediction.as_str()))],
    )?;
    Ok(ChatRequest {
        system_prompt: profile.structure.system.clone(),
        user_payload,
        temperature,
        max_tokens: 256,
        response_format: ResponseFormat::JsonObject,
    })
}

/// Parses a structure reply, coercing an unsupported Y to N.
pub fn parse_structure(review_id: &str, reply: &Value) -> std::result::Result<StructureVerdict, String> {
    let verdict = match strict_yn(reply.get("verdict")) {
        Some(true) => Verdict::Y,
        Some(false) => Verdict::N,
        None => return Err("verdict is not Y or N".into()),
    };
    let need = text_field(reply, &["need", "preference"]).ok_or("reply lacks a need")?;
    let features = text_field(reply, &["features", "feature"]).ok_or("reply lacks features")?;
    let inconsistent = verdict == Verdict::Y && (need.is_empty() || features.is_empty());
    Ok(StructureVerdict {
        review_id: review_id.to_string(),
        need,
        features,
        reason: text_field(reply, &["reason"]).unwrap_or_default(),
        verdict: if inconsistent { Verdict::N } else { verdict },
        judge_inconsistent: inconsistent,
    })
}

pub fn verify_structure(record: &ExplanationRecord, profile: &DomainProfile, gateway: &Gateway) -> Result<Judged<StructureVerdict>> {
    let request = build_structure_prompt(profile, &record.explanation, record.prediction, gateway.default_temperature(TaskKind::Judge))?;
    judge(gateway, &request, &record.review_id, |reply| parse_structure(&record.review_id, reply))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureSummary {
    pub pass_rate: Option<f64>,
    pub judged: usize,
    pub abstained: usize,
    pub judge_inconsistencies: usize,
}

pub fn structure_summary(verdicts: &[Judged<StructureVerdict>]) -> StructureSummary {
    let judged: Vec<&StructureVerdict> = verdicts.iter().filter_map(Judged::verdict).collect();
    let passed = judged.iter().filter(|v| v.verdict == Verdict::Y).count();
    StructureSummary {
        pass_rate: (!judged.is_empty()).then(|| passed as f64 / judged.len() as f64),
        judged: judged.len(),
        abstained: verdicts.len() - judged.len(),
        judge_inconsistencies: judged.iter().filter(|v| v.judge_inconsistent).count(),
    }
}

/// Every judge output for one explanation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeOutputs {
    pub ground_truth: Vec<ExtractionResult>,
    pub alignment: Vec<Judged<AlignmentJudgment>>,
    pub structure: Vec<Judged<StructureVerdict>>,
    pub consistency: Consistency,
}

/// Extracts ground truth from the held-out reviews and runs all judges.
/// Pairs whose review is unknown or has no extracted phrases are skipped for
/// alignment.
pub fn run_judges(records: &[ExplanationRecord], reviews: &[Review], profile: &DomainProfile, gateway: &Gateway) -> Result<JudgeOutputs> {
    let by_id: HashMap<&str, &Review> = reviews.iter().map(|r| (r.id.as_str(), r)).collect();
    let usable: Vec<&ExplanationRecord> = records.iter().filter(|r| r.succeeded()).collect();
    let targets: Vec<(&ExplanationRecord, &Review)> = usable
        .iter()
        .filter_map(|r| by_id.get(r.review_id.as_str()).map(|rev| (*r, *rev)))
        .collect();
    let ground_truth = gateway
        .fan_out(&targets, |(_, rev)| extract(profile, rev, gateway))
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let pairs: Vec<(&ExplanationRecord, &ExtractionResult)> = targets
        .iter()
        .zip(&ground_truth)
        .filter(|(_, gt)| gt.failure.is_none() && !(gt.user_needs.is_empty() && gt.item_features.is_empty()))
        .map(|((rec, _), gt)| (*rec, gt))
        .collect();
    let alignment = gateway
        .fan_out(&pairs, |(rec, gt)| judge_alignment(&rec.review_id, &rec.explanation, gt, profile, gateway))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let structure = gateway
        .fan_out(&usable, |rec| verify_structure(rec, profile, gateway))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let consistency = sentiment_consistency(records, gateway)?;
    Ok(JudgeOutputs {
        ground_truth,
        alignment,
        structure,
        consistency,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub failed_explanations: usize,
    pub over_length: usize,
    pub weighted_f1: f64,
    pub usr: f64,
    pub s_u: f64,
    pub s_i: f64,
    pub alignment_judged: usize,
    pub alignment_abstained: usize,
    pub structure: StructureSummary,
    pub class_means: [Option<f64>; 3],
    pub consistency_dropped: usize,
    pub consistency_points: Vec<ConsistencyPoint>,
}

pub fn build_report(records: &[ExplanationRecord], weighted_f1: f64, judges: &JudgeOutputs) -> Result<EvalReport> {
    let texts: Vec<&str> = records.iter().filter(|r| r.succeeded()).map(|r| r.explanation.as_str()).collect();
    let scores = alignment_scores(&judges.alignment)?;
    Ok(EvalReport {
        records: records.len(),
        failed_explanations: records.iter().filter(|r| !r.succeeded()).count(),
        over_length: records.iter().filter(|r| r.over_length).count(),
        weighted_f1,
        usr: usr(&texts)?,
        s_u: scores.s_u,
        s_i: scores.s_i,
        alignment_judged: scores.judged,
        alignment_abstained: scores.abstained,
        structure: structure_summary(&judges.structure),
        class_means: judges.consistency.class_means,
        consistency_dropped: judges.consistency.dropped,
        consistency_points: judges.consistency.points.clone(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Human-readable summary; a pure function of the report.
pub fn render_summary(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "records                 {}", report.records);
    let _ = writeln!(s, "failed explanations     {}", report.failed_explanations);
    let _ = writeln!(s, "over word limit         {}", report.over_length);
    let _ = writeln!(s, "weighted F1             {:.4}", report.weighted_f1);
    let _ = writeln!(s, "USR                     {:.4}", report.usr);
    let _ = writeln!(s, "S_u                     {:.4}", report.s_u);
    let _ = writeln!(s, "S_i                     {:.4}", report.s_i);
    let _ = writeln!(
        s,
        "alignment judged        {} ({} abstained)",
        report.alignment_judged, report.alignment_abstained
    );
    let _ = writeln!(s, "structure pass rate     {}", opt(report.structure.pass_rate));
    let _ = writeln!(
        s,
        "structure judged        {} ({} abstained, {} judge inconsistencies)",
        report.structure.judged, report.structure.abstained, report.structure.judge_inconsistencies
    );
    for (label, mean) in SentimentLabel::ALL.iter().zip(report.class_means) {
        let _ = writeln!(s, "mean sentiment {:<9}{}", label.as_str(), opt(mean));
    }
    let _ = writeln!(
        s,
        "consistency points      {} ({} dropped)",
        report.consistency_points.len(),
        report.consistency_dropped
    );
    s
}

pub fn consistency_csv(points: &[ConsistencyPoint]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["review_id", "predicted", "score"])?;
    for p in points {
        w.write_record([p.review_id.as_str(), p.predicted.as_str(), &p.score.to_string()])?;
    }
    w.into_inner().map_err(|e| std::io::Error::other(e.to_string()).into())
}

impl From<csv::Error> for EvalError {
    fn from(e: csv::Error) -> Self {
        EvalError::Io(std::io::Error::other(e))
    }
}

/// Writes report.json, consistency.csv and summary.txt into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    write_atomic(&dir.join("consistency.csv"), &consistency_csv(&report.consistency_points)?)?;
    write_atomic(&dir.join("summary.txt"), render_summary(report).as_bytes())?;
    Ok(())
}
