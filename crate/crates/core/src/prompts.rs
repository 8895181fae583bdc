//! Domain prompt catalog.
//!
//! Each domain directory holds the system prompts as plain text plus
//! `fewshot.json`. User messages are small JSON templates whose `{name}`
//! placeholders are replaced by JSON-encoded values, so a rendered payload is
//! always valid JSON when the template is.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::SentimentLabel;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template {template}: required placeholder {{{name}}} is missing")]
    MissingPlaceholder { template: String, name: String },
    #[error("template {template}: placeholder {{{name}}} has no value")]
    UnresolvedPlaceholder { template: String, name: String },
    #[error("unknown domain {0:?} (expected accommodation, movies-tv, restaurant or custom)")]
    UnknownDomain(String),
    #[error("custom domain needs a prompt directory")]
    MissingDirectory,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("few-shot file: {0}")]
    FewShot(String),
}

pub type Result<T> = std::result::Result<T, PromptError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainName {
    Accommodation,
    MoviesTv,
    Restaurant,
    Custom,
}

impl DomainName {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainName::Accommodation => "accommodation",
            DomainName::MoviesTv => "movies-tv",
            DomainName::Restaurant => "restaurant",
            DomainName::Custom => "custom",
        }
    }
}

impl std::str::FromStr for DomainName {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accommodation" => Ok(DomainName::Accommodation),
            "movies-tv" => Ok(DomainName::MoviesTv),
            "restaurant" => Ok(DomainName::Restaurant),
            "custom" => Ok(DomainName::Custom),
            other => Err(PromptError::UnknownDomain(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub key_features: Vec<String>,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FewShot {
    pub positive: Vec<Exemplar>,
    pub negative: Vec<Exemplar>,
    pub neutral: Vec<Exemplar>,
}

impl FewShot {
    pub fn for_label(&self, label: SentimentLabel) -> &[Exemplar] {
        match label {
            SentimentLabel::Positive => &self.positive,
            SentimentLabel::Negative => &self.negative,
            SentimentLabel::Neutral => &self.neutral,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainProfile {
    pub name: DomainName,
    pub extraction: Template,
    pub alignment: Template,
    pub structure: Template,
    pub generation: Template,
    pub need_naming: String,
    pub feature_naming: String,
    pub few_shot: FewShot,
}

pub const EXTRACTION_USER: &str = r#"{"review": {review}, "sentiment": {sentiment}}"#;
pub const ALIGNMENT_USER: &str =
    r#"{"review": {explanation}, "user_need": {user_need}, "item_feature": {item_feature}}"#;
pub const STRUCTURE_USER: &str = r#"{"explanation": {explanation}, "sentiment": {sentiment}}"#;
pub const GENERATION_USER: &str = r#"{"prediction": {prediction}, "key_features": {key_features}}"#;

const EXTRACTION_FORMAT: &str = include_str!("../prompts/extraction_format.txt");
const ALIGNMENT_FORMAT: &str = include_str!("../prompts/alignment_format.txt");

macro_rules! builtin_files {
    ($dir:literal) => {
        [
            include_str!(concat!("../prompts/", $dir, "/extraction.txt")),
            include_str!(concat!("../prompts/", $dir, "/alignment.txt")),
            include_str!(concat!("../prompts/", $dir, "/structure.txt")),
            include_str!(concat!("../prompts/", $dir, "/generation.txt")),
            include_str!(concat!("../prompts/", $dir, "/need_naming.txt")),
            include_str!(concat!("../prompts/", $dir, "/feature_naming.txt")),
            include_str!(concat!("../prompts/", $dir, "/fewshot.json")),
        ]
    };
}

const FILE_NAMES: [&str; 7] = [
    "extraction.txt",
    "alignment.txt",
    "structure.txt",
    "generation.txt",
    "need_naming.txt",
    "feature_naming.txt",
    "fewshot.json",
];

const REQUIRED: [(&str, &[&str]); 4] = [
    ("extraction", &["review", "sentiment"]),
    ("alignment", &["explanation", "user_need", "item_feature"]),
    ("structure", &["explanation", "sentiment"]),
    ("generation", &["prediction", "key_features"]),
];

impl DomainProfile {
    pub fn builtin(name: DomainName) -> Result<Self> {
        let files = match name {
            DomainName::Accommodation => builtin_files!("accommodation"),
            DomainName::MoviesTv => builtin_files!("movies-tv"),
            DomainName::Restaurant => builtin_files!("restaurant"),
            DomainName::Custom => return Err(PromptError::MissingDirectory),
        };
        let user = [EXTRACTION_USER, ALIGNMENT_USER, STRUCTURE_USER, GENERATION_USER].map(String::from);
        Self::assemble(name, files.map(String::from), user)
    }

    /// Loads a profile from a catalog directory. Missing `*_user.txt` files
    /// fall back to the built-in JSON templates.
    pub fn load_dir(name: DomainName, dir: &Path) -> Result<Self> {
        let read = |file: &str| {
            let path = dir.join(file);
            std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        let mut files: [String; 7] = Default::default();
        for (slot, file) in files.iter_mut().zip(FILE_NAMES) {
            *slot = read(file)?;
        }
        let defaults = [EXTRACTION_USER, ALIGNMENT_USER, STRUCTURE_USER, GENERATION_USER];
        let mut user: [String; 4] = Default::default();
        for ((slot, (task, _)), default) in user.iter_mut().zip(REQUIRED).zip(defaults) {
            let path = dir.join(format!("{task}_user.txt"));
            *slot = if path.exists() {
                read(&format!("{task}_user.txt"))?
            } else {
                default.to_string()
            };
        }
        Self::assemble(name, files, user)
    }

    pub fn resolve(name: DomainName, dir: Option<&Path>) -> Result<Self> {
        match dir {
            Some(d) => Self::load_dir(name, d),
            None => Self::builtin(name),
        }
    }

    fn assemble(name: DomainName, files: [String; 7], user: [String; 4]) -> Result<Self> {
        let [extraction, alignment, structure, generation, need_naming, feature_naming, fewshot] = files;
        let [eu, au, su, gu] = user;
        let few_shot: FewShot = serde_json::from_str(&fewshot).map_err(|e| PromptError::FewShot(e.to_string()))?;
        let profile = DomainProfile {
            name,
            extraction: Template {
                system: format!("{}\n{}", extraction.trim_end(), EXTRACTION_FORMAT),
                user: eu,
            },
            alignment: Template {
                system: format!("{}\n{}", alignment.trim_end(), ALIGNMENT_FORMAT),
                user: au,
            },
            structure: Template {
                system: structure,
                user: su,
            },
            generation: Template {
                system: generation,
                user: gu,
            },
            need_naming,
            feature_naming,
            few_shot,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        let templates = [&self.extraction, &self.alignment, &self.structure, &self.generation];
        for (t, (task, required)) in templates.into_iter().zip(REQUIRED) {
            let found = placeholders(&t.user);
            for name in required {
                if !found.iter().any(|f| f == name) {
                    return Err(PromptError::MissingPlaceholder {
                        template: format!("{task}_user"),
                        name: name.to_string(),
                    });
                }
            }
            if let Some(extra) = found.iter().find(|f| !required.contains(&f.as_str())) {
                return Err(PromptError::UnresolvedPlaceholder {
                    template: format!("{task}_user"),
                    name: extra.clone(),
                });
            }
        }
        Ok(())
    }

    /// Generation system prompt followed by the exemplars for `prediction`.
    pub fn generation_system(&self, prediction: SentimentLabel) -> String {
        let shots = self.few_shot.for_label(prediction);
        if shots.is_empty() {
            return self.generation.system.clone();
        }
        let mut out = format!("{}\nExamples:\n", self.generation.system.trim_end());
        for s in shots {
            let input = serde_json::json!({"prediction": prediction.as_str(), "key_features": s.key_features});
            let output = serde_json::json!({"explanation": s.explanation});
            out.push_str(&format!("Input: {input}\nOutput: {output}\n"));
        }
        out
    }
}

/// Names of `{name}` placeholders in order of appearance. Only runs of
/// `[a-z_]` directly enclosed in braces count, so JSON braces are literal.
pub fn placeholders(template: &str) -> Vec<String> {
    scan(template).into_iter().filter_map(|p| p.err()).collect()
}

fn scan(template: &str) -> Vec<std::result::Result<&str, String>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(i) = rest.find('{') {
        out.push(Ok(&rest[..i]));
        let after = &rest[i + 1..];
        let len = after.find(|c: char| !(c.is_ascii_lowercase() || c == '_')).unwrap_or(after.len());
        if len > 0 && after[len..].starts_with('}') {
            out.push(Err(after[..len].to_string()));
            rest = &after[len + 1..];
        } else {
            out.push(Ok("{"));
            rest = after;
        }
    }
    out.push(Ok(rest));
    out
}

/// Substitutes each placeholder with the JSON encoding of its value.
pub fn render(template_name: &str, template: &str, values: &[(&str, Value)]) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    for piece in scan(template) {
        match piece {
            Ok(text) => out.push_str(text),
            Err(name) => {
                let v = values.iter().find(|(k, _)| *k == name).ok_or_else(|| {
                    PromptError::UnresolvedPlaceholder {
                        template: template_name.to_string(),
                        name: name.clone(),
                    }
                })?;
                out.push_str(&v.1.to_string());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn builtins_load_and_validate() {
        for name in [DomainName::Accommodation, DomainName::MoviesTv, DomainName::Restaurant] {
            let p = DomainProfile::builtin(name).unwrap();
            for label in SentimentLabel::ALL {
                assert_eq!(p.few_shot.for_label(label).len(), 3);
            }
            assert!(p.extraction.system.contains("user_needs"));
        }
        assert!(DomainProfile::builtin(DomainName::Custom).is_err());
    }

    #[test]
    fn accommodation_texts_are_verbatim() {
        let p = DomainProfile::builtin(DomainName::Accommodation).unwrap();
        assert!(p.extraction.system.starts_with(
            "You are a professional customer experience analyst.\n\
             You are given a user review of their accommodation alongside a sentiment label (positive or negative)."
        ));
        assert!(p.generation.system.starts_with("You are a Customer Service Specialist"));
        assert!(p.generation.system.contains("Neutral: Balanced and objective"));
        assert!(p.alignment.system.starts_with("You are a Review Relevance Analyst."));
        assert!(p.structure.system.contains("meticulous evaluator of recommendation explanations"));
        assert!(p.need_naming.contains("five phrases"));
    }

    #[test]
    fn render_and_placeholder_scan() {
        let t = r#"{"review": {review}, "sentiment": {sentiment}}"#;
        assert_eq!(placeholders(t), vec!["review", "sentiment"]);
        let s = render("x", t, &[("review", json!("a \"quoted\" text")), ("sentiment", json!("positive"))]).unwrap();
        let v: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["review"], "a \"quoted\" text");
        assert!(matches!(
            render("x", t, &[("review", json!("r"))]),
            Err(PromptError::UnresolvedPlaceholder { .. })
        ));
        assert_eq!(placeholders("{} {A} {not closed"), Vec::<String>::new());
    }

    #[test]
    fn custom_profile_missing_placeholder() {
        let dir = tempfile::tempdir().unwrap();
        let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("prompts/restaurant");
        for f in FILE_NAMES {
            std::fs::copy(src.join(f), dir.path().join(f)).unwrap();
        }
        assert_eq!(DomainProfile::load_dir(DomainName::Custom, dir.path()).unwrap().name, DomainName::Custom);
        std::fs::write(dir.path().join("extraction_user.txt"), r#"{"text": {review}}"#).unwrap();
        assert!(matches!(
            DomainProfile::load_dir(DomainName::Custom, dir.path()),
            Err(PromptError::MissingPlaceholder { ref name, .. }) if name == "sentiment"
        ));
        std::fs::remove_file(dir.path().join("fewshot.json")).unwrap();
        assert!(matches!(
            DomainProfile::load_dir(DomainName::Custom, dir.path()),
            Err(PromptError::Io { .. })
        ));
    }

    #[test]
    fn generation_system_includes_matching_exemplars() {
        let p = DomainProfile::builtin(DomainName::Restaurant).unwrap();
        let s = p.generation_system(SentimentLabel::Negative);
        assert!(s.contains("long waits and inattentive staff"));
        assert!(!s.contains("boldly seasoned"));
    }
}
