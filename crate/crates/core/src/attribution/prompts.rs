//! Prompt templates and answer parsing for vision-language judges.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::PairVote;
use crate::error::{Error, Result};

pub const RELEVANCE_TEMPLATE_ID: &str = "relevance";
pub const RELABEL_TEMPLATE_ID: &str = "relabel";

/// Relevance prompt. Placeholders: `{subject}`, `{attribute}`.
pub const RELEVANCE_TEMPLATE: &str = r#"You are given three AI-generated images:

The first is the original {subject}.
The second is generated by changing one latent direction.
The third is a difference mask showing where the change occurred.

Focus specifically on whether the presence of {attribute} changes between 
the first and second images.
Outout a JSON object with the following keys:
    {"answer": "yes, {attribute} are added/removed" 
       or "no, {attribute} remain the same."}

Use the mask to support your reasoning and ignore irrelevant changes 
such as lighting or color tone.
"#;

/// Relabel prompt. Placeholders: `{image_kind}`, `{question}`, `{label_key}`.
pub const RELABEL_TEMPLATE: &str = r#"You are an image tagger for AI-generated {image_kind}.
For each image, output a JSON object with the following fields: 
Determine whether {question}.
output a JSON object. 
{ "{label_key}": "Yes / No / Ambiguous"}
If the image quality is poor or unclear, respond with "Ambiguous".
"#;

/// Task-specific words substituted into the templates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVars {
    pub subject: String,
    pub attribute: String,
    pub image_kind: String,
    pub question: String,
    pub label_key: String,
}

impl PromptVars {
    pub fn eyeglasses() -> Self {
        Self {
            subject: "face".into(),
            attribute: "eyeglasses".into(),
            image_kind: "portraits".into(),
            question: "the person in the image is wearing eyeglasses".into(),
            label_key: "glasses".into(),
        }
    }

    /// Wording for the synthetic renderer's object-presence task.
    pub fn synthetic_object() -> Self {
        Self {
            subject: "scene".into(),
            attribute: "the yellow foreground object".into(),
            image_kind: "scenes".into(),
            question: "the image contains a yellow foreground object".into(),
            label_key: "object".into(),
        }
    }

    fn substitute(&self, template: &str) -> String {
        [
            ("{subject}", &self.subject),
            ("{attribute}", &self.attribute),
            ("{image_kind}", &self.image_kind),
            ("{question}", &self.question),
            ("{label_key}", &self.label_key),
        ]
        .iter()
        .fold(template.to_string(), |acc, (k, v)| acc.replace(k, v))
    }
}

/// Templates keyed by id; starts with the two defaults and can be overridden
/// from `<id>.txt` files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptStore {
    templates: BTreeMap<String, String>,
}

impl Default for PromptStore {
    fn default() -> Self {
        let mut templates = BTreeMap::new();
        templates.insert(RELEVANCE_TEMPLATE_ID.to_string(), RELEVANCE_TEMPLATE.to_string());
        templates.insert(RELABEL_TEMPLATE_ID.to_string(), RELABEL_TEMPLATE.to_string());
        Self { templates }
    }
}

impl PromptStore {
    /// Defaults overlaid with every `*.txt` file in `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let mut store = Self::default();
        let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        paths.sort();
        for p in paths {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Validation(format!("bad template file name {}", p.display())))?
                .to_string();
            store.templates.insert(id, std::fs::read_to_string(&p)?);
        }
        Ok(store)
    }

    pub fn insert(&mut self, id: impl Into<String>, template: impl Into<String>) {
        self.templates.insert(id.into(), template.into());
    }

    pub fn render(&self, id: &str, vars: &PromptVars) -> Result<String> {
        let t = self
            .templates
            .get(id)
            .ok_or_else(|| Error::Validation(format!("unknown prompt template {id:?}")))?;
        Ok(vars.substitute(t))
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::create_dir_all(dir.as_ref())?;
        for (id, text) in &self.templates {
            std::fs::write(dir.as_ref().join(format!("{id}.txt")), text)?;
        }
        Ok(())
    }
}

/// Label assigned to a single image by the relabel prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RelabelOutcome {
    Positive,
    Negative,
    Ambiguous,
}

/// Outermost `{...}` span of a reply, tolerating code fences and chatter.
fn json_object(text: &str) -> Option<serde_json::Value> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    if end < start {
        return None;
    }
    serde_json::from_str::<serde_json::Value>(&text[start..=end])
        .ok()
        .filter(|v| v.is_object())
}

fn field<'a>(value: &'a serde_json::Value, key: &str) -> Option<&'a str> {
    value
        .as_object()?
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(key))
        .and_then(|(_, v)| v.as_str())
}

/// `"yes, ..."` → relevant change, `"no, ..."` → no relevant change, anything else ambiguous.
pub fn parse_pair_answer(text: &str) -> PairVote {
    let Some(v) = json_object(text) else {
        return PairVote::Ambiguous;
    };
    let Some(answer) = field(&v, "answer") else {
        return PairVote::Ambiguous;
    };
    let a = answer.trim().to_ascii_lowercase();
    let word: String = a.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
    match word.as_str() {
        "yes" => PairVote::RelevantChange,
        "no" => PairVote::NoRelevantChange,
        _ => PairVote::Ambiguous,
    }
}

pub fn parse_relabel_answer(text: &str, label_key: &str) -> RelabelOutcome {
    let Some(v) = json_object(text) else {
        return RelabelOutcome::Ambiguous;
    };
    match field(&v, label_key).map(|s| s.trim().to_ascii_lowercase()) {
        Some(s) if s == "yes" => RelabelOutcome::Positive,
        Some(s) if s == "no" => RelabelOutcome::Negative,
        _ => RelabelOutcome::Ambiguous,
    }
}
