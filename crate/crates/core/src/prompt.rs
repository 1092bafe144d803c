//! Task templates and few-shot prompt rendering.
//!
//! A block is the instruction with its slots filled, a newline and the answer
//! cue; demonstration blocks append a space and the gold output. Blocks are
//! joined by the template separator and the query block comes last, ending at
//! its cue.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};

pub const SLOTS: [&str; 4] = ["target_language", "passage", "question", "input"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Summarization,
    CrossLingualQa,
    Translation,
    MultilingualQa,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::Summarization,
        Task::CrossLingualQa,
        Task::Translation,
        Task::MultilingualQa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Summarization => "summarization",
            Task::CrossLingualQa => "cross-lingual-qa",
            Task::Translation => "translation",
            Task::MultilingualQa => "multilingual-qa",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub task: Task,
    pub instruction: String,
    #[serde(default = "default_separator")]
    pub separator: String,
    pub answer_cue: String,
}

fn default_separator() -> String {
    "\n".to_owned()
}

/// Splits `text` into literal pieces and `{slot}` references.
fn parse_slots(text: &str) -> Result<Vec<Piece<'_>>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .map(|c| open + c)
            .ok_or_else(|| Error::Template {
                slot: rest[open..].to_owned(),
            })?;
        let name = &rest[open + 1..close];
        if !SLOTS.contains(&name) {
            return Err(Error::Template { slot: name.to_owned() });
        }
        out.push(Piece::Literal(&rest[..open]));
        out.push(Piece::Slot(name));
        rest = &rest[close + 1..];
    }
    out.push(Piece::Literal(rest));
    Ok(out)
}

enum Piece<'a> {
    Literal(&'a str),
    Slot(&'a str),
}

impl PromptTemplate {
    pub fn new(task: Task, instruction: impl Into<String>, answer_cue: impl Into<String>) -> Result<Self> {
        let t = PromptTemplate {
            task,
            instruction: instruction.into(),
            separator: default_separator(),
            answer_cue: answer_cue.into(),
        };
        t.validate()?;
        Ok(t)
    }

    /// Known slots only, each at most once.
    pub fn validate(&self) -> Result<()> {
        let mut seen = Vec::new();
        for piece in parse_slots(&self.instruction)? {
            if let Piece::Slot(name) = piece {
                if seen.contains(&name) {
                    return Err(Error::Template {
                        slot: format!("{name} (repeated)"),
                    });
                }
                seen.push(name);
            }
        }
        if self.answer_cue.is_empty() {
            return Err(Error::Template {
                slot: "answer_cue".into(),
            });
        }
        Ok(())
    }

    pub fn slots(&self) -> Vec<&str> {
        parse_slots(&self.instruction)
            .map(|p| {
                p.into_iter()
                    .filter_map(|x| match x {
                        Piece::Slot(s) => Some(s),
                        Piece::Literal(_) => None,
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    fn fill(&self, example: &Example) -> Result<String> {
        let mut out = String::new();
        for piece in parse_slots(&self.instruction)? {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Slot(name) => out.push_str(&slot_value(name, example)?),
            }
        }
        Ok(out)
    }

    fn block(&self, example: &Example, with_output: bool) -> Result<String> {
        let mut b = self.fill(example)?;
        b.push('\n');
        b.push_str(&self.answer_cue);
        if with_output {
            b.push(' ');
            b.push_str(&example.output_text);
        }
        Ok(b)
    }
}

fn slot_value(name: &str, ex: &Example) -> Result<String> {
    let missing = || Error::Template { slot: name.to_owned() };
    let v = match name {
        "input" => ex.input_text.clone(),
        "target_language" => language_name(&ex.language),
        "passage" => ex.passage.clone().ok_or_else(missing)?,
        "question" => ex.question.clone().unwrap_or_else(|| ex.input_text.clone()),
        _ => return Err(missing()),
    };
    if v.is_empty() {
        return Err(missing());
    }
    Ok(v)
}

/// Demonstration blocks in the given order, then the query block ending at the cue.
pub fn render(template: &PromptTemplate, demonstrations: &[&Example], query: &Example) -> Result<String> {
    let mut blocks = Vec::with_capacity(demonstrations.len() + 1);
    for d in demonstrations {
        blocks.push(template.block(d, true)?);
    }
    blocks.push(template.block(query, false)?);
    Ok(blocks.join(&template.separator))
}

const LANGUAGE_NAMES: [(&str, &str); 18] = [
    ("awa", "Awadhi"),
    ("bn", "Bengali"),
    ("brx", "Bodo"),
    ("en", "English"),
    ("gu", "Gujarati"),
    ("hi", "Hindi"),
    ("kn", "Kannada"),
    ("mai", "Maithili"),
    ("ml", "Malayalam"),
    ("mni", "Manipuri"),
    ("mr", "Marathi"),
    ("mwr", "Marwari"),
    ("or", "Odia"),
    ("raj", "Rajasthani"),
    ("sat", "Santali"),
    ("ta", "Tamil"),
    ("te", "Telugu"),
    ("ur", "Urdu"),
];

/// Display name of a language tag; unknown tags come back unchanged with a warning.
pub fn language_name(tag: &str) -> String {
    match LANGUAGE_NAMES.binary_search_by_key(&tag, |(t, _)| t) {
        Ok(i) => LANGUAGE_NAMES[i].1.to_owned(),
        Err(_) => {
            log::warn!("no display name for language tag {tag:?}; using the tag");
            tag.to_owned()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    templates: BTreeMap<Task, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let t = |task, instruction: &str, cue: &str| {
            (
                task,
                PromptTemplate::new(task, instruction, cue).expect("built-in template"),
            )
        };
        TemplateSet {
            templates: BTreeMap::from([
                t(
                    Task::Summarization,
                    "Summarize the article in {target_language} language.\nSummarize the following article: {input}",
                    "Summary:",
                ),
                t(
                    Task::CrossLingualQa,
                    "Generate an answer in {target_language} language for the question based on the given passage.\n{passage}\nQuestion: {question}",
                    "Answer:",
                ),
                t(Task::Translation, "Translate the following sentence to English.\nInput: {input}", "Output:"),
                t(
                    Task::MultilingualQa,
                    "Generate an answer for the next question in {target_language} language.\n{passage}\nQuestion: {question}",
                    "Answer:",
                ),
            ]),
        }
    }

    pub fn get(&self, task: Task) -> &PromptTemplate {
        &self.templates[&task]
    }

    /// Replaces built-ins with the templates in a JSON object keyed by task name.
    pub fn with_overrides_json(mut self, json: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            instruction: String,
            answer_cue: String,
            #[serde(default = "default_separator")]
            separator: String,
        }
        let parsed: BTreeMap<Task, Entry> = serde_json::from_str(json).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        for (task, e) in parsed {
            let t = PromptTemplate {
                task,
                instruction: e.instruction,
                separator: e.separator,
                answer_cue: e.answer_cue,
            };
            t.validate()?;
            self.templates.insert(task, t);
        }
        Ok(self)
    }

    pub fn load_overrides(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::builtin()
            .with_overrides_json(&text)
            .map_err(|e| e.context(format!("templates {}", path.display())))
    }
}
