//! Cloze prompt templates.
//!
//! A pattern such as `"Just [MASK] ! {x}"` holds exactly one `{x}` input
//! slot and one `[MASK]` slot; everything else is kept verbatim.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{self, TokenId, Vocabulary, MASK_ID};

pub const INPUT_SLOT: &str = "{x}";
pub const MASK_SLOT: &str = tokenizer::MASK;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Literal(String),
    Mask,
    Input,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    parts: Vec<Part>,
}

/// Built-in candidates, selectable by name.
pub const BUILTIN_TEMPLATES: [(&str, &str); 4] = [
    ("it_was", "It was [MASK] . {x}"),
    ("in_summary", "{x} In summary , it was [MASK] ."),
    ("all_in_all", "{x} All in all , it was [MASK] ."),
    ("just", "Just [MASK] ! {x}"),
];

/// The four task families and their default templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CodeLanguage,
    CodeSmell,
    CodeComment,
    TechnicalDebt,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::CodeLanguage,
        TaskKind::CodeSmell,
        TaskKind::CodeComment,
        TaskKind::TechnicalDebt,
    ];

    pub fn default_template_name(self) -> &'static str {
        match self {
            TaskKind::CodeLanguage | TaskKind::TechnicalDebt => "just",
            TaskKind::CodeSmell => "in_summary",
            TaskKind::CodeComment => "it_was",
        }
    }

    pub fn default_template(self) -> PromptTemplate {
        PromptTemplate::builtin(self.default_template_name()).expect("built-in template")
    }
}

impl PromptTemplate {
    pub fn parse(name: &str, pattern: &str) -> Result<Self> {
        let mut parts = Vec::new();
        let mut rest = pattern;
        let (mut masks, mut inputs) = (0, 0);
        while !rest.is_empty() {
            let next_mask = rest.find(MASK_SLOT);
            let next_input = rest.find(INPUT_SLOT);
            let (pos, part, len) = match (next_mask, next_input) {
                (Some(m), Some(i)) if m < i => (m, Part::Mask, MASK_SLOT.len()),
                (_, Some(i)) => (i, Part::Input, INPUT_SLOT.len()),
                (Some(m), None) => (m, Part::Mask, MASK_SLOT.len()),
                (None, None) => {
                    parts.push(Part::Literal(rest.to_string()));
                    break;
                }
            };
            if pos > 0 {
                parts.push(Part::Literal(rest[..pos].to_string()));
            }
            match part {
                Part::Mask => masks += 1,
                Part::Input => inputs += 1,
                Part::Literal(_) => unreachable!(),
            }
            parts.push(part);
            rest = &rest[pos + len..];
        }
        if masks != 1 || inputs != 1 {
            return Err(Error::InvalidTemplate(format!(
                "`{pattern}` must contain exactly one {MASK_SLOT} and one {INPUT_SLOT} \
                 (found {masks} and {inputs})"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            parts,
        })
    }

    pub fn builtin(name: &str) -> Option<Self> {
        BUILTIN_TEMPLATES
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(n, p)| Self::parse(n, p).expect("built-in templates are valid"))
    }

    /// Resolves a built-in name, or parses `spec` as a pattern when it
    /// contains the input slot.
    pub fn resolve(spec: &str) -> Result<Self> {
        if let Some(t) = Self::builtin(spec) {
            return Ok(t);
        }
        if spec.contains(INPUT_SLOT) {
            return Self::parse("custom", spec);
        }
        Err(Error::InvalidTemplate(format!(
            "`{spec}` is neither a built-in template name nor a pattern with {INPUT_SLOT}"
        )))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn parts(&self) -> &[Part] {
        &self.parts
    }

    pub fn pattern(&self) -> String {
        self.parts
            .iter()
            .map(|p| match p {
                Part::Literal(s) => s.as_str(),
                Part::Mask => MASK_SLOT,
                Part::Input => INPUT_SLOT,
            })
            .collect()
    }

    /// True when the mask slot precedes the input slot.
    pub fn is_prefix(&self) -> bool {
        let m = self.parts.iter().position(|p| *p == Part::Mask);
        let i = self.parts.iter().position(|p| *p == Part::Input);
        m < i
    }

    pub fn wrap(&self, x: &str) -> String {
        let mut out = String::with_capacity(x.len() + 32);
        for p in &self.parts {
            match p {
                Part::Literal(s) => out.push_str(s),
                Part::Mask => out.push_str(MASK_SLOT),
                Part::Input => out.push_str(x),
            }
        }
        out
    }

    /// Wraps, tokenizes with a leading `[CLS]` and trailing `[SEP]`, pads
    /// or truncates to `n`, and locates the single mask.
    pub fn encode(&self, v: &Vocabulary, x: &str, n: usize) -> Result<EncodedPrompt> {
        let full = v.encode_sequence(&self.wrap(x));
        let (ids, valid_length) = tokenizer::pad_or_truncate(&full, n)?;
        let found: Vec<usize> = ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == MASK_ID)
            .map(|(i, _)| i)
            .collect();
        let total_masks = full.iter().filter(|&&id| id == MASK_ID).count();
        if total_masks > 1 {
            return Err(Error::MultipleMasks(total_masks));
        }
        match found.as_slice() {
            [pos] => Ok(EncodedPrompt {
                ids,
                valid_length,
                mask_position: *pos,
            }),
            _ => Err(Error::MaskLost),
        }
    }

    pub fn mask_position(&self, v: &Vocabulary, x: &str, n: usize) -> Result<usize> {
        self.encode(v, x, n).map(|e| e.mask_position)
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.pattern())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPrompt {
    pub ids: Vec<TokenId>,
    pub valid_length: usize,
    pub mask_position: usize,
}

/// Reads `name<TAB>pattern` lines. Blank lines and `#` comments are skipped.
pub fn load_templates(path: &Path) -> Result<Vec<PromptTemplate>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, pattern) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: "expected name<TAB>pattern".into(),
        })?;
        let t = PromptTemplate::parse(name, pattern).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(t);
    }
    Ok(out)
}

pub fn save_templates(path: &Path, templates: &[PromptTemplate]) -> Result<()> {
    let mut out = String::new();
    for t in templates {
        out.push_str(t.name());
        out.push('\t');
        out.push_str(&t.pattern());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
