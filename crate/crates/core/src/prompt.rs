//! Prompt construction for decomposition, expansion and whole-answer runs.
//!
//! Three prompt families exist:
//!
//! * the *generation* (decomposition) prompt asks the model to emit the key
//!   points of an answer as a JSON array in the wire format of
//!   [`crate::stream`];
//! * the *expansion* prompt asks for one section, given injected context from
//!   the point's parents — a contextual parent contributes its statement, a
//!   dependent parent contributes its finished output;
//! * the *whole-answer* prompt is the single-shot baseline.
//!
//! Preset texts, the format contract and the exemplars ship as editable data
//! files under `prompts/` and are compiled in as defaults; a runtime
//! directory can override any of them file-by-file.

use crate::dag::{EdgeKind, KeyPoint, PointDag, PointId};
use crate::retrieval::Chunk;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("point {point} depends on point {parent}, whose output is not available")]
    MissingDependentOutput { point: PointId, parent: PointId },
    #[error("point {0} is not part of the dag")]
    UnknownPoint(PointId),
    #[error("generation prompts need at least one exemplar of the wire format")]
    NoExemplars,
    #[error("failed to load prompt assets: {0}")]
    LoadFailed(String),
}

/// A worked decomposition example shown to the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub query: String,
    /// The expected answer: a compact JSON array in the wire format.
    pub points_json: String,
}

/// Everything needed to build a decomposition prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub preset: String,
    pub exemplars: Vec<Exemplar>,
    pub format_contract: String,
}

/// Full prompt configuration for one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptConfig {
    pub decompose: PromptTemplate,
    pub expand_preset: String,
    pub whole_preset: String,
    /// Soft length bound quoted to the model for each expanded section.
    pub max_point_words: usize,
}

const DECOMPOSE_PRESET: &str = include_str!("../prompts/decompose_preset.txt");
const FORMAT_CONTRACT: &str = include_str!("../prompts/format_contract.txt");
const EXPAND_PRESET: &str = include_str!("../prompts/expand_preset.txt");
const WHOLE_PRESET: &str = include_str!("../prompts/whole_preset.txt");
const EXEMPLARS_JSONL: &str = include_str!("../prompts/exemplars.jsonl");

fn parse_exemplars(jsonl: &str) -> Result<Vec<Exemplar>, PromptError> {
    #[derive(Deserialize)]
    struct Line {
        query: String,
        points: serde_json::Value,
    }
    let mut out = Vec::new();
    for (n, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Line = serde_json::from_str(line)
            .map_err(|e| PromptError::LoadFailed(format!("exemplar line {}: {e}", n + 1)))?;
        out.push(Exemplar {
            query: rec.query,
            points_json: rec.points.to_string(),
        });
    }
    Ok(out)
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            decompose: PromptTemplate {
                preset: DECOMPOSE_PRESET.trim().to_string(),
                exemplars: parse_exemplars(EXEMPLARS_JSONL)
                    .expect("compiled-in exemplars are well-formed"),
                format_contract: FORMAT_CONTRACT.trim().to_string(),
            },
            expand_preset: EXPAND_PRESET.trim().to_string(),
            whole_preset: WHOLE_PRESET.trim().to_string(),
            max_point_words: 120,
        }
    }
}

impl PromptConfig {
    /// Starts from the compiled-in defaults and overrides any asset that has
    /// a matching file in `dir`: `decompose_preset.txt`, `expand_preset.txt`,
    /// `whole_preset.txt`, `format_contract.txt`, `exemplars.jsonl`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut cfg = PromptConfig::default();
        let read = |name: &str| -> Result<Option<String>, PromptError> {
            let path = dir.join(name);
            if !path.exists() {
                return Ok(None);
            }
            std::fs::read_to_string(&path)
                .map(Some)
                .map_err(|e| PromptError::LoadFailed(format!("{}: {e}", path.display())))
        };
        if let Some(text) = read("decompose_preset.txt")? {
            cfg.decompose.preset = text.trim().to_string();
        }
        if let Some(text) = read("format_contract.txt")? {
            cfg.decompose.format_contract = text.trim().to_string();
        }
        if let Some(text) = read("expand_preset.txt")? {
            cfg.expand_preset = text.trim().to_string();
        }
        if let Some(text) = read("whole_preset.txt")? {
            cfg.whole_preset = text.trim().to_string();
        }
        if let Some(text) = read("exemplars.jsonl")? {
            cfg.decompose.exemplars = parse_exemplars(&text)?;
        }
        Ok(cfg)
    }
}

/// `[doc#seq]`-labelled background block, chunks in rank order.
fn background_block(out: &mut String, retrieved: &[Chunk]) {
    if retrieved.is_empty() {
        return;
    }
    out.push_str("### Background\n");
    for chunk in retrieved {
        let _ = writeln!(out, "[{}#{}] {}", chunk.doc_id, chunk.seq, chunk.text.trim());
    }
    out.push('\n');
}

/// Builds the decomposition prompt. Block order is fixed: preset, exemplars,
/// retrieved chunks (rank order), the query, then the format contract.
pub fn assemble_generation_prompt(
    query: &str,
    retrieved: &[Chunk],
    template: &PromptTemplate,
) -> Result<String, PromptError> {
    if template.exemplars.is_empty() {
        return Err(PromptError::NoExemplars);
    }
    let mut out = String::new();
    out.push_str(&template.preset);
    out.push_str("\n\n");
    for ex in &template.exemplars {
        let _ = write!(
            out,
            "### Example\nQuery: {}\nPoints: {}\n\n",
            ex.query, ex.points_json
        );
    }
    background_block(&mut out, retrieved);
    let _ = write!(out, "### Task\nQuery: {}\n\n", query.trim());
    out.push_str(&template.format_contract);
    out.push_str("\n\nPoints:");
    Ok(out)
}

/// Context injected for one parent of an expansion prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParentSection {
    pub parent_id: PointId,
    pub kind: EdgeKind,
    /// The parent's statement (contextual) or finished output (dependent).
    pub text: String,
}

/// Structured expansion prompt: the preset, the injected parent sections in
/// ascending (parent id, kind) order, and the point to expand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpansionInput {
    pub preset: String,
    pub max_point_words: usize,
    pub parents: Vec<ParentSection>,
    pub point: KeyPoint,
}

impl ExpansionInput {
    /// Flattens the structured input into the prompt text.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = write!(
            out,
            "{} Keep this section under {} words.\n\n",
            self.preset, self.max_point_words
        );
        for section in &self.parents {
            let label = match section.kind {
                EdgeKind::Contextual => "Context from point",
                EdgeKind::Dependent => "Result of point",
                EdgeKind::Null => unreachable!("null relations are never injected"),
            };
            let _ = write!(out, "{label} {}:\n{}\n\n", section.parent_id, section.text);
        }
        let _ = write!(
            out,
            "Point to expand:\n{}. {}\n\nSection:",
            self.point.id, self.point.instruction
        );
        out
    }
}

/// Assembles the expansion input for point `point`.
///
/// Each parent relation injects exactly one section: a contextual relation
/// injects the parent's statement, a dependent relation injects the parent's
/// output from `outputs` (failing with [`PromptError::MissingDependentOutput`]
/// if it has not been produced). Independent points inject nothing.
pub fn assemble_expansion_input(
    point: PointId,
    dag: &PointDag,
    outputs: &BTreeMap<PointId, String>,
    config: &PromptConfig,
) -> Result<ExpansionInput, PromptError> {
    let kp = dag.point(point).ok_or(PromptError::UnknownPoint(point))?;
    let mut parents = Vec::new();
    for rel in dag.parents(point) {
        let text = match rel.kind {
            EdgeKind::Contextual => {
                let parent = dag
                    .point(rel.from)
                    .ok_or(PromptError::UnknownPoint(rel.from))?;
                parent.instruction.clone()
            }
            EdgeKind::Dependent => outputs
                .get(&rel.from)
                .cloned()
                .ok_or(PromptError::MissingDependentOutput {
                    point,
                    parent: rel.from,
                })?,
            EdgeKind::Null => unreachable!("null relations are never materialized"),
        };
        parents.push(ParentSection {
            parent_id: rel.from,
            kind: rel.kind,
            text,
        });
    }
    Ok(ExpansionInput {
        preset: config.expand_preset.clone(),
        max_point_words: config.max_point_words,
        parents,
        point: kp.clone(),
    })
}

/// Single-shot baseline prompt over the same query and background.
pub fn whole_answer_prompt(query: &str, retrieved: &[Chunk], config: &PromptConfig) -> String {
    let mut out = String::new();
    out.push_str(&config.whole_preset);
    out.push_str("\n\n");
    background_block(&mut out, retrieved);
    let _ = write!(out, "### Task\nQuery: {}\n\nAnswer:", query.trim());
    out
}
