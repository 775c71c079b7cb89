//! Incremental parser for the decomposition wire format.
//!
//! The decomposition step emits a JSON array of point records:
//!
//! ```json
//! [{"id": 1, "point": "build the equations", "deps": []},
//!  {"id": 2, "point": "solve for x", "deps": [{"on": 1, "kind": "contextual"}]}]
//! ```
//!
//! `kind` is one of `"none"`, `"contextual"`, `"dependent"` (case-insensitive
//! on input; `"none"` declares explicit independence and produces no edge).
//!
//! [`PointStreamParser`] consumes the text in arbitrary fragments and yields
//! each record as soon as its closing brace arrives, so downstream work can
//! begin while the model is still streaming the tail of the array. Surrounding
//! prose before the array and after it is ignored, which tolerates models that
//! wrap their answer in commentary or code fences.
//!
//! Parsing is two-layered: [`PointStreamParser::feed`] only checks record
//! *syntax* and yields [`KeyPointRecord`]s verbatim; [`to_domain`] then
//! validates ids and kind tags and converts to [`KeyPoint`]s and
//! [`Relation`]s, collecting non-fatal repairs as warnings.

use crate::dag::{EdgeKind, KeyPoint, PointId, Relation};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum length of a derived point title, in characters.
const TITLE_CHARS: usize = 80;

/// One record of the wire array, before domain validation.
///
/// Serializing a parsed record reproduces its wire form field-for-field, so
/// `parse(serialize(records)) == records`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyPointRecord {
    pub id: i64,
    pub point: String,
    #[serde(default)]
    pub deps: Vec<DepRecord>,
}

/// A dependency entry as written on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepRecord {
    pub on: i64,
    pub kind: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum StreamError {
    #[error("no point array found in stream")]
    MissingArray,
    #[error("malformed record at byte {offset}: {reason}")]
    MalformedRecord { offset: usize, reason: String },
    #[error("unexpected character {found:?} at byte {offset}")]
    UnexpectedCharacter { found: char, offset: usize },
    #[error("stream ended inside a record at byte {offset}")]
    TruncatedStream { offset: usize },
    #[error("unknown dependency kind {kind:?} on point {point}")]
    UnknownKindTag { kind: String, point: i64 },
    #[error("invalid point id {id}: {reason}")]
    InvalidPointId { id: i64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum State {
    /// Scanning for the opening `[` of the array; anything else is prose.
    Preamble,
    /// Inside the array, between records.
    Between,
    /// Inside a record object; body accumulates into `buf`.
    Record,
    /// The array closed; the rest of the stream is ignored.
    Done,
}

/// Incremental record-boundary scanner for the decomposition array.
#[derive(Debug)]
pub struct PointStreamParser {
    state: State,
    /// Global byte offset across all fed fragments, for error reporting.
    offset: usize,
    /// Offset of the `{` that opened the current record.
    record_start: usize,
    buf: String,
    depth: u32,
    in_string: bool,
    escaped: bool,
}

impl Default for PointStreamParser {
    fn default() -> Self {
        Self::new()
    }
}

impl PointStreamParser {
    pub fn new() -> Self {
        PointStreamParser {
            state: State::Preamble,
            offset: 0,
            record_start: 0,
            buf: String::new(),
            depth: 0,
            in_string: false,
            escaped: false,
        }
    }

    /// True once the closing `]` of the array has been seen.
    pub fn is_complete(&self) -> bool {
        self.state == State::Done
    }

    /// Consumes one fragment; returns the records completed by it.
    pub fn feed(&mut self, fragment: &str) -> Result<Vec<KeyPointRecord>, StreamError> {
        let mut out = Vec::new();
        for ch in fragment.chars() {
            if let Some(rec) = self.step(ch)? {
                out.push(rec);
            }
            self.offset += ch.len_utf8();
        }
        Ok(out)
    }

    /// Signals end of stream; fails if the array never opened or a record
    /// was cut off mid-object.
    pub fn finalize(&mut self) -> Result<(), StreamError> {
        match self.state {
            State::Done => Ok(()),
            State::Preamble => Err(StreamError::MissingArray),
            State::Record => Err(StreamError::TruncatedStream {
                offset: self.record_start,
            }),
            State::Between => Err(StreamError::TruncatedStream { offset: self.offset }),
        }
    }

    fn step(&mut self, ch: char) -> Result<Option<KeyPointRecord>, StreamError> {
        match self.state {
            State::Preamble => {
                if ch == '[' {
                    self.state = State::Between;
                }
                Ok(None)
            }
            State::Between => match ch {
                '{' => {
                    self.state = State::Record;
                    self.record_start = self.offset;
                    self.buf.clear();
                    self.buf.push('{');
                    self.depth = 1;
                    self.in_string = false;
                    self.escaped = false;
                    Ok(None)
                }
                ']' => {
                    self.state = State::Done;
                    Ok(None)
                }
                ',' => Ok(None),
                c if c.is_whitespace() => Ok(None),
                c => Err(StreamError::UnexpectedCharacter {
                    found: c,
                    offset: self.offset,
                }),
            },
            State::Record => {
                self.buf.push(ch);
                if self.in_string {
                    if self.escaped {
                        self.escaped = false;
                    } else if ch == '\\' {
                        self.escaped = true;
                    } else if ch == '"' {
                        self.in_string = false;
                    }
                    return Ok(None);
                }
                match ch {
                    '"' => self.in_string = true,
                    '{' => self.depth += 1,
                    '}' => {
                        self.depth -= 1;
                        if self.depth == 0 {
                            self.state = State::Between;
                            return self.complete_record().map(Some);
                        }
                    }
                    _ => {}
                }
                Ok(None)
            }
            State::Done => Ok(None),
        }
    }

    fn complete_record(&mut self) -> Result<KeyPointRecord, StreamError> {
        serde_json::from_str(&self.buf).map_err(|e| StreamError::MalformedRecord {
            offset: self.record_start,
            reason: e.to_string(),
        })
    }
}

/// Result of lowering wire records into domain types.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPoints {
    pub points: Vec<KeyPoint>,
    pub relations: Vec<Relation>,
    /// Non-fatal repairs applied while lowering, e.g. duplicate ids.
    pub warnings: Vec<String>,
}

/// Validates records and lowers them to [`KeyPoint`]s plus [`Relation`]s.
///
/// Point order follows record order. A repeated id replaces the earlier
/// record in place (last write wins) and is reported as a warning. `"none"`
/// dependencies are understood but produce no relation.
pub fn to_domain(records: &[KeyPointRecord]) -> Result<DomainPoints, StreamError> {
    let mut warnings = Vec::new();
    let mut order: Vec<i64> = Vec::new();
    let mut kept: std::collections::BTreeMap<i64, &KeyPointRecord> =
        std::collections::BTreeMap::new();
    for rec in records {
        if rec.id <= 0 || rec.id > i64::from(u32::MAX) {
            return Err(StreamError::InvalidPointId {
                id: rec.id,
                reason: "point ids must be positive".into(),
            });
        }
        if kept.insert(rec.id, rec).is_some() {
            warnings.push(format!(
                "duplicate point id {}: keeping the later record",
                rec.id
            ));
        } else {
            order.push(rec.id);
        }
    }

    let mut points = Vec::with_capacity(order.len());
    let mut relations = Vec::new();
    for id in order {
        let rec = kept[&id];
        let pid = rec.id as PointId;
        points.push(KeyPoint {
            id: pid,
            title: derive_title(&rec.point),
            instruction: rec.point.clone(),
        });
        for dep in &rec.deps {
            let kind = match dep.kind.to_ascii_lowercase().as_str() {
                "none" => EdgeKind::Null,
                "contextual" => EdgeKind::Contextual,
                "dependent" => EdgeKind::Dependent,
                _ => {
                    return Err(StreamError::UnknownKindTag {
                        kind: dep.kind.clone(),
                        point: rec.id,
                    })
                }
            };
            if kind == EdgeKind::Null {
                continue;
            }
            if dep.on <= 0 || dep.on > i64::from(u32::MAX) {
                return Err(StreamError::InvalidPointId {
                    id: dep.on,
                    reason: format!("dependency of point {} targets an invalid id", rec.id),
                });
            }
            relations.push(Relation {
                from: dep.on as PointId,
                to: pid,
                kind,
            });
        }
    }
    Ok(DomainPoints {
        points,
        relations,
        warnings,
    })
}

/// First sentence-ish prefix of the point text, capped at [`TITLE_CHARS`].
fn derive_title(point: &str) -> String {
    let trimmed = point.trim();
    let mut title: String = trimmed.chars().take(TITLE_CHARS).collect();
    if let Some(cut) = title.find(['\n', '.']) {
        if cut > 0 {
            title.truncate(cut);
        }
    }
    let title = title.trim();
    if title.is_empty() {
        "untitled point".to_string()
    } else {
        title.to_string()
    }
}

/// One-shot convenience: parse a complete response and lower it.
pub fn parse_points(text: &str) -> Result<DomainPoints, StreamError> {
    let mut parser = PointStreamParser::new();
    let records = parser.feed(text)?;
    parser.finalize()?;
    to_domain(&records)
}
