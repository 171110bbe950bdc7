//! `{dot.path}` placeholder substitution for batch scripts and configs.
//!
//! Grammar:
//! * `{a.b.c}` is a placeholder when every segment is an identifier
//!   (`[A-Za-z_][A-Za-z0-9_-]*`); later segments may also be list indices.
//! * `{{` and `}}` render as literal `{` and `}`.
//! * Any other `{...}` (e.g. `{0}`, `{ x }`) is kept verbatim with a warning.
//! * A placeholder never spans lines. A `{` with no closing brace before
//!   the end of its line is kept verbatim with a warning; a `{` with no
//!   closing brace before the end of input is a scan error.

use std::ops::Range;
use std::path::{Path, PathBuf};

use serde_yaml::Value;

use crate::error::{Error, Result};
use crate::model::{text_kind, ExperimentPoint, ExperimentSpec, Scalar, ValueKind, VarContext, VarMap};

pub trait Resolver {
    fn resolve(&self, path: &str) -> Result<String>;
}

impl<F> Resolver for F
where
    F: Fn(&str) -> Result<String>,
{
    fn resolve(&self, path: &str) -> Result<String> {
        self(path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placeholder {
    pub path: String,
    /// Byte span including the braces.
    pub span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanWarning {
    pub offset: usize,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(Range<usize>),
    Escape(char),
    Placeholder(usize),
}

#[derive(Debug, Clone)]
pub struct TemplateDocument {
    pub body: String,
    pub placeholders: Vec<Placeholder>,
    pub source_path: Option<PathBuf>,
    pub warnings: Vec<ScanWarning>,
    segments: Vec<Segment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub warnings: Vec<String>,
}

pub fn is_dot_path(s: &str) -> bool {
    if s.is_empty() {
        return false;
    }
    s.split('.').enumerate().all(|(i, seg)| {
        let mut chars = seg.chars();
        match chars.next() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {
                chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            }
            Some(c) if i > 0 && c.is_ascii_digit() => chars.all(|c| c.is_ascii_digit()),
            _ => false,
        }
    })
}

pub fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let line_start = before.rfind('\n').map(|i| i + 1).unwrap_or(0);
    (line, before[line_start..].chars().count() + 1)
}

pub fn scan(text: &str) -> Result<TemplateDocument> {
    let bytes = text.as_bytes();
    let mut segments = Vec::new();
    let mut placeholders = Vec::new();
    let mut warnings = Vec::new();
    let mut text_start = 0;
    let mut i = 0;

    let flush = |segments: &mut Vec<Segment>, from: usize, to: usize| {
        if to > from {
            segments.push(Segment::Text(from..to));
        }
    };
    let warn = |warnings: &mut Vec<ScanWarning>, offset: usize, message: String| {
        let (line, column) = line_col(text, offset);
        warnings.push(ScanWarning {
            offset,
            line,
            column,
            message,
        });
    };

    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                flush(&mut segments, text_start, i);
                segments.push(Segment::Escape('{'));
                i += 2;
                text_start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                flush(&mut segments, text_start, i);
                segments.push(Segment::Escape('}'));
                i += 2;
                text_start = i;
            }
            b'{' => {
                let close = bytes[i + 1..]
                    .iter()
                    .position(|&b| matches!(b, b'{' | b'}' | b'\n'))
                    .map(|p| p + i + 1);
                match close {
                    None => return Err(Error::Scan { offset: i }),
                    Some(j) if bytes[j] != b'}' => {
                        warn(&mut warnings, i, "unterminated `{` kept verbatim".into());
                        i += 1;
                    }
                    Some(j) => {
                        let interior = &text[i + 1..j];
                        if is_dot_path(interior) {
                            flush(&mut segments, text_start, i);
                            segments.push(Segment::Placeholder(placeholders.len()));
                            placeholders.push(Placeholder {
                                path: interior.to_string(),
                                span: i..j + 1,
                            });
                            text_start = j + 1;
                        } else {
                            warn(
                                &mut warnings,
                                i,
                                format!("`{{{interior}}}` is not a variable path; kept verbatim"),
                            );
                        }
                        i = j + 1;
                    }
                }
            }
            _ => i += 1,
        }
    }
    flush(&mut segments, text_start, bytes.len());

    Ok(TemplateDocument {
        body: text.to_string(),
        placeholders,
        source_path: None,
        warnings,
        segments,
    })
}

pub fn scan_file(path: &Path) -> Result<TemplateDocument> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading template {}", path.display()), e))?;
    let mut doc = scan(&text)?;
    doc.source_path = Some(path.to_path_buf());
    Ok(doc)
}

pub fn render_with(
    doc: &TemplateDocument,
    resolver: &dyn Resolver,
    mode: RenderMode,
) -> Result<Rendered> {
    let mut out = String::with_capacity(doc.body.len());
    let mut warnings = Vec::new();
    for seg in &doc.segments {
        match seg {
            Segment::Text(r) => out.push_str(&doc.body[r.clone()]),
            Segment::Escape(c) => out.push(*c),
            Segment::Placeholder(idx) => {
                let ph = &doc.placeholders[*idx];
                match resolver.resolve(&ph.path) {
                    Ok(value) => out.push_str(&value),
                    Err(err) => {
                        let (line, column) = line_col(&doc.body, ph.span.start);
                        match mode {
                            RenderMode::Strict => {
                                return Err(match err {
                                    Error::RecursionLimit(_) => err,
                                    other => Error::Render {
                                        path: ph.path.clone(),
                                        line,
                                        column,
                                        reason: other.to_string(),
                                    },
                                })
                            }
                            RenderMode::Lenient => {
                                out.push_str(&doc.body[ph.span.clone()]);
                                warnings.push(format!("line {line}, column {column}: {err}"));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Rendered {
        text: out,
        warnings,
    })
}

pub fn render(
    doc: &TemplateDocument,
    point: &ExperimentPoint,
    spec: &ExperimentSpec,
    env: &VarMap,
    db: &VarMap,
    mode: RenderMode,
) -> Result<Rendered> {
    render_with(doc, &VarContext::new(spec, point, env, db), mode)
}

/// The specification document with every experiment entry pinned to the
/// point's value. Re-parsing the output yields a one-point grid.
pub fn render_config(spec: &ExperimentSpec, point: &ExperimentPoint) -> Result<String> {
    let mut doc = spec.raw.clone();
    if !point.assignments.is_empty() {
        let experiment = doc
            .get_mut("experiment")
            .and_then(Value::as_mapping_mut)
            .ok_or_else(|| Error::validation("point does not belong to this specification"))?;
        for (name, value) in &point.assignments {
            let slot = experiment.get_mut(name.as_str()).ok_or_else(|| {
                Error::validation(format!("experiment has no parameter `{name}`"))
            })?;
            *slot = pinned_value(value);
        }
    }
    serde_yaml::to_string(&doc).map_err(|e| Error::Serialize(e.to_string()))
}

// A string that would re-parse as a multi-valued expression is wrapped in a
// one-element list.
fn pinned_value(value: &Scalar) -> Value {
    match value {
        Scalar::Str(s) if text_kind(s) != ValueKind::Single => {
            Value::Sequence(vec![Value::String(s.clone())])
        }
        other => other.to_yaml(),
    }
}
