//! Experiment specifications and their parameter grids.
//!
//! A specification is a YAML document with an `application` section, an
//! optional `data` path template, an optional `system` section and an
//! `experiment` section whose entries each describe a set of values:
//!
//! ```yaml
//! application:
//!   name: cloudmask
//! experiment:
//!   epoch: "1,30,60"      # comma separated
//!   gpu: [a100, v100]     # explicit list
//!   repeat: "1-5"         # inclusive range, optional `:step`
//!   lr: "linspace(0.1, 0.3, 3)"
//! ```
//!
//! The grid is the Cartesian product of the value sets, enumerated with the
//! first key varying slowest.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};

use crate::error::{Error, Result};
use crate::generator::experiment_id;
use crate::template::{self, RenderMode, Resolver};

pub const DEFAULT_GRID_CAP: usize = 100_000;

/// Name → value lookup used for the `os.` and `db.` namespaces.
pub type VarMap = BTreeMap<String, String>;

/// A single YAML scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl Scalar {
    pub fn from_yaml(value: &Value) -> Option<Scalar> {
        match value {
            Value::Bool(b) => Some(Scalar::Bool(*b)),
            Value::Number(n) => {
                if let Some(i) = n.as_i64() {
                    Some(Scalar::Int(i))
                } else {
                    n.as_f64().map(Scalar::Float)
                }
            }
            Value::String(s) => Some(Scalar::Str(s.clone())),
            Value::Tagged(t) => Scalar::from_yaml(&t.value),
            _ => None,
        }
    }

    pub fn to_yaml(&self) -> Value {
        match self {
            Scalar::Bool(b) => Value::Bool(*b),
            Scalar::Int(i) => Value::Number((*i).into()),
            Scalar::Float(f) => Value::Number((*f).into()),
            Scalar::Str(s) => Value::String(s.clone()),
        }
    }

    /// Infers the type of a bare token such as one item of `"1,30,60"`.
    pub fn infer(token: &str) -> Scalar {
        if let Ok(i) = token.parse::<i64>() {
            return Scalar::Int(i);
        }
        if token.bytes().any(|b| b.is_ascii_digit()) && !token.contains(|c: char| c.is_alphabetic() && c != 'e' && c != 'E') {
            if let Ok(f) = token.parse::<f64>() {
                return Scalar::Float(f);
            }
        }
        match token {
            "true" => Scalar::Bool(true),
            "false" => Scalar::Bool(false),
            _ => Scalar::Str(token.to_string()),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Int(i) => Some(*i as f64),
            Scalar::Float(f) => Some(*f),
            Scalar::Str(s) => s.trim().parse().ok(),
            Scalar::Bool(_) => None,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Int(i) => write!(f, "{i}"),
            Scalar::Float(x) => write!(f, "{}", serde_yaml::Number::from(*x)),
            Scalar::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueKind {
    Single,
    CsvMultivalue,
    ExplicitList,
    Range,
    Generator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueSet {
    pub kind: ValueKind,
    pub values: Vec<Scalar>,
    pub source: String,
}

impl ValueSet {
    pub fn parse(name: &str, value: &Value) -> Result<ValueSet> {
        let source = match value {
            Value::String(s) => s.clone(),
            other => serde_yaml::to_string(other)
                .map(|s| s.trim_end().to_string())
                .unwrap_or_default(),
        };
        let (kind, values) = match value {
            Value::Sequence(items) => {
                let values = items
                    .iter()
                    .map(|item| {
                        Scalar::from_yaml(item).ok_or_else(|| {
                            Error::validation(format!(
                                "experiment.{name}: list items must be scalars"
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (ValueKind::ExplicitList, values)
            }
            Value::String(s) => classify_text(name, s)?,
            Value::Null => {
                return Err(Error::validation(format!(
                    "experiment.{name}: empty value set"
                )))
            }
            other => match Scalar::from_yaml(other) {
                Some(s) => (ValueKind::Single, vec![s]),
                None => {
                    return Err(Error::validation(format!(
                        "experiment.{name}: expected a scalar, list or string expression"
                    )))
                }
            },
        };
        if values.is_empty() {
            return Err(Error::validation(format!(
                "experiment.{name}: empty value set"
            )));
        }
        Ok(ValueSet {
            kind,
            values,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn range_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d+)\s*-\s*(\d+)\s*(?::\s*(\d+)\s*)?$").unwrap())
}

fn generator_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*([a-z_]+)\s*\((.*)\)\s*$").unwrap())
}

/// How a plain string value would be interpreted as a value set.
pub fn text_kind(text: &str) -> ValueKind {
    if generator_re().is_match(text) {
        ValueKind::Generator
    } else if range_re().is_match(text) {
        ValueKind::Range
    } else if text.contains(',') {
        ValueKind::CsvMultivalue
    } else {
        ValueKind::Single
    }
}

fn classify_text(name: &str, text: &str) -> Result<(ValueKind, Vec<Scalar>)> {
    match text_kind(text) {
        ValueKind::Generator => {
            let caps = generator_re().captures(text).unwrap();
            let values = eval_generator(name, &caps[1], &caps[2])?;
            Ok((ValueKind::Generator, values))
        }
        ValueKind::Range => {
            let caps = range_re().captures(text).unwrap();
            let start: i64 = parse_num(name, &caps[1])?;
            let end: i64 = parse_num(name, &caps[2])?;
            let step: i64 = match caps.get(3) {
                Some(m) => parse_num(name, m.as_str())?,
                None => 1,
            };
            if step == 0 {
                return Err(Error::validation(format!(
                    "experiment.{name}: range step must be positive"
                )));
            }
            if start > end {
                return Err(Error::validation(format!(
                    "experiment.{name}: range `{text}` is empty"
                )));
            }
            let values = (start..=end)
                .step_by(step as usize)
                .map(Scalar::Int)
                .collect();
            Ok((ValueKind::Range, values))
        }
        ValueKind::CsvMultivalue => {
            let mut values = Vec::new();
            for item in text.split(',') {
                let item = item.trim();
                if item.is_empty() {
                    return Err(Error::validation(format!(
                        "experiment.{name}: empty item in `{text}`"
                    )));
                }
                values.push(Scalar::infer(item));
            }
            Ok((ValueKind::CsvMultivalue, values))
        }
        _ => {
            if text.trim().is_empty() {
                return Err(Error::validation(format!(
                    "experiment.{name}: empty value set"
                )));
            }
            Ok((ValueKind::Single, vec![Scalar::Str(text.to_string())]))
        }
    }
}

fn parse_num<T: std::str::FromStr>(name: &str, text: &str) -> Result<T> {
    text.trim().parse().map_err(|_| {
        Error::validation(format!("experiment.{name}: `{}` is not a number", text.trim()))
    })
}

const MAX_GENERATED: usize = 1_000_000;

/// Built-in generator expressions:
///
/// * `range(start, stop[, step])`: integers, `stop` exclusive
/// * `linspace(start, stop, count)`: evenly spaced floats, both ends included
/// * `geomspace(start, factor, count)`: `start * factor^i`
/// * `repeat(count)`: `1..=count`
fn eval_generator(name: &str, func: &str, args: &str) -> Result<Vec<Scalar>> {
    let args: Vec<&str> = if args.trim().is_empty() {
        Vec::new()
    } else {
        args.split(',').map(str::trim).collect()
    };
    let arity = |expected: &[usize]| -> Result<()> {
        if expected.contains(&args.len()) {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "experiment.{name}: {func}() takes {expected:?} arguments, got {}",
                args.len()
            )))
        }
    };
    let count_ok = |n: usize| -> Result<usize> {
        if n > MAX_GENERATED {
            Err(Error::validation(format!(
                "experiment.{name}: {func}() would produce {n} values"
            )))
        } else {
            Ok(n)
        }
    };
    match func {
        "range" => {
            arity(&[2, 3])?;
            let start: i64 = parse_num(name, args[0])?;
            let stop: i64 = parse_num(name, args[1])?;
            let step: i64 = if args.len() == 3 {
                parse_num(name, args[2])?
            } else {
                1
            };
            if step == 0 {
                return Err(Error::validation(format!(
                    "experiment.{name}: range() step must not be zero"
                )));
            }
            let n = if step > 0 && stop > start {
                ((stop - start + step - 1) / step) as usize
            } else if step < 0 && stop < start {
                ((start - stop - step - 1) / -step) as usize
            } else {
                0
            };
            count_ok(n)?;
            Ok((0..n as i64).map(|i| Scalar::Int(start + i * step)).collect())
        }
        "linspace" => {
            arity(&[3])?;
            let start: f64 = parse_num(name, args[0])?;
            let stop: f64 = parse_num(name, args[1])?;
            let n = count_ok(parse_num(name, args[2])?)?;
            Ok(match n {
                0 => Vec::new(),
                1 => vec![Scalar::Float(start)],
                _ => (0..n)
                    .map(|i| {
                        let t = i as f64 / (n - 1) as f64;
                        Scalar::Float(start + (stop - start) * t)
                    })
                    .collect(),
            })
        }
        "geomspace" => {
            arity(&[3])?;
            let start: f64 = parse_num(name, args[0])?;
            let factor: f64 = parse_num(name, args[1])?;
            let n = count_ok(parse_num(name, args[2])?)?;
            let integral = start.fract() == 0.0 && factor.fract() == 0.0;
            Ok((0..n)
                .map(|i| {
                    let v = start * factor.powi(i as i32);
                    if integral && v.abs() < i64::MAX as f64 {
                        Scalar::Int(v as i64)
                    } else {
                        Scalar::Float(v)
                    }
                })
                .collect())
        }
        "repeat" => {
            arity(&[1])?;
            let n: i64 = parse_num(name, args[0])?;
            count_ok(n.max(0) as usize)?;
            Ok((1..=n).map(Scalar::Int).collect())
        }
        other => Err(Error::validation(format!(
            "experiment.{name}: unknown generator `{other}`; expected range, linspace, geomspace or repeat"
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub application: IndexMap<String, Scalar>,
    pub data: Option<String>,
    pub experiment: IndexMap<String, ValueSet>,
    pub system: Option<Mapping>,
    /// The whole parsed document, used for variable resolution.
    pub raw: Value,
    /// Source text as given to [`parse_spec`].
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPoint {
    pub assignments: IndexMap<String, Scalar>,
    pub id: String,
    pub ordinal: usize,
}

impl ExperimentPoint {
    pub fn new(assignments: IndexMap<String, Scalar>, ordinal: usize) -> Self {
        let id = experiment_id(&assignments);
        ExperimentPoint {
            assignments,
            id,
            ordinal,
        }
    }
}

pub fn is_param_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

pub fn parse_spec(text: &str) -> Result<ExperimentSpec> {
    let raw: Value = serde_yaml::from_str(text).map_err(|e| {
        let err = Error::from(e);
        match err {
            Error::Parse { message, line, column } if message.contains("duplicate entry") => {
                Error::validation(format!("{message} (line {line}, column {column})"))
            }
            other => other,
        }
    })?;
    let root = match &raw {
        Value::Mapping(m) => m,
        _ => return Err(Error::validation("specification must be a YAML mapping")),
    };

    let application = match root.get("application") {
        Some(Value::Mapping(app)) => {
            let mut out = IndexMap::new();
            for (k, v) in app {
                let key = key_string(k)?;
                let scalar = Scalar::from_yaml(v).ok_or_else(|| {
                    Error::validation(format!("application.{key} must be a scalar"))
                })?;
                out.insert(key, scalar);
            }
            if !out.contains_key("name") {
                return Err(Error::validation("application.name is required"));
            }
            out
        }
        Some(_) => return Err(Error::validation("application must be a mapping")),
        None => return Err(Error::validation("missing application section")),
    };

    let data = match root.get("data") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(Error::validation("data must be a string")),
    };

    let system = match root.get("system") {
        None | Some(Value::Null) => None,
        Some(Value::Mapping(m)) => Some(m.clone()),
        Some(_) => return Err(Error::validation("system must be a mapping")),
    };

    match root.get("perm_strategy") {
        None => {}
        Some(Value::String(s)) if s == "all_perm" => {}
        Some(other) => {
            return Err(Error::validation(format!(
                "unsupported perm_strategy {other:?}; only all_perm is implemented"
            )))
        }
    }

    let mut experiment = IndexMap::new();
    match root.get("experiment") {
        None | Some(Value::Null) => {}
        Some(Value::Mapping(m)) => {
            for (k, v) in m {
                let name = key_string(k)?;
                if !is_param_name(&name) {
                    return Err(Error::validation(format!(
                        "invalid parameter name `{name}`"
                    )));
                }
                experiment.insert(name.clone(), ValueSet::parse(&name, v)?);
            }
        }
        Some(_) => return Err(Error::validation("experiment must be a mapping")),
    }

    Ok(ExperimentSpec {
        application,
        data,
        experiment,
        system,
        raw,
        source: text.to_string(),
    })
}

fn key_string(k: &Value) -> Result<String> {
    match k {
        Value::String(s) => Ok(s.clone()),
        other => Scalar::from_yaml(other)
            .map(|s| s.to_string())
            .ok_or_else(|| Error::validation("mapping keys must be scalars")),
    }
}

pub fn expand_grid(spec: &ExperimentSpec) -> Result<Vec<ExperimentPoint>> {
    expand_grid_capped(spec, DEFAULT_GRID_CAP)
}

/// Odometer-order Cartesian product: the last key varies fastest.
pub fn expand_grid_capped(spec: &ExperimentSpec, cap: usize) -> Result<Vec<ExperimentPoint>> {
    let axes: Vec<(&String, &ValueSet)> = spec.experiment.iter().collect();
    let mut count: u128 = 1;
    for (name, set) in &axes {
        if set.is_empty() {
            return Err(Error::validation(format!(
                "experiment.{name}: empty value set"
            )));
        }
        count = count.saturating_mul(set.len() as u128);
    }
    if count > cap as u128 {
        return Err(Error::GridTooLarge { count, cap });
    }

    let total = count as usize;
    let mut points = Vec::with_capacity(total);
    let mut digits = vec![0usize; axes.len()];
    for ordinal in 0..total {
        let assignments: IndexMap<String, Scalar> = axes
            .iter()
            .zip(&digits)
            .map(|((name, set), &d)| ((*name).clone(), set.values[d].clone()))
            .collect();
        points.push(ExperimentPoint::new(assignments, ordinal));
        for pos in (0..axes.len()).rev() {
            digits[pos] += 1;
            if digits[pos] < axes[pos].1.len() {
                break;
            }
            digits[pos] = 0;
        }
    }
    Ok(points)
}

const MAX_NESTING: usize = 16;

/// Resolution context for `{dot.path}` variables.
///
/// * `experiment.*` reads the point's assignments
/// * `os.*` reads the environment map
/// * `db.*` (alias `cloudmesh.*`) reads the key-value store
/// * anything else descends into the raw specification document
///
/// String values found in the document are themselves expanded, so
/// `data: "/scratch/{os.USER}"` resolves fully.
#[derive(Debug, Clone, Copy)]
pub struct VarContext<'a> {
    pub spec: &'a ExperimentSpec,
    pub point: &'a ExperimentPoint,
    pub env: &'a VarMap,
    pub db: &'a VarMap,
}

impl<'a> VarContext<'a> {
    pub fn new(
        spec: &'a ExperimentSpec,
        point: &'a ExperimentPoint,
        env: &'a VarMap,
        db: &'a VarMap,
    ) -> Self {
        VarContext {
            spec,
            point,
            env,
            db,
        }
    }

    fn resolve_at(&self, path: &str, depth: usize) -> Result<String> {
        if depth > MAX_NESTING {
            return Err(Error::RecursionLimit(path.to_string()));
        }
        let (head, rest) = match path.split_once('.') {
            Some((h, r)) => (h, Some(r)),
            None => (path, None),
        };
        match (head, rest) {
            ("experiment", None) => Err(Error::NotAScalar(path.to_string())),
            ("experiment", Some(key)) => self
                .point
                .assignments
                .get(key)
                .map(|s| s.to_string())
                .ok_or_else(|| Error::UndefinedVariable(path.to_string())),
            ("os", Some(key)) => self
                .env
                .get(key)
                .cloned()
                .ok_or_else(|| Error::UndefinedVariable(path.to_string())),
            ("db" | "cloudmesh", Some(key)) => self
                .db
                .get(key)
                .cloned()
                .ok_or_else(|| Error::UndefinedVariable(path.to_string())),
            ("os" | "db" | "cloudmesh", None) => Err(Error::NotAScalar(path.to_string())),
            _ => {
                let value = descend(&self.spec.raw, path)
                    .ok_or_else(|| Error::UndefinedVariable(path.to_string()))?;
                match value {
                    Value::String(s) => self.expand_nested(path, s, depth),
                    Value::Null => Err(Error::UndefinedVariable(path.to_string())),
                    Value::Sequence(_) | Value::Mapping(_) => {
                        Err(Error::NotAScalar(path.to_string()))
                    }
                    other => Scalar::from_yaml(other)
                        .map(|s| s.to_string())
                        .ok_or_else(|| Error::NotAScalar(path.to_string())),
                }
            }
        }
    }

    fn expand_nested(&self, path: &str, text: &str, depth: usize) -> Result<String> {
        let doc = match template::scan(text) {
            Ok(doc) if !doc.placeholders.is_empty() => doc,
            _ => return Ok(text.to_string()),
        };
        let nested = Nested { ctx: self, depth };
        template::render_with(&doc, &nested, RenderMode::Strict)
            .map(|r| r.text)
            .map_err(|e| match e {
                Error::RecursionLimit(_) => Error::RecursionLimit(path.to_string()),
                other => other,
            })
    }
}

struct Nested<'c, 'a> {
    ctx: &'c VarContext<'a>,
    depth: usize,
}

impl Resolver for Nested<'_, '_> {
    fn resolve(&self, path: &str) -> Result<String> {
        self.ctx.resolve_at(path, self.depth + 1)
    }
}

impl Resolver for VarContext<'_> {
    fn resolve(&self, path: &str) -> Result<String> {
        self.resolve_at(path, 0)
    }
}

fn descend<'v>(root: &'v Value, path: &str) -> Option<&'v Value> {
    let mut cur = root;
    for seg in path.split('.') {
        cur = match cur {
            Value::Mapping(m) => m.get(seg)?,
            Value::Sequence(items) => items.get(seg.parse::<usize>().ok()?)?,
            Value::Tagged(t) => return descend(&t.value, seg),
            _ => return None,
        };
    }
    Some(cur)
}

pub fn resolve_variable(
    path: &str,
    point: &ExperimentPoint,
    spec: &ExperimentSpec,
    env: &VarMap,
    db: &VarMap,
) -> Result<String> {
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::UndefinedVariable(path.to_string()));
    }
    VarContext::new(spec, point, env, db).resolve(path)
}

/// Snapshot of the process environment for the `os.` namespace.
pub fn capture_env() -> VarMap {
    std::env::vars().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE_SPEC: &str = r#"application:
    name: cloudmask
data: "/scratch/{os.USER}/{application.name}"
experiment:
    epoch: "1,30,60"
    gpu: "a100,v100"
    repeat: "1,2,3,4,5"
"#;

    fn s(v: &str) -> Scalar {
        Scalar::Str(v.into())
    }

    #[test]
    fn sample_spec_keeps_key_order() {
        let spec = parse_spec(SAMPLE_SPEC).unwrap();
        let keys: Vec<_> = spec.experiment.keys().cloned().collect();
        assert_eq!(keys, ["epoch", "gpu", "repeat"]);
        assert_eq!(spec.application["name"], s("cloudmask"));
        let epoch = &spec.experiment["epoch"];
        assert_eq!(epoch.kind, ValueKind::CsvMultivalue);
        assert_eq!(
            epoch.values,
            vec![Scalar::Int(1), Scalar::Int(30), Scalar::Int(60)]
        );
    }

    #[test]
    fn csv_items_are_trimmed() {
        let spec = parse_spec("application: {name: x}\nexperiment:\n  gpu: ' a100 , v100 '\n").unwrap();
        assert_eq!(spec.experiment["gpu"].values, vec![s("a100"), s("v100")]);
    }

    #[test]
    fn missing_experiment_is_one_empty_point() {
        let spec = parse_spec("application: {name: x}\n").unwrap();
        let grid = expand_grid(&spec).unwrap();
        assert_eq!(grid.len(), 1);
        assert!(grid[0].assignments.is_empty());
        assert_eq!(grid[0].id, "default");
    }

    #[test]
    fn explicit_list() {
        let spec = parse_spec("application: {name: x}\nexperiment: {epoch: [1, 2]}\n").unwrap();
        let set = &spec.experiment["epoch"];
        assert_eq!(set.kind, ValueKind::ExplicitList);
        assert_eq!(set.values, vec![Scalar::Int(1), Scalar::Int(2)]);
    }

    #[test]
    fn ranges_and_generators() {
        let spec = parse_spec(
            "application: {name: x}\nexperiment:\n  a: '1-5'\n  b: '0-10:5'\n  c: 'range(0, 6, 2)'\n  d: 'linspace(0, 1, 3)'\n  e: 'repeat(3)'\n  f: 'geomspace(1, 2, 4)'\n",
        )
        .unwrap();
        let vals = |k: &str| spec.experiment[k].values.clone();
        assert_eq!(spec.experiment["a"].kind, ValueKind::Range);
        assert_eq!(vals("a"), (1..=5).map(Scalar::Int).collect::<Vec<_>>());
        assert_eq!(vals("b"), vec![Scalar::Int(0), Scalar::Int(5), Scalar::Int(10)]);
        assert_eq!(spec.experiment["c"].kind, ValueKind::Generator);
        assert_eq!(vals("c"), vec![Scalar::Int(0), Scalar::Int(2), Scalar::Int(4)]);
        assert_eq!(
            vals("d"),
            vec![Scalar::Float(0.0), Scalar::Float(0.5), Scalar::Float(1.0)]
        );
        assert_eq!(vals("e"), vec![Scalar::Int(1), Scalar::Int(2), Scalar::Int(3)]);
        assert_eq!(
            vals("f"),
            vec![Scalar::Int(1), Scalar::Int(2), Scalar::Int(4), Scalar::Int(8)]
        );
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(matches!(
            parse_spec("application: {name: x, tags: [a]}\n"),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            parse_spec("application: {name: x}\napplication: {name: y}\n"),
            Err(Error::Validation(m)) if m.contains("duplicate")
        ));
        match parse_spec("application:\n  name: [x\n") {
            Err(Error::Parse { line, .. }) => assert!(line >= 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse_spec("- a\n- b\n").is_err());
        assert!(parse_spec("application: {name: x}\nexperiment: {'9lives': 1}\n").is_err());
        assert!(parse_spec("application: {name: x}\nexperiment: {a: ''}\n").is_err());
        assert!(parse_spec("application: {name: x}\nexperiment: {a: '1,,2'}\n").is_err());
        assert!(parse_spec("application: {name: x}\nexperiment: {a: []}\n").is_err());
        assert!(parse_spec("application: {name: x}\nexperiment: {a: 'nope(1)'}\n").is_err());
        assert!(parse_spec("application: {name: x}\nperm_strategy: random\n").is_err());
    }

    #[test]
    fn sample_grid_odometer_order() {
        let spec = parse_spec(SAMPLE_SPEC).unwrap();
        let grid = expand_grid(&spec).unwrap();
        assert_eq!(grid.len(), 30);
        let first = &grid[0].assignments;
        assert_eq!(first["epoch"], Scalar::Int(1));
        assert_eq!(first["gpu"], s("a100"));
        assert_eq!(first["repeat"], Scalar::Int(1));
        let last = &grid[29].assignments;
        assert_eq!(last["epoch"], Scalar::Int(60));
        assert_eq!(last["gpu"], s("v100"));
        assert_eq!(last["repeat"], Scalar::Int(5));
        assert_eq!(grid[1].assignments["repeat"], Scalar::Int(2));
        assert!(grid.iter().enumerate().all(|(i, p)| p.ordinal == i));
    }

    #[test]
    fn grid_cap_names_the_count() {
        let spec =
            parse_spec("application: {name: x}\nexperiment: {a: 'range(0, 1000)', b: 'range(0, 1000)'}\n")
                .unwrap();
        match expand_grid(&spec) {
            Err(Error::GridTooLarge { count, cap }) => {
                assert_eq!(count, 1_000_000);
                assert_eq!(cap, DEFAULT_GRID_CAP);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(expand_grid_capped(&spec, 1_000_000).unwrap().len(), 1_000_000);
    }

    #[test]
    fn namespaces_resolve() {
        let spec = parse_spec(SAMPLE_SPEC).unwrap();
        let grid = expand_grid(&spec).unwrap();
        let env: VarMap = [("USER".to_string(), "alice".to_string())].into();
        let db: VarMap = [("version".to_string(), "5.0".to_string())].into();
        let r = |p: &str| resolve_variable(p, &grid[0], &spec, &env, &db);
        assert_eq!(r("experiment.gpu").unwrap(), "a100");
        assert_eq!(r("application.name").unwrap(), "cloudmask");
        assert_eq!(r("os.USER").unwrap(), "alice");
        assert_eq!(r("db.version").unwrap(), "5.0");
        assert_eq!(r("cloudmesh.version").unwrap(), "5.0");
        assert_eq!(r("data").unwrap(), "/scratch/alice/cloudmask");
        assert!(matches!(r("os.MISSING"), Err(Error::UndefinedVariable(p)) if p == "os.MISSING"));
        assert!(matches!(r("application"), Err(Error::NotAScalar(_))));
        assert!(matches!(r("experiment"), Err(Error::NotAScalar(_))));
        assert!(matches!(r("experiment.nope"), Err(Error::UndefinedVariable(_))));
        assert!(matches!(r("nope.x"), Err(Error::UndefinedVariable(_))));
    }

    #[test]
    fn self_referential_values_hit_the_limit() {
        let spec = parse_spec("application: {name: x}\nloop: '{loop}'\n").unwrap();
        let grid = expand_grid(&spec).unwrap();
        let empty = VarMap::new();
        assert!(matches!(
            resolve_variable("loop", &grid[0], &spec, &empty, &empty),
            Err(Error::RecursionLimit(_))
        ));
    }

    #[test]
    fn float_display_keeps_decimal_point() {
        assert_eq!(Scalar::Float(1.0).to_string(), "1.0");
        assert_eq!(Scalar::Float(1.5).to_string(), "1.5");
        assert_eq!(Scalar::infer("1.0"), Scalar::Float(1.0));
        assert_eq!(Scalar::infer("a100"), s("a100"));
        assert_eq!(Scalar::infer("1e3"), Scalar::Float(1000.0));
        assert_eq!(Scalar::infer("inf"), s("inf"));
    }
}
