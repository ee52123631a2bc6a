//! Layered run configuration: built-in defaults, then a TOML file, then
//! environment variables, then flags. Every key of a subcommand section has a
//! kebab-case flag and a `CLINTAG_<SECTION>_<KEY>` variable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Command};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "CLINTAG";

/// Value shape of a key that has no default to infer it from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Path,
    Str,
    FloatList,
    StrList,
    /// any TOML literal, used for tables such as noise rate lists
    Literal,
}

/// Static description of one subcommand section.
pub struct SectionSpec {
    pub name: &'static str,
    pub about: &'static str,
    /// the fully defaulted section
    pub defaults: fn() -> Table,
    /// keys absent from `defaults` because they have no default
    pub optional: &'static [(&'static str, Kind)],
    /// keys holding filesystem paths, resolved against the config file
    /// directory; `group.*` covers every value of a subtable
    pub paths: &'static [&'static str],
    /// key that `--seed` overrides, if any
    pub seed_key: Option<&'static str>,
}

/// Serializes a default config into a TOML table.
pub fn table_of<T: Serialize>(value: &T) -> Table {
    match Value::try_from(value).expect("config types serialize to TOML") {
        Value::Table(t) => t,
        other => panic!("config serialized to {other:?}"),
    }
}

/// Dotted key paths of every leaf, tables flattened, arrays kept whole.
fn leaves(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => leaves(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

pub fn flag_name(key: &str) -> String {
    key.replace(['.', '_'], "-")
}

pub fn env_name(section: &str, key: &str) -> String {
    format!("{ENV_PREFIX}_{}_{}", section, key.replace('.', "_")).to_uppercase()
}

enum Shape {
    Default(Value),
    Kind(Kind),
}

/// Keys with their own flag; a top-level `seed` is set by the global `--seed`.
fn shapes(spec: &SectionSpec) -> Vec<(String, Shape)> {
    let mut out = Vec::new();
    leaves("", &(spec.defaults)(), &mut out);
    out.retain(|(k, _)| k != "seed");
    let mut shapes: Vec<(String, Shape)> = out
        .into_iter()
        .map(|(k, v)| (k, Shape::Default(v)))
        .collect();
    shapes.extend(
        spec.optional
            .iter()
            .map(|(k, kind)| (k.to_string(), Shape::Kind(*kind))),
    );
    shapes
}

/// Flags for every key of a section.
pub fn section_command(spec: &SectionSpec) -> Command {
    let mut cmd = Command::new(spec.name).about(spec.about);
    for (key, shape) in shapes(spec) {
        let help = match &shape {
            Shape::Default(v) => format!("config key `{key}` (default {v})"),
            Shape::Kind(k) => format!("config key `{key}` ({k:?})"),
        };
        cmd = cmd.arg(
            Arg::new(key.clone())
                .long(flag_name(&key))
                .env(env_name(spec.name, &key))
                .value_name("VALUE")
                .help(help),
        );
    }
    cmd
}

fn parse_literal(raw: &str) -> Option<Value> {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
}

fn parse_scalar(raw: &str, like: &Value) -> Option<Value> {
    match like {
        Value::String(_) => Some(Value::String(raw.to_string())),
        Value::Integer(_) => raw.trim().parse().ok().map(Value::Integer),
        Value::Float(_) => raw.trim().parse().ok().map(Value::Float),
        Value::Boolean(_) => raw.trim().parse().ok().map(Value::Boolean),
        _ => parse_literal(raw),
    }
}

fn parse_list(raw: &str, like: &Value) -> Option<Value> {
    if let Some(v @ Value::Array(_)) = parse_literal(raw) {
        return Some(v);
    }
    let items: Option<Vec<Value>> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_scalar(s, like))
        .collect();
    items.map(Value::Array)
}

fn parse_value(key: &str, raw: &str, shape: &Shape) -> Result<Value, CliError> {
    let parsed = match shape {
        Shape::Default(Value::Array(items)) => {
            let like = items
                .first()
                .cloned()
                .unwrap_or(Value::String(String::new()));
            parse_list(raw, &like)
        }
        Shape::Default(like) => parse_scalar(raw, like),
        Shape::Kind(Kind::Path | Kind::Str) => Some(Value::String(raw.to_string())),
        Shape::Kind(Kind::FloatList) => parse_list(raw, &Value::Float(0.0)),
        Shape::Kind(Kind::StrList) => parse_list(raw, &Value::String(String::new())),
        Shape::Kind(Kind::Literal) => parse_literal(raw),
    };
    parsed.ok_or_else(|| CliError::config(format!("cannot parse value {raw:?} for `{key}`")))
}

fn insert_path(table: &mut Table, key: &str, value: Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("nonempty key");
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("overlay path crosses a scalar");
    }
    cur.insert(last.to_string(), value);
}

/// Recursively overlays `top` onto `base`.
pub fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Flag and environment values present in `matches`, as a nested table.
pub fn overlay_from_matches(spec: &SectionSpec, matches: &ArgMatches) -> Result<Table, CliError> {
    let mut overlay = Table::new();
    for (key, shape) in shapes(spec) {
        if let Some(raw) = matches.get_one::<String>(&key) {
            insert_path(&mut overlay, &key, parse_value(&key, raw, &shape)?);
        }
    }
    Ok(overlay)
}

/// Top-level keys of a config document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Globals {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub deterministic: bool,
    pub out: Option<PathBuf>,
}

/// A parsed config file: global keys plus one table per section.
#[derive(Debug, Default)]
pub struct ConfigFile {
    pub globals: Globals,
    pub sections: BTreeMap<String, Table>,
    pub dir: PathBuf,
}

fn absolutize(base: &Path, p: &str) -> String {
    let path = Path::new(p);
    if path.is_absolute() {
        p.to_string()
    } else {
        base.join(path).to_string_lossy().into_owned()
    }
}

fn resolve_paths(table: &mut Table, keys: &[&str], base: &Path) {
    for key in keys {
        if let Some(group) = key.strip_suffix(".*") {
            if let Some(Value::Table(t)) = table.get_mut(group) {
                let inner: Vec<String> = t.keys().cloned().collect();
                let inner: Vec<&str> = inner.iter().map(String::as_str).collect();
                resolve_paths(t, &inner, base);
            }
            continue;
        }
        match table.get_mut(*key) {
            Some(Value::String(s)) => *s = absolutize(base, s),
            Some(Value::Array(items)) => {
                for item in items {
                    if let Value::String(s) = item {
                        *s = absolutize(base, s);
                    }
                }
            }
            _ => {}
        }
    }
}

impl ConfigFile {
    pub fn read(path: &Path, specs: &[&SectionSpec]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut doc: Table = text
            .parse()
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let dir = std::path::absolute(path)
            .map_err(|e| CliError::config(e.to_string()))?
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let mut sections = BTreeMap::new();
        for spec in specs {
            if let Some(v) = doc.remove(spec.name) {
                let Value::Table(mut t) = v else {
                    return Err(CliError::config(format!("`{}` must be a table", spec.name)));
                };
                resolve_paths(&mut t, spec.paths, &dir);
                sections.insert(spec.name.to_string(), t);
            }
        }
        let mut globals: Globals = Value::Table(doc)
            .try_into()
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        if let Some(out) = &globals.out {
            globals.out = Some(PathBuf::from(absolutize(&dir, &out.to_string_lossy())));
        }
        Ok(Self {
            globals,
            sections,
            dir,
        })
    }
}

/// Defaults, then the file section, then flag/env overlay, then `--seed`;
/// remaining relative paths resolve against the working directory.
pub fn resolve_section(
    spec: &SectionSpec,
    file: Option<&Table>,
    overlay: Table,
    seed: Option<u64>,
) -> Result<Table, CliError> {
    let mut table = (spec.defaults)();
    if let Some(f) = file {
        merge(&mut table, f.clone());
    }
    merge(&mut table, overlay);
    if let (Some(key), Some(seed)) = (spec.seed_key, seed) {
        let seed = i64::try_from(seed)
            .map_err(|_| CliError::config(format!("seed {seed} exceeds the TOML integer range")))?;
        insert_path(&mut table, key, Value::Integer(seed));
    }
    let cwd = std::env::current_dir().map_err(|e| CliError::config(e.to_string()))?;
    resolve_paths(&mut table, spec.paths, &cwd);
    Ok(table)
}

/// Splits `table` into the keys listed in `extra` and the rest, and
/// deserializes both parts strictly.
pub fn split_parse<E: DeserializeOwned, C: DeserializeOwned>(
    section: &str,
    mut table: Table,
    extra: &[&str],
) -> Result<(E, C), CliError> {
    let mut e = Table::new();
    for key in extra {
        if let Some(v) = table.remove(*key) {
            e.insert(key.to_string(), v);
        }
    }
    let err = |e: toml::de::Error| CliError::config(format!("[{section}] {}", e.message()));
    Ok((
        Value::Table(e).try_into().map_err(err)?,
        Value::Table(table).try_into().map_err(err)?,
    ))
}

pub fn parse<T: DeserializeOwned>(section: &str, table: Table) -> Result<T, CliError> {
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(format!("[{section}] {}", e.message())))
}
