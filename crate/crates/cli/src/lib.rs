//! Command-line entry point: `synth`, `ingest`, `init`, `train`, `select`,
//! `eval` and `serve`, each writing a run directory with a manifest.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser};
use clintag_core::model_file::sha256_hex;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::commands::{dispatch, RunContext, SECTIONS};
use crate::config::{
    overlay_from_matches, resolve_section, section_command, ConfigFile, ENV_PREFIX,
};
pub use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "clintag",
    version,
    about = "Noisy-or tag models learned from noisy anchors"
)]
pub struct GlobalArgs {
    /// TOML config file with top-level keys and one table per subcommand
    #[arg(long, global = true, env = "CLINTAG_CONFIG")]
    pub config: Option<PathBuf>,
    /// overrides the subcommand's seed
    #[arg(long, global = true, env = "CLINTAG_SEED")]
    pub seed: Option<u64>,
    /// run directory
    #[arg(long, global = true, env = "CLINTAG_OUT")]
    pub out: Option<PathBuf>,
    /// worker threads; 0 uses every core
    #[arg(long, global = true, env = "CLINTAG_THREADS")]
    pub threads: Option<usize>,
    /// single worker thread and no background reloading
    #[arg(long, global = true, env = "CLINTAG_DETERMINISTIC")]
    pub deterministic: bool,
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a subcommand: the resolved section, seeds,
/// thread count and the hashes of every input and output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub tool: String,
    pub subcommand: String,
    pub seed: Option<u64>,
    pub threads: usize,
    pub deterministic: bool,
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

fn command() -> clap::Command {
    let mut cmd = GlobalArgs::command()
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help(format!(
            "Every config key has a kebab-case flag and a {ENV_PREFIX}_<SUBCOMMAND>_<KEY> variable.\n\
             Exit status: 2 configuration error, 3 data error, 4 numeric error."
        ));
    for spec in SECTIONS {
        cmd = cmd.subcommand(section_command(spec));
    }
    cmd
}

fn hash_file(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Files named by the resolved section's path keys, directories expanded.
fn input_files(paths: &[&str], table: &Table) -> Vec<PathBuf> {
    let mut values = Vec::new();
    for key in paths {
        let v = match key.strip_suffix(".*") {
            Some(group) => table
                .get(group)
                .and_then(Value::as_table)
                .map(|t| t.values().cloned().collect()),
            None => table.get(*key).map(|v| vec![v.clone()]),
        };
        for v in v.unwrap_or_default() {
            match v {
                Value::String(s) => values.push(PathBuf::from(s)),
                Value::Array(items) => {
                    values.extend(items.iter().filter_map(|i| i.as_str().map(PathBuf::from)))
                }
                _ => {}
            }
        }
    }
    let mut files = Vec::new();
    for p in values {
        if p.is_dir() {
            if let Ok(entries) = std::fs::read_dir(&p) {
                let mut inner: Vec<PathBuf> = entries
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|f| f.is_file())
                    .collect();
                inner.sort();
                files.extend(inner);
            }
        } else {
            files.push(p);
        }
    }
    files
}

fn check_inputs_exist(files: &[PathBuf]) -> Result<(), CliError> {
    for f in files {
        if !f.exists() {
            return Err(CliError::data(format!(
                "input {} does not exist",
                f.display()
            )));
        }
    }
    Ok(())
}

fn run_matches(matches: &ArgMatches) -> Result<PathBuf, CliError> {
    let globals =
        GlobalArgs::from_arg_matches(matches).map_err(|e| CliError::config(e.to_string()))?;
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let spec = SECTIONS
        .iter()
        .find(|s| s.name == name)
        .expect("subcommands come from SECTIONS");
    let file = match &globals.config {
        Some(p) => ConfigFile::read(p, &SECTIONS)?,
        None => ConfigFile::default(),
    };
    let seed = globals.seed.or(file.globals.seed);
    let deterministic = globals.deterministic || file.globals.deterministic;
    let threads = globals
        .threads
        .or(file.globals.threads)
        .unwrap_or(if deterministic { 1 } else { 0 });
    let out = globals
        .out
        .clone()
        .or(file.globals.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(name));
    let out = std::path::absolute(&out).map_err(|e| CliError::config(e.to_string()))?;
    let overlay = overlay_from_matches(spec, sub)?;
    let table = resolve_section(spec, file.sections.get(name), overlay, seed)?;
    let inputs = input_files(spec.paths, &table);
    check_inputs_exist(&inputs)?;
    let input_hashes = inputs
        .iter()
        .map(|p| {
            Ok(FileHash {
                path: p.to_string_lossy().into_owned(),
                sha256: hash_file(p)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    std::fs::create_dir_all(&out)?;
    let mut doc = Table::new();
    if threads > 0 {
        doc.insert("threads".into(), Value::Integer(threads as i64));
    }
    doc.insert("deterministic".into(), Value::Boolean(deterministic));
    doc.insert(name.to_string(), Value::Table(table.clone()));
    let config_text = toml::to_string(&doc).map_err(|e| CliError::config(e.to_string()))?;
    std::fs::write(out.join("config.toml"), config_text)?;
    let mut manifest = Manifest {
        version: MANIFEST_VERSION,
        tool: format!("clintag {}", env!("CARGO_PKG_VERSION")),
        subcommand: name.to_string(),
        seed,
        threads,
        deterministic,
        config: serde_json::to_value(&table).map_err(|e| CliError::config(e.to_string()))?,
        inputs: input_hashes,
        outputs: Vec::new(),
    };
    let write_manifest = |m: &Manifest| -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(m)?;
        text.push('\n');
        std::fs::write(out.join("manifest.json"), text)?;
        Ok(())
    };
    write_manifest(&manifest)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    let ctx = RunContext {
        out: out.clone(),
        deterministic,
    };
    let produced = pool.install(|| dispatch(name, table, &ctx))?;
    manifest.outputs = produced
        .iter()
        .map(|rel| {
            Ok(FileHash {
                path: rel.to_string_lossy().into_owned(),
                sha256: hash_file(&out.join(rel))?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    write_manifest(&manifest)?;
    Ok(out)
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_matches(&matches) {
        Ok(out) => {
            log::info!("wrote {}", out.display());
            0
        }
        Err(e) => {
            eprintln!("clintag: {e}");
            e.exit_code()
        }
    }
}

/// Reads a run directory's manifest.
pub fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    #[test]
    fn command_definition_is_consistent() {
        super::command().debug_assert();
    }
}
