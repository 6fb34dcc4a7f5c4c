//! Config resolution, run directories and file helpers shared by subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use branchseg::data::{preprocess, MANIFEST_FILE};
use branchseg::{Dataset, Sample};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const OUTPUT_ROOT_ENV: &str = "BRANCHSEG_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

/// Layers `defaults`, then the JSON object in `config_file`, then the flags
/// that were given on the command line. Keys unknown to `C` are rejected.
pub fn resolve<C>(defaults: C, config_file: Option<&Path>, flags: &impl Serialize) -> CliResult<C>
where
    C: Serialize + DeserializeOwned,
{
    let mut merged = match serde_json::to_value(defaults).map_err(|e| CliError::Usage(e.to_string()))? {
        Value::Object(m) => m,
        _ => unreachable!("configs serialize to objects"),
    };
    if let Some(path) = config_file {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let Value::Object(file) = value else {
            return Err(CliError::Usage(format!("{}: expected a JSON object", path.display())));
        };
        overlay(&mut merged, file, &format!("{}", path.display()))?;
    }
    if let Value::Object(given) = serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))? {
        overlay(&mut merged, given, "flags")?;
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("config: {e}")))
}

fn overlay(base: &mut Map<String, Value>, layer: Map<String, Value>, origin: &str) -> CliResult<()> {
    for (key, value) in layer {
        match base.get_mut(&key) {
            Some(slot) => *slot = value,
            None => return Err(CliError::Usage(format!("{origin}: unknown config key `{key}`"))),
        }
    }
    Ok(())
}

/// `--out` when given, else `$BRANCHSEG_OUTPUT_ROOT/<command>-<unix seconds>`.
pub fn output_dir(out: Option<&Path>, command: &str) -> CliResult<PathBuf> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUTPUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let stem = format!("{command}-{secs}");
            let mut dir = root.join(&stem);
            let mut n = 1;
            while dir.exists() {
                dir = root.join(format!("{stem}-{n}"));
                n += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(branchseg::Error::from)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest over the manifest and every file it lists, in manifest order.
pub fn dataset_checksum(dataset: &Dataset) -> CliResult<String> {
    let root = dataset.root();
    let mut hasher = Sha256::new();
    let mut add = |rel: &str| -> CliResult<()> {
        let path = root.join(rel);
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        hasher.update(rel.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
        Ok(())
    };
    add(MANIFEST_FILE)?;
    for e in &dataset.manifest().samples {
        let f = &e.files;
        for rel in [&f.rgb, &f.depth, &f.branch, &f.occluded, &f.occluder] {
            add(rel)?;
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Centre-crops each sample to its shorter side and resizes it to `size`².
pub fn prepare(samples: &[Sample], size: usize) -> CliResult<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            let crop = s.width().min(s.height());
            if s.width() == size && s.height() == size {
                Ok(s.clone())
            } else {
                Ok(preprocess(s, crop, size)?)
            }
        })
        .collect()
}

/// `NAME=PATH` or a bare path. Bare paths are named after the file stem, or
/// after the parent directory for the conventional `weights.bin`.
pub fn parse_weights_arg(arg: &str) -> CliResult<(String, PathBuf)> {
    if let Some((name, path)) = arg.split_once('=') {
        if name.is_empty() || path.is_empty() {
            return Err(CliError::Usage(format!(
                "bad --weights value `{arg}`; expected NAME=PATH"
            )));
        }
        return Ok((name.to_string(), PathBuf::from(path)));
    }
    let path = PathBuf::from(arg);
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let name = if stem == "weights" {
        path.parent()
            .and_then(|p| p.file_name())
            .and_then(|s| s.to_str())
            .unwrap_or(stem)
    } else {
        stem
    };
    Ok((name.to_string(), path))
}

/// Parses every `--weights` value and rejects duplicate names.
pub fn parse_weights_args(args: &[String]) -> CliResult<Vec<(String, PathBuf)>> {
    if args.is_empty() {
        return Err(CliError::Usage("at least one --weights file is required".into()));
    }
    let parsed = args
        .iter()
        .map(|a| parse_weights_arg(a))
        .collect::<CliResult<Vec<_>>>()?;
    for (i, (name, _)) in parsed.iter().enumerate() {
        if parsed[..i].iter().any(|(n, _)| n == name) {
            return Err(CliError::Usage(format!(
                "two models are named `{name}`; name them with NAME=PATH"
            )));
        }
    }
    Ok(parsed)
}

pub fn require<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::Usage(format!("{flag} is required (flag or config key)")))
}
