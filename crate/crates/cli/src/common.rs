//! Helpers shared by every subcommand: output directories, config echo,
//! atomic writes and model/network resolution.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use lcdet_core::model::{self, BackboneConfig, Model, NetworkSpec};

pub const DEFAULT_SEED: u64 = 7;
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

/// Bad invocation detected by the CLI itself (exit code 1).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

impl OutArgs {
    /// Create the directory, refusing to reuse a non-empty one without `--force`.
    pub fn prepare(&self) -> Result<&Path> {
        let dir = self.out.as_path();
        if dir.exists() {
            if !dir.is_dir() {
                return Err(usage(format!("{} exists and is not a directory", dir.display())));
            }
            let occupied = fs::read_dir(dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .next()
                .is_some();
            if occupied && !self.force {
                return Err(usage(format!(
                    "output directory {} is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
        }
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

/// Network selection: a named profile or a backbone JSON.
#[derive(Args, Debug, Clone, Serialize)]
pub struct NetArgs {
    /// Built-in profile: toy, paper or paper-256.
    #[arg(long, conflicts_with = "config")]
    pub profile: Option<String>,
    /// Backbone config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl NetArgs {
    /// Falls back to the toy profile.
    pub fn backbone(&self) -> Result<BackboneConfig> {
        match (&self.profile, &self.config) {
            (_, Some(path)) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Ok(BackboneConfig::from_json(&text).with_context(|| format!("in {}", path.display()))?)
            }
            (Some(name), None) => Ok(model::profile(name)?),
            (None, None) => Ok(model::profile("toy")?),
        }
    }

    pub fn network(&self) -> Result<NetworkSpec> {
        Ok(model::build_from_config(&self.backbone()?)?)
    }
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).with_context(|| format!("reading model {}", path.display()))?;
    Ok(model::load(&bytes).with_context(|| format!("loading model {}", path.display()))?)
}

/// Write via a temporary sibling and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Record the command, its arguments and every derived default.
pub fn write_resolved_config(dir: &Path, command: &str, resolved: serde_json::Value) -> Result<()> {
    let mut doc = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "resolved": resolved,
    });
    narrow_floats(&mut doc);
    write_json(&dir.join(RESOLVED_CONFIG), &doc)
}

/// `json!` widens f32 fields to f64 (0.4 becomes 0.4000000059604645). Print
/// any number that is exactly an f32 at f32 precision instead.
fn narrow_floats(v: &mut serde_json::Value) {
    use serde_json::Value;
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64 number");
            let f = x as f32;
            if f as f64 == x {
                if let Some(m) = f.to_string().parse::<f64>().ok().and_then(serde_json::Number::from_f64) {
                    *n = m;
                }
            }
        }
        Value::Array(a) => a.iter_mut().for_each(narrow_floats),
        Value::Object(o) => o.values_mut().for_each(narrow_floats),
        _ => {}
    }
}

/// `WxH`, e.g. `640x448`.
pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let (w, h) = (p(w)?, p(h)?);
    if w == 0 || h == 0 {
        return Err("width and height must be positive".into());
    }
    Ok((w, h))
}
