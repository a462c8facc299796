//! Output directories, manifests and the error-to-exit-code mapping.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Property(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Property(_) => 3,
        }
    }
}

impl From<seqvi::Error> for CliError {
    fn from(e: seqvi::Error) -> Self {
        match e {
            seqvi::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Create `dir`, refusing a non-empty one unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
        }
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Usage(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Merge a `--config` JSON file under defaults: keys present in the file
/// replace defaults, nested objects merge recursively.
pub fn load_config<T>(defaults: &T, path: Option<&Path>) -> CliResult<T>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let mut base = serde_json::to_value(defaults)?;
    if let Some(p) = path {
        let text = fs::read_to_string(p)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
        let overlay: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
        merge(&mut base, overlay);
    }
    serde_json::from_value(base).map_err(|e| CliError::Usage(format!("config: {e}")))
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub code_version: String,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<String>,
}

/// Tracks the files a command writes and records them in `manifest.json`.
pub struct RunDir {
    pub dir: PathBuf,
    started: DateTime<Utc>,
    outputs: Vec<String>,
}

impl RunDir {
    pub fn open(dir: &Path, force: bool) -> CliResult<Self> {
        prepare_out_dir(dir, force)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            started: Utc::now(),
            outputs: Vec::new(),
        })
    }

    /// Path for an output file, registered in the manifest.
    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        let path = self.file(name);
        fs::write(path, contents)?;
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn finish(mut self, command: &str, config: &impl Serialize, seed: u64) -> CliResult<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started: self.started.to_rfc3339_opts(SecondsFormat::Millis, true),
            finished: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            outputs: self.outputs.clone(),
        };
        self.write_json("manifest.json", &manifest)
    }
}

/// Worker threads from `SEQVI_THREADS`, default 1.
pub fn threads_from_env() -> CliResult<usize> {
    match std::env::var("SEQVI_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("SEQVI_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(1),
    }
}
