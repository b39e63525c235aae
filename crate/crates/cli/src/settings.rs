//! Config-file loading, flag precedence and report writing.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use near2_core::{Error, ErrorKind};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => {
                write!(f, "{e}")?;
                let mut source = std::error::Error::source(e);
                while let Some(s) = source {
                    write!(f, ": {s}")?;
                    source = s.source();
                }
                Ok(())
            }
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Values a `--config` file may supply. Keys are the flag names in
/// snake_case.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub titles: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
    pub dims: Option<Vec<usize>>,
    pub dim_weights: Option<Vec<f64>>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub margin: Option<f64>,
    pub margin_c: Option<f64>,
    pub lambda_ocl: Option<f64>,
    pub max_negatives: Option<usize>,
    pub schedule: Option<String>,
    pub schedules: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub buckets: Option<usize>,
    pub feature_dim: Option<usize>,
    pub ks: Option<Vec<usize>>,
    pub corpus_cap: Option<usize>,
    pub gain: Option<String>,
    pub query: Option<String>,
    pub dim: Option<usize>,
    pub k: Option<usize>,
    pub funnel: Option<String>,
    pub shortlist: Option<usize>,
    pub bins: Option<usize>,
    pub queries: Option<usize>,
    pub titles_per_query: Option<usize>,
    pub categories: Option<usize>,
    pub alphanum: Option<f64>,
    pub shared_substring: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Flag, then config file, then default.
pub fn pick<T: Clone>(flag: Option<T>, file: &Option<T>, default: T) -> T {
    flag.or_else(|| file.clone()).unwrap_or(default)
}

pub fn pick_opt<T: Clone>(flag: Option<T>, file: &Option<T>) -> Option<T> {
    flag.or_else(|| file.clone())
}

pub fn need<T: Clone>(flag: Option<T>, file: &Option<T>, name: &str) -> CliResult<T> {
    pick_opt(flag, file).ok_or_else(|| CliError::Usage(format!("missing required option --{name}")))
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Writes `{"config": ..., "report": ...}` as JSON, or for `.csv` paths the
/// given table preceded by a `# config:` comment line.
pub fn write_report<C: Serialize, R: Serialize>(path: &Path, config: &C, report: &R, csv: impl FnOnce() -> String) -> CliResult<()> {
    let text = if is_csv(path) {
        format!("# config: {}\n{}", serde_json::to_string(config)?, csv())
    } else {
        #[derive(Serialize)]
        struct Wrapped<'a, C, R> {
            config: &'a C,
            report: &'a R,
        }
        let mut s = serde_json::to_string_pretty(&Wrapped { config, report })?;
        s.push('\n');
        s
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}
