use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Failure classes mapped onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<pairtune_core::Error> for CliError {
    fn from(e: pairtune_core::Error) -> Self {
        use pairtune_core::Error as E;
        match e {
            E::Validation { .. }
            | E::InvalidSpace(_)
            | E::InvalidArgument(_)
            | E::DuplicateId(_)
            | E::NonFinite(_)
            | E::TestOverlap(_)
            | E::Budget { .. }
            | E::Csv(_)
            | E::Json(_)
            | E::Io(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<pairtune_service::ServiceError> for CliError {
    fn from(e: pairtune_service::ServiceError) -> Self {
        match e {
            pairtune_service::ServiceError::Invalid { .. } => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn read_input(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
    bytes: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    args: &'a [String],
    artifacts: Vec<Artifact>,
}

/// Output directory that remembers every artifact it writes.
pub struct Output {
    dir: PathBuf,
    written: Vec<String>,
}

impl Output {
    pub fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        self.write(name, text)
    }

    /// Registers every file under the directory, for commands whose outputs
    /// are written by someone else.
    pub fn adopt_tree(&mut self) -> CliResult<()> {
        fn walk(root: &Path, at: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
            for e in fs::read_dir(at)? {
                let p = e?.path();
                if p.is_dir() {
                    walk(root, &p, out)?;
                } else if let Ok(rel) = p.strip_prefix(root) {
                    out.push(rel.to_string_lossy().replace('\\', "/"));
                }
            }
            Ok(())
        }
        let mut found = Vec::new();
        walk(&self.dir, &self.dir, &mut found).map_err(|e| CliError::Runtime(e.to_string()))?;
        found.retain(|p| p != MANIFEST && !p.ends_with(".tmp"));
        found.sort();
        self.written = found;
        Ok(())
    }

    /// Writes `manifest.json` listing each artifact with its SHA-256.
    pub fn finish(self, command: &str, seed: u64, args: &[String]) -> CliResult<()> {
        let mut artifacts = Vec::new();
        let mut names = self.written.clone();
        names.sort();
        for name in names {
            let bytes = fs::read(self.dir.join(&name)).map_err(|e| CliError::Runtime(format!("{name}: {e}")))?;
            artifacts.push(Artifact {
                path: name,
                sha256: hex::encode(Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
            });
        }
        let manifest = Manifest {
            tool: "pairtune",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            args,
            artifacts,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        let path = self.dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}

pub const MANIFEST: &str = "manifest.json";
