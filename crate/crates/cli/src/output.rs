//! Exit codes, overwrite protection and run manifests.

use std::path::{Path, PathBuf};

use serde::Serialize;

/// A problem with how the command was invoked.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// How a command that produced its outputs finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Diverged,
    Exhausted,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::Diverged => 3,
            Outcome::Exhausted => 4,
        }
    }
}

pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    use continuity::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidArgument(_) | E::NoRoot { .. } => 1,
                E::Divergence { .. } => 3,
                E::DimensionMismatch { .. }
                | E::Alignment { .. }
                | E::IndeterminateOrder(_)
                | E::DegenerateTrajectory(_)
                | E::Numerical(_)
                | E::Data(_)
                | E::Io(_)
                | E::Json(_)
                | E::Csv(_) => 2,
            };
        }
    }
    2
}

/// Fails unless every input file exists.
pub fn require_inputs(paths: &[PathBuf]) -> anyhow::Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(usage(format!("input file {} does not exist", p.display())));
        }
    }
    Ok(())
}

/// The files a command is about to write, checked up front so that a refused
/// overwrite leaves nothing half-written.
#[derive(Debug, Default)]
pub struct Outputs {
    paths: Vec<PathBuf>,
}

impl Outputs {
    pub fn add(&mut self, path: PathBuf) -> PathBuf {
        self.paths.push(path.clone());
        path
    }

    pub fn check(&self, force: bool) -> anyhow::Result<()> {
        if !force {
            if let Some(p) = self.paths.iter().find(|p| p.exists()) {
                return Err(usage(format!(
                    "{} exists; pass --force to overwrite",
                    p.display()
                )));
            }
        }
        for p in &self.paths {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
        }
        Ok(())
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }
}

/// What produced a set of outputs; contains nothing time-dependent so that
/// reruns produce identical bytes.
#[derive(Debug, Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub command: &'a str,
    pub args: &'a [String],
    pub version: &'a str,
    pub library_version: &'a str,
    pub config_file: Option<&'a Path>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub rng: &'a str,
    pub config: &'a C,
}

pub fn display_paths(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

/// `dir/manifest.json` for directory outputs, `name.manifest.json` beside a
/// single file.
pub fn manifest_path_for_dir(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn manifest_path_for_file(file: &Path) -> PathBuf {
    let stem = file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    file.with_file_name(format!("{stem}.manifest.json"))
}
