//! Output files carrying the config hash on their first line, written
//! atomically through a temporary file in the target directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::{ErrorKind, PipelineError, Stage};

const PREFIX: &str = "# config_hash=";

pub fn header_line(hash: &str) -> String {
    format!("{PREFIX}{hash}\n")
}

/// Writes `header_line(hash)` followed by `body` to `path` via temp file and rename.
pub fn write_atomic(stage: Stage, path: &Path, hash: &str, body: &[u8]) -> Result<(), PipelineError> {
    let io = |e: std::io::Error| {
        PipelineError::new(stage, ErrorKind::Io, format!("writing {}: {e}", path.display()))
    };
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(header_line(hash).as_bytes()).map_err(io)?;
    tmp.write_all(body).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

/// Returns the body of an artifact after checking its hash line.
pub fn read_checked(stage: Stage, path: &Path, hash: &str) -> Result<Vec<u8>, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| {
        PipelineError::new(
            stage,
            ErrorKind::Config,
            format!("missing artifact {} ({e}); run the earlier stages first", path.display()),
        )
    })?;
    let nl = bytes.iter().position(|b| *b == b'\n').unwrap_or(bytes.len());
    let first = std::str::from_utf8(&bytes[..nl]).unwrap_or("");
    match first.strip_prefix(PREFIX) {
        Some(found) if found == hash => Ok(bytes[(nl + 1).min(bytes.len())..].to_vec()),
        Some(found) => Err(PipelineError::new(
            stage,
            ErrorKind::Config,
            format!(
                "{} was produced under config hash {found}, current is {hash}; refusing to mix artifacts",
                path.display()
            ),
        )),
        None => Err(PipelineError::new(
            stage,
            ErrorKind::Config,
            format!("{} has no config hash header", path.display()),
        )),
    }
}

/// Output locations under the run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn series(&self, commodity: &str) -> PathBuf {
        self.root.join("ingest").join(format!("{commodity}.csv"))
    }

    pub fn anomalies(&self, commodity: &str) -> PathBuf {
        self.root.join("ingest").join(format!("{commodity}_anomalies.csv"))
    }

    pub fn correlation(&self) -> PathBuf {
        self.root.join("ingest").join("correlation.csv")
    }

    pub fn diagnostics_row(&self, commodity: &str) -> PathBuf {
        self.root.join("diagnostics").join(format!("{commodity}.csv"))
    }

    pub fn checkpoint(&self, commodity: &str, model: &str) -> PathBuf {
        self.root.join("models").join(commodity).join(format!("{model}.ckpt"))
    }

    pub fn history(&self, commodity: &str, model: &str) -> PathBuf {
        self.root.join("models").join(commodity).join(format!("{model}_history.csv"))
    }

    pub fn forecasts(&self, commodity: &str, model: &str) -> PathBuf {
        self.root.join("forecasts").join(commodity).join(format!("{model}.csv"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("diagnostics.csv")
    }

    pub fn dm(&self) -> PathBuf {
        self.root.join("dm.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.txt")
    }

    pub fn provenance(&self) -> PathBuf {
        self.root.join("provenance.txt")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.csv");
        write_atomic(Stage::Report, &p, "abc", b"x,y\n1,2\n").unwrap();
        assert_eq!(read_checked(Stage::Report, &p, "abc").unwrap(), b"x,y\n1,2\n");
        let e = read_checked(Stage::Report, &p, "def").unwrap_err();
        assert_eq!(e.kind, ErrorKind::Config);
        assert!(e.message.contains("abc"));
        std::fs::write(&p, "x,y\n").unwrap();
        assert!(read_checked(Stage::Report, &p, "abc").is_err());
        assert!(read_checked(Stage::Report, &dir.path().join("none"), "abc").is_err());
        let leftovers = std::fs::read_dir(dir.path().join("a")).unwrap().count();
        assert_eq!(leftovers, 1);
    }
}
