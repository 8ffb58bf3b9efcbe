use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Lossless scientific notation (13 significant digits).
pub fn sci(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.12e}")
    } else {
        x.to_string()
    }
}

pub fn opt_sci(x: Option<f64>) -> String {
    x.map(sci).unwrap_or_default()
}

/// Quotes a CSV field when it contains a delimiter or quote.
pub fn field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Effective run configuration after command-line overrides.
    pub config: String,
    #[serde(default)]
    pub budget_inputs: Option<String>,
    pub config_sha256: String,
    #[serde(default)]
    pub species_dir: Option<PathBuf>,
    pub allow_partial: bool,
    /// Output file name -> sha256 of its bytes.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }
}

/// Output directory of one run; records what it writes.
pub struct Output {
    dir: PathBuf,
    pub hash: String,
    files: BTreeMap<String, String>,
}

impl Output {
    pub fn create(dir: &Path, hash: String) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Output { dir: dir.to_path_buf(), hash, files: BTreeMap::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// CSV with a leading `#` provenance line, then the header row.
    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut s = format!("# ionprep {VERSION} config_sha256={}\n", self.hash);
        s.push_str(&header.join(","));
        s.push('\n');
        for r in rows {
            debug_assert_eq!(r.len(), header.len());
            let _ = writeln!(s, "{}", r.join(","));
        }
        self.write(name, s.as_bytes())
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let s = format!("# ionprep {VERSION} config_sha256={}\n{body}", self.hash);
        self.write(name, s.as_bytes())
    }

    /// JSON summary wrapping `results` with the version, hash and config echo.
    pub fn summary<T: Serialize>(
        &mut self,
        name: &str,
        command: &str,
        config: &ionprep::config::RunConfig,
        results: &T,
    ) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Summary<'a, T> {
            tool: &'static str,
            version: &'static str,
            command: &'a str,
            config_sha256: &'a str,
            config: &'a ionprep::config::RunConfig,
            results: &'a T,
        }
        let s = Summary { tool: "ionprep", version: VERSION, command, config_sha256: &self.hash, config, results };
        let mut text = serde_json::to_string_pretty(&s).expect("summary serialises");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn finish(self, mut manifest: Manifest) -> Result<Manifest, CliError> {
        manifest.files = self.files;
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        text.push('\n');
        let path = self.dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?;
        Ok(manifest)
    }
}
