use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::args::{Format, OutputArgs};
use crate::error::{CliError, Result};

/// Version of the report and manifest layouts documented in the README.
pub const SCHEMA_VERSION: u32 = 1;

/// `git describe` of the build, or `unknown` outside a checkout.
pub const CODE_VERSION: &str = env!("FUSEDKV_GIT_DESCRIBE");

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    schema_version: u32,
    tool: &'static str,
    version: &'static str,
    code_version: &'static str,
    command: &'a str,
    seed: Option<u64>,
    config: &'a C,
    artifacts: &'a [String],
}

/// Files written into one output directory. Only the thread that owns this
/// value writes, which keeps file contents and ordering deterministic.
pub struct Artifacts {
    dir: PathBuf,
    format: Format,
    files: Vec<String>,
}

impl Artifacts {
    pub fn create(out: &OutputArgs) -> Result<Self> {
        Self::at(&out.out_dir, out.format)
    }

    pub fn at(dir: &Path, format: Format) -> Result<Self> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("output directory {} is not writable: {e}", dir.display())))?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            format,
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// A nested directory sharing this one's format, for per-member reports.
    pub fn child(&self, name: &str) -> Result<Artifacts> {
        Artifacts::at(&self.dir.join(name), self.format)
    }

    fn open(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(BufWriter::new(f))
    }

    /// Writes `rows` as `stem.csv` (header from the field names) or as a
    /// `stem.json` array of objects.
    pub fn table<R: Serialize>(&mut self, stem: &str, rows: &[R]) -> Result<()> {
        let name = match self.format {
            Format::Csv => format!("{stem}.csv"),
            Format::Json => format!("{stem}.json"),
        };
        let path = self.dir.join(&name);
        let w = self.open(&name)?;
        match self.format {
            Format::Csv => {
                let mut csv = csv::Writer::from_writer(w);
                for r in rows {
                    csv.serialize(r).map_err(|e| CliError::Lib(e.into()))?;
                }
                csv.flush().map_err(|e| CliError::io(&path, e))?;
            }
            Format::Json => {
                let mut w = w;
                serde_json::to_writer_pretty(&mut w, rows).map_err(|e| CliError::Lib(e.into()))?;
                writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))?;
            }
        }
        Ok(())
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = self.open(name)?;
        w.write_all(data).and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))
    }

    /// Writes `manifest.json` listing everything written so far.
    pub fn manifest(&mut self, command: &str, seed: Option<u64>, config: &impl Serialize) -> Result<()> {
        let files = self.files.clone();
        let m = Manifest {
            schema_version: SCHEMA_VERSION,
            tool: "fusedkv",
            version: env!("CARGO_PKG_VERSION"),
            code_version: CODE_VERSION,
            command,
            seed,
            config,
            artifacts: &files,
        };
        let path = self.dir.join("manifest.json");
        let mut w = self.open("manifest.json")?;
        serde_json::to_writer_pretty(&mut w, &m).map_err(|e| CliError::Lib(e.into()))?;
        writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))
    }
}
