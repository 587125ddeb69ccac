//! Result files. Every CSV starts with `#` lines carrying the artifact version
//! and the resolved configuration; every JSON file wraps its payload in an
//! envelope with the same two fields. Nothing time-dependent is written.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use tam_core::harness::VERSION;
use tam_core::tnsr::write_atomic;

#[derive(Serialize)]
struct Envelope<'a, C: Serialize, R: Serialize> {
    version: &'a str,
    command: &'a str,
    config: &'a C,
    result: &'a R,
}

pub struct Writer<'a, C: Serialize> {
    pub dir: &'a Path,
    pub command: &'a str,
    pub config: &'a C,
}

impl<'a, C: Serialize> Writer<'a, C> {
    pub fn new(dir: &'a Path, command: &'a str, config: &'a C) -> Self {
        Self { dir, command, config }
    }

    pub fn json<R: Serialize>(&self, name: &str, result: &R) -> Result<()> {
        let env = Envelope {
            version: VERSION,
            command: self.command,
            config: self.config,
            result,
        };
        let mut bytes = serde_json::to_vec_pretty(&env)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn csv<R: Serialize>(&self, name: &str, rows: impl IntoIterator<Item = R>) -> Result<()> {
        let mut buf = format!(
            "# tam {VERSION} {}\n# config: {}\n",
            self.command,
            serde_json::to_string(self.config)?
        )
        .into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        self.write(name, &buf)
    }

    /// The resolved configuration alone, next to the results.
    pub fn resolved_config(&self) -> Result<()> {
        #[derive(Serialize)]
        struct Resolved<'a, C: Serialize> {
            version: &'a str,
            command: &'a str,
            config: &'a C,
        }
        let mut bytes = serde_json::to_vec_pretty(&Resolved {
            version: VERSION,
            command: self.command,
            config: self.config,
        })?;
        bytes.push(b'\n');
        self.write("resolved_config.json", &bytes)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }
}
