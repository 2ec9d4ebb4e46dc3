//! Run manifests: `#`-prefixed metadata followed by the resolved settings as
//! `key=value` lines. The settings part can be fed back through `--config`.

use std::fmt::Display;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;

use crate::CliResult;

pub struct Manifest {
    meta: Vec<(String, String)>,
    body: String,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl Manifest {
    pub fn start(command: &str, threads: usize) -> Self {
        let mut m = Manifest {
            meta: Vec::new(),
            body: String::new(),
        };
        m.meta("command", command);
        m.meta("tool_version", env!("CARGO_PKG_VERSION"));
        m.meta("started_unix", unix_now());
        m.meta("threads", threads);
        m
    }

    pub fn meta(&mut self, key: &str, value: impl Display) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn body(&mut self, settings: &str) {
        self.body.push_str(settings);
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# mre run manifest\n");
        for (k, v) in &self.meta {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out.push_str(&format!("# finished_unix={}\n", unix_now()));
        out.push_str(&self.body);
        out
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.render()).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Value of a `# key=value` metadata line.
pub fn meta_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .filter_map(|l| l.strip_prefix('#'))
        .filter_map(|l| l.trim().split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v.trim())
}
