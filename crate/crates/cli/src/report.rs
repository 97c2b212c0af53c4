//! Line-oriented command reports.
//!
//! A report is a sequence of `key<TAB>value` lines followed by a `# summary`
//! line and the summary block in the same form. With `format=kv` the
//! separator is `=`, so a report can be fed back as a config file. Keys
//! ending in `_seconds` hold wall-clock timings; everything else is
//! reproducible for a fixed config and seed.

use std::fmt::{Display, Write as _};

use crate::config::ReportFormat;

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    format: ReportFormat,
    lines: Vec<(String, String)>,
    summary: Vec<(String, String)>,
    failures: Vec<String>,
}

impl Report {
    pub fn new(command: &str, format: ReportFormat) -> Self {
        Report {
            format,
            lines: vec![("command".into(), command.into())],
            summary: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn line(&mut self, key: impl Into<String>, value: impl Display) {
        self.lines.push((key.into(), value.to_string()));
    }

    pub fn summary(&mut self, key: impl Into<String>, value: impl Display) {
        self.summary.push((key.into(), value.to_string()));
    }

    /// Records a property result as `check.<name>  PASS|FAIL <detail>`.
    pub fn check(&mut self, name: &str, pass: bool, detail: impl Display) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        self.line(format!("check.{name}"), format!("{verdict} {detail}"));
        if !pass {
            self.failures.push(name.to_string());
        }
    }

    pub fn failures(&self) -> &[String] {
        &self.failures
    }

    /// First value stored under `key`, body lines before summary.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines
            .iter()
            .chain(&self.summary)
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn lines(&self) -> &[(String, String)] {
        &self.lines
    }

    pub fn render(&self) -> String {
        let sep = match self.format {
            ReportFormat::Tsv => '\t',
            ReportFormat::Kv => '=',
        };
        let mut out = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(out, "{k}{sep}{v}");
        }
        out.push_str("# summary\n");
        for (k, v) in &self.summary {
            let _ = writeln!(out, "{k}{sep}{v}");
        }
        out
    }

    /// The rendered report with every `*_seconds` line removed.
    pub fn render_untimed(&self) -> String {
        self.render()
            .lines()
            .filter(|l| {
                let key = l.split(['\t', '=']).next().unwrap_or("");
                !key.ends_with("_seconds")
            })
            .map(|l| format!("{l}\n"))
            .collect()
    }
}
