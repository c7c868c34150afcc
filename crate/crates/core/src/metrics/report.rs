use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::serde_util;

pub const CSV_HEADER: &str = "condition,V,content_err,probe_acc,eer,d_sys,seed";

/// Utility and privacy scores of one condition at one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub condition: String,
    #[serde(with = "serde_util")]
    pub codebook_size: Option<usize>,
    pub content_error_rate: f64,
    pub speaker_probe_accuracy: f64,
    pub eer: f64,
    pub d_sys: f64,
    pub seed: u64,
    /// Verbatim configuration the numbers were produced with.
    pub config: String,
}

impl MetricsReport {
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        condition: impl Into<String>,
        codebook_size: Option<usize>,
        content_error_rate: f64,
        speaker_probe_accuracy: f64,
        eer: f64,
        d_sys: f64,
        config: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        let report = Self {
            condition: condition.into(),
            codebook_size,
            content_error_rate,
            speaker_probe_accuracy,
            eer,
            d_sys,
            seed,
            config: config.into(),
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        if self.condition.is_empty() || self.condition.contains([',', '\n', '\r']) {
            return Err(Error::InvalidArgument(format!(
                "condition label `{}` must be nonempty without commas or newlines",
                self.condition
            )));
        }
        let fields = [
            ("content_error_rate", self.content_error_rate),
            ("speaker_probe_accuracy", self.speaker_probe_accuracy),
            ("eer", self.eer),
            ("d_sys", self.d_sys),
        ];
        for (name, v) in fields {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::InvalidArgument(format!(
                "seed {} exceeds 2^63 - 1",
                self.seed
            )));
        }
        if self.codebook_size == Some(0) {
            return Err(Error::InvalidArgument("codebook size 0; use none".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        self.validate()?;
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("cannot encode report: {e}")))
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let report: Self = toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        report
            .validate()
            .map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(report)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// One CSV line (without newline). Reals use the shortest text that parses
/// back to the same value.
pub fn csv_row(r: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.condition,
        serde_util::display(r.codebook_size),
        r.content_error_rate,
        r.speaker_probe_accuracy,
        r.eer,
        r.d_sys,
        r.seed
    )
}

/// A parsed CSV row. `config` is not part of the table and comes back empty.
pub fn parse_csv(text: &str, origin: &Path) -> Result<Vec<MetricsReport>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => return Err(Error::format(origin, format!("expected header `{CSV_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format(origin, format!("line {}: bad {what}", n + 1));
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 7 {
            return Err(bad("column count"));
        }
        let real = |i: usize, what: &str| cells[i].parse::<f64>().map_err(|_| bad(what));
        let codebook_size = match cells[1] {
            "none" => None,
            v => Some(v.parse().map_err(|_| bad("V"))?),
        };
        let report = MetricsReport {
            condition: cells[0].to_string(),
            codebook_size,
            content_error_rate: real(2, "content_err")?,
            speaker_probe_accuracy: real(3, "probe_acc")?,
            eer: real(4, "eer")?,
            d_sys: real(5, "d_sys")?,
            seed: cells[6].parse().map_err(|_| bad("seed"))?,
            config: String::new(),
        };
        report
            .validate()
            .map_err(|e| Error::format(origin, format!("line {}: {e}", n + 1)))?;
        out.push(report);
    }
    Ok(out)
}
