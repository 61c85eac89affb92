use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::pipeline::PipelineConfig;

/// One system of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRow {
    pub system: String,
    /// Error over all test utterances of all target speakers, in percent.
    pub error_rate: f64,
    /// Bytes needed to deploy the system for one speaker.
    pub model_bytes: u64,
    /// Full-precision checkpoint bytes over `model_bytes`.
    pub ratio: f64,
    /// Parameters updated per speaker.
    pub adapted_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerRow {
    pub speaker: String,
    pub test_utterances: usize,
    /// Error in percent keyed by system name.
    pub errors: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub title: String,
    pub seed: u64,
    pub rows: Vec<SystemRow>,
    pub per_speaker: Vec<SpeakerRow>,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub count: usize,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    /// Error of the quantised model with the pretrained adapters.
    pub no_adaptation: f64,
    pub points: Vec<SweepPoint>,
    pub config: PipelineConfig,
}

pub const TABLE_COLUMNS: [&str; 4] = ["System", "Error%", "Size", "Ratio"];

impl EvalReport {
    pub fn row(&self, system: &str) -> Option<&SystemRow> {
        self.rows.iter().find(|r| r.system == system)
    }

    /// Error rate of `system`; errors if the report has no such row.
    pub fn error(&self, system: &str) -> Result<f64> {
        self.row(system)
            .map(|r| r.error_rate)
            .ok_or_else(|| invalid!("report '{}' has no row '{system}'", self.title))
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if !(0.0..=100.0).contains(&r.error_rate) {
                return Err(invalid!("error rate {} of '{}' outside [0, 100]", r.error_rate, r.system));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialise") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    /// Fixed-width text table with the columns of [`TABLE_COLUMNS`].
    pub fn render(&self) -> String {
        let cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.system.clone(),
                    format!("{:.2}", r.error_rate),
                    format_bytes(r.model_bytes),
                    format!("{:.2}", r.ratio),
                ]
            })
            .collect();
        let mut out = format!("{} (seed {})\n", self.title, self.seed);
        out.push_str(&render_table(&TABLE_COLUMNS, &cells));
        out
    }
}

impl SweepReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialise") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn render(&self) -> String {
        let cells: Vec<[String; 2]> = self
            .points
            .iter()
            .map(|p| [p.count.to_string(), format!("{:.2}", p.error_rate)])
            .collect();
        let mut out = format!("Utterance sweep (seed {})\n", self.seed);
        out.push_str(&render_table(&["Utts", "Error%"], &cells));
        out
    }
}

fn format_bytes(n: u64) -> String {
    if n >= 1 << 20 {
        format!("{:.2} MiB", n as f64 / (1 << 20) as f64)
    } else {
        format!("{:.1} KiB", n as f64 / 1024.0)
    }
}

/// First column left aligned, the rest right aligned.
fn render_table<const N: usize>(header: &[&str; N], rows: &[[String; N]]) -> String {
    let mut widths = header.map(str::len);
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                write!(out, "{c:<w$}").unwrap();
            } else {
                write!(out, "  {c:>w$}").unwrap();
            }
        }
        out.push('\n');
    };
    line(&mut out, header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
    for row in rows {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}
