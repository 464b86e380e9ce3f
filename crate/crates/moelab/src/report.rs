//! Characterization reports as CSV and JSON.
//!
//! CSV columns: `router,param_count,latency_router_us,latency_total_us,
//! entropy_nats,mean_topk_prob,output_std,aux_loss,util_0..util_{E-1}`.
//! Floats are written in shortest round-trip form.

use moelab_core::metrics::CharacterizationRow;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FIXED_COLUMNS: [&str; 8] = [
    "router",
    "param_count",
    "latency_router_us",
    "latency_total_us",
    "entropy_nats",
    "mean_topk_prob",
    "output_std",
    "aux_loss",
];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CharacterizationReport {
    pub rows: Vec<CharacterizationRow>,
}

impl CharacterizationReport {
    pub fn num_experts(&self) -> usize {
        self.rows.first().map_or(0, |r| r.utilization.len())
    }

    pub fn csv_header(num_experts: usize) -> String {
        let mut cols: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        cols.extend((0..num_experts).map(|e| format!("util_{e}")));
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header(self.num_experts());
        out.push('\n');
        for r in &self.rows {
            let mut fields = vec![
                r.router.clone(),
                r.param_count.to_string(),
                r.latency_router_us.to_string(),
                r.latency_total_us.to_string(),
                r.entropy_nats.to_string(),
                r.mean_topk_prob.to_string(),
                r.output_std.to_string(),
                r.aux_loss.to_string(),
            ];
            fields.extend(r.utilization.iter().map(f64::to_string));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Invalid("empty report".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < FIXED_COLUMNS.len() || cols[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
            return Err(Error::Invalid(format!(
                "unexpected report header '{header}'"
            )));
        }
        let e = cols.len() - FIXED_COLUMNS.len();
        if Self::csv_header(e) != header {
            return Err(Error::Invalid(format!(
                "unexpected utilization columns in '{header}'"
            )));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(Error::Invalid(format!(
                    "row {}: {} fields, header has {}",
                    i + 1,
                    f.len(),
                    cols.len()
                )));
            }
            let num = |j: usize| -> Result<f64> {
                f[j].parse().map_err(|_| {
                    Error::Invalid(format!("row {}: bad {} '{}'", i + 1, cols[j], f[j]))
                })
            };
            rows.push(CharacterizationRow {
                router: f[0].to_string(),
                param_count: f[1].parse().map_err(|_| {
                    Error::Invalid(format!("row {}: bad param_count '{}'", i + 1, f[1]))
                })?,
                latency_router_us: num(2)?,
                latency_total_us: num(3)?,
                entropy_nats: num(4)?,
                mean_topk_prob: num(5)?,
                output_std: num(6)?,
                aux_loss: num(7)?,
                utilization: (8..f.len()).map(num).collect::<Result<_>>()?,
            });
        }
        Ok(Self { rows })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("report JSON: {e}")))
    }
}
