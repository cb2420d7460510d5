use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// mIoU of one method on one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain: String,
    pub method: String,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

/// Mean fusion weight per style over one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub domain: String,
    pub weights: Vec<f64>,
}

/// Everything measured for one seed. Contains no wall-clock values, so two
/// runs of the same configuration and seed serialize identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub oracle_fingerprint: String,
    pub encoder_fingerprint: String,
    pub dataset_digests: BTreeMap<String, String>,
    pub base_val_miou: f64,
    pub styles: Vec<String>,
    pub classes: Vec<String>,
    pub rows: Vec<DomainScore>,
    pub attention: Vec<AttentionRow>,
    pub spg_final_loss: Vec<f64>,
    pub apf_final_loss: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn score(&self, domain: &str, method: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.domain == domain && r.method == method).map(|r| r.miou)
    }
}

/// Mean of the trailing tenth of a loss curve (at least one value).
pub fn smoothed_tail(losses: &[f32]) -> f64 {
    if losses.is_empty() {
        return f64::NAN;
    }
    let k = (losses.len() / 10).max(1);
    losses[losses.len() - k..].iter().map(|&v| v as f64).sum::<f64>() / k as f64
}

/// Mean of the leading tenth of a loss curve.
pub fn smoothed_head(losses: &[f32]) -> f64 {
    if losses.is_empty() {
        return f64::NAN;
    }
    let k = (losses.len() / 10).max(1);
    losses[..k].iter().map(|&v| v as f64).sum::<f64>() / k as f64
}

/// Rows of per-domain scores with seed means, as markdown and CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub title: String,
    pub row_header: String,
    pub columns: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
    /// Fingerprints of the frozen oracle, encoder and datasets every row
    /// was computed against.
    pub oracle_fingerprint: String,
    pub encoder_fingerprint: String,
    pub data_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    /// `per_seed[s][c]`: score of seed `s` on column `c`.
    pub per_seed: Vec<Vec<f64>>,
}

impl ComparisonRow {
    /// Column means over seeds.
    pub fn means(&self) -> Vec<f64> {
        let n = self.per_seed.len().max(1) as f64;
        let cols = self.per_seed.first().map_or(0, Vec::len);
        (0..cols).map(|c| self.per_seed.iter().map(|s| s[c]).sum::<f64>() / n).collect()
    }

    /// Mean over seeds of the last column.
    pub fn average(&self) -> f64 {
        self.means().last().copied().unwrap_or(f64::NAN)
    }
}

impl ComparisonTable {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("## {}\n\n", self.title);
        let _ = writeln!(s, "| {} | {} |", self.row_header, self.columns.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(self.columns.len() + 1));
        for r in &self.rows {
            let cells: Vec<String> = r.means().iter().map(|v| format!("{:.2}", 100.0 * v)).collect();
            let _ = writeln!(s, "| {} | {} |", r.label, cells.join(" | "));
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            s,
            "\nmIoU (%) averaged over seeds {}; oracle {}, encoder {}, data {}.",
            seeds.join(", "),
            self.oracle_fingerprint,
            self.encoder_fingerprint,
            &self.data_digest[..16.min(self.data_digest.len())]
        );
        s
    }

    /// One line per (row, seed) plus a `mean` line per row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},seed,{}\n", self.row_header.to_lowercase(), self.columns.join(","));
        for r in &self.rows {
            let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
            for (seed, vals) in self.seeds.iter().zip(&r.per_seed) {
                let _ = writeln!(s, "{},{seed},{}", r.label, fmt(vals));
            }
            let _ = writeln!(s, "{},mean,{}", r.label, fmt(&r.means()));
        }
        s
    }
}

/// Mean fusion weight per (domain, style), averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub styles: Vec<String>,
    pub seeds: Vec<u64>,
    /// `per_seed[s]`: one row per domain.
    pub per_seed: Vec<Vec<AttentionRow>>,
}

impl AttentionReport {
    pub fn domains(&self) -> Vec<String> {
        self.per_seed.first().map(|rows| rows.iter().map(|r| r.domain.clone()).collect()).unwrap_or_default()
    }

    /// Domains × styles matrix of seed-mean weights.
    pub fn mean_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.per_seed.len().max(1) as f64;
        let domains = self.domains().len();
        (0..domains)
            .map(|d| {
                (0..self.styles.len())
                    .map(|i| self.per_seed.iter().map(|rows| rows[d].weights[i]).sum::<f64>() / n)
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("domain,seed,{}\n", self.styles.join(","));
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
        for (seed, rows) in self.seeds.iter().zip(&self.per_seed) {
            for r in rows {
                let _ = writeln!(s, "{},{seed},{}", r.domain, fmt(&r.weights));
            }
        }
        for (d, row) in self.domains().iter().zip(self.mean_matrix()) {
            let _ = writeln!(s, "{d},mean,{}", fmt(&row));
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("## Mean fusion weight per style\n\n");
        let _ = writeln!(s, "| domain | {} |", self.styles.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(self.styles.len() + 1));
        for (d, row) in self.domains().iter().zip(self.mean_matrix()) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(s, "| {d} | {} |", cells.join(" | "));
        }
        s
    }
}
