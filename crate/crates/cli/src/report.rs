//! Metric tables rendered as CSV, aligned text and JSON.

use mclrec_core::evaluation::{metrics_table, RankingMetrics};
use serde::{Deserialize, Serialize};

use crate::experiments::RunReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub ks: Vec<usize>,
    pub rows: Vec<(String, RankingMetrics)>,
}

impl Table {
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = (String, &'a RankingMetrics)>, ks: &[usize]) -> Self {
        Self {
            ks: ks.to_vec(),
            rows: rows.into_iter().map(|(l, m)| (l, m.clone())).collect(),
        }
    }

    pub fn from_reports(reports: &[RunReport], ks: &[usize], label: impl Fn(&RunReport) -> String) -> Self {
        Self::from_rows(reports.iter().map(|r| (label(r), &r.test)), ks)
    }

    /// Appends one averaged row per distinct group key, in first-seen order.
    /// Averages weight seeds equally.
    pub fn with_means(mut self, reports: &[RunReport], ks: &[usize], key: impl Fn(&RunReport) -> String) -> Self {
        let mut order: Vec<String> = Vec::new();
        for r in reports {
            let k = key(r);
            if !order.contains(&k) {
                order.push(k);
            }
        }
        for k in order {
            let members: Vec<&RunReport> = reports.iter().filter(|r| key(r) == k).collect();
            let n = members.len() as f64;
            let mut mean = members[0].test.clone();
            for &kk in ks {
                mean.hr.insert(kk, members.iter().map(|r| r.test.hr_at(kk)).sum::<f64>() / n);
                mean.ndcg.insert(kk, members.iter().map(|r| r.test.ndcg_at(kk)).sum::<f64>() / n);
            }
            self.rows.push((format!("{k} mean"), mean));
        }
        self
    }

    pub fn to_text(&self) -> String {
        let rows: Vec<(String, &RankingMetrics)> = self.rows.iter().map(|(l, m)| (l.clone(), m)).collect();
        metrics_table(&rows, &self.ks)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,users");
        for k in &self.ks {
            out.push_str(&format!(",hr@{k}"));
        }
        for k in &self.ks {
            out.push_str(&format!(",ndcg@{k}"));
        }
        out.push('\n');
        for (label, m) in &self.rows {
            out.push_str(&csv_field(label));
            out.push_str(&format!(",{}", m.n_users));
            for k in &self.ks {
                out.push_str(&format!(",{}", m.hr_at(*k)));
            }
            for k in &self.ks {
                out.push_str(&format!(",{}", m.ndcg_at(*k)));
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub kind: String,
    pub version: String,
    pub table: Table,
}

impl SweepSummary {
    pub fn new(kind: &str, table: &Table) -> Self {
        Self {
            kind: kind.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            table: table.clone(),
        }
    }
}

/// Directory-safe form of a label such as `>8` or `6-8`.
pub fn slug(s: &str) -> String {
    s.chars()
        .map(|c| match c {
            '>' => 'g',
            '=' => 'e',
            c if c.is_ascii_alphanumeric() || c == '-' || c == '.' => c,
            _ => '_',
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mclrec_core::evaluation::compute_metrics;

    #[test]
    fn csv_has_header_and_one_line_per_row() {
        let m = compute_metrics(&[1, 3], &[5, 10]).unwrap();
        let t = Table::from_rows([("a,b".to_owned(), &m), ("c".to_owned(), &m)], &[5, 10]);
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "label,users,hr@5,hr@10,ndcg@5,ndcg@10");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("\"a,b\",2,1,1,"));
    }

    #[test]
    fn slugs() {
        assert_eq!(slug(">8"), "g8");
        assert_eq!(slug("=5"), "e5");
        assert_eq!(slug("6-8"), "6-8");
    }
}
