//! Per-iteration training records and their CSV form.

use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "iter,train_loss,src_test_loss,tgt_test_loss,tgt_acc,gate_count,l_gat,l_rec,lr";

/// One logged row. Training quantities are means over the iterations since
/// the previous row; test quantities are evaluated at `iter`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub train_loss: f64,
    pub src_test_loss: f64,
    pub tgt_test_loss: f64,
    pub tgt_acc: f64,
    pub gate_count: f64,
    pub l_gat: f64,
    pub l_rec: f64,
    pub lr: f64,
}

impl MetricsRow {
    /// Target test loss minus training loss.
    pub fn generalization_gap(&self) -> f64 {
        self.tgt_test_loss - self.train_loss
    }
}

/// Append-only run log.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    rows: Vec<MetricsRow>,
}

impl RunMetrics {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    /// Rows whose iteration lies in the last quarter of `total_iters`.
    pub fn final_quarter(&self, total_iters: usize) -> &[MetricsRow] {
        let start = total_iters - total_iters / 4;
        let first = self.rows.partition_point(|r| r.iter < start);
        &self.rows[first..]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.iter,
                r.train_loss,
                r.src_test_loss,
                r.tgt_test_loss,
                r.tgt_acc,
                r.gate_count,
                r.l_gat,
                r.l_rec,
                r.lr
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == CSV_HEADER => {}
            _ => return Err(Error::Format("metrics CSV header missing or wrong".into())),
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim_end().split(',').collect();
            if fields.len() != 9 {
                return Err(Error::Format(format!(
                    "metrics line {}: expected 9 fields, got {}",
                    n + 2,
                    fields.len()
                )));
            }
            let f = |i: usize| -> Result<f64> {
                fields[i].parse::<f64>().map_err(|_| {
                    Error::Format(format!(
                        "metrics line {}: bad number {:?}",
                        n + 2,
                        fields[i]
                    ))
                })
            };
            let iter = fields[0]
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("metrics line {}: bad iter", n + 2)))?;
            rows.push(MetricsRow {
                iter,
                train_loss: f(1)?,
                src_test_loss: f(2)?,
                tgt_test_loss: f(3)?,
                tgt_acc: f(4)?,
                gate_count: f(5)?,
                l_gat: f(6)?,
                l_rec: f(7)?,
                lr: f(8)?,
            });
        }
        Ok(Self { rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(iter: usize) -> MetricsRow {
        MetricsRow {
            iter,
            train_loss: 0.1 * iter as f64,
            src_test_loss: 1.0 / 3.0,
            tgt_test_loss: 2.5,
            tgt_acc: 0.75,
            gate_count: 1.5,
            l_gat: 0.0,
            l_rec: 1e-3,
            lr: 0.01,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut m = RunMetrics::default();
        m.push(row(10));
        m.push(row(20));
        let text = m.to_csv();
        assert!(text.starts_with(CSV_HEADER));
        assert_eq!(RunMetrics::from_csv(&text).unwrap(), m);
    }

    #[test]
    fn rejects_bad_csv() {
        assert!(RunMetrics::from_csv("").is_err());
        assert!(RunMetrics::from_csv("a,b\n").is_err());
        let bad = format!("{CSV_HEADER}\n1,2,3\n");
        assert!(RunMetrics::from_csv(&bad).is_err());
        let bad = format!("{CSV_HEADER}\n1,x,3,4,5,6,7,8,9\n");
        assert!(RunMetrics::from_csv(&bad).is_err());
    }

    #[test]
    fn final_quarter_selection() {
        let mut m = RunMetrics::default();
        for i in (50..=200).step_by(50) {
            m.push(row(i));
        }
        let q: Vec<_> = m.final_quarter(200).iter().map(|r| r.iter).collect();
        assert_eq!(q, vec![150, 200]);
    }
}
