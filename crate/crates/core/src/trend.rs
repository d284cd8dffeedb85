//! Seed-aggregated error tables.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{fmt_f64, write_lines};

#[derive(Debug, Clone, PartialEq)]
pub struct TrendRow {
    pub sweep_value: usize,
    pub method: String,
    pub mean_rel_l2: f64,
    pub std_rel_l2: f64,
    pub n_seeds: usize,
}

/// Rows ordered by sweep value, then by first appearance of the method.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrendTable {
    pub rows: Vec<TrendRow>,
}

impl TrendTable {
    /// Aggregates `(sweep_value, method, error)` samples into mean and sample standard deviation.
    pub fn from_samples(samples: &[(usize, String, f64)]) -> Result<TrendTable> {
        let mut methods: Vec<&str> = Vec::new();
        let mut values: Vec<usize> = Vec::new();
        for (v, m, e) in samples {
            if !(e.is_finite() && *e >= 0.0) {
                return Err(Error::invalid(format!("error sample {e} for {m} at {v}")));
            }
            if !methods.contains(&m.as_str()) {
                methods.push(m);
            }
            if !values.contains(v) {
                values.push(*v);
            }
        }
        values.sort_unstable();
        let mut rows = Vec::new();
        for &v in &values {
            for &m in &methods {
                let errs: Vec<f64> = samples.iter().filter(|s| s.0 == v && s.1 == m).map(|s| s.2).collect();
                if errs.is_empty() {
                    continue;
                }
                let n = errs.len() as f64;
                let mean = errs.iter().sum::<f64>() / n;
                let std = if errs.len() > 1 {
                    (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                rows.push(TrendRow {
                    sweep_value: v,
                    method: m.to_string(),
                    mean_rel_l2: mean,
                    std_rel_l2: std,
                    n_seeds: errs.len(),
                });
            }
        }
        Ok(TrendTable { rows })
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    pub fn method_rows(&self, method: &str) -> Vec<&TrendRow> {
        self.rows.iter().filter(|r| r.method == method).collect()
    }

    pub fn get(&self, method: &str, sweep_value: usize) -> Option<&TrendRow> {
        self.rows.iter().find(|r| r.method == method && r.sweep_value == sweep_value)
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("sweep_value,mean_rel_l2,std_rel_l2,n_seeds,method\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{}",
                r.sweep_value,
                fmt_f64(r.mean_rel_l2),
                fmt_f64(r.std_rel_l2),
                r.n_seeds,
                r.method
            )
            .unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_lines(path, &self.to_csv_string())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<TrendTable> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "sweep_value,mean_rel_l2,std_rel_l2,n_seeds,method" => {}
            _ => return Err(Error::Parse("trend table header missing".into())),
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(Error::Parse(format!("bad trend row `{line}`")));
            }
            let bad = |e: &dyn std::fmt::Display| Error::Parse(format!("`{line}`: {e}"));
            rows.push(TrendRow {
                sweep_value: f[0].parse().map_err(|e| bad(&e))?,
                mean_rel_l2: f[1].parse().map_err(|e| bad(&e))?,
                std_rel_l2: f[2].parse().map_err(|e| bad(&e))?,
                n_seeds: f[3].parse().map_err(|e| bad(&e))?,
                method: f[4].to_string(),
            });
        }
        Ok(TrendTable { rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregation() {
        let s = vec![
            (3, "DON".to_string(), 0.2),
            (1, "DON".to_string(), 0.5),
            (1, "DON".to_string(), 0.3),
            (3, "DON".to_string(), 0.4),
            (1, "B-DON".to_string(), 0.1),
        ];
        let t = TrendTable::from_samples(&s).unwrap();
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.rows[0].sweep_value, 1);
        assert_eq!(t.rows[0].method, "DON");
        assert!((t.rows[0].mean_rel_l2 - 0.4).abs() < 1e-15);
        assert!((t.rows[0].std_rel_l2 - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(t.rows[1].method, "B-DON");
        assert_eq!(t.rows[1].std_rel_l2, 0.0);
        assert_eq!(t.rows[2].sweep_value, 3);
        assert!(t.rows.iter().all(|r| r.mean_rel_l2 >= 0.0 && r.std_rel_l2 >= 0.0 && r.n_seeds >= 1));
        assert!(TrendTable::from_samples(&[(1, "DON".into(), f64::NAN)]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = TrendTable::from_samples(&[(9, "DON".into(), 0.013), (49, "DON".into(), 0.004), (9, "DON".into(), 0.02)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trend.csv");
        t.write_csv(&p).unwrap();
        assert_eq!(TrendTable::read_csv(&p).unwrap(), t);
    }
}
