//! Per-epoch metrics rows and their CSV form.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,lr,lambda_eff,train_loss,train_acc_vs_noisy,train_acc_vs_clean,test_acc,label_precision,lid_mean,csr,rv_hat_mean";

const N_COLUMNS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub lambda_eff: f64,
    pub train_loss: f64,
    pub train_acc_vs_noisy: f64,
    pub train_acc_vs_clean: f64,
    pub test_acc: f64,
    pub label_precision: f64,
    pub lid_mean: f64,
    pub csr: f64,
    pub rv_hat_mean: f64,
}

impl MetricsRow {
    /// Row appended when training diverges: the epoch that failed and NaN
    /// everywhere else.
    pub fn divergence_marker(epoch: usize) -> Self {
        Self {
            epoch,
            lr: f64::NAN,
            lambda_eff: f64::NAN,
            train_loss: f64::NAN,
            train_acc_vs_noisy: f64::NAN,
            train_acc_vs_clean: f64::NAN,
            test_acc: f64::NAN,
            label_precision: f64::NAN,
            lid_mean: f64::NAN,
            csr: f64::NAN,
            rv_hat_mean: f64::NAN,
        }
    }

    pub fn is_divergence_marker(&self) -> bool {
        self.train_loss.is_nan()
    }

    fn reals(&self) -> [f64; N_COLUMNS - 1] {
        [
            self.lr,
            self.lambda_eff,
            self.train_loss,
            self.train_acc_vs_noisy,
            self.train_acc_vs_clean,
            self.test_acc,
            self.label_precision,
            self.lid_mean,
            self.csr,
            self.rv_hat_mean,
        ]
    }

    pub fn to_csv_line(&self) -> String {
        let mut s = self.epoch.to_string();
        for v in self.reals() {
            s.push(',');
            s.push_str(&format_real(v));
        }
        s
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
fn format_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// Appends rows to a CSV sink, flushing after each so a killed run leaves
/// a parseable prefix.
pub struct MetricsWriter<W: Write> {
    inner: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut inner: W) -> Result<Self> {
        writeln!(inner, "{METRICS_HEADER}")?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write_row(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.inner, "{}", row.to_csv_line())?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let mut mw = MetricsWriter::new(w)?;
    for r in rows {
        mw.write_row(r)?;
    }
    Ok(())
}

pub fn read_metrics_csv<R: BufRead>(r: R) -> Result<Vec<MetricsRow>> {
    let mut lines = r.lines();
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing header".into(),
    })??;
    if header.trim_end_matches('\r') != METRICS_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected header '{header}'"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        rows.push(parse_row(line, line_no)?);
    }
    Ok(rows)
}

fn parse_row(line: &str, line_no: usize) -> Result<MetricsRow> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != N_COLUMNS {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("expected {N_COLUMNS} columns, found {}", fields.len()),
        });
    }
    let epoch = fields[0].parse::<usize>().map_err(|e| Error::Parse {
        line: line_no,
        msg: format!("epoch '{}': {e}", fields[0]),
    })?;
    let mut v = [0.0; N_COLUMNS - 1];
    for (slot, (col, f)) in v.iter_mut().zip(fields[1..].iter().enumerate()) {
        *slot = f.parse::<f64>().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("column {}: '{f}': {e}", col + 1),
        })?;
    }
    Ok(MetricsRow {
        epoch,
        lr: v[0],
        lambda_eff: v[1],
        train_loss: v[2],
        train_acc_vs_noisy: v[3],
        train_acc_vs_clean: v[4],
        test_acc: v[5],
        label_precision: v[6],
        lid_mean: v[7],
        csr: v[8],
        rv_hat_mean: v[9],
    })
}
