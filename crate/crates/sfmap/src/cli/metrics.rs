//! Localization metrics: recall at distance, availability at error, and
//! filtered RMSE over the coarse and fine stages.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("the result log is empty")]
    EmptyLog,
    #[error("malformed log: {0}")]
    Malformed(String),
}

/// One query's outcome, joined from the coarse and fine logs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub t: f64,
    /// Distance from the retrieved frame to the query's true position, m.
    pub coarse_dist: f64,
    /// Horizontal fine position error, m; NaN marks a failed solve.
    pub fine_err: f64,
    pub method: String,
    pub mode: String,
}

pub const RECALL_RADII_M: [f64; 3] = [5.0, 10.0, 20.0];
pub const AVAIL_THRESHOLDS_M: [f64; 3] = [0.5, 1.0, 5.0];
/// Coarse RMSE ignores retrievals farther than this (gross mismatches).
pub const COARSE_RMSE_CUTOFF_M: f64 = 100.0;
/// Fine RMSE only counts queries whose retrieval was within this radius...
pub const FINE_RMSE_RECALL_CUTOFF_M: f64 = 20.0;
/// ...and whose fine error stayed below this.
pub const FINE_RMSE_ERROR_CUTOFF_M: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub queries: usize,
    /// Fraction of queries with `coarse_dist < r` for each radius.
    pub recall: [f64; 3],
    /// Fraction of queries with `fine_err < e` for each threshold.
    pub availability: [f64; 3],
    pub coarse_rmse: f64,
    pub coarse_rmse_count: usize,
    pub fine_rmse: f64,
    pub fine_rmse_count: usize,
}

impl std::fmt::Display for Metrics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "queries: {}", self.queries)?;
        for (r, v) in RECALL_RADII_M.iter().zip(self.recall.iter()) {
            writeln!(f, "recall@{r} m: {:.2}%", 100.0 * v)?;
        }
        for (e, v) in AVAIL_THRESHOLDS_M.iter().zip(self.availability.iter()) {
            writeln!(f, "availability@{e} m: {:.2}%", 100.0 * v)?;
        }
        writeln!(
            f,
            "coarse RMSE (<{COARSE_RMSE_CUTOFF_M} m): {:.3} m over {}",
            self.coarse_rmse, self.coarse_rmse_count
        )?;
        writeln!(
            f,
            "fine RMSE (recall <{FINE_RMSE_RECALL_CUTOFF_M} m, err <{FINE_RMSE_ERROR_CUTOFF_M} m): {:.3} m over {}",
            self.fine_rmse, self.fine_rmse_count
        )
    }
}

fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
    }
}

pub fn compute_metrics(records: &[EvalRecord]) -> Result<Metrics, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let n = records.len() as f64;
    let mut recall = [0.0; 3];
    for (slot, r) in recall.iter_mut().zip(RECALL_RADII_M.iter()) {
        *slot = records.iter().filter(|rec| rec.coarse_dist < *r).count() as f64 / n;
    }
    let mut availability = [0.0; 3];
    for (slot, e) in availability.iter_mut().zip(AVAIL_THRESHOLDS_M.iter()) {
        *slot = records.iter().filter(|rec| rec.fine_err < *e).count() as f64 / n;
    }
    let coarse: Vec<f64> = records
        .iter()
        .map(|r| r.coarse_dist)
        .filter(|d| *d < COARSE_RMSE_CUTOFF_M)
        .collect();
    let fine: Vec<f64> = records
        .iter()
        .filter(|r| {
            r.coarse_dist < FINE_RMSE_RECALL_CUTOFF_M && r.fine_err < FINE_RMSE_ERROR_CUTOFF_M
        })
        .map(|r| r.fine_err)
        .collect();
    Ok(Metrics {
        queries: records.len(),
        recall,
        availability,
        coarse_rmse: rms(&coarse),
        coarse_rmse_count: coarse.len(),
        fine_rmse: rms(&fine),
        fine_rmse_count: fine.len(),
    })
}

fn field<'a>(cols: &'a [&str], idx: usize, line: usize) -> Result<&'a str, EvalError> {
    cols.get(idx)
        .copied()
        .ok_or_else(|| EvalError::Malformed(format!("line {line}: missing column {idx}")))
}

fn numf(s: &str, line: usize) -> Result<f64, EvalError> {
    s.parse()
        .map_err(|_| EvalError::Malformed(format!("line {line}: `{s}` is not a number")))
}

/// Join the coarse and fine CSV logs of one run into per-query records.
pub fn parse_logs(coarse: &str, fine: &str) -> Result<Vec<EvalRecord>, EvalError> {
    let coarse_rows: Vec<&str> = coarse.lines().skip(1).filter(|l| !l.is_empty()).collect();
    let fine_rows: Vec<&str> = fine.lines().skip(1).filter(|l| !l.is_empty()).collect();
    if coarse_rows.len() != fine_rows.len() {
        return Err(EvalError::Malformed(format!(
            "{} coarse rows vs {} fine rows",
            coarse_rows.len(),
            fine_rows.len()
        )));
    }
    let mut out = Vec::with_capacity(coarse_rows.len());
    for (i, (c, fl)) in coarse_rows.iter().zip(fine_rows.iter()).enumerate() {
        let line = i + 2;
        let cc: Vec<&str> = c.split(',').collect();
        let fc: Vec<&str> = fl.split(',').collect();
        let t = numf(field(&cc, 0, line)?, line)?;
        let tf = numf(field(&fc, 0, line)?, line)?;
        if (t - tf).abs() > 1e-6 {
            return Err(EvalError::Malformed(format!(
                "line {line}: timestamps {t} and {tf} do not match"
            )));
        }
        out.push(EvalRecord {
            t,
            coarse_dist: numf(field(&cc, 5, line)?, line)?,
            fine_err: numf(field(&fc, 4, line)?, line)?,
            method: field(&cc, 4, line)?.to_string(),
            mode: field(&fc, 7, line)?.to_string(),
        });
    }
    Ok(out)
}
