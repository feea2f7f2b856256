//! Eavesdropping channel: Bernoulli interception of client uploads with a
//! proxy estimate on missed cells.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::RoundRecord;
use crate::fsio;
use crate::gnn::Gradients;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyRule {
    /// Repeat the client's last intercepted upload, zeros before the first.
    #[default]
    ZeroOrderHold,
    /// Leave missed cells absent.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TapConfig {
    pub gamma: f64,
    pub seed: u64,
    pub proxy_rule: ProxyRule,
}

impl Default for TapConfig {
    fn default() -> Self {
        TapConfig {
            gamma: 1.0,
            seed: 0,
            proxy_rule: ProxyRule::ZeroOrderHold,
        }
    }
}

impl TapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidParameter(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapCell {
    pub intercepted: bool,
    pub selected: bool,
    /// Observed or proxy gradient; `None` for skipped cells.
    pub estimate: Option<Gradients>,
    /// Round whose true upload the estimate holds, if any.
    pub source_round: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapTrace {
    /// `cells[round][client]`.
    pub cells: Vec<Vec<TapCell>>,
}

impl TapTrace {
    pub fn rounds(&self) -> usize {
        self.cells.len()
    }

    pub fn interception_count(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.intercepted).count()
    }

    /// First round in which `client`'s upload was intercepted.
    pub fn first_intercepted(&self, client: usize) -> Option<usize> {
        (0..self.cells.len()).find(|&t| self.cells[t][client].intercepted)
    }

    /// Last round in which `client`'s upload was intercepted.
    pub fn last_intercepted(&self, client: usize) -> Option<usize> {
        (0..self.cells.len()).rev().find(|&t| self.cells[t][client].intercepted)
    }
}

/// Applies the channel to a completed run.
pub fn tap(records: &[RoundRecord], cfg: &TapConfig) -> Result<TapTrace> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Empty("no round records to tap".into()));
    }
    let k = records[0].uploads.len();
    let mut held: Vec<Option<(usize, Gradients)>> = vec![None; k];
    let mut cells = Vec::with_capacity(records.len());
    for rec in records {
        if rec.uploads.len() != k || rec.selected.len() != k {
            return Err(Error::Shape(format!("round {} has a different client count", rec.round)));
        }
        let mut row = Vec::with_capacity(k);
        for (c, upload) in rec.uploads.iter().enumerate() {
            let mut r = rng::stream(cfg.seed, "tap", &[rec.round as u64, c as u64]);
            let intercepted = r.random::<f64>() < cfg.gamma;
            let cell = if intercepted {
                held[c] = Some((rec.round, upload.clone()));
                TapCell {
                    intercepted,
                    selected: rec.selected[c],
                    estimate: Some(upload.clone()),
                    source_round: Some(rec.round),
                }
            } else {
                let (estimate, source_round) = match (cfg.proxy_rule, &held[c]) {
                    (ProxyRule::Skip, _) => (None, None),
                    (ProxyRule::ZeroOrderHold, Some((t, g))) => (Some(g.clone()), Some(*t)),
                    (ProxyRule::ZeroOrderHold, None) => (Some(upload.zeros_like()), None),
                };
                TapCell {
                    intercepted,
                    selected: rec.selected[c],
                    estimate,
                    source_round,
                }
            };
            row.push(cell);
        }
        cells.push(row);
    }
    Ok(TapTrace { cells })
}

/// `‖x_true − x_est‖²` per round and client; `None` where the cell was
/// skipped.
pub fn cell_errors(trace: &TapTrace, records: &[RoundRecord]) -> Result<Vec<Vec<Option<f64>>>> {
    if trace.cells.len() != records.len() {
        return Err(Error::Shape("trace and records cover different rounds".into()));
    }
    trace
        .cells
        .iter()
        .zip(records)
        .map(|(row, rec)| {
            row.iter()
                .zip(&rec.uploads)
                .map(|(cell, truth)| match &cell.estimate {
                    _ if cell.intercepted => Ok(Some(0.0)),
                    Some(est) => {
                        truth.check_shape(est)?;
                        Ok(Some(truth.dist_sq(est)))
                    }
                    None => Ok(None),
                })
                .collect()
        })
        .collect()
}

/// Per-round estimation error summed over clients; `None` when any cell of
/// the round is undefined.
pub fn estimation_error(trace: &TapTrace, records: &[RoundRecord]) -> Result<Vec<Option<f64>>> {
    Ok(cell_errors(trace, records)?
        .into_iter()
        .map(|row| row.into_iter().sum::<Option<f64>>())
        .collect())
}

pub fn tap_csv(trace: &TapTrace, records: &[RoundRecord]) -> Result<String> {
    let errs = cell_errors(trace, records)?;
    let mut s = String::from("round,client,intercepted,est_error\n");
    for (t, (row, erow)) in trace.cells.iter().zip(&errs).enumerate() {
        for (c, (cell, e)) in row.iter().zip(erow).enumerate() {
            let e = e.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{t},{c},{},{e}\n", u8::from(cell.intercepted)));
        }
    }
    Ok(s)
}

pub fn save_tap_csv(trace: &TapTrace, records: &[RoundRecord], path: &Path) -> Result<()> {
    fsio::write_atomic_str(path, &tap_csv(trace, records)?)
}
