use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const RUNLOG_HEADER: &str =
    "epoch,train_loss,val_loss,val_dice_et,val_dice_tc,val_dice_wt,val_dice_mean,lr,epoch_seconds,peak_rss_bytes";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub loss: f64,
    /// ET, TC, WT.
    pub dice: [f64; 3],
}

impl Validation {
    pub fn mean_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / 3.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLogRow {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent on epochs without validation.
    pub val: Option<Validation>,
    /// Learning rate of the last optimizer step in the epoch.
    pub lr: f64,
    pub epoch_seconds: f64,
    pub peak_rss_bytes: u64,
}

impl RunLogRow {
    /// The row without its timing and memory columns, which vary between
    /// otherwise identical runs.
    pub fn deterministic_part(&self) -> (usize, f64, Option<Validation>, f64) {
        (self.epoch, self.train_loss, self.val, self.lr)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{:?}", x)).unwrap_or_default()
}

/// CSV text with header; absent validation fields are empty. Floats use the
/// shortest representation that parses back to the same value.
pub fn to_csv(rows: &[RunLogRow]) -> String {
    let mut s = String::from(RUNLOG_HEADER);
    s.push('\n');
    for r in rows {
        let v = r.val;
        let _ = writeln!(
            s,
            "{},{:?},{},{},{},{},{},{:?},{:?},{}",
            r.epoch,
            r.train_loss,
            opt(v.map(|v| v.loss)),
            opt(v.map(|v| v.dice[0])),
            opt(v.map(|v| v.dice[1])),
            opt(v.map(|v| v.dice[2])),
            opt(v.map(|v| v.mean_dice())),
            r.lr,
            r.epoch_seconds,
            r.peak_rss_bytes
        );
    }
    s
}

pub fn from_csv(text: &str) -> Result<Vec<RunLogRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(RUNLOG_HEADER) {
        return Err(Error::Data("run log has an unexpected header".into()));
    }
    let bad = |l: &str| Error::Data(format!("malformed run log row {:?}", l));
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 10 {
                return Err(bad(l));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(l));
            let val = if f[2].is_empty() {
                None
            } else {
                Some(Validation {
                    loss: num(f[2])?,
                    dice: [num(f[3])?, num(f[4])?, num(f[5])?],
                })
            };
            Ok(RunLogRow {
                epoch: f[0].parse().map_err(|_| bad(l))?,
                train_loss: num(f[1])?,
                val,
                lr: num(f[7])?,
                epoch_seconds: num(f[8])?,
                peak_rss_bytes: f[9].parse().map_err(|_| bad(l))?,
            })
        })
        .collect()
}

/// Row with the highest mean validation Dice; the earliest wins ties.
pub fn best_row(rows: &[RunLogRow]) -> Option<&RunLogRow> {
    rows.iter()
        .filter(|r| r.val.is_some())
        .fold(None, |best: Option<&RunLogRow>, r| match best {
            Some(b) if b.val.map(|v| v.mean_dice()) >= r.val.map(|v| v.mean_dice()) => Some(b),
            _ => Some(r),
        })
}
