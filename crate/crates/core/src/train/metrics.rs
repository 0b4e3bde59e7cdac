//! CSV tables written by training, evaluation and noise sweeps.

use std::path::Path;

use serde::Deserialize;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::Real;

pub const METRICS_HEADER: [&str; 9] = [
    "epoch",
    "train_nll",
    "train_kl",
    "train_total",
    "train_acc",
    "val_acc",
    "val_aleatoric",
    "val_epistemic",
    "wall_seconds",
];

pub const UNCERTAINTY_HEADER: [&str; 5] = ["image_index", "scalar_aleatoric", "scalar_epistemic", "predicted", "label"];

pub const SWEEP_HEADER: [&str; 3] = ["gamma", "aleatoric", "epistemic"];

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct MetricsRow {
    pub epoch: u64,
    pub train_nll: Real,
    pub train_kl: Real,
    pub train_total: Real,
    pub train_acc: Real,
    pub val_acc: Real,
    pub val_aleatoric: Real,
    pub val_epistemic: Real,
    pub wall_seconds: Real,
}

impl MetricsRow {
    fn fields(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            sig9(self.train_nll),
            sig9(self.train_kl),
            sig9(self.train_total),
            sig9(self.train_acc),
            sig9(self.val_acc),
            sig9(self.val_aleatoric),
            sig9(self.val_epistemic),
            sig9(self.wall_seconds),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
pub struct UncertaintyRow {
    pub image_index: usize,
    pub scalar_aleatoric: Real,
    pub scalar_epistemic: Real,
    pub predicted: usize,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
pub struct SweepRow {
    pub gamma: Real,
    pub aleatoric: Real,
    pub epistemic: Real,
}

/// `x` rounded to 9 significant digits: positional notation for
/// magnitudes in `[1e-4, 1e9)`, scientific otherwise.
pub fn sig9(x: Real) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    // round first so the exponent reflects carries such as 9.9999999995 -> 10
    let sci = format!("{x:.8e}");
    let exp: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    if (-4..9).contains(&exp) {
        format!("{x:.*}", (8 - exp) as usize)
    } else {
        sci
    }
}

fn write_table(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("buffering csv", e.into_error()))?;
    write_atomic(path, |f| std::io::Write::write_all(f, &bytes))
}

fn read_table<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("header {found:?}, expected {header:?}"),
        });
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_table(path, &METRICS_HEADER, rows.iter().map(MetricsRow::fields))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    read_table(path, &METRICS_HEADER)
}

pub fn write_uncertainty(path: &Path, rows: &[UncertaintyRow]) -> Result<()> {
    write_table(
        path,
        &UNCERTAINTY_HEADER,
        rows.iter().map(|r| {
            vec![
                r.image_index.to_string(),
                sig9(r.scalar_aleatoric),
                sig9(r.scalar_epistemic),
                r.predicted.to_string(),
                r.label.to_string(),
            ]
        }),
    )
}

pub fn read_uncertainty(path: &Path) -> Result<Vec<UncertaintyRow>> {
    read_table(path, &UNCERTAINTY_HEADER)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_table(
        path,
        &SWEEP_HEADER,
        rows.iter().map(|r| vec![sig9(r.gamma), sig9(r.aleatoric), sig9(r.epistemic)]),
    )
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    read_table(path, &SWEEP_HEADER)
}
