//! CSV and JSON encodings of distributions and reports.
//!
//! CSV files start with `#`-prefixed `key=value` metadata lines, followed by
//! a header row. Floats are written with 17 significant digits.

use std::io::{BufRead, Write};

use serde::Serialize;

use crate::chain::{Atom, AtomicDistribution};
use crate::error::{Error, Result};
use crate::expansion::ExpansionParams;
use crate::levy::BoundsReport;
use crate::mixing::MixingReport;

/// Header of the atom table.
pub const DISTRIBUTION_COLUMNS: [&str; 4] = ["position", "weight", "lo", "hi"];
/// Header of the bounds table.
pub const BOUNDS_COLUMNS: [&str; 9] = [
    "N",
    "t",
    "n",
    "quantity",
    "observed_lo",
    "observed_hi",
    "bound",
    "margin",
    "status",
];
/// Header of the mixing table.
pub const MIXING_COLUMNS: [&str; 7] = ["N", "n", "quantity", "kind", "value", "slack", "vacuous"];

/// Fixed-width scientific notation with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_err(e: impl std::fmt::Display) -> Error {
    Error::Parse(e.to_string())
}

fn meta<W: Write>(w: &mut W, key: &str, value: impl std::fmt::Display) -> Result<()> {
    writeln!(w, "# {key}={value}").map_err(io_err)
}

pub fn write_distribution_csv<W: Write>(dist: &AtomicDistribution, mut w: W) -> Result<()> {
    meta(&mut w, "N", dist.params.n())?;
    meta(&mut w, "t", fmt_f64(dist.t))?;
    meta(&mut w, "level", dist.level)?;
    meta(&mut w, "discarded_mass", fmt_f64(dist.discarded_mass))?;
    meta(&mut w, "tv_error", fmt_f64(dist.tv_error))?;
    meta(&mut w, "moment_error", fmt_f64(dist.moment_error))?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(DISTRIBUTION_COLUMNS).map_err(io_err)?;
    for a in &dist.atoms {
        csv.write_record([
            fmt_f64(a.position()),
            fmt_f64(a.weight),
            fmt_f64(a.lo),
            fmt_f64(a.hi),
        ])
        .map_err(io_err)?;
    }
    csv.flush().map_err(io_err)
}

/// Inverse of [`write_distribution_csv`].
pub fn read_distribution_csv<R: BufRead>(r: R) -> Result<AtomicDistribution> {
    let mut text = String::new();
    let mut fields = std::collections::HashMap::new();
    for line in r.lines() {
        let line = line.map_err(io_err)?;
        if let Some(m) = line.strip_prefix('#') {
            if let Some((k, v)) = m.trim().split_once('=') {
                fields.insert(k.trim().to_string(), v.trim().to_string());
            }
        } else {
            text.push_str(&line);
            text.push('\n');
        }
    }
    let get = |k: &str| -> Result<f64> {
        fields
            .get(k)
            .ok_or_else(|| Error::Parse(format!("missing metadata `{k}`")))?
            .parse::<f64>()
            .map_err(io_err)
    };
    let n = get("N")?;
    let params = ExpansionParams::new(n as u32)?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(io_err)?
        .iter()
        .map(str::to_string)
        .collect();
    if header != DISTRIBUTION_COLUMNS {
        return Err(Error::Parse(format!("unexpected header {header:?}")));
    }
    let mut atoms = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(io_err)?;
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(io_err))
            .collect::<Result<_>>()?;
        atoms.push(Atom {
            lo: v[2],
            hi: v[3],
            weight: v[1],
            moment: v[0] * v[1],
        });
    }
    Ok(AtomicDistribution {
        params,
        t: get("t")?,
        level: get("level")? as u32,
        atoms,
        discarded_mass: get("discarded_mass")?,
        tv_error: get("tv_error")?,
        moment_error: get("moment_error")?,
    })
}

pub fn write_bounds_csv<W: Write>(report: &BoundsReport, mut w: W) -> Result<()> {
    meta(&mut w, "beta", fmt_f64(report.beta))?;
    meta(&mut w, "delta", fmt_f64(report.delta))?;
    meta(&mut w, "rate", fmt_f64(report.rate))?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(BOUNDS_COLUMNS).map_err(io_err)?;
    for c in &report.cells {
        csv.write_record([
            report.params.n().to_string(),
            fmt_f64(c.t),
            c.n.to_string(),
            c.quantity.as_str().to_string(),
            fmt_f64(c.observed.lower),
            fmt_f64(c.observed.upper),
            fmt_f64(c.bound),
            fmt_f64(c.margin()),
            c.status.as_str().to_string(),
        ])
        .map_err(io_err)?;
    }
    csv.flush().map_err(io_err)
}

pub fn write_mixing_csv<W: Write>(report: &MixingReport, mut w: W) -> Result<()> {
    meta(&mut w, "K", fmt_f64(report.K))?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(MIXING_COLUMNS).map_err(io_err)?;
    for r in &report.rows {
        csv.write_record([
            report.params.n().to_string(),
            r.n.to_string(),
            r.quantity.as_str().to_string(),
            r.kind.as_str().to_string(),
            fmt_f64(r.value),
            fmt_f64(r.slack),
            r.vacuous.to_string(),
        ])
        .map_err(io_err)?;
    }
    csv.flush().map_err(io_err)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize, W: Write>(value: &T, mut w: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, value).map_err(io_err)?;
    writeln!(w).map_err(io_err)
}
