//! Estimate-table and microdata CSV ingestion.
//!
//! Estimate tables carry `geo_id, kind, lower, upper, tau, value, moe, se`
//! plus an optional `held_out` flag. Exactly one of `moe` and `se` is given
//! per row; a margin of error is converted with `se = moe / 1.645`. An empty
//! `upper` on a bin row means the bin is unbounded.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use popinterp::functionals::EstimateRecord;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::output::fmt_num;

/// z-value of the 90% margins of error published with survey tables.
pub const MOE_Z: f64 = 1.645;

const MAX_REPORTED_ERRORS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Bin,
    Mean,
    Median,
    Quantile,
    Gini,
    Population,
}

impl RowKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RowKind::Bin => "bin",
            RowKind::Mean => "mean",
            RowKind::Median => "median",
            RowKind::Quantile => "quantile",
            RowKind::Gini => "gini",
            RowKind::Population => "population",
        }
    }
}

impl FromStr for RowKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "bin" => RowKind::Bin,
            "mean" => RowKind::Mean,
            "median" => RowKind::Median,
            "quantile" => RowKind::Quantile,
            "gini" => RowKind::Gini,
            "population" => RowKind::Population,
            other => return Err(format!("unknown kind '{other}'")),
        })
    }
}

/// One validated estimate. Bin values are proportions and `upper = None`
/// marks the unbounded bin.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub kind: RowKind,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub tau: Option<f64>,
    pub value: f64,
    pub se: f64,
    pub held_out: bool,
}

impl EstimateRow {
    /// Canonical position within a geography.
    fn order_key(&self) -> (RowKind, f64) {
        (self.kind, self.lower.or(self.tau).unwrap_or(0.0))
    }
}

/// Validated rows of one geography in canonical order: bins by lower bound,
/// then mean, median, quantiles by level, Gini and population.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoTable {
    pub geo_id: String,
    pub rows: Vec<EstimateRow>,
}

impl GeoTable {
    pub fn bins(&self) -> impl Iterator<Item = &EstimateRow> + '_ {
        self.rows.iter().filter(|r| r.kind == RowKind::Bin)
    }

    pub fn find(&self, kind: RowKind) -> Option<&EstimateRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    pub fn quantile(&self, tau: f64) -> Option<&EstimateRow> {
        self.rows
            .iter()
            .find(|r| r.kind == RowKind::Quantile && r.tau.is_some_and(|t| (t - tau).abs() < 1e-9))
    }

    /// `(lower, upper)` of each bin, `upper = INFINITY` for the last.
    pub fn bin_edges(&self) -> Vec<(f64, f64)> {
        self.bins()
            .map(|b| (b.lower.unwrap_or(0.0), b.upper.unwrap_or(f64::INFINITY)))
            .collect()
    }

    /// Bin estimates as published, in bin order.
    pub fn bin_records(&self) -> Result<Vec<EstimateRecord>> {
        self.bins()
            .map(|b| {
                EstimateRecord::bin(
                    b.lower.unwrap_or(0.0),
                    b.upper.unwrap_or(f64::INFINITY),
                    b.value,
                    b.se,
                )
                .map_err(|e| CliError::invalid(format!("{}: {e}", self.geo_id)))
            })
            .collect()
    }

    /// Bin estimates renormalised to sum to one.
    pub fn bin_shares(&self) -> Vec<f64> {
        let v: Vec<f64> = self.bins().map(|b| b.value.max(0.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }
}

/// Ingestion settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestOptions {
    /// Zero standard errors become `se_floor * max(|value|, 1)`.
    pub se_floor: f64,
    /// A geography whose bin values exceed this is read as percentages.
    pub percent_threshold: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            se_floor: 1e-6,
            percent_threshold: 1.5,
        }
    }
}

/// Validated tables per geography, plus geographies rejected as a whole.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EstimateTable {
    pub geos: BTreeMap<String, GeoTable>,
    pub rejected: BTreeMap<String, String>,
}

impl EstimateTable {
    /// The requested geographies, or every one when `ids` is empty. Fails if
    /// any requested geography is missing or was rejected.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&GeoTable>> {
        let wanted: Vec<String> = if ids.is_empty() {
            self.geos.keys().chain(self.rejected.keys()).cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect()
        } else {
            ids.to_vec()
        };
        let mut problems = Vec::new();
        let mut out = Vec::new();
        for id in &wanted {
            if let Some(reason) = self.rejected.get(id) {
                problems.push(format!("{id}: {reason}"));
            } else if let Some(t) = self.geos.get(id) {
                out.push(t);
            } else {
                problems.push(format!("{id}: no rows for this geo_id"));
            }
        }
        if !problems.is_empty() {
            return Err(CliError::invalid(problems.join("; ")));
        }
        if out.is_empty() {
            return Err(CliError::invalid("no geographies to process"));
        }
        Ok(out)
    }
}

#[derive(Debug, Deserialize)]
struct RawRow {
    geo_id: String,
    kind: String,
    lower: Option<f64>,
    upper: Option<f64>,
    tau: Option<f64>,
    value: Option<f64>,
    moe: Option<f64>,
    se: Option<f64>,
    held_out: Option<String>,
}

fn parse_flag(s: &str) -> std::result::Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "" | "false" | "0" | "no" => Ok(false),
        "true" | "1" | "yes" => Ok(true),
        other => Err(format!("held_out must be true or false, got '{other}'")),
    }
}

fn typed_row(raw: RawRow) -> std::result::Result<(String, EstimateRow), String> {
    let geo_id = raw.geo_id.trim().to_string();
    if geo_id.is_empty() {
        return Err("empty geo_id".into());
    }
    let kind: RowKind = raw.kind.trim().parse()?;
    let value = raw.value.ok_or("missing value")?;
    if !value.is_finite() {
        return Err(format!("value {value} is not finite"));
    }
    let se = match (raw.moe, raw.se) {
        (Some(m), None) => m / MOE_Z,
        (None, Some(s)) => s,
        (Some(_), Some(_)) => return Err("both moe and se given; supply exactly one".into()),
        (None, None) => return Err("neither moe nor se given; supply exactly one".into()),
    };
    if !(se.is_finite() && se >= 0.0) {
        return Err(format!("standard error {se} must be finite and >= 0"));
    }
    let held_out = raw.held_out.as_deref().map(parse_flag).transpose()?.unwrap_or(false);
    let (mut lower, mut upper, mut tau) = (raw.lower, raw.upper, raw.tau);
    match kind {
        RowKind::Bin => {
            let l = lower.ok_or("bin row without a lower bound")?;
            if !(l.is_finite() && l >= 0.0) {
                return Err(format!("bin lower bound {l} must be finite and >= 0"));
            }
            if let Some(u) = upper {
                if u.is_infinite() && u > 0.0 {
                    upper = None;
                } else if !(u.is_finite() && u > l) {
                    return Err(format!("bin upper bound {u} must exceed lower bound {l}"));
                }
            }
            if tau.is_some() {
                return Err("bin rows take no tau".into());
            }
            if held_out {
                return Err("bin rows cannot be held out; they define the support".into());
            }
        }
        RowKind::Quantile => {
            let t = tau.ok_or("quantile row without tau")?;
            if !(t > 0.0 && t < 1.0) {
                return Err(format!("tau {t} must lie in (0, 1)"));
            }
            if lower.is_some() || upper.is_some() {
                return Err("quantile rows take no bounds".into());
            }
        }
        RowKind::Median => {
            if tau.is_some_and(|t| (t - 0.5).abs() > 1e-12) {
                return Err("median rows take tau = 0.5 or none".into());
            }
            if lower.is_some() || upper.is_some() {
                return Err("median rows take no bounds".into());
            }
            tau = None;
        }
        RowKind::Mean | RowKind::Gini | RowKind::Population => {
            if lower.is_some() || upper.is_some() || tau.is_some() {
                return Err(format!("{} rows take no bounds or tau", kind.as_str()));
            }
            if kind == RowKind::Population && !(value > 0.0) {
                return Err(format!("population {value} must be positive"));
            }
            lower = None;
        }
    }
    Ok((
        geo_id,
        EstimateRow {
            kind,
            lower,
            upper,
            tau,
            value,
            se,
            held_out,
        },
    ))
}

/// Applies the percent rule and SE floor, checks the bins, and sorts.
fn finish_geo(
    geo_id: &str,
    mut rows: Vec<EstimateRow>,
    opts: &IngestOptions,
) -> std::result::Result<GeoTable, String> {
    if rows.iter().any(|r| r.kind == RowKind::Bin && r.value > opts.percent_threshold) {
        warn!("{geo_id}: bin values above {} read as percentages", opts.percent_threshold);
        for r in rows.iter_mut().filter(|r| r.kind == RowKind::Bin) {
            r.value /= 100.0;
            r.se /= 100.0;
        }
    }
    for r in &mut rows {
        if r.kind == RowKind::Bin && !(0.0..=1.0).contains(&r.value) {
            return Err(format!("bin proportion {} is outside [0, 1]", r.value));
        }
        if r.se == 0.0 {
            r.se = opts.se_floor * r.value.abs().max(1.0);
            warn!(
                "{geo_id}: zero standard error on a {} row floored at {}",
                r.kind.as_str(),
                r.se
            );
        }
    }
    rows.sort_by(|a, b| {
        let (ka, va) = a.order_key();
        let (kb, vb) = b.order_key();
        ka.cmp(&kb).then(va.total_cmp(&vb))
    });
    for w in rows.windows(2) {
        let same = w[0].kind == w[1].kind
            && match w[0].kind {
                RowKind::Bin => w[0].lower == w[1].lower,
                RowKind::Quantile => w[0].tau == w[1].tau,
                _ => true,
            };
        if same {
            return Err(format!("duplicate {} row", w[0].kind.as_str()));
        }
    }
    let edges: Vec<(f64, Option<f64>)> = rows
        .iter()
        .filter(|r| r.kind == RowKind::Bin)
        .map(|r| (r.lower.unwrap_or(0.0), r.upper))
        .collect();
    if !edges.is_empty() {
        if edges[0].0 != 0.0 {
            return Err(format!("bins start at {}, not 0", edges[0].0));
        }
        for w in edges.windows(2) {
            match w[0].1 {
                Some(u) if u == w[1].0 => {}
                Some(u) => {
                    return Err(format!(
                        "bins are not contiguous: one ends at {u}, the next starts at {}",
                        w[1].0
                    ))
                }
                None => return Err(format!("unbounded bin starting at {} is not the last", w[0].0)),
            }
        }
        if let Some(u) = edges[edges.len() - 1].1 {
            return Err(format!("the last bin ends at {u}; the top bin must be unbounded"));
        }
    }
    Ok(GeoTable {
        geo_id: geo_id.to_string(),
        rows,
    })
}

pub fn parse_estimates<R: Read>(reader: R, opts: &IngestOptions) -> Result<EstimateTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::invalid(format!("cannot read header: {e}")))?
        .clone();
    for col in ["geo_id", "kind", "value"] {
        if !headers.iter().any(|h| h == col) {
            return Err(CliError::invalid(format!("missing required column '{col}'")));
        }
    }
    if !headers.iter().any(|h| h == "moe" || h == "se") {
        return Err(CliError::invalid("need a 'moe' or 'se' column"));
    }
    let mut errors = Vec::new();
    let mut grouped: BTreeMap<String, Vec<EstimateRow>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::invalid(format!("malformed CSV: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        let parsed = rec
            .deserialize::<RawRow>(Some(&headers))
            .map_err(|e| e.to_string())
            .and_then(typed_row);
        match parsed {
            Ok((geo, row)) => grouped.entry(geo).or_default().push(row),
            Err(msg) => errors.push(format!("line {line}: {msg}")),
        }
    }
    if !errors.is_empty() {
        let n = errors.len();
        errors.truncate(MAX_REPORTED_ERRORS);
        return Err(CliError::invalid(format!(
            "{n} invalid row(s): {}",
            errors.join("; ")
        )));
    }
    let mut table = EstimateTable::default();
    for (geo, rows) in grouped {
        match finish_geo(&geo, rows, opts) {
            Ok(t) => {
                table.geos.insert(geo, t);
            }
            Err(msg) => {
                warn!("{geo}: rejected: {msg}");
                table.rejected.insert(geo, msg);
            }
        }
    }
    Ok(table)
}

pub fn read_estimates(path: &Path, opts: &IngestOptions) -> Result<EstimateTable> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_estimates(f, opts).map_err(|e| match e {
        CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn opt_num(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

/// Accepted geographies in canonical form: proportions, standard errors,
/// rows sorted. Reading the result back yields the same tables.
pub fn canonical_csv(table: &EstimateTable) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(["geo_id", "kind", "lower", "upper", "tau", "value", "moe", "se", "held_out"])
        .map_err(err)?;
    for t in table.geos.values() {
        for r in &t.rows {
            w.write_record([
                t.geo_id.as_str(),
                r.kind.as_str(),
                &opt_num(r.lower),
                &opt_num(r.upper),
                &opt_num(r.tau),
                &fmt_num(r.value),
                "",
                &fmt_num(r.se),
                if r.held_out { "true" } else { "false" },
            ])
            .map_err(err)?;
        }
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

/// A microdata record with its survey weight.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PumsRow {
    pub income: f64,
    pub weight: f64,
    pub puma_id: String,
}

pub fn parse_pums<R: Read>(reader: R) -> Result<Vec<PumsRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (i, rec) in rdr.deserialize::<PumsRow>().enumerate() {
        let line = i + 2;
        match rec {
            Ok(r) if !(r.income.is_finite() && r.income >= 0.0) => {
                errors.push(format!("line {line}: income {} must be finite and >= 0", r.income))
            }
            Ok(r) if !(r.weight.is_finite() && r.weight > 0.0) => {
                errors.push(format!("line {line}: weight {} must be finite and > 0", r.weight))
            }
            Ok(r) => rows.push(r),
            Err(e) => errors.push(format!("line {line}: {e}")),
        }
    }
    if !errors.is_empty() {
        let n = errors.len();
        errors.truncate(MAX_REPORTED_ERRORS);
        return Err(CliError::invalid(format!("{n} invalid row(s): {}", errors.join("; "))));
    }
    Ok(rows)
}

pub fn read_pums(path: &Path) -> Result<Vec<PumsRow>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_pums(f).map_err(|e| match e {
        CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}
