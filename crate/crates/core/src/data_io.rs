//! Ingestion of monitor, meteorology, and mortality series, calendar
//! alignment, lag application, spatial averaging, and run configuration.
//!
//! File formats:
//! - monitor CSV: header `date,site_id,district,pm10`, ISO-8601 dates,
//!   concentrations in μg/m³, empty `pm10` marks a missing observation;
//! - health CSV: header `date,count,temp_mean[,temp_max,rain,wind,sun]`,
//!   trailing columns optional;
//! - run config: flat JSON object, every field optional with defaults.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exposure_moments::Lambda3Rule;

/// One fixed-site monitor and the exposure district it serves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteRecord {
    pub id: String,
    pub district: String,
}

/// Per-site daily ambient concentration series.
///
/// Dates are strictly increasing and gap-free; days absent from the input
/// file are inserted with every site marked missing. `ambient[day][site]`
/// is `None` where the monitor did not report.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorPanel {
    pub sites: Vec<SiteRecord>,
    pub dates: Vec<NaiveDate>,
    pub ambient: Vec<Vec<Option<f64>>>,
}

impl MonitorPanel {
    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// Days on which at least one site reported.
    pub fn observed_days(&self) -> Vec<usize> {
        self.ambient
            .iter()
            .enumerate()
            .filter(|(_, row)| row.iter().any(|v| v.is_some()))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Counts of what a monitor-file load actually did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadStats {
    pub parsed_rows: usize,
    pub inserted_dates: usize,
}

/// Daily mortality counts plus meteorology.
#[derive(Debug, Clone, PartialEq)]
pub struct HealthSeries {
    pub dates: Vec<NaiveDate>,
    pub counts: Vec<u64>,
    pub temp_mean: Vec<f64>,
    pub temp_max: Option<Vec<f64>>,
    pub rain: Option<Vec<Option<f64>>>,
    pub wind: Option<Vec<Option<f64>>>,
    pub sun: Option<Vec<Option<f64>>>,
}

impl HealthSeries {
    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    /// Daily temperature driving the simulator: maximum where available,
    /// otherwise the mean series.
    pub fn simulation_temps(&self) -> &[f64] {
        self.temp_max.as_deref().unwrap_or(&self.temp_mean)
    }
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok()
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::MalformedRow {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

/// Load a monitor CSV, returning a calendar-complete panel.
pub fn load_monitor_panel(path: impl AsRef<Path>) -> Result<MonitorPanel> {
    load_monitor_panel_with_stats(path).map(|(p, _)| p)
}

/// As [`load_monitor_panel`], also reporting parse counts.
pub fn load_monitor_panel_with_stats(path: impl AsRef<Path>) -> Result<(MonitorPanel, LoadStats)> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;

    let mut sites: Vec<SiteRecord> = Vec::new();
    let mut cells: BTreeMap<NaiveDate, BTreeMap<usize, f64>> = BTreeMap::new();
    let mut parsed_rows = 0usize;

    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() < 3 {
            return Err(malformed(path, line, "expected date,site_id,district,pm10"));
        }
        let date = parse_date(&record[0])
            .ok_or_else(|| malformed(path, line, format!("bad date '{}'", &record[0])))?;
        let site_id = record[1].to_string();
        let district = record[2].to_string();
        if site_id.is_empty() {
            return Err(malformed(path, line, "empty site_id"));
        }

        let site_idx = match sites.iter().position(|s| s.id == site_id) {
            Some(i) => {
                if sites[i].district != district {
                    return Err(Error::SiteDistrictConflict {
                        site: site_id,
                        first: sites[i].district.clone(),
                        second: district,
                    });
                }
                i
            }
            None => {
                sites.push(SiteRecord {
                    id: site_id,
                    district,
                });
                sites.len() - 1
            }
        };

        let raw = record.get(3).unwrap_or("");
        let value = if raw.is_empty() {
            None
        } else {
            let v: f64 = raw
                .parse()
                .map_err(|_| malformed(path, line, format!("bad pm10 '{raw}'")))?;
            if v < 0.0 {
                return Err(Error::NegativeConcentration {
                    path: path.display().to_string(),
                    line,
                    value: v,
                });
            }
            Some(v)
        };

        let day = cells.entry(date).or_default();
        if day.contains_key(&site_idx) {
            return Err(Error::DuplicateDate {
                date: date.to_string(),
                site: sites[site_idx].id.clone(),
            });
        }
        if let Some(v) = value {
            day.insert(site_idx, v);
        } else {
            // Missing value rows still count as "seen" for duplicate detection.
            day.insert(site_idx, f64::NAN);
        }
        parsed_rows += 1;
    }

    if cells.is_empty() {
        return Err(Error::NoDataRows {
            path: path.display().to_string(),
        });
    }

    let first = *cells.keys().next().unwrap();
    let last = *cells.keys().next_back().unwrap();
    let mut dates = Vec::new();
    let mut ambient = Vec::new();
    let mut inserted = 0usize;
    let mut d = first;
    while d <= last {
        let row: Vec<Option<f64>> = match cells.get(&d) {
            Some(day) => (0..sites.len())
                .map(|s| day.get(&s).copied().filter(|v| !v.is_nan()))
                .collect(),
            None => {
                inserted += 1;
                vec![None; sites.len()]
            }
        };
        dates.push(d);
        ambient.push(row);
        d += Duration::days(1);
    }

    Ok((
        MonitorPanel {
            sites,
            dates,
            ambient,
        },
        LoadStats {
            parsed_rows,
            inserted_dates: inserted,
        },
    ))
}

/// Write a panel back out in the canonical layout: one row per
/// (date, site) in date-major, site-declaration order.
pub fn write_monitor_panel(panel: &MonitorPanel, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "date,site_id,district,pm10")?;
    for (d, date) in panel.dates.iter().enumerate() {
        for (s, site) in panel.sites.iter().enumerate() {
            match panel.ambient[d][s] {
                Some(v) => writeln!(out, "{date},{},{},{v}", site.id, site.district)?,
                None => writeln!(out, "{date},{},{},", site.id, site.district)?,
            }
        }
    }
    Ok(())
}

/// Load a health CSV (`date,count,temp_mean[,temp_max,rain,wind,sun]`).
pub fn load_health_series(path: impl AsRef<Path>) -> Result<HealthSeries> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?;

    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let date_col = col("date").ok_or_else(|| malformed(path, 1, "missing 'date' column"))?;
    let count_col = col("count").ok_or_else(|| malformed(path, 1, "missing 'count' column"))?;
    let temp_col =
        col("temp_mean").ok_or_else(|| malformed(path, 1, "missing 'temp_mean' column"))?;
    let tmax_col = col("temp_max");
    let rain_col = col("rain");
    let wind_col = col("wind");
    let sun_col = col("sun");

    let mut rows: BTreeMap<NaiveDate, (u64, f64, Option<f64>, [Option<f64>; 3])> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let date = record
            .get(date_col)
            .and_then(parse_date)
            .ok_or_else(|| malformed(path, line, "bad date"))?;
        let count: u64 = record
            .get(count_col)
            .unwrap_or("")
            .parse()
            .map_err(|_| malformed(path, line, "bad count (must be a nonnegative integer)"))?;
        let temp: f64 = record
            .get(temp_col)
            .unwrap_or("")
            .parse()
            .map_err(|_| malformed(path, line, "bad temp_mean"))?;
        let opt = |c: Option<usize>| -> Option<f64> {
            c.and_then(|c| record.get(c))
                .filter(|s| !s.is_empty())
                .and_then(|s| s.parse().ok())
        };
        let tmax = opt(tmax_col);
        let extras = [opt(rain_col), opt(wind_col), opt(sun_col)];
        if rows.insert(date, (count, temp, tmax, extras)).is_some() {
            return Err(Error::DuplicateDate {
                date: date.to_string(),
                site: "health".into(),
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::NoDataRows {
            path: path.display().to_string(),
        });
    }

    let dates: Vec<NaiveDate> = rows.keys().copied().collect();
    for w in dates.windows(2) {
        if w[1] - w[0] != Duration::days(1) {
            return Err(malformed(
                path,
                0,
                format!("gap in health calendar between {} and {}", w[0], w[1]),
            ));
        }
    }

    let counts = rows.values().map(|r| r.0).collect();
    let temp_mean = rows.values().map(|r| r.1).collect();
    let temp_max: Option<Vec<f64>> = if tmax_col.is_some() {
        let vals: Vec<Option<f64>> = rows.values().map(|r| r.2).collect();
        if vals.iter().all(|v| v.is_some()) {
            Some(vals.into_iter().map(|v| v.unwrap()).collect())
        } else {
            None
        }
    } else {
        None
    };
    let extra = |i: usize, present: bool| -> Option<Vec<Option<f64>>> {
        present.then(|| rows.values().map(|r| r.3[i]).collect())
    };
    let rain = extra(0, rain_col.is_some());
    let wind = extra(1, wind_col.is_some());
    let sun = extra(2, sun_col.is_some());

    Ok(HealthSeries {
        dates,
        counts,
        temp_mean,
        temp_max,
        rain,
        wind,
        sun,
    })
}

/// Write a health series in the canonical column order.
pub fn write_health_series(series: &HealthSeries, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "date,count,temp_mean,temp_max")?;
    for (i, date) in series.dates.iter().enumerate() {
        let tmax = series
            .temp_max
            .as_ref()
            .map_or(series.temp_mean[i], |v| v[i]);
        writeln!(
            out,
            "{date},{},{},{tmax}",
            series.counts[i], series.temp_mean[i]
        )?;
    }
    Ok(())
}

/// Per-day mean concentration over the sites that reported.
///
/// A day on which every site is missing stays missing.
pub fn spatial_average(panel: &MonitorPanel) -> Vec<Option<f64>> {
    panel
        .ambient
        .iter()
        .map(|row| {
            let vals: Vec<f64> = row.iter().flatten().copied().collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        })
        .collect()
}

/// A series shifted so that `values[i]` pairs with target index `i + lag`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedSeries<T> {
    pub lag: usize,
    pub values: Vec<T>,
}

/// Shift a day-indexed series by `lag` days: the value for day `t - lag`
/// is paired with the outcome on day `t`, and the first `lag` outcome days
/// drop out of the likelihood window.
pub fn apply_lag<T: Clone>(series: &[T], lag: usize) -> Result<LaggedSeries<T>> {
    if lag >= series.len() {
        return Err(Error::LagTooLarge {
            lag,
            len: series.len(),
        });
    }
    Ok(LaggedSeries {
        lag,
        values: series[..series.len() - lag].to_vec(),
    })
}

/// Date-aware lag alignment between an exposure-day calendar and a count
/// calendar. Count day `t` is retained when exposure day `t - lag` exists;
/// this survives excluded days and partial years.
#[derive(Debug, Clone, PartialEq)]
pub struct LagAlignment {
    pub lag: usize,
    /// Count days retained in the likelihood window.
    pub window_dates: Vec<NaiveDate>,
    /// Index into the health series per window day.
    pub count_idx: Vec<usize>,
    /// Index into the exposure-day series per window day.
    pub exposure_idx: Vec<usize>,
}

pub fn align_lagged(
    exposure_dates: &[NaiveDate],
    health_dates: &[NaiveDate],
    lag: usize,
) -> Result<LagAlignment> {
    let mut window_dates = Vec::new();
    let mut count_idx = Vec::new();
    let mut exposure_idx = Vec::new();
    for (j, &d) in health_dates.iter().enumerate() {
        let wanted = d - Duration::days(lag as i64);
        if let Ok(i) = exposure_dates.binary_search(&wanted) {
            window_dates.push(d);
            count_idx.push(j);
            exposure_idx.push(i);
        }
    }
    if window_dates.is_empty() {
        return Err(Error::NoCalendarOverlap);
    }
    Ok(LagAlignment {
        lag,
        window_dates,
        count_idx,
        exposure_idx,
    })
}

/// Which mean function to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelId {
    /// Fixed ambient spatial average.
    #[serde(rename = "i")]
    I,
    /// Fixed daily mean of the personal exposure panel.
    #[serde(rename = "ii")]
    II,
    /// Normal daily exposure distribution, exact second-order mean.
    #[serde(rename = "iii")]
    III,
    /// Log-normal daily exposure distribution, three-term mean.
    #[serde(rename = "iv")]
    IV,
}

impl std::str::FromStr for ModelId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "i" | "1" => Ok(ModelId::I),
            "ii" | "2" => Ok(ModelId::II),
            "iii" | "3" => Ok(ModelId::III),
            "iv" | "4" => Ok(ModelId::IV),
            other => Err(Error::Config(format!("unknown model '{other}'"))),
        }
    }
}

impl std::fmt::Display for ModelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelId::I => "i",
            ModelId::II => "ii",
            ModelId::III => "iii",
            ModelId::IV => "iv",
        };
        f.write_str(s)
    }
}

/// Which exposure sources the simulator keeps active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SourceToggle {
    #[default]
    All,
    /// Indoor emission rates forced to zero.
    Outdoor,
    /// Ambient input forced to zero.
    Indoor,
}

impl std::str::FromStr for SourceToggle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" => Ok(SourceToggle::All),
            "outdoor" | "outdoor-only" => Ok(SourceToggle::Outdoor),
            "indoor" | "indoor-only" => Ok(SourceToggle::Indoor),
            other => Err(Error::Config(format!("unknown source toggle '{other}'"))),
        }
    }
}

/// Run configuration. Every field has a default so a config file may set
/// any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelId,
    pub lag: usize,
    pub time_df: usize,
    pub temp_df: usize,
    pub chains: usize,
    pub burn_in: usize,
    pub iterations: usize,
    pub thin: usize,
    pub epsilon: f64,
    /// Prior mean for the daily exposure-mean level; empirical when absent.
    pub xi: Option<f64>,
    /// Prior mean for the daily exposure-variance level; empirical when absent.
    pub s2: Option<f64>,
    pub source: SourceToggle,
    pub seed: u64,
    /// Simulator replicates per exposure district.
    pub replicates: usize,
    pub lambda3: Lambda3Rule,
    /// Retain per-day λ draws (needed for predictive residual checks).
    pub keep_lambda: bool,
    /// Random-walk coefficient-block updates per sweep.
    pub beta_updates: usize,
    /// Relative-risk reporting increment, μg/m³.
    pub increment: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelId::IV,
            lag: 2,
            time_df: 11,
            temp_df: 2,
            chains: 2,
            burn_in: 20_000,
            iterations: 250_000,
            thin: 25,
            epsilon: 0.001,
            xi: None,
            s2: None,
            source: SourceToggle::All,
            seed: 1997,
            replicates: 100,
            lambda3: Lambda3Rule::Ratio,
            keep_lambda: true,
            beta_updates: 5,
            increment: 10.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains < 2 {
            return Err(Error::Config("chains must be ≥ 2".into()));
        }
        if self.thin < 1 {
            return Err(Error::Config("thinning must be ≥ 1".into()));
        }
        if self.time_df < 1 || self.temp_df < 1 {
            return Err(Error::Config("spline degrees of freedom must be ≥ 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if self.replicates < 1 {
            return Err(Error::Config("replicates must be ≥ 1".into()));
        }
        Ok(())
    }
}
