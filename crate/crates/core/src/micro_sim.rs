//! Stage 1: daily personal exposure simulation.
//!
//! Each replicate is a randomly sampled individual pinned to one exposure
//! district. The individual moves between four microenvironments
//! (home-indoor, other-indoor, outdoor, transit) following a semi-Markov
//! activity sequence: an hour-of-day transition kernel chooses the next
//! location whenever a dwell period expires. Every microenvironment keeps
//! its own air state, advanced hourly by a single-compartment mass balance
//!
//! `C' = C + a·(P·C_amb − C) + S·1[source event]`,
//!
//! where `a` is the air-exchange fraction for the hour (capped at 1 so the
//! discrete step cannot overshoot), `P` the penetration factor, and `S`
//! the indoor emission increment. Warmer days raise the exchange fraction
//! through a monotone piecewise-linear map (open windows). Exposure is the
//! time-weighted mean of the occupied environment's concentration, split
//! exactly into an ambient-origin and an indoor-origin component (the
//! recurrence is affine, so the split is exact).
//!
//! Replicates draw from independently derived RNG streams, so results are
//! reproducible regardless of execution order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{spatial_average, MonitorPanel, SourceToggle};
use crate::error::{Error, Result};
use crate::exposure_moments::{sample_moments, DailyMoments, Lambda3Rule};

/// The four microenvironment kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    HomeIndoor,
    OtherIndoor,
    Outdoor,
    Transit,
}

impl EnvKind {
    pub const ALL: [EnvKind; 4] = [
        EnvKind::HomeIndoor,
        EnvKind::OtherIndoor,
        EnvKind::Outdoor,
        EnvKind::Transit,
    ];

    pub fn index(self) -> usize {
        match self {
            EnvKind::HomeIndoor => 0,
            EnvKind::OtherIndoor => 1,
            EnvKind::Outdoor => 2,
            EnvKind::Transit => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::HomeIndoor => "home-indoor",
            EnvKind::OtherIndoor => "other-indoor",
            EnvKind::Outdoor => "outdoor",
            EnvKind::Transit => "transit",
        }
    }
}

/// One microenvironment's physical parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Microenvironment {
    pub kind: EnvKind,
    /// Fraction of ambient concentration that penetrates, 0–1.
    pub penetration: f64,
    /// Air exchanges per hour, > 0.
    pub air_exchange: f64,
    /// Concentration increment per source event, μg/m³.
    pub emission_rate: f64,
    /// Source-event probability per occupied hour, 0–1.
    pub event_prob: f64,
}

/// Dwell-time bounds per microenvironment, whole hours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DwellRange {
    pub min_hours: u32,
    pub max_hours: u32,
}

/// Dwell entry as written in the profile file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DwellEntry {
    pub kind: EnvKind,
    pub min_hours: u32,
    pub max_hours: u32,
}

/// Transition kernel for a block of hours. Rows and columns follow
/// [`EnvKind::ALL`] order; each row sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourBlock {
    /// First hour covered, inclusive, 0–23.
    pub start_hour: u8,
    /// Last hour covered, exclusive, 1–24.
    pub end_hour: u8,
    pub transitions: [[f64; 4]; 4],
}

/// Activity pattern of the simulated population.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityProfile {
    pub label: String,
    pub dwell: [DwellRange; 4],
    pub blocks: Vec<HourBlock>,
}

impl ActivityProfile {
    pub fn validate(&self) -> Result<()> {
        let mut covered = [false; 24];
        for block in &self.blocks {
            if block.start_hour >= block.end_hour || block.end_hour > 24 {
                return Err(Error::InvalidProfile(format!(
                    "block hours {}..{} invalid",
                    block.start_hour, block.end_hour
                )));
            }
            for h in block.start_hour..block.end_hour {
                if covered[h as usize] {
                    return Err(Error::InvalidProfile(format!("hour {h} covered twice")));
                }
                covered[h as usize] = true;
            }
            for (i, row) in block.transitions.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidProfile(format!(
                        "transition row {} in block {}..{} sums to {sum}, not 1",
                        EnvKind::ALL[i].name(),
                        block.start_hour,
                        block.end_hour
                    )));
                }
                if row.iter().any(|&p| p < 0.0) {
                    return Err(Error::InvalidProfile("negative transition probability".into()));
                }
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::InvalidProfile("blocks do not cover all 24 hours".into()));
        }
        for (i, d) in self.dwell.iter().enumerate() {
            if d.min_hours < 1 || d.max_hours < d.min_hours {
                return Err(Error::InvalidProfile(format!(
                    "dwell range for {} invalid",
                    EnvKind::ALL[i].name()
                )));
            }
        }
        Ok(())
    }

    fn kernel_for_hour(&self, hour: u8) -> &[[f64; 4]; 4] {
        for block in &self.blocks {
            if hour >= block.start_hour && hour < block.end_hour {
                return &block.transitions;
            }
        }
        // validate() guarantees full coverage.
        unreachable!("hour {hour} not covered by any block")
    }
}

/// The complete simulator configuration as stored in a profile file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimProfile {
    pub label: String,
    #[serde(rename = "environment")]
    pub environments: Vec<Microenvironment>,
    #[serde(rename = "dwell")]
    pub dwells: Vec<DwellEntry>,
    #[serde(rename = "block")]
    pub blocks: Vec<HourBlock>,
}

impl SimProfile {
    pub fn from_toml_str(text: &str) -> Result<SimProfile> {
        let profile: SimProfile =
            toml::from_str(text).map_err(|e| Error::InvalidProfile(e.to_string()))?;
        profile.split()?;
        Ok(profile)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SimProfile> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("profile serializes")
    }

    /// Split into the activity pattern and the validated environment set.
    pub fn split(&self) -> Result<(ActivityProfile, Vec<Microenvironment>)> {
        let mut dwell = [DwellRange {
            min_hours: 1,
            max_hours: 1,
        }; 4];
        let mut seen = [false; 4];
        for entry in &self.dwells {
            let i = entry.kind.index();
            if seen[i] {
                return Err(Error::InvalidProfile(format!(
                    "dwell for {} given twice",
                    entry.kind.name()
                )));
            }
            seen[i] = true;
            dwell[i] = DwellRange {
                min_hours: entry.min_hours,
                max_hours: entry.max_hours,
            };
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidProfile("dwell missing for some environment".into()));
        }
        let activity = ActivityProfile {
            label: self.label.clone(),
            dwell,
            blocks: self.blocks.clone(),
        };
        activity.validate()?;
        validate_environments(&self.environments)?;
        Ok((activity, self.environments.clone()))
    }
}

fn validate_environments(envs: &[Microenvironment]) -> Result<()> {
    if envs.is_empty() {
        return Err(Error::EmptyMicroenvironments);
    }
    let mut seen = [false; 4];
    for env in envs {
        if !(0.0..=1.0).contains(&env.penetration) {
            return Err(Error::InvalidProfile(format!(
                "{} penetration {} outside [0, 1]",
                env.kind.name(),
                env.penetration
            )));
        }
        if !(env.air_exchange > 0.0) {
            return Err(Error::InvalidProfile(format!(
                "{} air exchange must be > 0",
                env.kind.name()
            )));
        }
        if env.emission_rate < 0.0 || !(0.0..=1.0).contains(&env.event_prob) {
            return Err(Error::InvalidProfile(format!(
                "{} source parameters invalid",
                env.kind.name()
            )));
        }
        let i = env.kind.index();
        if seen[i] {
            return Err(Error::InvalidProfile(format!(
                "{} given twice",
                env.kind.name()
            )));
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::InvalidProfile(
            "need one entry per microenvironment kind".into(),
        ));
    }
    Ok(())
}

/// Default seniors profile, calibrated so the simulated panel lands near
/// the published attenuation slope and indoor-share aggregates. Shipped as
/// an editable TOML file mirroring these values.
pub fn default_seniors_profile() -> SimProfile {
    SimProfile {
        label: "seniors".into(),
        environments: vec![
            Microenvironment {
                kind: EnvKind::HomeIndoor,
                penetration: 0.34,
                air_exchange: 0.9,
                emission_rate: 4.2,
                event_prob: 0.22,
            },
            Microenvironment {
                kind: EnvKind::OtherIndoor,
                penetration: 0.45,
                air_exchange: 1.2,
                emission_rate: 2.0,
                event_prob: 0.08,
            },
            Microenvironment {
                kind: EnvKind::Outdoor,
                penetration: 1.0,
                air_exchange: 1.0,
                emission_rate: 0.0,
                event_prob: 0.0,
            },
            Microenvironment {
                kind: EnvKind::Transit,
                penetration: 0.60,
                air_exchange: 4.0,
                emission_rate: 0.0,
                event_prob: 0.0,
            },
        ],
        dwells: vec![
            DwellEntry {
                kind: EnvKind::HomeIndoor,
                min_hours: 3,
                max_hours: 10,
            },
            DwellEntry {
                kind: EnvKind::OtherIndoor,
                min_hours: 1,
                max_hours: 3,
            },
            DwellEntry {
                kind: EnvKind::Outdoor,
                min_hours: 1,
                max_hours: 2,
            },
            DwellEntry {
                kind: EnvKind::Transit,
                min_hours: 1,
                max_hours: 1,
            },
        ],
        blocks: vec![
            HourBlock {
                start_hour: 0,
                end_hour: 6,
                transitions: [
                    [1.0, 0.0, 0.0, 0.0],
                    [1.0, 0.0, 0.0, 0.0],
                    [1.0, 0.0, 0.0, 0.0],
                    [1.0, 0.0, 0.0, 0.0],
                ],
            },
            HourBlock {
                start_hour: 6,
                end_hour: 9,
                transitions: [
                    [0.88, 0.04, 0.04, 0.04],
                    [0.50, 0.30, 0.10, 0.10],
                    [0.50, 0.10, 0.30, 0.10],
                    [0.50, 0.20, 0.10, 0.20],
                ],
            },
            HourBlock {
                start_hour: 9,
                end_hour: 17,
                transitions: [
                    [0.70, 0.12, 0.09, 0.09],
                    [0.35, 0.45, 0.10, 0.10],
                    [0.40, 0.15, 0.35, 0.10],
                    [0.45, 0.30, 0.15, 0.10],
                ],
            },
            HourBlock {
                start_hour: 17,
                end_hour: 22,
                transitions: [
                    [0.90, 0.04, 0.03, 0.03],
                    [0.60, 0.25, 0.05, 0.10],
                    [0.60, 0.10, 0.20, 0.10],
                    [0.70, 0.15, 0.05, 0.10],
                ],
            },
            HourBlock {
                start_hour: 22,
                end_hour: 24,
                transitions: [
                    [1.0, 0.0, 0.0, 0.0],
                    [1.0, 0.0, 0.0, 0.0],
                    [1.0, 0.0, 0.0, 0.0],
                    [1.0, 0.0, 0.0, 0.0],
                ],
            },
        ],
    }
}

/// One column of the exposure panel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanelColumn {
    pub district: String,
    pub replicate: u32,
}

/// Day × replicate matrix of simulated personal exposures with an exact
/// per-cell split into ambient-origin and indoor-origin components.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposurePanel {
    pub dates: Vec<NaiveDate>,
    pub columns: Vec<PanelColumn>,
    /// `exposure[day][column]`, μg/m³.
    pub exposure: Vec<Vec<f64>>,
    pub ambient_part: Vec<Vec<f64>>,
    pub indoor_part: Vec<Vec<f64>>,
    pub seed: u64,
}

impl ExposurePanel {
    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn daily_means(&self) -> Vec<f64> {
        self.exposure
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect()
    }

    /// Moment triple per day under the given third-order rule.
    pub fn daily_moments(&self, rule: Lambda3Rule) -> Result<Vec<DailyMoments>> {
        self.exposure
            .iter()
            .map(|row| sample_moments(row, rule))
            .collect()
    }

    /// Panel invariants: components nonnegative and summing to the total.
    pub fn check(&self) -> Result<()> {
        for d in 0..self.n_days() {
            for c in 0..self.n_columns() {
                let (x, a, i) = (
                    self.exposure[d][c],
                    self.ambient_part[d][c],
                    self.indoor_part[d][c],
                );
                if a < 0.0 || i < 0.0 || x < 0.0 {
                    return Err(Error::Invalid(format!(
                        "negative exposure cell at day {d}, column {c}"
                    )));
                }
                if (x - (a + i)).abs() > 1e-9 * x.abs().max(1.0) {
                    return Err(Error::Invalid(format!(
                        "decomposition mismatch at day {d}, column {c}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One mass-balance hour for an enclosed microenvironment, split into
/// ambient-origin and indoor-origin parts. `a` is the effective exchange
/// fraction for the hour (already capped at 1), `s` the emission increment.
fn step_components(amb: f64, ind: f64, ambient: f64, penetration: f64, a: f64, s: f64) -> (f64, f64) {
    let amb_next = (amb + a * (penetration * ambient - amb)).max(0.0);
    let ind_next = (ind + a * (0.0 - ind) + s).max(0.0);
    (amb_next, ind_next)
}

/// One discrete mass-balance hour: `C' = C + a·(P·C_amb − C) + S·1[event]`,
/// clamped at zero. The exchange fraction `a` is `air_exchange × 1h`,
/// capped at 1 so a single step cannot overshoot the equilibrium.
pub fn hourly_indoor_concentration(
    prev: f64,
    ambient: f64,
    env: &Microenvironment,
    source_active: bool,
) -> f64 {
    let a = env.air_exchange.min(1.0);
    let s = if source_active { env.emission_rate } else { 0.0 };
    let (amb, ind) = step_components(prev, 0.0, ambient, env.penetration, a, s);
    (amb + ind).max(0.0)
}

/// Warmer days → open windows → higher exchange. Monotone piecewise-linear
/// multiplier on the profile's air-exchange rates.
pub fn exchange_multiplier(temp_c: f64) -> f64 {
    const T_LO: f64 = 5.0;
    const T_HI: f64 = 25.0;
    const M_LO: f64 = 0.6;
    const M_HI: f64 = 1.0;
    if temp_c <= T_LO {
        M_LO
    } else if temp_c >= T_HI {
        M_HI
    } else {
        M_LO + (M_HI - M_LO) * (temp_c - T_LO) / (T_HI - T_LO)
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable per-replicate stream: depends on the master seed and the
/// (district, replicate) identity only, never on execution order.
fn replicate_seed(seed: u64, district_idx: usize, replicate: u32) -> u64 {
    splitmix64(
        seed ^ splitmix64((district_idx as u64) << 32 | replicate as u64 + 1),
    )
}

struct DistrictInputs {
    names: Vec<String>,
    /// `ambient[day][district]` after per-district averaging and
    /// all-sites fallback; only observed days retained.
    ambient: Vec<Vec<f64>>,
    dates: Vec<NaiveDate>,
    temps: Vec<f64>,
}

fn district_inputs(panel: &MonitorPanel, temps: &[f64]) -> Result<DistrictInputs> {
    if temps.len() != panel.n_days() {
        return Err(Error::Invalid(format!(
            "temperature series length {} does not match panel days {}",
            temps.len(),
            panel.n_days()
        )));
    }
    let mut names: Vec<String> = Vec::new();
    for site in &panel.sites {
        if !names.contains(&site.district) {
            names.push(site.district.clone());
        }
    }
    let fallback = spatial_average(panel);
    let observed = panel.observed_days();
    if observed.is_empty() {
        return Err(Error::Invalid("panel has no day with any observed site".into()));
    }

    let mut ambient = Vec::with_capacity(observed.len());
    let mut dates = Vec::with_capacity(observed.len());
    let mut kept_temps = Vec::with_capacity(observed.len());
    for &d in &observed {
        let mut row = Vec::with_capacity(names.len());
        for name in &names {
            let vals: Vec<f64> = panel
                .sites
                .iter()
                .enumerate()
                .filter(|(_, s)| &s.district == name)
                .filter_map(|(j, _)| panel.ambient[d][j])
                .collect();
            let value = if vals.is_empty() {
                fallback[d].expect("observed day has a spatial average")
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            row.push(value);
        }
        ambient.push(row);
        dates.push(panel.dates[d]);
        if !temps[d].is_finite() {
            return Err(Error::Invalid(format!(
                "temperature on {} is not finite",
                panel.dates[d]
            )));
        }
        kept_temps.push(temps[d]);
    }
    Ok(DistrictInputs {
        names,
        ambient,
        dates,
        temps: kept_temps,
    })
}

fn draw_categorical(rng: &mut ChaCha8Rng, row: &[f64; 4]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    3
}

/// Simulate the daily exposure panel.
///
/// `replicates` individuals are generated per exposure district. With
/// `SourceToggle::Outdoor` all indoor emission rates are forced to zero;
/// with `SourceToggle::Indoor` the ambient input is forced to zero. The
/// random streams are identical across toggles, so toggled runs share the
/// same activity sequences and source-event draws.
pub fn simulate_panel(
    panel: &MonitorPanel,
    temps: &[f64],
    profile: &ActivityProfile,
    envs: &[Microenvironment],
    replicates: usize,
    toggle: SourceToggle,
    seed: u64,
) -> Result<ExposurePanel> {
    profile.validate()?;
    validate_environments(envs)?;
    if replicates < 1 {
        return Err(Error::Invalid("replicates must be ≥ 1".into()));
    }
    let inputs = district_inputs(panel, temps)?;
    let n_days = inputs.dates.len();

    let mut env_by_kind = [envs[0]; 4];
    for env in envs {
        env_by_kind[env.kind.index()] = *env;
    }

    let n_cols = inputs.names.len() * replicates;
    let mut columns = Vec::with_capacity(n_cols);
    let mut exposure = vec![vec![0.0; n_cols]; n_days];
    let mut ambient_part = vec![vec![0.0; n_cols]; n_days];
    let mut indoor_part = vec![vec![0.0; n_cols]; n_days];

    for (district_idx, district) in inputs.names.iter().enumerate() {
        for rep in 0..replicates {
            let col = district_idx * replicates + rep;
            columns.push(PanelColumn {
                district: district.clone(),
                replicate: rep as u32,
            });
            let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(seed, district_idx, rep as u32));

            let ambient_of = |day: usize| -> f64 {
                let raw = inputs.ambient[day][district_idx];
                match toggle {
                    SourceToggle::Indoor => 0.0,
                    _ => raw,
                }
            };

            // Environment air states: (ambient-origin, indoor-origin).
            let first_amb = ambient_of(0);
            let mut state = [(0.0f64, 0.0f64); 4];
            for kind in EnvKind::ALL {
                let i = kind.index();
                state[i].0 = env_by_kind[i].penetration * first_amb;
            }
            state[EnvKind::Outdoor.index()] = (first_amb, 0.0);

            let mut current = EnvKind::HomeIndoor.index();
            let mut dwell_left = 0u32;

            for day in 0..n_days {
                let ambient = ambient_of(day);
                let mult = exchange_multiplier(inputs.temps[day]);
                let (mut amb_sum, mut ind_sum) = (0.0, 0.0);

                for hour in 0u8..24 {
                    if dwell_left == 0 {
                        let kernel = profile.kernel_for_hour(hour);
                        current = draw_categorical(&mut rng, &kernel[current]);
                        let d = profile.dwell[current];
                        dwell_left = if d.max_hours > d.min_hours {
                            rng.gen_range(d.min_hours..=d.max_hours)
                        } else {
                            d.min_hours
                        };
                    }

                    // One event draw per hour keeps streams aligned across
                    // toggles and event probabilities.
                    let u: f64 = rng.gen();
                    let event = u < env_by_kind[current].event_prob;

                    for kind in EnvKind::ALL {
                        let i = kind.index();
                        if kind == EnvKind::Outdoor {
                            state[i] = (ambient, 0.0);
                            continue;
                        }
                        let env = &env_by_kind[i];
                        let a = (env.air_exchange * mult).min(1.0);
                        let s = if i == current && event && toggle != SourceToggle::Outdoor {
                            env.emission_rate
                        } else {
                            0.0
                        };
                        state[i] = step_components(
                            state[i].0,
                            state[i].1,
                            ambient,
                            env.penetration,
                            a,
                            s,
                        );
                    }

                    amb_sum += state[current].0;
                    ind_sum += state[current].1;
                    dwell_left -= 1;
                }

                ambient_part[day][col] = amb_sum / 24.0;
                indoor_part[day][col] = ind_sum / 24.0;
                exposure[day][col] = amb_sum / 24.0 + ind_sum / 24.0;
            }
        }
    }

    Ok(ExposurePanel {
        dates: inputs.dates,
        columns,
        exposure,
        ambient_part,
        indoor_part,
        seed,
    })
}

/// Convenience wrapper taking the whole profile file.
pub fn simulate_with_profile(
    panel: &MonitorPanel,
    temps: &[f64],
    profile: &SimProfile,
    replicates: usize,
    toggle: SourceToggle,
    seed: u64,
) -> Result<ExposurePanel> {
    let (activity, envs) = profile.split()?;
    simulate_panel(panel, temps, &activity, &envs, replicates, toggle, seed)
}

/// Mean daily proportions of exposure attributable to (indoor, outdoor)
/// sources. Days with zero total exposure are skipped; if every day is
/// zero the proportions are undefined.
pub fn decompose_sources(panel: &ExposurePanel) -> Result<(f64, f64)> {
    let mut shares = Vec::with_capacity(panel.n_days());
    for day in 0..panel.n_days() {
        let total: f64 = panel.exposure[day].iter().sum();
        if total > 0.0 {
            let indoor: f64 = panel.indoor_part[day].iter().sum();
            shares.push(indoor / total);
        }
    }
    if shares.is_empty() {
        return Err(Error::ZeroTotalExposure);
    }
    let indoor = shares.iter().sum::<f64>() / shares.len() as f64;
    Ok((indoor, 1.0 - indoor))
}

/// Write the panel as `date,replicate,district,exposure,ambient_component,indoor_component`.
pub fn write_exposure_panel(panel: &ExposurePanel, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(
        out,
        "date,replicate,district,exposure,ambient_component,indoor_component"
    )?;
    for (d, date) in panel.dates.iter().enumerate() {
        for (c, col) in panel.columns.iter().enumerate() {
            writeln!(
                out,
                "{date},{},{},{},{},{}",
                col.replicate,
                col.district,
                panel.exposure[d][c],
                panel.ambient_part[d][c],
                panel.indoor_part[d][c]
            )?;
        }
    }
    Ok(())
}

/// Load a panel written by [`write_exposure_panel`]. The file must contain
/// a complete date × column grid.
pub fn load_exposure_panel(path: impl AsRef<Path>) -> Result<ExposurePanel> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut columns: Vec<PanelColumn> = Vec::new();
    let mut by_date: BTreeMap<NaiveDate, Vec<(usize, f64, f64, f64)>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let bad = |reason: &str| Error::MalformedRow {
            path: path.display().to_string(),
            line,
            reason: reason.into(),
        };
        if record.len() < 6 {
            return Err(bad("expected 6 columns"));
        }
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|_| bad("bad date"))?;
        let replicate: u32 = record[1].parse().map_err(|_| bad("bad replicate"))?;
        let district = record[2].to_string();
        let x: f64 = record[3].parse().map_err(|_| bad("bad exposure"))?;
        let a: f64 = record[4].parse().map_err(|_| bad("bad ambient component"))?;
        let i: f64 = record[5].parse().map_err(|_| bad("bad indoor component"))?;
        let key = PanelColumn {
            district,
            replicate,
        };
        let col = match columns.iter().position(|c| *c == key) {
            Some(c) => c,
            None => {
                columns.push(key);
                columns.len() - 1
            }
        };
        by_date.entry(date).or_default().push((col, x, a, i));
    }
    if by_date.is_empty() {
        return Err(Error::NoDataRows {
            path: path.display().to_string(),
        });
    }
    let n_cols = columns.len();
    let mut dates = Vec::with_capacity(by_date.len());
    let mut exposure = Vec::with_capacity(by_date.len());
    let mut ambient_part = Vec::with_capacity(by_date.len());
    let mut indoor_part = Vec::with_capacity(by_date.len());
    for (date, cells) in by_date {
        if cells.len() != n_cols {
            return Err(Error::Invalid(format!(
                "panel day {date} has {} cells, expected {n_cols}",
                cells.len()
            )));
        }
        let mut x = vec![0.0; n_cols];
        let mut a = vec![0.0; n_cols];
        let mut i_ = vec![0.0; n_cols];
        for (col, xv, av, iv) in cells {
            x[col] = xv;
            a[col] = av;
            i_[col] = iv;
        }
        dates.push(date);
        exposure.push(x);
        ambient_part.push(a);
        indoor_part.push(i_);
    }
    Ok(ExposurePanel {
        dates,
        columns,
        exposure,
        ambient_part,
        indoor_part,
        seed: 0,
    })
}
