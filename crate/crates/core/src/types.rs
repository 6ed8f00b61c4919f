//! Core domain types: travel modes, per-mode containers, zone and wage
//! metadata, mode attributes, demand cells, and policy scenarios.
//!
//! All per-mode data uses a fixed canonical mode order so that arrays,
//! matrices, and serialized artifacts line up without further bookkeeping.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Travel modes in canonical index order.
///
/// The order is load-bearing: probability vectors, correlation matrices,
/// network outputs, and the shift matrix all use it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Yellow and green street-hail taxis.
    Taxi,
    /// Public transit (subway and bus).
    Transit,
    Walk,
    /// Private car.
    Drive,
    /// Solo for-hire vehicles (app-dispatched, single party).
    Fhv,
    /// Shared for-hire vehicles (app-dispatched, pooled).
    Sfhv,
}

pub const NUM_MODES: usize = 6;

impl Mode {
    pub const ALL: [Mode; NUM_MODES] = [
        Mode::Taxi,
        Mode::Transit,
        Mode::Walk,
        Mode::Drive,
        Mode::Fhv,
        Mode::Sfhv,
    ];

    /// Canonical index of this mode, 0..6.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Inverse of [`Mode::index`].
    pub fn from_index(i: usize) -> Option<Mode> {
        Mode::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Taxi => "taxi",
            Mode::Transit => "transit",
            Mode::Walk => "walk",
            Mode::Drive => "drive",
            Mode::Fhv => "fhv",
            Mode::Sfhv => "sfhv",
        }
    }

    /// True for the three for-hire modes that share unobserved ride-hail
    /// preference (the taxi nest).
    pub fn in_taxi_nest(self) -> bool {
        matches!(self, Mode::Taxi | Mode::Fhv | Mode::Sfhv)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "taxi" => Ok(Mode::Taxi),
            "transit" => Ok(Mode::Transit),
            "walk" => Ok(Mode::Walk),
            "drive" => Ok(Mode::Drive),
            "fhv" => Ok(Mode::Fhv),
            "sfhv" => Ok(Mode::Sfhv),
            other => Err(Error::invalid_input(format!("unknown mode '{other}'"))),
        }
    }
}

/// Fixed-size container holding one value per mode in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerMode<T>(pub [T; NUM_MODES]);

impl<T> PerMode<T> {
    pub fn from_fn(mut f: impl FnMut(Mode) -> T) -> Self {
        PerMode(Mode::ALL.map(&mut f))
    }

    pub fn map<U>(&self, mut f: impl FnMut(Mode, &T) -> U) -> PerMode<U> {
        PerMode::from_fn(|m| f(m, &self[m]))
    }

    /// Iterate `(mode, &value)` pairs in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (Mode, &T)> {
        Mode::ALL.iter().map(move |&m| (m, &self.0[m.index()]))
    }

    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.0.iter()
    }

    pub fn as_array(&self) -> &[T; NUM_MODES] {
        &self.0
    }
}

impl<T: Copy> PerMode<T> {
    pub fn splat(value: T) -> Self {
        PerMode([value; NUM_MODES])
    }
}

impl<T: Default> Default for PerMode<T> {
    fn default() -> Self {
        PerMode::from_fn(|_| T::default())
    }
}

impl<T> std::ops::Index<Mode> for PerMode<T> {
    type Output = T;

    fn index(&self, mode: Mode) -> &T {
        &self.0[mode.index()]
    }
}

impl<T> std::ops::IndexMut<Mode> for PerMode<T> {
    fn index_mut(&mut self, mode: Mode) -> &mut T {
        &mut self.0[mode.index()]
    }
}

impl PerMode<f64> {
    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// A taxi zone: the spatial unit for origins and destinations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Zone {
    pub id: String,
    pub borough: String,
    pub name: String,
}

/// Zones keyed by id.
pub type ZoneMap = BTreeMap<String, Zone>;

/// Wage groups keyed by id.
pub type WageTable = BTreeMap<String, WageGroup>;

/// Per-zone wage composition: zone id → wage group id → share of trips.
pub type WageDist = BTreeMap<String, BTreeMap<String, f64>>;

/// An income stratum with its representative hourly wage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WageGroup {
    pub id: String,
    pub hourly_wage_usd: f64,
}

impl WageGroup {
    pub fn validate(&self) -> Result<()> {
        if !(self.hourly_wage_usd.is_finite() && self.hourly_wage_usd > 0.0) {
            return Err(Error::invalid_input(format!(
                "wage group '{}' must have a positive finite hourly wage, got {}",
                self.id, self.hourly_wage_usd
            )));
        }
        Ok(())
    }
}

/// Travel attributes of one mode on one origin-destination pair.
///
/// An unavailable mode is encoded with infinite time, cost, and distance
/// means and zero standard deviations; every consumer treats the infinite
/// sentinel as "not offered" rather than "very expensive".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeAttributes {
    pub time_mean_hr: f64,
    pub time_std_hr: f64,
    pub cost_mean_usd: f64,
    pub cost_std_usd: f64,
    pub distance_miles: f64,
}

impl ModeAttributes {
    /// The sentinel row for a mode that is not offered on a pair.
    pub fn unavailable() -> Self {
        ModeAttributes {
            time_mean_hr: f64::INFINITY,
            time_std_hr: 0.0,
            cost_mean_usd: f64::INFINITY,
            cost_std_usd: 0.0,
            distance_miles: f64::INFINITY,
        }
    }

    pub fn is_available(&self) -> bool {
        self.time_mean_hr.is_finite()
    }

    /// Check the field-level invariants, returning a human-readable
    /// description of the first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let nonneg = |v: f64, what: &str| -> std::result::Result<(), String> {
            if v.is_nan() || v < 0.0 {
                Err(format!("{what} must be non-negative, got {v}"))
            } else {
                Ok(())
            }
        };
        nonneg(self.time_mean_hr, "time mean")?;
        nonneg(self.time_std_hr, "time std")?;
        nonneg(self.cost_mean_usd, "cost mean")?;
        nonneg(self.cost_std_usd, "cost std")?;
        nonneg(self.distance_miles, "distance")?;
        if self.is_available() {
            if !self.cost_mean_usd.is_finite() || !self.distance_miles.is_finite() {
                return Err("available mode must have finite cost and distance".into());
            }
        } else {
            if self.cost_mean_usd.is_finite() || self.distance_miles.is_finite() {
                return Err(
                    "unavailable mode (infinite time) must also have infinite cost and distance"
                        .into(),
                );
            }
            if self.time_std_hr != 0.0 || self.cost_std_usd != 0.0 {
                return Err("unavailable mode must have zero stds".into());
            }
        }
        Ok(())
    }
}

/// Observed demand on one origin-destination pair: trip counts per mode,
/// optionally broken out by wage group (survey data carries the split,
/// trip-record data does not). Counts may be fractional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandCell {
    pub origin: String,
    pub destination: String,
    pub wage_group: Option<String>,
    pub trips: PerMode<f64>,
}

impl DemandCell {
    pub fn total_trips(&self) -> f64 {
        self.trips.sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (mode, &t) in self.trips.iter() {
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::invalid_input(format!(
                    "demand cell {}->{} has invalid {mode} trip count {t}",
                    self.origin, self.destination
                )));
            }
        }
        Ok(())
    }
}

/// A policy intervention on the attribute table: remove modes from service
/// and/or add fixed surcharges to mode costs, optionally restricted to
/// trips originating in one borough. Removal wins when a mode appears in
/// both lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Scenario {
    pub removed_modes: BTreeSet<Mode>,
    /// Fixed fee per trip, in dollars, keyed by mode.
    pub surcharges: BTreeMap<Mode, f64>,
    /// When set, surcharges apply only to rows whose origin zone lies in
    /// this borough; removals always apply everywhere.
    pub surcharge_origin_filter: Option<String>,
}

impl Scenario {
    /// The identity scenario: no removals, no surcharges.
    pub fn empty() -> Self {
        Scenario::default()
    }

    pub fn removal(modes: impl IntoIterator<Item = Mode>) -> Self {
        Scenario {
            removed_modes: modes.into_iter().collect(),
            ..Scenario::default()
        }
    }

    pub fn surcharge(fees: &[(Mode, f64)], origin_filter: Option<&str>) -> Self {
        Scenario {
            surcharges: fees.iter().copied().collect(),
            surcharge_origin_filter: origin_filter.map(str::to_owned),
            ..Scenario::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.removed_modes.is_empty() && self.surcharges.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (&mode, &fee) in &self.surcharges {
            if !(fee.is_finite() && fee >= 0.0) {
                return Err(Error::invalid_parameter(format!(
                    "surcharge for {mode} must be finite and non-negative, got {fee}"
                )));
            }
        }
        Ok(())
    }

    /// Merge another scenario into this one: removals union, surcharges add.
    /// Only meaningful when the origin filters agree.
    pub fn merge(&self, other: &Scenario) -> Scenario {
        let mut merged = self.clone();
        merged.removed_modes.extend(other.removed_modes.iter().copied());
        for (&mode, &fee) in &other.surcharges {
            *merged.surcharges.entry(mode).or_insert(0.0) += fee;
        }
        if merged.surcharge_origin_filter.is_none() {
            merged.surcharge_origin_filter = other.surcharge_origin_filter.clone();
        }
        merged
    }
}

/// Generalized cost of one mode in dollars: the value of travel time plus
/// the out-of-pocket cost, `g = beta * wage * time + cost`.
///
/// `beta` is the value-of-time coefficient (fraction of the hourly wage),
/// `wage` the traveler's hourly wage in dollars per hour. Unavailable
/// modes map to `+inf` regardless of `beta * wage` (avoiding the
/// `0 * inf` trap).
pub fn generalized_cost(attrs: &ModeAttributes, wage: f64, beta: f64) -> f64 {
    if !attrs.is_available() {
        return f64::INFINITY;
    }
    beta * wage * attrs.time_mean_hr + attrs.cost_mean_usd
}

/// [`generalized_cost`] with the mean time/cost replaced by resampled
/// values (used by data-uncertainty resampling). Overrides must be
/// non-negative; an unavailable mode stays at `+inf` regardless.
pub fn generalized_cost_with_overrides(
    attrs: &ModeAttributes,
    wage: f64,
    beta: f64,
    time_override_hr: Option<f64>,
    cost_override_usd: Option<f64>,
) -> Result<f64> {
    for (value, what) in [(time_override_hr, "time"), (cost_override_usd, "cost")] {
        if let Some(v) = value {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid_input(format!(
                    "{what} override must be finite and non-negative, got {v}"
                )));
            }
        }
    }
    if !attrs.is_available() {
        return Ok(f64::INFINITY);
    }
    let time = time_override_hr.unwrap_or(attrs.time_mean_hr);
    let cost = cost_override_usd.unwrap_or(attrs.cost_mean_usd);
    Ok(beta * wage * time + cost)
}

/// Generalized cost from explicit time/cost values (used when the simulator
/// has already sampled noisy attributes).
pub fn generalized_cost_parts(beta: f64, wage: f64, time_hr: f64, cost_usd: f64) -> f64 {
    if !time_hr.is_finite() || !cost_usd.is_finite() {
        return f64::INFINITY;
    }
    beta * wage * time_hr + cost_usd
}

/// Mode attributes for every origin-destination pair, keyed by zone ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttrTable {
    rows: BTreeMap<(String, String), PerMode<ModeAttributes>>,
}

impl AttrTable {
    pub fn new() -> Self {
        AttrTable::default()
    }

    pub fn insert(&mut self, origin: String, destination: String, attrs: PerMode<ModeAttributes>) {
        self.rows.insert((origin, destination), attrs);
    }

    pub fn get(&self, origin: &str, destination: &str) -> Option<&PerMode<ModeAttributes>> {
        self.rows.get(&(origin.to_owned(), destination.to_owned()))
    }

    /// Like [`AttrTable::get`] but failing loudly with the missing key.
    pub fn require(&self, origin: &str, destination: &str) -> Result<&PerMode<ModeAttributes>> {
        self.get(origin, destination)
            .ok_or_else(|| Error::MissingAttributes(vec![format!("{origin}->{destination}")]))
    }

    /// Iterate `((origin, destination), attrs)` in sorted key order.
    pub fn iter(&self) -> impl Iterator<Item = (&(String, String), &PerMode<ModeAttributes>)> {
        self.rows.iter()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Apply a scenario to an attribute table: removed modes become
/// unavailable everywhere; surcharged modes gain their fixed fee on
/// `cost_mean` for rows whose origin borough matches the filter (all rows
/// when no filter). The input table is not mutated.
pub fn apply_scenario(table: &AttrTable, zones: &ZoneMap, scenario: &Scenario) -> Result<AttrTable> {
    scenario.validate()?;
    let mut out = AttrTable::new();
    for ((origin, destination), attrs) in table.iter() {
        let borough = &zones
            .get(origin)
            .ok_or_else(|| Error::MissingZone(origin.clone()))?
            .borough;
        let surcharge_applies = scenario
            .surcharge_origin_filter
            .as_ref()
            .map_or(true, |filter| filter == borough);
        let mapped = attrs.map(|mode, a| {
            if scenario.removed_modes.contains(&mode) {
                return ModeAttributes::unavailable();
            }
            let mut out = *a;
            if surcharge_applies && out.is_available() {
                if let Some(&fee) = scenario.surcharges.get(&mode) {
                    out.cost_mean_usd += fee;
                }
            }
            out
        });
        out.insert(origin.clone(), destination.clone(), mapped);
    }
    Ok(out)
}
