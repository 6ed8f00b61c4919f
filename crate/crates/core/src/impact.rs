//! Counterfactual impact assessment: paired scenario simulation across the
//! posterior sample set, mode-shift tabulation, translation of shifts into
//! time, mileage, fuel, CO₂, and money, per-zone/per-wage breakdowns, and
//! the attribute-resampling channel of uncertainty.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{weighted_stats, ParameterSample, WeightedStats};
use crate::mc::{
    cholesky_psd, correlation_matrix, simulate_cell, Matrix6, RngStream, SimParams,
};
use crate::types::{
    apply_scenario, generalized_cost, generalized_cost_parts, AttrTable, DemandCell, Mode,
    ModeAttributes, PerMode, Scenario, WageDist, WageTable, ZoneMap, NUM_MODES,
};

/// Physical and monetary conversion constants, all overridable in config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpactConstants {
    pub miles_per_gallon: f64,
    pub co2_kg_per_gallon: f64,
    /// Flat transit fare in dollars per trip.
    pub transit_fare: f64,
    /// Average riders per shared-FHV vehicle; a shared trip contributes
    /// `distance / occupancy` vehicle-miles.
    pub sfhv_occupancy: f64,
}

impl Default for ImpactConstants {
    fn default() -> Self {
        ImpactConstants {
            miles_per_gallon: 20.0,
            co2_kg_per_gallon: 8.0,
            transit_fare: 2.75,
            sfhv_occupancy: 2.0,
        }
    }
}

impl ImpactConstants {
    pub fn validate(&self) -> Result<()> {
        for (value, what) in [
            (self.miles_per_gallon, "miles_per_gallon"),
            (self.co2_kg_per_gallon, "co2_kg_per_gallon"),
            (self.transit_fare, "transit_fare"),
            (self.sfhv_occupancy, "sfhv_occupancy"),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::invalid_parameter(format!(
                    "{what} must be finite and strictly positive, got {value}"
                )));
            }
        }
        Ok(())
    }
}

/// Joint tabulation of simulated choices: `counts[a][b]` is the number of
/// trips (possibly fractional) choosing mode `a` under scenario A and mode
/// `b` under scenario B.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftMatrix {
    pub counts: Matrix6,
}

impl ShiftMatrix {
    pub fn zeros() -> Self {
        ShiftMatrix {
            counts: [[0.0; NUM_MODES]; NUM_MODES],
        }
    }

    /// Total trips, accumulated with compensated summation.
    pub fn total(&self) -> f64 {
        let mut acc = KahanSum::new();
        for row in &self.counts {
            for &v in row {
                acc.add(v);
            }
        }
        acc.value()
    }

    /// Per-mode trip totals under scenario A (row sums).
    pub fn totals_a(&self) -> PerMode<f64> {
        PerMode::from_fn(|m| self.counts[m.index()].iter().sum())
    }

    /// Per-mode trip totals under scenario B (column sums).
    pub fn totals_b(&self) -> PerMode<f64> {
        PerMode::from_fn(|m| self.counts.iter().map(|row| row[m.index()]).sum())
    }
}

/// How trips that chose `from_mode` under scenario B are accommodated
/// under scenario A: that slice of the matrix normalized to shares summing
/// to one. When scenario A removes `from_mode`, the shares cover the five
/// alternatives; otherwise the staying share appears at `from_mode` itself.
pub fn shift_shares(matrix: &ShiftMatrix, from_mode: Mode) -> Result<PerMode<f64>> {
    let j = from_mode.index();
    let total: f64 = matrix.counts.iter().map(|row| row[j]).sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedShares(from_mode));
    }
    Ok(PerMode::from_fn(|a| matrix.counts[a.index()][j] / total))
}

/// One unit of simulation work: an origin-destination pair restricted to a
/// single wage group, with its share of the pair's trips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedCell {
    pub origin: String,
    pub destination: String,
    pub wage_group: String,
    pub hourly_wage_usd: f64,
    pub trips: f64,
}

/// Expand demand cells to one entry per wage group: cells that already
/// carry a wage group pass through, cells without one are split across the
/// origin zone's wage distribution. Zero-trip entries are dropped.
pub fn expand_demand(
    demand: &[DemandCell],
    wages: &WageTable,
    wage_dist: &WageDist,
) -> Result<Vec<ExpandedCell>> {
    let mut out = Vec::new();
    for cell in demand {
        cell.validate()?;
        let total = cell.total_trips();
        if total == 0.0 {
            continue;
        }
        match &cell.wage_group {
            Some(group) => {
                let wage = require_wage(wages, group)?;
                out.push(ExpandedCell {
                    origin: cell.origin.clone(),
                    destination: cell.destination.clone(),
                    wage_group: group.clone(),
                    hourly_wage_usd: wage,
                    trips: total,
                });
            }
            None => {
                let dist = wage_dist.get(&cell.origin).ok_or_else(|| {
                    Error::invalid_input(format!(
                        "no wage distribution for origin zone '{}'",
                        cell.origin
                    ))
                })?;
                for (group, &share) in dist {
                    if share == 0.0 {
                        continue;
                    }
                    let wage = require_wage(wages, group)?;
                    out.push(ExpandedCell {
                        origin: cell.origin.clone(),
                        destination: cell.destination.clone(),
                        wage_group: group.clone(),
                        hourly_wage_usd: wage,
                        trips: total * share,
                    });
                }
            }
        }
    }
    Ok(out)
}

fn require_wage(wages: &WageTable, id: &str) -> Result<f64> {
    let group = wages
        .get(id)
        .ok_or_else(|| Error::invalid_input(format!("unknown wage group '{id}'")))?;
    group.validate()?;
    Ok(group.hourly_wage_usd)
}

/// Scenario-difference metrics for one set of cells and one parameter
/// sample. Time and mileage deltas follow the savings convention
/// (scenario B total minus scenario A total: positive when the
/// intervention A reduces the quantity), while revenue deltas follow the
/// gains convention (A minus B: positive when the intervention raises
/// revenue). Percentage fields are fractions of the scenario-B baseline
/// (0.01 = 1%).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpactVector {
    pub delta_time_hours: f64,
    pub delta_time_pct: f64,
    pub baseline_time_hours: f64,
    pub delta_miles: f64,
    pub delta_miles_pct: f64,
    pub baseline_miles: f64,
    pub fuel_gallons: f64,
    pub co2_kg: f64,
    /// Wage-weighted value of the time delta, in dollars.
    pub time_cost_value: f64,
    pub transit_revenue_delta: f64,
    pub taxi_revenue_delta: f64,
    /// Combined for-hire-vehicle revenue change (solo and shared).
    pub fhv_revenue_delta: f64,
}

impl ImpactVector {
    /// Look up one of the [`IMPACT_METRICS`] by name.
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "delta_time_hours" => self.delta_time_hours,
            "delta_time_pct" => self.delta_time_pct,
            "delta_miles" => self.delta_miles,
            "delta_miles_pct" => self.delta_miles_pct,
            "fuel_gallons" => self.fuel_gallons,
            "co2_kg" => self.co2_kg,
            "time_cost_value" => self.time_cost_value,
            "transit_revenue_delta" => self.transit_revenue_delta,
            "taxi_revenue_delta" => self.taxi_revenue_delta,
            "fhv_revenue_delta" => self.fhv_revenue_delta,
            _ => return None,
        })
    }

    pub fn zeros() -> Self {
        ImpactVector {
            delta_time_hours: 0.0,
            delta_time_pct: 0.0,
            baseline_time_hours: 0.0,
            delta_miles: 0.0,
            delta_miles_pct: 0.0,
            baseline_miles: 0.0,
            fuel_gallons: 0.0,
            co2_kg: 0.0,
            time_cost_value: 0.0,
            transit_revenue_delta: 0.0,
            taxi_revenue_delta: 0.0,
            fhv_revenue_delta: 0.0,
        }
    }
}

/// Vehicle-miles of one trip on `mode`: personal and for-hire vehicles at
/// full distance, shared FHV at `distance / occupancy`, walking and
/// transit at zero.
fn vehicle_miles(mode: Mode, attrs: &ModeAttributes, constants: &ImpactConstants) -> f64 {
    match mode {
        Mode::Drive | Mode::Taxi | Mode::Fhv => attrs.distance_miles,
        Mode::Sfhv => attrs.distance_miles / constants.sfhv_occupancy,
        Mode::Walk | Mode::Transit => 0.0,
    }
}

/// Translate per-cell shift matrices into impact metrics. `cells` and
/// `shifts` are aligned; both scenarios' attribute tables must cover every
/// cell.
pub fn translate_impacts(
    cells: &[ExpandedCell],
    shifts: &[Matrix6],
    attrs_a: &AttrTable,
    attrs_b: &AttrTable,
    constants: &ImpactConstants,
) -> Result<ImpactVector> {
    if cells.len() != shifts.len() {
        return Err(Error::invalid_input(format!(
            "translate_impacts got {} cells but {} shift matrices",
            cells.len(),
            shifts.len()
        )));
    }
    translate_subset(cells, shifts, 0..cells.len(), attrs_a, attrs_b, constants)
}

fn translate_subset(
    cells: &[ExpandedCell],
    shifts: &[Matrix6],
    indices: impl IntoIterator<Item = usize>,
    attrs_a: &AttrTable,
    attrs_b: &AttrTable,
    constants: &ImpactConstants,
) -> Result<ImpactVector> {
    constants.validate()?;
    let mut time_a = KahanSum::new();
    let mut time_b = KahanSum::new();
    let mut miles_a = KahanSum::new();
    let mut miles_b = KahanSum::new();
    let mut value_a = KahanSum::new();
    let mut value_b = KahanSum::new();
    let mut transit_a = KahanSum::new();
    let mut transit_b = KahanSum::new();
    let mut taxi_rev_a = KahanSum::new();
    let mut taxi_rev_b = KahanSum::new();
    let mut fhv_rev_a = KahanSum::new();
    let mut fhv_rev_b = KahanSum::new();

    for i in indices {
        let cell = &cells[i];
        let shift = &shifts[i];
        let row_a = attrs_a.require(&cell.origin, &cell.destination)?;
        let row_b = attrs_b.require(&cell.origin, &cell.destination)?;
        let trips_a: [f64; NUM_MODES] =
            std::array::from_fn(|a| shift[a].iter().sum());
        let trips_b: [f64; NUM_MODES] =
            std::array::from_fn(|b| shift.iter().map(|row| row[b]).sum());
        for mode in Mode::ALL {
            let (a, b) = (mode.index(), mode.index());
            let (ta, tb) = (trips_a[a], trips_b[b]);
            if ta > 0.0 {
                accumulate_side(
                    mode,
                    ta,
                    &row_a[mode],
                    cell,
                    constants,
                    &mut time_a,
                    &mut miles_a,
                    &mut value_a,
                    &mut transit_a,
                    &mut taxi_rev_a,
                    &mut fhv_rev_a,
                )?;
            }
            if tb > 0.0 {
                accumulate_side(
                    mode,
                    tb,
                    &row_b[mode],
                    cell,
                    constants,
                    &mut time_b,
                    &mut miles_b,
                    &mut value_b,
                    &mut transit_b,
                    &mut taxi_rev_b,
                    &mut fhv_rev_b,
                )?;
            }
        }
    }

    let delta_time_hours = time_b.value() - time_a.value();
    let baseline_time_hours = time_b.value();
    let delta_miles = miles_b.value() - miles_a.value();
    let baseline_miles = miles_b.value();
    let fuel_gallons = delta_miles / constants.miles_per_gallon;
    Ok(ImpactVector {
        delta_time_hours,
        delta_time_pct: safe_ratio(delta_time_hours, baseline_time_hours),
        baseline_time_hours,
        delta_miles,
        delta_miles_pct: safe_ratio(delta_miles, baseline_miles),
        baseline_miles,
        fuel_gallons,
        co2_kg: fuel_gallons * constants.co2_kg_per_gallon,
        time_cost_value: value_b.value() - value_a.value(),
        transit_revenue_delta: (transit_a.value() - transit_b.value()) * constants.transit_fare,
        taxi_revenue_delta: taxi_rev_a.value() - taxi_rev_b.value(),
        fhv_revenue_delta: fhv_rev_a.value() - fhv_rev_b.value(),
    })
}

#[allow(clippy::too_many_arguments)]
fn accumulate_side(
    mode: Mode,
    trips: f64,
    attrs: &ModeAttributes,
    cell: &ExpandedCell,
    constants: &ImpactConstants,
    time: &mut KahanSum,
    miles: &mut KahanSum,
    value: &mut KahanSum,
    transit: &mut KahanSum,
    taxi_rev: &mut KahanSum,
    fhv_rev: &mut KahanSum,
) -> Result<()> {
    if !attrs.is_available() {
        return Err(Error::InternalConsistency(format!(
            "cell {}->{} has {trips} trips on unavailable mode {mode}",
            cell.origin, cell.destination
        )));
    }
    time.add(trips * attrs.time_mean_hr);
    miles.add(trips * vehicle_miles(mode, attrs, constants));
    value.add(trips * cell.hourly_wage_usd * attrs.time_mean_hr);
    match mode {
        Mode::Transit => transit.add(trips),
        Mode::Taxi => taxi_rev.add(trips * attrs.cost_mean_usd),
        Mode::Fhv | Mode::Sfhv => fhv_rev.add(trips * attrs.cost_mean_usd),
        _ => {}
    }
    Ok(())
}

fn safe_ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// One posterior sample's simulated outcome: its shift matrix and impact
/// vectors per scope. `weight` is renormalized over the retained samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub params: SimParams,
    pub weight: f64,
    pub shift: ShiftMatrix,
    pub citywide: ImpactVector,
    pub per_zone: BTreeMap<String, ImpactVector>,
    pub per_wage: BTreeMap<String, ImpactVector>,
}

/// Simulate the intervention scenario A against the baseline scenario B
/// for every retained posterior sample.
///
/// Each (sample, cell) pair draws from a substream keyed by the sample's
/// index in the full posterior list and the cell's index in the expanded
/// demand, so results for a given sample do not depend on `min_weight` and
/// both scenarios share one preference draw per trip (common random
/// numbers). Samples with weight below `min_weight` are skipped and the
/// remaining weights renormalized.
#[allow(clippy::too_many_arguments)]
pub fn run_scenario(
    demand: &[DemandCell],
    attrs: &AttrTable,
    zones: &ZoneMap,
    wages: &WageTable,
    wage_dist: &WageDist,
    scenario_a: &Scenario,
    scenario_b: &Scenario,
    posterior: &[ParameterSample],
    n_reps: u32,
    min_weight: f64,
    constants: &ImpactConstants,
    seed: u64,
) -> Result<Vec<SampleOutcome>> {
    if posterior.is_empty() {
        return Err(Error::invalid_input("run_scenario needs posterior samples"));
    }
    if n_reps == 0 {
        return Err(Error::invalid_input("run_scenario needs n_reps >= 1"));
    }
    if !(min_weight.is_finite() && (0.0..1.0).contains(&min_weight)) {
        return Err(Error::invalid_input(format!(
            "min_weight must lie in [0, 1), got {min_weight}"
        )));
    }
    constants.validate()?;
    let attrs_a = apply_scenario(attrs, zones, scenario_a)?;
    let attrs_b = apply_scenario(attrs, zones, scenario_b)?;
    let cells = expand_demand(demand, wages, wage_dist)?;
    if cells.is_empty() {
        return Err(Error::invalid_input("run_scenario needs nonzero demand"));
    }

    let mut rows_a = Vec::with_capacity(cells.len());
    let mut rows_b = Vec::with_capacity(cells.len());
    for cell in &cells {
        rows_a.push(attrs_a.require(&cell.origin, &cell.destination)?);
        rows_b.push(attrs_b.require(&cell.origin, &cell.destination)?);
    }
    let mut demand_total = KahanSum::new();
    for cell in &cells {
        demand_total.add(cell.trips);
    }
    let demand_total = demand_total.value();

    let retained: Vec<usize> = (0..posterior.len())
        .filter(|&i| posterior[i].weight >= min_weight && posterior[i].weight > 0.0)
        .collect();
    let weight_total: f64 = retained.iter().map(|&i| posterior[i].weight).sum();
    if retained.is_empty() || !(weight_total > 0.0) {
        return Err(Error::DegeneratePosterior);
    }

    let stream = RngStream::new(seed);
    retained
        .par_iter()
        .map(|&sample_index| {
            let sample = &posterior[sample_index];
            let params = sample.params;
            params.validate()?;
            let mut shifts = vec![[[0.0; NUM_MODES]; NUM_MODES]; cells.len()];
            for (cell_index, cell) in cells.iter().enumerate() {
                let wage = cell.hourly_wage_usd;
                let g_a = PerMode::from_fn(|m| {
                    generalized_cost(&rows_a[cell_index][m], wage, params.beta)
                });
                let g_b = PerMode::from_fn(|m| {
                    generalized_cost(&rows_b[cell_index][m], wage, params.beta)
                });
                let mut rng =
                    stream.substream(&[0x5C11, sample_index as u64, cell_index as u64]);
                shifts[cell_index] =
                    simulate_cell(cell.trips, &g_a, &g_b, &params, n_reps, &mut rng)?;
            }

            let mut shift = ShiftMatrix::zeros();
            let mut comp = [[0.0; NUM_MODES]; NUM_MODES];
            for m in &shifts {
                for a in 0..NUM_MODES {
                    for b in 0..NUM_MODES {
                        kahan_add(&mut shift.counts[a][b], &mut comp[a][b], m[a][b]);
                    }
                }
            }
            let total = shift.total();
            if (total - demand_total).abs() > 1e-9 * demand_total.max(1.0) {
                return Err(Error::InternalConsistency(format!(
                    "shift total {total} does not conserve demand total {demand_total}"
                )));
            }

            let citywide = translate_impacts(&cells, &shifts, &attrs_a, &attrs_b, constants)?;
            let mut zone_indices: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            let mut wage_indices: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, cell) in cells.iter().enumerate() {
                zone_indices.entry(&cell.origin).or_default().push(i);
                wage_indices.entry(&cell.wage_group).or_default().push(i);
            }
            let mut per_zone = BTreeMap::new();
            for (zone, idx) in zone_indices {
                let v = translate_subset(
                    &cells,
                    &shifts,
                    idx.iter().copied(),
                    &attrs_a,
                    &attrs_b,
                    constants,
                )?;
                per_zone.insert(zone.to_owned(), v);
            }
            let mut per_wage = BTreeMap::new();
            for (group, idx) in wage_indices {
                let v = translate_subset(
                    &cells,
                    &shifts,
                    idx.iter().copied(),
                    &attrs_a,
                    &attrs_b,
                    constants,
                )?;
                per_wage.insert(group.to_owned(), v);
            }

            Ok(SampleOutcome {
                params,
                weight: sample.weight / weight_total,
                shift,
                citywide,
                per_zone,
                per_wage,
            })
        })
        .collect()
}

/// Posterior summary of one metric across samples.
pub type ImpactStats = BTreeMap<String, WeightedStats>;

/// The full posterior-aggregated report: weighted statistics per metric
/// for the citywide scope and each per-zone/per-wage scope, plus the
/// posterior-mean shift matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactReport {
    pub citywide: ImpactStats,
    pub per_zone: BTreeMap<String, ImpactStats>,
    pub per_wage: BTreeMap<String, ImpactStats>,
    pub shift_matrix: ShiftMatrix,
}

impl ImpactReport {
    /// Scale every absolute metric and the shift matrix by `factor`
    /// (desk-scale demand to citywide ridership); percentage metrics are
    /// scale-invariant and pass through unchanged.
    pub fn scaled(&self, factor: f64) -> Result<ImpactReport> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::invalid_parameter(format!(
                "scale factor must be positive and finite, got {factor}"
            )));
        }
        let scale_stats = |stats: &ImpactStats| -> ImpactStats {
            stats
                .iter()
                .map(|(name, s)| {
                    let f = if name.ends_with("_pct") { 1.0 } else { factor };
                    (
                        name.clone(),
                        WeightedStats {
                            mean: s.mean * f,
                            std: s.std * f,
                            ci95_low: s.ci95_low * f,
                            ci95_high: s.ci95_high * f,
                        },
                    )
                })
                .collect()
        };
        let scale_scopes = |scopes: &BTreeMap<String, ImpactStats>| {
            scopes
                .iter()
                .map(|(k, v)| (k.clone(), scale_stats(v)))
                .collect()
        };
        let mut shift_matrix = self.shift_matrix.clone();
        for row in shift_matrix.counts.iter_mut() {
            for v in row.iter_mut() {
                *v *= factor;
            }
        }
        Ok(ImpactReport {
            citywide: scale_stats(&self.citywide),
            per_zone: scale_scopes(&self.per_zone),
            per_wage: scale_scopes(&self.per_wage),
            shift_matrix,
        })
    }
}

/// Metric names aggregated per scope, in report order.
pub const IMPACT_METRICS: [&str; 10] = [
    "delta_time_hours",
    "delta_time_pct",
    "delta_miles",
    "delta_miles_pct",
    "fuel_gallons",
    "co2_kg",
    "time_cost_value",
    "transit_revenue_delta",
    "taxi_revenue_delta",
    "fhv_revenue_delta",
];


fn stats_over(
    outcomes: &[SampleOutcome],
    weights: &[f64],
    pick: impl Fn(&SampleOutcome) -> Option<&ImpactVector>,
) -> Result<ImpactStats> {
    let mut stats = ImpactStats::new();
    for metric in IMPACT_METRICS {
        let values: Vec<f64> = outcomes
            .iter()
            .map(|o| {
                pick(o)
                    .and_then(|v| v.metric(metric))
                    .ok_or_else(|| {
                        Error::InternalConsistency(
                            "scope missing from one posterior sample's outcome".to_owned(),
                        )
                    })
            })
            .collect::<Result<_>>()?;
        stats.insert(metric.to_owned(), weighted_stats(&values, weights)?);
    }
    Ok(stats)
}

/// Aggregate per-sample outcomes into posterior-weighted statistics per
/// metric and scope, plus the weighted-mean shift matrix.
pub fn aggregate_posterior(outcomes: &[SampleOutcome]) -> Result<ImpactReport> {
    if outcomes.is_empty() {
        return Err(Error::invalid_input(
            "aggregate_posterior needs at least one sample outcome",
        ));
    }
    let weights: Vec<f64> = outcomes.iter().map(|o| o.weight).collect();
    let weight_total: f64 = weights.iter().sum();
    if !(weight_total > 0.0) {
        return Err(Error::DegeneratePosterior);
    }

    let citywide = stats_over(outcomes, &weights, |o| Some(&o.citywide))?;
    let mut per_zone = BTreeMap::new();
    for zone in outcomes[0].per_zone.keys() {
        per_zone.insert(
            zone.clone(),
            stats_over(outcomes, &weights, |o| o.per_zone.get(zone))?,
        );
    }
    let mut per_wage = BTreeMap::new();
    for group in outcomes[0].per_wage.keys() {
        per_wage.insert(
            group.clone(),
            stats_over(outcomes, &weights, |o| o.per_wage.get(group))?,
        );
    }

    let mut shift_matrix = ShiftMatrix::zeros();
    for o in outcomes {
        let w = o.weight / weight_total;
        for a in 0..NUM_MODES {
            for b in 0..NUM_MODES {
                shift_matrix.counts[a][b] += w * o.shift.counts[a][b];
            }
        }
    }
    Ok(ImpactReport {
        citywide,
        per_zone,
        per_wage,
        shift_matrix,
    })
}

/// Per-mode trip totals under attribute resampling: mean and population
/// standard deviation across resamples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataUncertainty {
    pub mean: PerMode<f64>,
    pub std: PerMode<f64>,
    pub n_resamples: u32,
}

/// The attribute-noise channel of uncertainty: redraw every cell's travel
/// times and costs from normal distributions truncated at zero, re-run the
/// single-scenario choice simulation, and summarize per-mode trip totals
/// across resamples.
///
/// Preference-noise draws are keyed by cell only, so they are shared
/// across resamples: with all attribute standard deviations zero, every
/// resample reproduces identical totals and the reported std is exactly
/// zero.
#[allow(clippy::too_many_arguments)]
pub fn data_uncertainty(
    demand: &[DemandCell],
    attrs: &AttrTable,
    wages: &WageTable,
    wage_dist: &WageDist,
    params: &SimParams,
    n_reps: u32,
    n_resamples: u32,
    seed: u64,
) -> Result<DataUncertainty> {
    if n_reps == 0 || n_resamples == 0 {
        return Err(Error::invalid_input(
            "data_uncertainty needs n_reps >= 1 and n_resamples >= 1",
        ));
    }
    params.validate()?;
    let l = cholesky_psd(&correlation_matrix(params))?;
    let cells = expand_demand(demand, wages, wage_dist)?;
    if cells.is_empty() {
        return Err(Error::invalid_input("data_uncertainty needs nonzero demand"));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for cell in &cells {
        rows.push(attrs.require(&cell.origin, &cell.destination)?);
    }

    let stream = RngStream::new(seed);
    let totals: Vec<PerMode<f64>> = (0..n_resamples)
        .into_par_iter()
        .map(|resample| {
            let mut totals = PerMode::splat(0.0);
            for (cell_index, cell) in cells.iter().enumerate() {
                let mut attr_rng =
                    stream.substream(&[0xA77B, resample as u64, cell_index as u64]);
                let g = PerMode::from_fn(|m| {
                    resampled_cost(&rows[cell_index][m], cell.hourly_wage_usd, params.beta, &mut attr_rng)
                });
                let avail = PerMode::from_fn(|m| g[m].is_finite());
                let mut eps_rng = stream.substream(&[0xE125, cell_index as u64]);
                let mut counts = [0u64; NUM_MODES];
                for _ in 0..n_reps {
                    let eps = crate::mc::draw_epsilon(params, &l, &mut eps_rng);
                    let mode = crate::mc::choose(&g, &eps, &avail)?;
                    counts[mode.index()] += 1;
                }
                let scale = cell.trips / n_reps as f64;
                for m in Mode::ALL {
                    totals[m] += counts[m.index()] as f64 * scale;
                }
            }
            Ok(totals)
        })
        .collect::<Result<_>>()?;

    let mean = PerMode::from_fn(|m| exact_mean(totals.iter().map(|t| t[m])));
    let std = PerMode::from_fn(|m| exact_std(totals.iter().map(|t| t[m])));
    Ok(DataUncertainty {
        mean,
        std,
        n_resamples,
    })
}

/// Generalized cost with time and cost redrawn from truncated normals; an
/// unavailable mode stays at `+inf` and zero-std attributes stay exact.
fn resampled_cost(
    attrs: &ModeAttributes,
    wage: f64,
    beta: f64,
    rng: &mut impl Rng,
) -> f64 {
    if !attrs.is_available() {
        return f64::INFINITY;
    }
    let time = truncated_normal(attrs.time_mean_hr, attrs.time_std_hr, rng);
    let cost = truncated_normal(attrs.cost_mean_usd, attrs.cost_std_usd, rng);
    generalized_cost_parts(beta, wage, time, cost)
}

/// Draw from N(mean, std) truncated at zero by rejection; with std 0 the
/// mean is returned without consuming randomness.
fn truncated_normal(mean: f64, std: f64, rng: &mut impl Rng) -> f64 {
    if std == 0.0 {
        return mean;
    }
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let v = mean + std * z;
        if v >= 0.0 {
            return v;
        }
    }
}

/// Mean that is exact when all values are identical (so zero-noise
/// resampling reports exactly the common value).
fn exact_mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = KahanSum::new();
    let mut n = 0u64;
    for v in values {
        min = min.min(v);
        max = max.max(v);
        sum.add(v);
        n += 1;
    }
    if min == max {
        min
    } else {
        sum.value() / n as f64
    }
}

/// Population standard deviation that is exactly zero when all values are
/// identical.
fn exact_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mean = exact_mean(values.clone());
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = KahanSum::new();
    let mut n = 0u64;
    for v in values {
        min = min.min(v);
        max = max.max(v);
        let d = v - mean;
        sum.add(d * d);
        n += 1;
    }
    if min == max {
        0.0
    } else {
        (sum.value() / n as f64).sqrt()
    }
}

/// Compensated (Kahan) accumulator.
#[derive(Debug, Clone, Copy, Default)]
struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    fn new() -> Self {
        KahanSum::default()
    }

    fn add(&mut self, v: f64) {
        kahan_add(&mut self.sum, &mut self.comp, v);
    }

    fn value(&self) -> f64 {
        self.sum
    }
}

fn kahan_add(sum: &mut f64, comp: &mut f64, v: f64) {
    let y = v - *comp;
    let t = *sum + y;
    *comp = (t - *sum) - y;
    *sum = t;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{WageGroup, Zone};
    use statrs::distribution::{Continuous, ContinuousCDF, Normal};

    fn zone_map(entries: &[(&str, &str)]) -> ZoneMap {
        entries
            .iter()
            .map(|&(id, borough)| {
                (
                    id.to_owned(),
                    Zone {
                        id: id.to_owned(),
                        borough: borough.to_owned(),
                        name: format!("zone {id}"),
                    },
                )
            })
            .collect()
    }

    fn wage_table(entries: &[(&str, f64)]) -> WageTable {
        entries
            .iter()
            .map(|&(id, wage)| {
                (
                    id.to_owned(),
                    WageGroup {
                        id: id.to_owned(),
                        hourly_wage_usd: wage,
                    },
                )
            })
            .collect()
    }

    fn attr(time: f64, cost: f64, dist: f64) -> ModeAttributes {
        ModeAttributes {
            time_mean_hr: time,
            time_std_hr: 0.0,
            cost_mean_usd: cost,
            cost_std_usd: 0.0,
            distance_miles: dist,
        }
    }

    fn row(entries: &[(Mode, ModeAttributes)]) -> PerMode<ModeAttributes> {
        let mut r = PerMode::splat(ModeAttributes::unavailable());
        for &(m, a) in entries {
            r[m] = a;
        }
        r
    }

    fn cell(origin: &str, dest: &str, group: Option<&str>, trips: f64) -> DemandCell {
        let mut t = PerMode::splat(0.0);
        t[Mode::Walk] = trips;
        DemandCell {
            origin: origin.to_owned(),
            destination: dest.to_owned(),
            wage_group: group.map(str::to_owned),
            trips: t,
        }
    }

    fn psample(params: SimParams, weight: f64) -> ParameterSample {
        ParameterSample {
            params,
            loglik_stage1: 0.0,
            loglik_stage2: 0.0,
            weight,
        }
    }

    fn ecell(origin: &str, group: &str, wage: f64, trips: f64) -> ExpandedCell {
        ExpandedCell {
            origin: origin.to_owned(),
            destination: origin.to_owned(),
            wage_group: group.to_owned(),
            hourly_wage_usd: wage,
            trips,
        }
    }

    #[test]
    fn constants_validate() {
        assert!(ImpactConstants::default().validate().is_ok());
        for bad in [0.0, -1.0, f64::INFINITY, f64::NAN] {
            let mut c = ImpactConstants::default();
            c.miles_per_gallon = bad;
            assert!(c.validate().is_err());
            let mut c = ImpactConstants::default();
            c.sfhv_occupancy = bad;
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn fuel_arithmetic_from_extra_miles() {
        // One trip that drives 940,000 miles under the baseline B and
        // walks under A: the mileage delta reproduces the headline
        // fuel and CO₂ figures exactly at the default constants.
        let mut attrs = AttrTable::new();
        attrs.insert(
            "z1".into(),
            "z1".into(),
            row(&[
                (Mode::Walk, attr(1.0, 0.0, 0.0)),
                (Mode::Drive, attr(1.0, 3.0, 940_000.0)),
            ]),
        );
        let cells = vec![ecell("z1", "g1", 30.0, 1.0)];
        let mut shift = [[0.0; NUM_MODES]; NUM_MODES];
        shift[Mode::Walk.index()][Mode::Drive.index()] = 1.0;
        let v = translate_impacts(
            &cells,
            &[shift],
            &attrs,
            &attrs,
            &ImpactConstants::default(),
        )
        .unwrap();
        assert_eq!(v.delta_miles, 940_000.0);
        assert_eq!(v.fuel_gallons, 47_000.0);
        assert_eq!(v.co2_kg, 376_000.0);
        assert!((v.co2_kg / 1000.0 - 375.0).abs() / 375.0 < 0.01);
    }

    #[test]
    fn shared_trip_counts_half_mileage() {
        // One trip on a 4-mile shared FHV ride under B, transit under A:
        // +2 vehicle-miles, +0.1 gallons, +0.8 kg CO₂.
        let mut attrs = AttrTable::new();
        attrs.insert(
            "z1".into(),
            "z1".into(),
            row(&[
                (Mode::Transit, attr(0.5, 2.75, 4.0)),
                (Mode::Sfhv, attr(0.4, 6.0, 4.0)),
            ]),
        );
        let cells = vec![ecell("z1", "g1", 30.0, 1.0)];
        let mut shift = [[0.0; NUM_MODES]; NUM_MODES];
        shift[Mode::Transit.index()][Mode::Sfhv.index()] = 1.0;
        let v = translate_impacts(
            &cells,
            &[shift],
            &attrs,
            &attrs,
            &ImpactConstants::default(),
        )
        .unwrap();
        assert_eq!(v.delta_miles, 2.0);
        assert_eq!(v.fuel_gallons, 0.1);
        assert_eq!(v.co2_kg, 0.8);
    }

    #[test]
    fn zero_shift_zero_impacts() {
        let mut attrs = AttrTable::new();
        attrs.insert(
            "z1".into(),
            "z1".into(),
            row(&[(Mode::Walk, attr(1.0, 0.0, 0.0))]),
        );
        let cells = vec![ecell("z1", "g1", 30.0, 1.0)];
        let shift = [[0.0; NUM_MODES]; NUM_MODES];
        let v = translate_impacts(
            &cells,
            &[shift],
            &attrs,
            &attrs,
            &ImpactConstants::default(),
        )
        .unwrap();
        for metric in IMPACT_METRICS {
            assert_eq!(v.metric(metric).unwrap(), 0.0, "{metric}");
        }
    }

    #[test]
    fn chosen_unavailable_mode_is_rejected() {
        let mut attrs = AttrTable::new();
        attrs.insert(
            "z1".into(),
            "z1".into(),
            row(&[(Mode::Walk, attr(1.0, 0.0, 0.0))]),
        );
        let cells = vec![ecell("z1", "g1", 30.0, 1.0)];
        let mut shift = [[0.0; NUM_MODES]; NUM_MODES];
        shift[Mode::Taxi.index()][Mode::Walk.index()] = 1.0;
        let err = translate_impacts(
            &cells,
            &[shift],
            &attrs,
            &attrs,
            &ImpactConstants::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InternalConsistency(_)));
    }

    #[test]
    fn expand_demand_splits_unlabeled_cells() {
        let wages = wage_table(&[("g1", 20.0), ("g2", 40.0)]);
        let mut dist = WageDist::new();
        dist.insert(
            "z1".into(),
            [("g1".to_owned(), 0.25), ("g2".to_owned(), 0.75)]
                .into_iter()
                .collect(),
        );
        let demand = vec![
            cell("z1", "z1", None, 100.0),
            cell("z1", "z1", Some("g2"), 50.0),
            cell("z1", "z1", Some("g1"), 0.0),
        ];
        let cells = expand_demand(&demand, &wages, &dist).unwrap();
        assert_eq!(cells.len(), 3);
        assert_eq!(cells[0].wage_group, "g1");
        assert_eq!(cells[0].trips, 25.0);
        assert_eq!(cells[1].wage_group, "g2");
        assert_eq!(cells[1].trips, 75.0);
        assert_eq!(cells[2].trips, 50.0);
        assert_eq!(cells[2].hourly_wage_usd, 40.0);

        let missing = vec![cell("z9", "z1", None, 1.0)];
        assert!(expand_demand(&missing, &wages, &dist).is_err());
        let unknown_group = vec![cell("z1", "z1", Some("g9"), 1.0)];
        assert!(expand_demand(&unknown_group, &wages, &dist).is_err());
    }

    /// A two-zone fixture with all six modes on the intra-zone pair and a
    /// four-mode inter-zone pair.
    fn fixture() -> (Vec<DemandCell>, AttrTable, ZoneMap, WageTable, WageDist) {
        let zones = zone_map(&[("z1", "Manhattan"), ("z2", "Brooklyn")]);
        let wages = wage_table(&[("g1", 20.0), ("g2", 40.0)]);
        let mut dist = WageDist::new();
        dist.insert(
            "z1".into(),
            [("g1".to_owned(), 0.5), ("g2".to_owned(), 0.5)]
                .into_iter()
                .collect(),
        );
        dist.insert(
            "z2".into(),
            [("g1".to_owned(), 1.0)].into_iter().collect(),
        );
        let mut attrs = AttrTable::new();
        attrs.insert(
            "z1".into(),
            "z1".into(),
            row(&[
                (Mode::Taxi, attr(0.30, 12.0, 2.5)),
                (Mode::Transit, attr(0.55, 2.75, 2.5)),
                (Mode::Walk, attr(0.9, 0.0, 2.2)),
                (Mode::Drive, attr(0.35, 9.0, 2.5)),
                (Mode::Fhv, attr(0.32, 10.5, 2.5)),
                (Mode::Sfhv, attr(0.45, 6.5, 2.5)),
            ]),
        );
        attrs.insert(
            "z1".into(),
            "z2".into(),
            row(&[
                (Mode::Taxi, attr(0.55, 24.0, 6.0)),
                (Mode::Transit, attr(0.8, 2.75, 6.0)),
                (Mode::Drive, attr(0.6, 15.0, 6.0)),
                (Mode::Sfhv, attr(0.75, 12.0, 6.0)),
            ]),
        );
        let demand = vec![
            cell("z1", "z1", None, 600.0),
            cell("z1", "z2", Some("g1"), 400.0),
        ];
        (demand, attrs, zones, wages, dist)
    }

    #[test]
    fn identical_scenarios_null_out_exactly() {
        let (demand, attrs, zones, wages, dist) = fixture();
        let scenario = Scenario::surcharge(&[(Mode::Taxi, 2.5)], None);
        let posterior = vec![
            psample(SimParams::new(0.7, 0.4, 0.3, 0.6).unwrap(), 0.4),
            psample(SimParams::new(0.9, 0.6, 0.1, 0.8).unwrap(), 0.6),
        ];
        let outcomes = run_scenario(
            &demand,
            &attrs,
            &zones,
            &wages,
            &dist,
            &scenario,
            &scenario,
            &posterior,
            500,
            0.0,
            &ImpactConstants::default(),
            99,
        )
        .unwrap();
        assert_eq!(outcomes.len(), 2);
        for o in &outcomes {
            for a in 0..NUM_MODES {
                for b in 0..NUM_MODES {
                    if a != b {
                        assert_eq!(o.shift.counts[a][b], 0.0);
                    }
                }
            }
            for metric in IMPACT_METRICS {
                assert_eq!(o.citywide.metric(metric).unwrap(), 0.0, "{metric}");
                for v in o.per_zone.values().chain(o.per_wage.values()) {
                    assert_eq!(v.metric(metric).unwrap(), 0.0, "{metric}");
                }
            }
        }
        let report = aggregate_posterior(&outcomes).unwrap();
        for (metric, stats) in &report.citywide {
            assert_eq!(stats.mean, 0.0, "{metric}");
            assert_eq!(stats.std, 0.0, "{metric}");
        }
    }

    #[test]
    fn zero_sigma_is_deterministic_reassignment() {
        // With no preference noise every trip picks the generalized-cost
        // minimum; removing that mode moves all trips to the runner-up.
        let zones = zone_map(&[("z1", "Manhattan")]);
        let wages = wage_table(&[("g1", 20.0)]);
        let mut dist = WageDist::new();
        dist.insert("z1".into(), [("g1".to_owned(), 1.0)].into_iter().collect());
        let mut attrs = AttrTable::new();
        attrs.insert(
            "z1".into(),
            "z1".into(),
            row(&[
                (Mode::Walk, attr(0.5, 0.0, 0.0)),   // g = 0.7*20*0.5 = 7
                (Mode::Drive, attr(0.2, 4.0, 2.0)),  // g = 6.8  (best)
                (Mode::Taxi, attr(0.25, 5.0, 2.0)),  // g = 8.5
            ]),
        );
        let demand = vec![cell("z1", "z1", None, 60.0)];
        let posterior = vec![psample(SimParams::new(0.7, 0.0, 0.0, 0.0).unwrap(), 1.0)];
        let outcomes = run_scenario(
            &demand,
            &attrs,
            &zones,
            &wages,
            &dist,
            &Scenario::removal([Mode::Drive]),
            &Scenario::empty(),
            &posterior,
            200,
            0.0,
            &ImpactConstants::default(),
            7,
        )
        .unwrap();
        let shift = &outcomes[0].shift;
        assert_eq!(shift.counts[Mode::Walk.index()][Mode::Drive.index()], 60.0);
        assert_eq!(shift.total(), 60.0);
        let shares = shift_shares(shift, Mode::Drive).unwrap();
        assert_eq!(shares[Mode::Walk], 1.0);
    }

    #[test]
    fn marginals_match_two_mode_analytic_probability() {
        // With two available modes and independent noise the choice
        // probability has the closed form Φ(ln(g2/g1)/(σ√2)).
        let zones = zone_map(&[("z1", "Manhattan")]);
        let wages = wage_table(&[("g1", 20.0)]);
        let mut dist = WageDist::new();
        dist.insert("z1".into(), [("g1".to_owned(), 1.0)].into_iter().collect());
        let mut attrs = AttrTable::new();
        attrs.insert(
            "z1".into(),
            "z1".into(),
            row(&[
                (Mode::Walk, attr(0.5, 0.0, 0.0)),  // g = 7
                (Mode::Drive, attr(0.2, 4.0, 2.0)), // g = 6.8 baseline, 7.8 with fee
            ]),
        );
        let demand = vec![cell("z1", "z1", None, 1.0)];
        let sigma = 0.5;
        let posterior = vec![psample(SimParams::new(0.7, sigma, 0.0, 0.0).unwrap(), 1.0)];
        let n_reps = 200_000;
        let outcomes = run_scenario(
            &demand,
            &attrs,
            &zones,
            &wages,
            &dist,
            &Scenario::surcharge(&[(Mode::Drive, 1.0)], None),
            &Scenario::empty(),
            &posterior,
            n_reps,
            0.0,
            &ImpactConstants::default(),
            13,
        )
        .unwrap();
        let shift = &outcomes[0].shift;
        let norm = Normal::new(0.0, 1.0).unwrap();
        let p_drive = |g_walk: f64, g_drive: f64| {
            norm.cdf((g_walk / g_drive).ln() / (sigma * std::f64::consts::SQRT_2))
        };
        let tol = 3.0 * (0.25 / n_reps as f64).sqrt();
        let drive_b = shift.totals_b()[Mode::Drive];
        let drive_a = shift.totals_a()[Mode::Drive];
        assert!((drive_b - p_drive(7.0, 6.8)).abs() < tol, "B {drive_b}");
        assert!((drive_a - p_drive(7.0, 7.8)).abs() < tol, "A {drive_a}");
    }

    #[test]
    fn conservation_consistency_and_determinism() {
        let (demand, attrs, zones, wages, dist) = fixture();
        let scenario_a = Scenario::removal([Mode::Sfhv]);
        let posterior = vec![
            psample(SimParams::new(0.7, 0.4, 0.3, 0.6).unwrap(), 0.25),
            psample(SimParams::new(0.8, 0.5, 0.2, 0.7).unwrap(), 0.75),
        ];
        let run = || {
            run_scenario(
                &demand,
                &attrs,
                &zones,
                &wages,
                &dist,
                &scenario_a,
                &Scenario::empty(),
                &posterior,
                400,
                0.0,
                &ImpactConstants::default(),
                2024,
            )
            .unwrap()
        };
        let outcomes = run();
        assert_eq!(run(), outcomes);
        for o in &outcomes {
            assert!((o.shift.total() - 1000.0).abs() <= 1e-9 * 1000.0);
            for v in std::iter::once(&o.citywide)
                .chain(o.per_zone.values())
                .chain(o.per_wage.values())
            {
                let residual = v.delta_time_pct * v.baseline_time_hours - v.delta_time_hours;
                assert!(residual.abs() <= 1e-9 * v.delta_time_hours.abs().max(1e-12));
                let residual = v.delta_miles_pct * v.baseline_miles - v.delta_miles;
                assert!(residual.abs() <= 1e-9 * v.delta_miles.abs().max(1e-12));
            }
        }
        // Scope totals cover the citywide totals.
        for o in &outcomes {
            let zone_time: f64 = o.per_zone.values().map(|v| v.delta_time_hours).sum();
            assert!((zone_time - o.citywide.delta_time_hours).abs() < 1e-9);
            let wage_time: f64 = o.per_wage.values().map(|v| v.delta_time_hours).sum();
            assert!((wage_time - o.citywide.delta_time_hours).abs() < 1e-9);
        }

        // Pruning keeps per-sample results identical and renormalizes.
        let pruned = run_scenario(
            &demand,
            &attrs,
            &zones,
            &wages,
            &dist,
            &scenario_a,
            &Scenario::empty(),
            &posterior,
            400,
            0.5,
            &ImpactConstants::default(),
            2024,
        )
        .unwrap();
        assert_eq!(pruned.len(), 1);
        assert_eq!(pruned[0].shift, outcomes[1].shift);
        assert_eq!(pruned[0].citywide, outcomes[1].citywide);
        assert_eq!(pruned[0].weight, 1.0);
    }

    #[test]
    fn surcharge_cannot_gain_surcharged_trips() {
        let (demand, attrs, zones, wages, dist) = fixture();
        let posterior = vec![psample(SimParams::new(0.7, 0.4, 0.3, 0.6).unwrap(), 1.0)];
        let outcomes = run_scenario(
            &demand,
            &attrs,
            &zones,
            &wages,
            &dist,
            &Scenario::surcharge(&[(Mode::Taxi, 2.5)], None),
            &Scenario::empty(),
            &posterior,
            20_000,
            0.0,
            &ImpactConstants::default(),
            5,
        )
        .unwrap();
        let shift = &outcomes[0].shift;
        // Under common random numbers a draw choosing taxi at the higher
        // price also chooses it at the lower one, so the dominance is
        // per-draw exact; the slack only covers summation rounding.
        assert!(
            shift.totals_a()[Mode::Taxi] <= shift.totals_b()[Mode::Taxi] + 1e-9 * 1000.0,
            "taxi trips rose under a taxi surcharge"
        );
    }

    #[test]
    fn shift_share_edge_cases() {
        let mut m = ShiftMatrix::zeros();
        m.counts[Mode::Taxi.index()][Mode::Sfhv.index()] = 42.0;
        let shares = shift_shares(&m, Mode::Sfhv).unwrap();
        assert_eq!(shares[Mode::Taxi], 1.0);
        assert_eq!(shares.sum(), 1.0);

        let mut m = ShiftMatrix::zeros();
        for mode in [Mode::Taxi, Mode::Transit, Mode::Walk, Mode::Drive, Mode::Fhv] {
            m.counts[mode.index()][Mode::Sfhv.index()] = 7.0;
        }
        let shares = shift_shares(&m, Mode::Sfhv).unwrap();
        for mode in [Mode::Taxi, Mode::Transit, Mode::Walk, Mode::Drive, Mode::Fhv] {
            assert_eq!(shares[mode], 0.2);
        }
        assert_eq!(shares[Mode::Sfhv], 0.0);

        assert!(matches!(
            shift_shares(&ShiftMatrix::zeros(), Mode::Taxi),
            Err(Error::UndefinedShares(Mode::Taxi))
        ));
    }

    #[test]
    fn shares_enumerate_second_choices() {
        // Two deterministic cells whose runner-up modes differ: displaced
        // trips split according to the per-cell second choices.
        let zones = zone_map(&[("z1", "Manhattan"), ("z2", "Brooklyn")]);
        let wages = wage_table(&[("g1", 20.0)]);
        let mut dist = WageDist::new();
        for z in ["z1", "z2"] {
            dist.insert(z.into(), [("g1".to_owned(), 1.0)].into_iter().collect());
        }
        let mut attrs = AttrTable::new();
        // Cell 1: sfhv best (g=5), runner-up taxi (6), walk 10.
        attrs.insert(
            "z1".into(),
            "z1".into(),
            row(&[
                (Mode::Sfhv, attr(0.0, 5.0, 2.0)),
                (Mode::Taxi, attr(0.0, 6.0, 2.0)),
                (Mode::Walk, attr(0.5, 0.0, 0.0)),
            ]),
        );
        // Cell 2: sfhv best (g=5), runner-up walk (6), taxi 8.
        attrs.insert(
            "z2".into(),
            "z2".into(),
            row(&[
                (Mode::Sfhv, attr(0.0, 5.0, 2.0)),
                (Mode::Taxi, attr(0.0, 8.0, 2.0)),
                (Mode::Walk, attr(0.3, 0.0, 0.0)),
            ]),
        );
        let demand = vec![cell("z1", "z1", None, 30.0), cell("z2", "z2", None, 30.0)];
        let posterior = vec![psample(SimParams::new(1.0, 0.0, 0.0, 0.0).unwrap(), 1.0)];
        let outcomes = run_scenario(
            &demand,
            &attrs,
            &zones,
            &wages,
            &dist,
            &Scenario::removal([Mode::Sfhv]),
            &Scenario::empty(),
            &posterior,
            100,
            0.0,
            &ImpactConstants::default(),
            3,
        )
        .unwrap();
        let shares = shift_shares(&outcomes[0].shift, Mode::Sfhv).unwrap();
        assert_eq!(shares[Mode::Taxi], 0.5);
        assert_eq!(shares[Mode::Walk], 0.5);
    }

    #[test]
    fn aggregate_hand_weights() {
        let (demand, attrs, zones, wages, dist) = fixture();
        let posterior = vec![
            psample(SimParams::new(0.7, 0.4, 0.3, 0.6).unwrap(), 0.25),
            psample(SimParams::new(0.8, 0.5, 0.2, 0.7).unwrap(), 0.75),
        ];
        let mut outcomes = run_scenario(
            &demand,
            &attrs,
            &zones,
            &wages,
            &dist,
            &Scenario::removal([Mode::Sfhv]),
            &Scenario::empty(),
            &posterior,
            300,
            0.0,
            &ImpactConstants::default(),
            11,
        )
        .unwrap();
        // Overwrite one metric with hand values to pin the aggregation.
        outcomes[0].citywide.delta_miles = 1.0;
        outcomes[1].citywide.delta_miles = 5.0;
        let report = aggregate_posterior(&outcomes).unwrap();
        let s = &report.citywide["delta_miles"];
        assert!((s.mean - 4.0).abs() < 1e-12);
        assert!((s.std - 3.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.ci95_low, 1.0);
        assert_eq!(s.ci95_high, 5.0);

        // A metric identical across samples has zero spread.
        outcomes[1].citywide.delta_miles = 1.0;
        let report = aggregate_posterior(&outcomes).unwrap();
        let s = &report.citywide["delta_miles"];
        assert_eq!((s.mean, s.std), (1.0, 0.0));
        assert_eq!((s.ci95_low, s.ci95_high), (1.0, 1.0));

        // Degenerate single-sample posterior: stds zero, intervals collapse.
        let single = &outcomes[..1];
        let report = aggregate_posterior(single).unwrap();
        for stats in report.citywide.values() {
            assert_eq!(stats.std, 0.0);
            assert_eq!(stats.ci95_low, stats.mean);
            assert_eq!(stats.ci95_high, stats.mean);
        }

        // The weighted-mean shift matrix preserves the demand total.
        let report = aggregate_posterior(&outcomes).unwrap();
        assert!((report.shift_matrix.total() - 1000.0).abs() <= 1e-9 * 1000.0);
    }

    #[test]
    fn data_uncertainty_zero_stds_is_exact() {
        let (demand, attrs, zones, wages, dist) = fixture();
        let _ = zones;
        let params = SimParams::new(0.7, 0.4, 0.3, 0.6).unwrap();
        let u = data_uncertainty(&demand, &attrs, &wages, &dist, &params, 2000, 6, 17).unwrap();
        for m in Mode::ALL {
            assert_eq!(u.std[m], 0.0, "{m}");
        }
        assert!((u.mean.sum() - 1000.0).abs() <= 1e-9 * 1000.0);
    }

    #[test]
    fn data_uncertainty_small_noise_stays_small() {
        let (demand, mut attrs, _zones, wages, dist) = fixture();
        let mut noisy = AttrTable::new();
        for ((o, d), r) in attrs.iter() {
            noisy.insert(
                o.clone(),
                d.clone(),
                r.map(|_, a| {
                    let mut a = *a;
                    if a.is_available() {
                        a.time_std_hr = 0.01;
                        a.cost_std_usd = 0.05;
                    }
                    a
                }),
            );
        }
        attrs = noisy;
        let params = SimParams::new(0.7, 0.4, 0.3, 0.6).unwrap();
        let u = data_uncertainty(&demand, &attrs, &wages, &dist, &params, 5000, 60, 17).unwrap();
        let total = u.mean.sum();
        for m in Mode::ALL {
            assert!(u.std[m] < 0.02 * total, "{m}: {}", u.std[m]);
        }
    }

    #[test]
    fn data_uncertainty_matches_propagation_oracle() {
        // Two independent modes, cost noise on one: the std of the noisy
        // mode's total is T·φ(u)·s/(c·σ√2) to first order.
        let wages = wage_table(&[("g1", 20.0)]);
        let mut dist = WageDist::new();
        dist.insert("z1".into(), [("g1".to_owned(), 1.0)].into_iter().collect());
        let mut attrs = AttrTable::new();
        let mut drive = attr(0.0, 10.5, 1.0);
        drive.cost_std_usd = 0.3;
        attrs.insert(
            "z1".into(),
            "z1".into(),
            row(&[(Mode::Walk, attr(0.0, 10.0, 0.0)), (Mode::Drive, drive)]),
        );
        let demand = vec![cell("z1", "z1", None, 1000.0)];
        let sigma = 0.5;
        let params = SimParams::new(0.7, sigma, 0.0, 0.0).unwrap();
        let u =
            data_uncertainty(&demand, &attrs, &wages, &dist, &params, 20_000, 400, 23).unwrap();
        let norm = Normal::new(0.0, 1.0).unwrap();
        let z = (10.0f64 / 10.5).ln() / (sigma * std::f64::consts::SQRT_2);
        let phi = norm.pdf(z);
        let oracle = 1000.0 * phi * 0.3 / (10.5 * sigma * std::f64::consts::SQRT_2);
        assert!(
            (u.std[Mode::Drive] - oracle).abs() < 0.2 * oracle,
            "std {} vs oracle {oracle}",
            u.std[Mode::Drive]
        );
        // The two totals sum to the fixed trip count, so their spreads match.
        assert!((u.std[Mode::Walk] - u.std[Mode::Drive]).abs() < 1e-6 * oracle);
    }

    #[test]
    fn scaling_multiplies_absolutes_and_preserves_percentages() {
        let stats = |v: f64| WeightedStats {
            mean: v,
            std: v / 10.0,
            ci95_low: v - 1.0,
            ci95_high: v + 1.0,
        };
        let mut citywide = ImpactStats::new();
        citywide.insert("delta_time_hours".into(), stats(100.0));
        citywide.insert("delta_time_pct".into(), stats(0.02));
        let mut shift = ShiftMatrix::zeros();
        shift.counts[0][1] = 3.0;
        let report = ImpactReport {
            citywide: citywide.clone(),
            per_zone: [("z1".to_owned(), citywide.clone())].into_iter().collect(),
            per_wage: BTreeMap::new(),
            shift_matrix: shift,
        };
        let scaled = report.scaled(50.0).unwrap();
        assert_eq!(scaled.citywide["delta_time_hours"].mean, 5000.0);
        assert_eq!(scaled.citywide["delta_time_hours"].std, 500.0);
        assert_eq!(scaled.citywide["delta_time_pct"], citywide["delta_time_pct"]);
        assert_eq!(scaled.per_zone["z1"]["delta_time_hours"].ci95_high, 5050.0);
        assert_eq!(scaled.shift_matrix.counts[0][1], 150.0);
        assert!(report.scaled(0.0).is_err());
        assert!(report.scaled(f64::NAN).is_err());
    }
}

