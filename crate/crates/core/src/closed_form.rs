//! Closed-form discrete-choice models — multinomial logit on generalized
//! costs (MNL), on log generalized costs (logMNL), and a nested logit with
//! a taxi/FHV nest — plus grid-search fitting against observed demand and
//! the aggregate comparison metrics (WRMSE, R²).

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{generalized_cost, AttrTable, DemandCell, Mode, PerMode};

/// Parameters of the closed-form family: sensitivity `lambda`, value-of-time
/// coefficient `beta`, and the two nest dissimilarity parameters (ignored by
/// the non-nested kinds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormParams {
    pub lambda: f64,
    pub beta: f64,
    pub tau_taxi_fhv: f64,
    pub tau_fhv: f64,
}

impl ClosedFormParams {
    pub fn new(lambda: f64, beta: f64) -> Self {
        ClosedFormParams {
            lambda,
            beta,
            tau_taxi_fhv: 1.0,
            tau_fhv: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (value, what) in [(self.lambda, "lambda"), (self.beta, "beta")] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::invalid_parameter(format!(
                    "{what} must be finite and strictly positive, got {value}"
                )));
            }
        }
        for (value, what) in [(self.tau_taxi_fhv, "tau_taxi_fhv"), (self.tau_fhv, "tau_fhv")] {
            validate_tau(value, what)?;
        }
        Ok(())
    }

    /// The canonical nest tree carrying this parameter set's dissimilarity
    /// values.
    pub fn nest_spec(&self) -> NestSpec {
        NestSpec::taxi_fhv(self.tau_taxi_fhv, self.tau_fhv)
    }
}

fn validate_tau(value: f64, what: &str) -> Result<()> {
    if !(value.is_finite() && value > 0.0 && value <= 1.0) {
        return Err(Error::invalid_parameter(format!(
            "{what} must lie in (0, 1], got {value}"
        )));
    }
    Ok(())
}

/// Which closed-form model to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mnl,
    LogMnl,
    Nested,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ModelKind> {
        match s {
            "mnl" => Ok(ModelKind::Mnl),
            "logmnl" => Ok(ModelKind::LogMnl),
            "nested" => Ok(ModelKind::Nested),
            other => Err(Error::invalid_input(format!("unknown model kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Mnl => "mnl",
            ModelKind::LogMnl => "logmnl",
            ModelKind::Nested => "nested",
        })
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid_parameter(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    Ok(())
}

/// Normalize a vector of log-weights (−inf allowed for excluded modes) into
/// a probability simplex via max-shifted exponentials.
fn softmax_from_log(log_w: &PerMode<f64>) -> Result<PerMode<f64>> {
    let max = log_w
        .values()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NoAvailableMode);
    }
    let unnorm = log_w.map(|_, &l| {
        if l == f64::NEG_INFINITY {
            0.0
        } else {
            (l - max).exp()
        }
    });
    let total = unnorm.sum();
    Ok(unnorm.map(|_, &u| u / total))
}

/// MNL choice probabilities: `P_m ∝ exp(−λ·g_m)` over available (finite-cost)
/// modes. Unavailable modes carry exactly 0.
pub fn mnl_probs(gen_costs: &PerMode<f64>, lambda: f64) -> Result<PerMode<f64>> {
    check_lambda(lambda)?;
    let log_w = gen_costs.map(|mode, &g| {
        if g.is_nan() {
            return f64::NAN;
        }
        if g == f64::INFINITY {
            f64::NEG_INFINITY
        } else {
            let _ = mode;
            -lambda * g
        }
    });
    if log_w.values().any(|l| l.is_nan()) {
        return Err(Error::invalid_input("generalized cost is NaN".to_owned()));
    }
    softmax_from_log(&log_w)
}

/// logMNL choice probabilities: `P_m ∝ g_m^(−λ)` over available modes.
/// Available modes must have strictly positive generalized cost.
pub fn logmnl_probs(gen_costs: &PerMode<f64>, lambda: f64) -> Result<PerMode<f64>> {
    check_lambda(lambda)?;
    for (mode, &g) in gen_costs.iter() {
        if g.is_nan() {
            return Err(Error::invalid_input("generalized cost is NaN".to_owned()));
        }
        if g != f64::INFINITY && g <= 0.0 {
            return Err(Error::InvalidCost { mode, value: g });
        }
    }
    let log_w = gen_costs.map(|_, &g| {
        if g == f64::INFINITY {
            f64::NEG_INFINITY
        } else {
            -lambda * g.ln()
        }
    });
    softmax_from_log(&log_w)
}

/// A node of the nest tree: either a single mode or a nest of children with
/// a dissimilarity parameter `tau`.
#[derive(Debug, Clone, PartialEq)]
pub enum NestNode {
    Leaf(Mode),
    Nest { tau: f64, children: Vec<NestNode> },
}

/// The nesting structure for [`nested_probs`]: a forest whose leaves
/// partition the six modes. The root level behaves as a nest with scale 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NestSpec {
    pub roots: Vec<NestNode>,
}

impl NestSpec {
    /// The canonical structure: a taxi nest {taxi, FHV-subnest} with the
    /// FHV sub-nest {fhv, sfhv}; transit, walk, drive as singletons.
    pub fn taxi_fhv(tau_taxi_fhv: f64, tau_fhv: f64) -> NestSpec {
        NestSpec {
            roots: vec![
                NestNode::Nest {
                    tau: tau_taxi_fhv,
                    children: vec![
                        NestNode::Leaf(Mode::Taxi),
                        NestNode::Nest {
                            tau: tau_fhv,
                            children: vec![NestNode::Leaf(Mode::Fhv), NestNode::Leaf(Mode::Sfhv)],
                        },
                    ],
                },
                NestNode::Leaf(Mode::Transit),
                NestNode::Leaf(Mode::Walk),
                NestNode::Leaf(Mode::Drive),
            ],
        }
    }

    /// Check that taus are valid and that the leaves cover each of the six
    /// modes exactly once.
    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; crate::types::NUM_MODES];
        fn walk(node: &NestNode, seen: &mut [bool]) -> Result<()> {
            match node {
                NestNode::Leaf(mode) => {
                    if seen[mode.index()] {
                        return Err(Error::invalid_parameter(format!(
                            "nest spec mentions {mode} more than once"
                        )));
                    }
                    seen[mode.index()] = true;
                    Ok(())
                }
                NestNode::Nest { tau, children } => {
                    validate_tau(*tau, "nest tau")?;
                    if children.is_empty() {
                        return Err(Error::invalid_parameter("empty nest".to_owned()));
                    }
                    children.iter().try_for_each(|c| walk(c, seen))
                }
            }
        }
        self.roots.iter().try_for_each(|r| walk(r, &mut seen))?;
        if let Some(missing) = Mode::ALL.iter().find(|m| !seen[m.index()]) {
            return Err(Error::invalid_parameter(format!(
                "nest spec does not cover {missing}"
            )));
        }
        Ok(())
    }
}

/// Log-sum-exp with a max shift; `−inf` when every term is `−inf`.
fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// The utility a node contributes to its parent: `V_m` for a leaf, the
/// scaled inclusive value `τ·IV` for a nest.
fn node_value(node: &NestNode, v: &PerMode<f64>) -> f64 {
    match node {
        NestNode::Leaf(mode) => v[*mode],
        NestNode::Nest { tau, children } => {
            let iv = log_sum_exp(children.iter().map(|c| node_value(c, v) / tau));
            if iv == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                tau * iv
            }
        }
    }
}

/// Distribute a node's log-probability down to its leaves.
fn assign_probs(node: &NestNode, log_p: f64, v: &PerMode<f64>, out: &mut PerMode<f64>) {
    match node {
        NestNode::Leaf(mode) => out[*mode] = if log_p == f64::NEG_INFINITY { 0.0 } else { log_p.exp() },
        NestNode::Nest { tau, children } => {
            let scaled: Vec<f64> = children.iter().map(|c| node_value(c, v) / tau).collect();
            let iv = log_sum_exp(scaled.iter().copied());
            for (child, s) in children.iter().zip(&scaled) {
                let child_log_p = if log_p == f64::NEG_INFINITY || iv == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    log_p + s - iv
                };
                assign_probs(child, child_log_p, v, out);
            }
        }
    }
}

/// Nested-logit choice probabilities with utilities `V_m = −λ·g_m`.
///
/// Within a nest `k`, `P(j|k) = exp(V_j/τ_k − IV_k)` with
/// `IV_k = ln Σ_l exp(V_l/τ_k)`; across the root level,
/// `P(k) ∝ exp(τ_k·IV_k)`; leaf probabilities multiply down the tree.
/// With every `τ = 1` this reduces exactly to [`mnl_probs`].
pub fn nested_probs(gen_costs: &PerMode<f64>, lambda: f64, spec: &NestSpec) -> Result<PerMode<f64>> {
    check_lambda(lambda)?;
    spec.validate()?;
    if gen_costs.values().any(|g| g.is_nan()) {
        return Err(Error::invalid_input("generalized cost is NaN".to_owned()));
    }
    let v = gen_costs.map(|_, &g| {
        if g == f64::INFINITY {
            f64::NEG_INFINITY
        } else {
            -lambda * g
        }
    });
    let root_values: Vec<f64> = spec.roots.iter().map(|r| node_value(r, &v)).collect();
    let root_lse = log_sum_exp(root_values.iter().copied());
    if root_lse == f64::NEG_INFINITY {
        return Err(Error::NoAvailableMode);
    }
    let mut out = PerMode::splat(0.0);
    for (root, &value) in spec.roots.iter().zip(&root_values) {
        let log_p = if value == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            value - root_lse
        };
        assign_probs(root, log_p, &v, &mut out);
    }
    // Kill accumulated round-off so the output is an exact simplex.
    let total = out.sum();
    Ok(out.map(|_, &p| p / total))
}

/// Key identifying a demand cell: `(origin, destination, wage group)`.
pub type CellKey = (String, String, Option<String>);

pub fn cell_key(cell: &DemandCell) -> CellKey {
    (
        cell.origin.clone(),
        cell.destination.clone(),
        cell.wage_group.clone(),
    )
}

/// The four modes covered by the survey-style demand data.
pub const SURVEY_MODES: [Mode; 4] = [Mode::Taxi, Mode::Transit, Mode::Walk, Mode::Drive];

/// Generalized costs for one cell restricted to `mode_set`: modes outside
/// the set are excluded from the choice set via an infinite cost.
pub fn restricted_costs(
    attrs: &PerMode<crate::types::ModeAttributes>,
    wage: f64,
    beta: f64,
    mode_set: &[Mode],
) -> PerMode<f64> {
    PerMode::from_fn(|m| {
        if mode_set.contains(&m) {
            generalized_cost(&attrs[m], wage, beta)
        } else {
            f64::INFINITY
        }
    })
}

fn model_probs(
    kind: ModelKind,
    costs: &PerMode<f64>,
    params: &ClosedFormParams,
) -> Result<PerMode<f64>> {
    match kind {
        ModelKind::Mnl => mnl_probs(costs, params.lambda),
        ModelKind::LogMnl => logmnl_probs(costs, params.lambda),
        ModelKind::Nested => nested_probs(costs, params.lambda, &params.nest_spec()),
    }
}

/// Expected trips per cell and mode: cell total × model probability,
/// restricted to `mode_set` (the modes present in the demand data).
pub fn predict_table(
    demand: &[DemandCell],
    attrs: &AttrTable,
    wages: &BTreeMap<String, f64>,
    params: &ClosedFormParams,
    kind: ModelKind,
    mode_set: &[Mode],
) -> Result<BTreeMap<CellKey, PerMode<f64>>> {
    let mut missing = Vec::new();
    let mut out = BTreeMap::new();
    for cell in demand {
        let Some(row) = attrs.get(&cell.origin, &cell.destination) else {
            missing.push(format!("{}->{}", cell.origin, cell.destination));
            continue;
        };
        let wage = cell_wage(cell, wages)?;
        let costs = restricted_costs(row, wage, params.beta, mode_set);
        let probs = model_probs(kind, &costs, params)?;
        let total = cell.total_trips();
        out.insert(cell_key(cell), probs.map(|_, &p| p * total));
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::MissingAttributes(missing));
    }
    Ok(out)
}

fn cell_wage(cell: &DemandCell, wages: &BTreeMap<String, f64>) -> Result<f64> {
    let group = cell.wage_group.as_ref().ok_or_else(|| {
        Error::invalid_input(format!(
            "demand cell {}->{} lacks a wage group (required for cost computation)",
            cell.origin, cell.destination
        ))
    })?;
    wages.get(group).copied().ok_or_else(|| {
        Error::invalid_input(format!(
            "demand cell {}->{} references unknown wage group '{group}'",
            cell.origin, cell.destination
        ))
    })
}

/// One `(cell, mode)` comparison entry for [`wrmse`].
#[derive(Debug, Clone, Copy)]
pub struct WrmseEntry {
    /// Total observed trips of the entry's cell.
    pub weight: f64,
    pub pred: f64,
    pub obs: f64,
}

/// Weighted root mean squared error:
/// `sqrt(Σ w_i (pred_i − obs_i)² / Σ w_i)`.
pub fn wrmse(entries: &[WrmseEntry]) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::invalid_input("wrmse over an empty entry set"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for e in entries {
        let d = e.pred - e.obs;
        num += e.weight * d * d;
        den += e.weight;
    }
    if den <= 0.0 {
        return Err(Error::invalid_input("wrmse weights sum to zero"));
    }
    Ok((num / den).sqrt())
}

/// [`wrmse`] between a prediction table and observed demand, one entry per
/// `(cell, mode in mode_set)`, each weighted by the cell's observed total.
pub fn wrmse_tables(
    pred: &BTreeMap<CellKey, PerMode<f64>>,
    demand: &[DemandCell],
    mode_set: &[Mode],
) -> Result<f64> {
    let mut entries = Vec::with_capacity(demand.len() * mode_set.len());
    for cell in demand {
        let key = cell_key(cell);
        let p = pred.get(&key).ok_or_else(|| {
            Error::invalid_input(format!("prediction table missing cell {key:?}"))
        })?;
        let weight = cell.total_trips();
        for &m in mode_set {
            entries.push(WrmseEntry {
                weight,
                pred: p[m],
                obs: cell.trips[m],
            });
        }
    }
    wrmse(&entries)
}

/// Coefficient of determination `1 − SS_res/SS_tot` over aggregated
/// per-mode totals.
pub fn r_squared(obs_totals: &[f64], pred_totals: &[f64]) -> Result<f64> {
    if obs_totals.len() != pred_totals.len() {
        return Err(Error::invalid_input("r_squared inputs of different length"));
    }
    if obs_totals.len() < 2 {
        return Err(Error::invalid_input("r_squared needs at least two modes"));
    }
    let mean = obs_totals.iter().sum::<f64>() / obs_totals.len() as f64;
    let ss_tot: f64 = obs_totals.iter().map(|o| (o - mean) * (o - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedRSquared);
    }
    let ss_res: f64 = obs_totals
        .iter()
        .zip(pred_totals)
        .map(|(o, p)| (p - o) * (p - o))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Per-mode totals of a prediction table, in canonical order, restricted to
/// `mode_set`.
pub fn mode_totals(table: &BTreeMap<CellKey, PerMode<f64>>, mode_set: &[Mode]) -> Vec<f64> {
    mode_set
        .iter()
        .map(|&m| table.values().map(|p| p[m]).sum())
        .collect()
}

/// Per-mode totals of observed demand, restricted to `mode_set`.
pub fn demand_totals(demand: &[DemandCell], mode_set: &[Mode]) -> Vec<f64> {
    mode_set
        .iter()
        .map(|&m| demand.iter().map(|c| c.trips[m]).sum())
        .collect()
}

/// One axis of the fitting grid: `count` evenly spaced values over
/// `[start, stop]` (a single repeated value when `count == 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamGrid {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl ParamGrid {
    pub fn fixed(value: f64) -> Self {
        ParamGrid {
            start: value,
            stop: value,
            count: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid_input("parameter grid with zero points"));
        }
        if !(self.start.is_finite() && self.stop.is_finite() && self.start <= self.stop) {
            return Err(Error::invalid_input(format!(
                "parameter grid range [{}, {}] must be finite and ordered",
                self.start, self.stop
            )));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.start];
        }
        let step = (self.stop - self.start) / (self.count - 1) as f64;
        (0..self.count)
            .map(|i| self.start + step * i as f64)
            .collect()
    }
}

/// The grid over the free parameters of a model kind; the tau grids apply
/// only to the nested kind and default to the fixed value 1 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct FitGrid {
    pub lambda: ParamGrid,
    pub beta: ParamGrid,
    pub tau_taxi_fhv: ParamGrid,
    pub tau_fhv: ParamGrid,
}

impl FitGrid {
    pub fn new(lambda: ParamGrid, beta: ParamGrid) -> Self {
        FitGrid {
            lambda,
            beta,
            tau_taxi_fhv: ParamGrid::fixed(1.0),
            tau_fhv: ParamGrid::fixed(1.0),
        }
    }

    fn validate(&self) -> Result<()> {
        self.lambda.validate()?;
        self.beta.validate()?;
        self.tau_taxi_fhv.validate()?;
        self.tau_fhv.validate()
    }

    /// Enumerate the Cartesian product in lexicographic
    /// (λ, β, τ_taxi_fhv, τ_fhv) order.
    fn points(&self, kind: ModelKind) -> Vec<ClosedFormParams> {
        let (taus_a, taus_b) = match kind {
            ModelKind::Nested => (self.tau_taxi_fhv.values(), self.tau_fhv.values()),
            _ => (vec![1.0], vec![1.0]),
        };
        let mut points = Vec::new();
        for &lambda in &self.lambda.values() {
            for &beta in &self.beta.values() {
                for &tau_taxi_fhv in &taus_a {
                    for &tau_fhv in &taus_b {
                        points.push(ClosedFormParams {
                            lambda,
                            beta,
                            tau_taxi_fhv,
                            tau_fhv,
                        });
                    }
                }
            }
        }
        points
    }
}

/// Result of [`fit_grid`]: the WRMSE-minimizing parameters plus the full
/// evaluation trace in grid order.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub best: ClosedFormParams,
    pub best_wrmse: f64,
    pub trace: Vec<(ClosedFormParams, f64)>,
}

/// Exhaustive grid search minimizing WRMSE between predicted and observed
/// trips. Ties break toward the lexicographically smallest parameters,
/// independent of evaluation order.
pub fn fit_grid(
    demand: &[DemandCell],
    attrs: &AttrTable,
    wages: &BTreeMap<String, f64>,
    kind: ModelKind,
    grid: &FitGrid,
    mode_set: &[Mode],
) -> Result<FitResult> {
    grid.validate()?;
    if demand.is_empty() {
        return Err(Error::invalid_input("fit_grid with no demand cells"));
    }
    let points = grid.points(kind);
    let trace: Vec<(ClosedFormParams, f64)> = points
        .into_par_iter()
        .map(|params| {
            let pred = predict_table(demand, attrs, wages, &params, kind, mode_set)?;
            let err = wrmse_tables(&pred, demand, mode_set)?;
            Ok((params, err))
        })
        .collect::<Result<_>>()?;
    // Points are enumerated lexicographically, so keeping the first strict
    // minimum implements the tie-break.
    let (mut best, mut best_wrmse) = trace[0];
    for &(params, err) in &trace[1..] {
        if err < best_wrmse {
            best = params;
            best_wrmse = err;
        }
    }
    Ok(FitResult {
        best,
        best_wrmse,
        trace,
    })
}
