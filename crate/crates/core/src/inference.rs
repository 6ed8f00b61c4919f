//! Two-stage Bayesian parameter inference: log-normal prior percentile
//! sampling over (β, σ) and a stratified lattice over the correlation
//! triangle, survey-based and trip-record-based log-likelihood stages,
//! posterior weighting via log-sum-exp, and weighted summary statistics.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::closed_form::{restricted_costs, SURVEY_MODES};
use crate::error::{Error, Result};
use crate::io::{format_float, parse_float};
use crate::mc::{estimate_probs_mc, scaled_log_costs, splitmix64, SimParams};
use crate::surrogate::MlpModel;
use crate::types::{AttrTable, DemandCell, Mode, PerMode, WageDist, WageTable};

/// Smallest probability admitted when smoothing is enabled.
pub const SMOOTHING_FLOOR: f64 = 1e-12;

/// Log-normal priors for β and σ plus grid resolution. `n_corr` is the
/// side of the stratified lattice over the correlation triangle, so the
/// full prior grid holds `n_beta × n_sigma × n_corr²` samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    pub ln_mu_beta: f64,
    pub sd_beta: f64,
    pub ln_mu_sigma: f64,
    pub sd_sigma: f64,
    pub n_beta: usize,
    pub n_sigma: usize,
    pub n_corr: usize,
}

impl Default for PriorSpec {
    /// β centered so that P(1/3 < β < 1) = 68%; σ centered on ln 2 with a
    /// one-sd upper quantile of exactly 1.
    fn default() -> Self {
        let half_ln3 = 3.0_f64.ln() / 2.0;
        let ln_ln2 = 2.0_f64.ln().ln();
        PriorSpec {
            ln_mu_beta: -half_ln3,
            sd_beta: half_ln3,
            ln_mu_sigma: ln_ln2,
            sd_sigma: ln_ln2.abs(),
            n_beta: 10,
            n_sigma: 10,
            n_corr: 10,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sd_beta.is_finite() && self.sd_beta > 0.0)
            || !(self.sd_sigma.is_finite() && self.sd_sigma > 0.0)
        {
            return Err(Error::invalid_parameter(
                "prior standard deviations must be positive".to_owned(),
            ));
        }
        if !self.ln_mu_beta.is_finite() || !self.ln_mu_sigma.is_finite() {
            return Err(Error::invalid_parameter(
                "prior log-means must be finite".to_owned(),
            ));
        }
        if self.n_beta == 0 || self.n_sigma == 0 || self.n_corr == 0 {
            return Err(Error::invalid_parameter(
                "prior grid sizes must be at least 1".to_owned(),
            ));
        }
        Ok(())
    }

    /// Quantile of the β prior.
    pub fn beta_quantile(&self, p: f64) -> f64 {
        log_normal_quantile(self.ln_mu_beta, self.sd_beta, p)
    }

    /// Quantile of the σ prior.
    pub fn sigma_quantile(&self, p: f64) -> f64 {
        log_normal_quantile(self.ln_mu_sigma, self.sd_sigma, p)
    }

    fn beta_values(&self) -> Vec<f64> {
        percentile_points(self.n_beta)
            .map(|p| self.beta_quantile(p))
            .collect()
    }

    fn sigma_values(&self) -> Vec<f64> {
        percentile_points(self.n_sigma)
            .map(|p| self.sigma_quantile(p))
            .collect()
    }

    /// The stratified correlation lattice: midpoints (u, v) of an
    /// `n_corr × n_corr` grid mapped by the triangle quantile transform
    /// corTFS = 1 − √(1 − u), corFS = corTFS + v·(1 − corTFS), which is
    /// uniform over {0 ≤ corTFS < corFS ≤ 1}.
    fn corr_values(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.n_corr * self.n_corr);
        for u in percentile_points(self.n_corr) {
            let a = 1.0 - (1.0 - u).sqrt();
            for v in percentile_points(self.n_corr) {
                let b = a + v * (1.0 - a);
                out.push((a, b));
            }
        }
        out
    }
}

fn percentile_points(n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| (i as f64 + 0.5) / n as f64)
}

fn log_normal_quantile(ln_mu: f64, sd: f64, p: f64) -> f64 {
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(p);
    (ln_mu + sd * z).exp()
}

/// Equal-weight prior samples: the full Cartesian product of percentile
/// points for β and σ with the stratified correlation lattice, in
/// lexicographic (β, σ, corTFS, corFS) order.
pub fn prior_samples(spec: &PriorSpec) -> Result<Vec<SimParams>> {
    spec.validate()?;
    let betas = spec.beta_values();
    let sigmas = spec.sigma_values();
    let corrs = spec.corr_values();
    let mut out = Vec::with_capacity(betas.len() * sigmas.len() * corrs.len());
    for &beta in &betas {
        for &sigma in &sigmas {
            for &(a, b) in &corrs {
                out.push(SimParams::new(beta, sigma, a, b)?);
            }
        }
    }
    Ok(out)
}

/// Snap arbitrary parameters to the nearest point of the prior lattice
/// (per-axis nearest for β and σ, nearest pair for the correlations).
pub fn nearest_lattice_point(spec: &PriorSpec, params: &SimParams) -> Result<SimParams> {
    spec.validate()?;
    let nearest = |values: &[f64], target: f64| -> f64 {
        values
            .iter()
            .copied()
            .min_by(|a, b| {
                (a - target)
                    .abs()
                    .total_cmp(&(b - target).abs())
                    .then(a.total_cmp(b))
            })
            .unwrap()
    };
    let beta = nearest(&spec.beta_values(), params.beta);
    let sigma = nearest(&spec.sigma_values(), params.sigma);
    let (a, b) = spec
        .corr_values()
        .into_iter()
        .min_by(|(a1, b1), (a2, b2)| {
            let d1 = (a1 - params.cor_tfs).powi(2) + (b1 - params.cor_fs).powi(2);
            let d2 = (a2 - params.cor_tfs).powi(2) + (b2 - params.cor_fs).powi(2);
            d1.total_cmp(&d2).then(a1.total_cmp(a2)).then(b1.total_cmp(b2))
        })
        .unwrap();
    SimParams::new(beta, sigma, a, b)
}

/// Source of choice probabilities for the likelihood stages: either the
/// Monte Carlo oracle or the trained surrogate network.
pub trait ProbBackend: Sync {
    fn probs(
        &self,
        scaled_log_costs: &PerMode<f64>,
        cor_tfs: f64,
        cor_fs: f64,
    ) -> Result<PerMode<f64>>;
}

/// Monte Carlo oracle backend. Each evaluation derives its seed from the
/// master seed and the bit patterns of the inputs, so results are
/// reproducible and independent of call order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleBackend {
    pub draws: u64,
    pub seed: u64,
}

impl ProbBackend for OracleBackend {
    fn probs(
        &self,
        scaled_log_costs: &PerMode<f64>,
        cor_tfs: f64,
        cor_fs: f64,
    ) -> Result<PerMode<f64>> {
        let mut key = splitmix64(self.seed ^ 0x0BAC_1E5E_ED00_D1CE);
        for &x in scaled_log_costs
            .values()
            .chain([cor_tfs, cor_fs].iter())
        {
            key = splitmix64(key ^ x.to_bits());
        }
        estimate_probs_mc(scaled_log_costs, cor_tfs, cor_fs, self.draws, key)
    }
}

/// Surrogate network backend.
pub struct SurrogateBackend<'a> {
    pub model: &'a MlpModel,
}

impl ProbBackend for SurrogateBackend<'_> {
    fn probs(
        &self,
        scaled_log_costs: &PerMode<f64>,
        cor_tfs: f64,
        cor_fs: f64,
    ) -> Result<PerMode<f64>> {
        self.model.predict(scaled_log_costs, cor_tfs, cor_fs)
    }
}

/// One prior point with its stage log-likelihoods and posterior weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterSample {
    pub params: SimParams,
    pub loglik_stage1: f64,
    pub loglik_stage2: f64,
    pub weight: f64,
}

impl ParameterSample {
    pub fn joint_loglik(&self) -> f64 {
        self.loglik_stage1 + self.loglik_stage2
    }
}

fn require_zero_trips(cell: &DemandCell, modes: &[Mode], context: &str) -> Result<()> {
    for &m in modes {
        if cell.trips[m] != 0.0 {
            return Err(Error::invalid_input(format!(
                "{context}: cell {}->{} carries trips on '{m}', which is outside its mode set",
                cell.origin, cell.destination
            )));
        }
    }
    Ok(())
}

fn wage_of(wages: &WageTable, id: &str) -> Result<f64> {
    wages
        .get(id)
        .map(|g| g.hourly_wage_usd)
        .ok_or_else(|| Error::invalid_input(format!("unknown wage group '{id}'")))
}

fn log_term(p: f64, smoothing: bool) -> f64 {
    let p = if smoothing { p.max(SMOOTHING_FLOOR) } else { p };
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Stage-1 log-likelihood: survey demand over {taxi, transit, walk,
/// drive} against choice probabilities evaluated with fhv/sfhv removed
/// from the universe. Correlations act only inside the taxi nest, which
/// here has a single member, so the backend is queried at the
/// independence point (0, 0); the result depends on (β, σ) alone.
pub fn stage1_loglik(
    params: &SimParams,
    demand4: &[DemandCell],
    attrs: &AttrTable,
    wages: &WageTable,
    backend: &dyn ProbBackend,
    smoothing: bool,
) -> Result<f64> {
    params.validate()?;
    let mut total = 0.0;
    for cell in demand4 {
        require_zero_trips(cell, &[Mode::Fhv, Mode::Sfhv], "survey demand")?;
        let group = cell.wage_group.as_deref().ok_or_else(|| {
            Error::invalid_input(format!(
                "survey demand cell {}->{} lacks a wage group",
                cell.origin, cell.destination
            ))
        })?;
        let wage = wage_of(wages, group)?;
        let row = attrs.require(&cell.origin, &cell.destination)?;
        let costs = restricted_costs(row, wage, params.beta, &SURVEY_MODES);
        let x = scaled_log_costs(&costs, params.sigma)?;
        let probs = backend.probs(&x, 0.0, 0.0)?;
        for m in SURVEY_MODES {
            let r = cell.trips[m];
            if r > 0.0 {
                total += r * log_term(probs[m], smoothing);
            }
        }
    }
    Ok(total)
}

/// Stage-2 log-likelihood: trip-record demand over the taxi nest {taxi,
/// fhv, sfhv}, scored by conditional probabilities P_m / P_TFHV with the
/// full six-mode universe. Cells carry no wage dimension, so the choice
/// probabilities are marginalized over the origin zone's wage composition
/// before conditioning; trips generated by a wage-mixture population then
/// peak the likelihood at the generating parameters.
pub fn stage2_loglik(
    params: &SimParams,
    demand_tlc: &[DemandCell],
    attrs: &AttrTable,
    wages: &WageTable,
    wage_dist: &WageDist,
    backend: &dyn ProbBackend,
    smoothing: bool,
) -> Result<f64> {
    params.validate()?;
    let mut total = 0.0;
    for cell in demand_tlc {
        require_zero_trips(
            cell,
            &[Mode::Transit, Mode::Walk, Mode::Drive],
            "trip-record demand",
        )?;
        if cell.wage_group.is_some() {
            return Err(Error::invalid_input(format!(
                "trip-record demand cell {}->{} must not carry a wage group",
                cell.origin, cell.destination
            )));
        }
        let shares = wage_dist
            .get(&cell.origin)
            .ok_or_else(|| Error::MissingZone(cell.origin.clone()))?;
        let row = attrs.require(&cell.origin, &cell.destination)?;
        let mut mixed = PerMode::splat(0.0);
        for (group, &share) in shares {
            if share == 0.0 {
                continue;
            }
            let wage = wage_of(wages, group)?;
            let costs = restricted_costs(row, wage, params.beta, &Mode::ALL);
            let x = scaled_log_costs(&costs, params.sigma)?;
            let probs = backend.probs(&x, params.cor_tfs, params.cor_fs)?;
            for m in Mode::ALL {
                mixed[m] += share * probs[m];
            }
        }
        let p_tfhv: f64 = [Mode::Taxi, Mode::Fhv, Mode::Sfhv]
            .iter()
            .map(|&m| mixed[m])
            .sum();
        for m in [Mode::Taxi, Mode::Fhv, Mode::Sfhv] {
            let r = cell.trips[m];
            if r > 0.0 {
                let num = log_term(mixed[m], smoothing);
                let den = log_term(p_tfhv, smoothing);
                total += r * (num - den);
            }
        }
    }
    Ok(total)
}

/// Evaluate both likelihood stages for every prior point and attach
/// posterior weights. Stage 1 depends only on (β, σ) and is computed once
/// per distinct pair; everything parallelizes with order-preserving
/// reductions, so the output is deterministic.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_samples(
    params_list: &[SimParams],
    demand4: &[DemandCell],
    demand_tlc: &[DemandCell],
    attrs: &AttrTable,
    wages: &WageTable,
    wage_dist: &WageDist,
    backend: &dyn ProbBackend,
    smoothing: bool,
) -> Result<Vec<ParameterSample>> {
    if params_list.is_empty() {
        return Err(Error::invalid_input("no parameter samples to evaluate"));
    }
    let mut stage1_keys: Vec<(u64, u64)> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for p in params_list {
        let key = (p.beta.to_bits(), p.sigma.to_bits());
        if seen.insert(key) {
            stage1_keys.push(key);
        }
    }
    let stage1_vals: Vec<f64> = stage1_keys
        .par_iter()
        .map(|&(beta_bits, sigma_bits)| {
            let p = SimParams::new(
                f64::from_bits(beta_bits),
                f64::from_bits(sigma_bits),
                0.0,
                0.0,
            )?;
            stage1_loglik(&p, demand4, attrs, wages, backend, smoothing)
        })
        .collect::<Result<_>>()?;
    let stage1: BTreeMap<(u64, u64), f64> =
        stage1_keys.into_iter().zip(stage1_vals).collect();

    let mut samples: Vec<ParameterSample> = params_list
        .par_iter()
        .map(|p| {
            let l1 = stage1[&(p.beta.to_bits(), p.sigma.to_bits())];
            let l2 = stage2_loglik(p, demand_tlc, attrs, wages, wage_dist, backend, smoothing)?;
            Ok(ParameterSample {
                params: *p,
                loglik_stage1: l1,
                loglik_stage2: l2,
                weight: 0.0,
            })
        })
        .collect::<Result<_>>()?;
    posterior_weights(&mut samples)?;
    Ok(samples)
}

/// Fill posterior weights: weight ∝ exp(L₁ + L₂), normalized via
/// log-sum-exp. Samples at −infinity get weight exactly 0.
pub fn posterior_weights(samples: &mut [ParameterSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid_input("no samples to weight"));
    }
    let joints: Vec<f64> = samples.iter().map(|s| s.joint_loglik()).collect();
    if joints.iter().any(|j| j.is_nan()) {
        return Err(Error::invalid_input("NaN joint log-likelihood"));
    }
    let max = joints.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegeneratePosterior);
    }
    let sum_exp: f64 = joints.iter().map(|j| (j - max).exp()).sum();
    for (s, j) in samples.iter_mut().zip(&joints) {
        s.weight = (j - max).exp() / sum_exp;
    }
    Ok(())
}

/// The maximum-likelihood parameter set; ties resolve to the
/// lexicographically smallest (β, σ, corTFS, corFS).
pub fn max_likelihood(samples: &[ParameterSample]) -> Result<SimParams> {
    samples
        .iter()
        .min_by(|a, b| {
            b.joint_loglik()
                .total_cmp(&a.joint_loglik())
                .then(a.params.beta.total_cmp(&b.params.beta))
                .then(a.params.sigma.total_cmp(&b.params.sigma))
                .then(a.params.cor_tfs.total_cmp(&b.params.cor_tfs))
                .then(a.params.cor_fs.total_cmp(&b.params.cor_fs))
        })
        .map(|s| s.params)
        .ok_or_else(|| Error::invalid_input("no samples for maximum likelihood"))
}

/// Weighted summary of a posterior-weighted quantity.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WeightedStats {
    pub mean: f64,
    pub std: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
}

/// Weighted mean, population standard deviation, and 95% interval from
/// the weighted empirical distribution (interpolated quantiles at
/// 0.025/0.975 over cumulative-midpoint positions).
pub fn weighted_stats(values: &[f64], weights: &[f64]) -> Result<WeightedStats> {
    if values.is_empty() || values.len() != weights.len() {
        return Err(Error::invalid_input(
            "weighted_stats needs matching nonempty values and weights",
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_input("weighted_stats values must be finite"));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid_input(
            "weights must be non-negative and finite",
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid_input("weights must not all be zero"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        // All values identical: collapse exactly, immune to rounding.
        return Ok(WeightedStats {
            mean: lo,
            std: 0.0,
            ci95_low: lo,
            ci95_high: lo,
        });
    }
    let mean: f64 = values
        .iter()
        .zip(weights)
        .map(|(v, w)| v * w)
        .sum::<f64>()
        / total;
    let var: f64 = values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * (v - mean) * (v - mean))
        .sum::<f64>()
        / total;
    let std = var.max(0.0).sqrt();

    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let quantile = |q: f64| -> f64 {
        let mut cum = 0.0;
        let mut prev_pos = f64::NAN;
        let mut prev_val = f64::NAN;
        for &i in &order {
            let w = weights[i] / total;
            if w == 0.0 {
                continue;
            }
            let pos = cum + w / 2.0;
            cum += w;
            let val = values[i];
            if q <= pos {
                if prev_pos.is_nan() || pos == prev_pos {
                    return val;
                }
                let t = (q - prev_pos) / (pos - prev_pos);
                return prev_val + t * (val - prev_val);
            }
            prev_pos = pos;
            prev_val = val;
        }
        prev_val
    };
    Ok(WeightedStats {
        mean,
        std,
        ci95_low: quantile(0.025),
        ci95_high: quantile(0.975),
    })
}

/// Write the posterior table as CSV: one row per sample with both stage
/// log-likelihoods and the normalized weight.
pub fn write_posterior_csv(path: &Path, samples: &[ParameterSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "beta", "sigma", "corTFS", "corFS", "loglik1", "loglik2", "weight",
    ])?;
    for s in samples {
        w.write_record([
            format_float(s.params.beta),
            format_float(s.params.sigma),
            format_float(s.params.cor_tfs),
            format_float(s.params.cor_fs),
            format_float(s.loglik_stage1),
            format_float(s.loglik_stage2),
            format_float(s.weight),
        ])?;
    }
    w.flush().map_err(crate::Error::from)?;
    Ok(())
}

/// Read a posterior table written by [`write_posterior_csv`].
pub fn read_posterior_csv(path: &Path) -> Result<Vec<ParameterSample>> {
    let mut r = csv::Reader::from_path(path)?;
    let expected = [
        "beta", "sigma", "corTFS", "corFS", "loglik1", "loglik2", "weight",
    ];
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::SchemaMismatch {
            file: path.display().to_string(),
            detail: format!("expected header {expected:?}, got {headers:?}"),
        });
    }
    let mut out = Vec::new();
    for (row_idx, record) in r.records().enumerate() {
        let record = record?;
        let field = |i: usize| -> Result<f64> {
            parse_float(record.get(i).unwrap_or("")).ok_or_else(|| Error::SchemaMismatch {
                file: path.display().to_string(),
                detail: format!("row {}: bad numeric field '{}'", row_idx + 2, i),
            })
        };
        out.push(ParameterSample {
            params: SimParams::new(field(0)?, field(1)?, field(2)?, field(3)?)?,
            loglik_stage1: field(4)?,
            loglik_stage2: field(5)?,
            weight: field(6)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{DemandCell, ModeAttributes, WageGroup};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Backend returning fixed probabilities regardless of inputs.
    struct ConstBackend(PerMode<f64>);

    impl ProbBackend for ConstBackend {
        fn probs(&self, x: &PerMode<f64>, _: f64, _: f64) -> Result<PerMode<f64>> {
            // Respect the availability mask so stage-2 conditioning sees
            // a simplex over the modes actually offered.
            let masked = PerMode::from_fn(|m| if x[m].is_finite() { self.0[m] } else { 0.0 });
            let total = masked.sum();
            Ok(masked.map(|_, &p| p / total))
        }
    }

    fn phi(z: f64) -> f64 {
        Normal::new(0.0, 1.0).unwrap().cdf(z)
    }

    fn basic_attrs() -> AttrTable {
        let mut t = AttrTable::new();
        let row = PerMode::from_fn(|_| ModeAttributes {
            time_mean_hr: 0.5,
            time_std_hr: 0.1,
            cost_mean_usd: 5.0,
            cost_std_usd: 1.0,
            distance_miles: 3.0,
        });
        t.insert("Z1".to_owned(), "Z2".to_owned(), row);
        t
    }

    fn basic_wages() -> WageTable {
        [
            (
                "w1".to_owned(),
                WageGroup {
                    id: "w1".to_owned(),
                    hourly_wage_usd: 20.0,
                },
            ),
            (
                "w2".to_owned(),
                WageGroup {
                    id: "w2".to_owned(),
                    hourly_wage_usd: 40.0,
                },
            ),
        ]
        .into_iter()
        .collect()
    }

    fn survey_cell(trips: [f64; 4]) -> DemandCell {
        let mut t = PerMode::splat(0.0);
        t[Mode::Taxi] = trips[0];
        t[Mode::Transit] = trips[1];
        t[Mode::Walk] = trips[2];
        t[Mode::Drive] = trips[3];
        DemandCell {
            origin: "Z1".to_owned(),
            destination: "Z2".to_owned(),
            wage_group: Some("w1".to_owned()),
            trips: t,
        }
    }

    fn tlc_cell(taxi: f64, fhv: f64, sfhv: f64) -> DemandCell {
        let mut t = PerMode::splat(0.0);
        t[Mode::Taxi] = taxi;
        t[Mode::Fhv] = fhv;
        t[Mode::Sfhv] = sfhv;
        DemandCell {
            origin: "Z1".to_owned(),
            destination: "Z2".to_owned(),
            wage_group: None,
            trips: t,
        }
    }

    fn single_zone_dist() -> WageDist {
        [(
            "Z1".to_owned(),
            [("w1".to_owned(), 1.0)].into_iter().collect(),
        )]
        .into_iter()
        .collect()
    }

    #[test]
    fn prior_quantiles_hit_the_stated_bands() {
        let spec = PriorSpec::default();
        // 68% band of β: quantiles at Φ(∓1) are 1/3 and 1.
        assert_abs_diff_eq!(spec.beta_quantile(phi(-1.0)), 1.0 / 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(spec.beta_quantile(phi(1.0)), 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(spec.beta_quantile(0.5), 0.5773502691896257, epsilon = 1e-6);
        // σ prior: median ln 2, one-sd upper quantile exactly 1.
        assert_abs_diff_eq!(spec.sigma_quantile(0.5), 2.0_f64.ln(), epsilon = 1e-6);
        assert_abs_diff_eq!(spec.sigma_quantile(phi(1.0)), 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(
            spec.sigma_quantile(phi(-1.0)),
            0.4804530139182014,
            epsilon = 1e-6
        );
    }

    #[test]
    fn default_grid_shape_and_ordering() {
        let samples = prior_samples(&PriorSpec::default()).unwrap();
        assert_eq!(samples.len(), 10 * 10 * 100);
        // Lexicographic in (β, σ, corTFS, corFS).
        for w in samples.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let ka = (a.beta, a.sigma, a.cor_tfs, a.cor_fs);
            let kb = (b.beta, b.sigma, b.cor_tfs, b.cor_fs);
            assert!(ka < kb, "{ka:?} !< {kb:?}");
        }
        for s in &samples {
            assert!(s.cor_fs > s.cor_tfs);
        }
    }

    #[test]
    fn beta_lattice_mass_inside_the_band() {
        // The percentile lattice puts the 0.25..=0.75 points inside
        // (1/3, 1): six of the ten default values.
        let spec = PriorSpec::default();
        let inside = spec
            .beta_values()
            .into_iter()
            .filter(|&b| b > 1.0 / 3.0 && b < 1.0)
            .count();
        assert_eq!(inside, 6);
    }

    #[test]
    fn lattice_snapping_matches_frozen_values() {
        let spec = PriorSpec::default();
        let snapped = nearest_lattice_point(&spec, &SimParams::citywide_best()).unwrap();
        assert_abs_diff_eq!(snapped.beta, 0.7134469157671955, epsilon = 1e-15);
        assert_abs_diff_eq!(snapped.sigma, 0.37932078733319574, epsilon = 1e-15);
        assert_abs_diff_eq!(snapped.cor_tfs, 0.3291796067500631, epsilon = 1e-15);
        assert_abs_diff_eq!(snapped.cor_fs, 0.563966744387541, epsilon = 1e-15);
    }

    #[test]
    fn stage1_single_and_hand_summed_cells() {
        let params = SimParams::new(0.7, 0.4, 0.0, 0.0).unwrap();
        let backend = ConstBackend(PerMode([0.5, 0.2, 0.2, 0.1, 0.0, 0.0]));
        let attrs = basic_attrs();
        let wages = basic_wages();

        let l = stage1_loglik(
            &params,
            &[survey_cell([1.0, 0.0, 0.0, 0.0])],
            &attrs,
            &wages,
            &backend,
            false,
        )
        .unwrap();
        assert_abs_diff_eq!(l, 0.5_f64.ln(), epsilon = 1e-12);

        // Two cells, hand-summed: 3 ln .5 + 2 ln .2 + 4 ln .2 + 1 ln .1.
        let cells = [
            survey_cell([3.0, 2.0, 0.0, 0.0]),
            survey_cell([0.0, 0.0, 4.0, 1.0]),
        ];
        let l = stage1_loglik(&params, &cells, &attrs, &wages, &backend, false).unwrap();
        let expected = 3.0 * 0.5_f64.ln() + 2.0 * 0.2_f64.ln() + 4.0 * 0.2_f64.ln() + 0.1_f64.ln();
        assert_abs_diff_eq!(l, expected, epsilon = 1e-12);
    }

    #[test]
    fn stage1_perfect_prediction_is_zero_and_zero_prob_is_neg_inf() {
        let params = SimParams::new(0.7, 0.4, 0.0, 0.0).unwrap();
        let attrs = basic_attrs();
        let wages = basic_wages();
        let perfect = ConstBackend(PerMode([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let cells = [survey_cell([7.0, 0.0, 0.0, 0.0])];
        let l = stage1_loglik(&params, &cells, &attrs, &wages, &perfect, false).unwrap();
        assert_eq!(l, 0.0);

        let cells = [survey_cell([0.0, 2.0, 0.0, 0.0])];
        let l = stage1_loglik(&params, &cells, &attrs, &wages, &perfect, false).unwrap();
        assert_eq!(l, f64::NEG_INFINITY);
        // Smoothing floors the zero instead.
        let l = stage1_loglik(&params, &cells, &attrs, &wages, &perfect, true).unwrap();
        assert_abs_diff_eq!(l, 2.0 * SMOOTHING_FLOOR.ln(), epsilon = 1e-9);
    }

    #[test]
    fn stage1_rejects_trips_outside_the_survey_modes() {
        let params = SimParams::new(0.7, 0.4, 0.0, 0.0).unwrap();
        let backend = ConstBackend(PerMode::splat(1.0 / 6.0));
        let mut cell = survey_cell([1.0, 0.0, 0.0, 0.0]);
        cell.trips[Mode::Fhv] = 2.0;
        let err = stage1_loglik(
            &params,
            &[cell],
            &basic_attrs(),
            &basic_wages(),
            &backend,
            false,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn stage2_uniform_conditional_and_concentration() {
        let params = SimParams::new(0.7, 0.4, 0.2, 0.6).unwrap();
        let attrs = basic_attrs();
        let wages = basic_wages();
        let dist = single_zone_dist();
        // Equal nest probabilities: conditional 1/3 each.
        let backend = ConstBackend(PerMode([0.1, 0.4, 0.2, 0.0, 0.1, 0.1]));
        let l = stage2_loglik(
            &params,
            &[tlc_cell(1.0, 1.0, 1.0)],
            &attrs,
            &wages,
            &dist,
            &backend,
            false,
        )
        .unwrap();
        assert_abs_diff_eq!(l, 3.0 * (1.0_f64 / 3.0).ln(), epsilon = 1e-12);

        // Conditional P_taxi / P_TFHV = 0.5 → ln 0.5 per trip.
        let backend = ConstBackend(PerMode([0.2, 0.3, 0.3, 0.0, 0.1, 0.1]));
        let l = stage2_loglik(
            &params,
            &[tlc_cell(4.0, 0.0, 0.0)],
            &attrs,
            &wages,
            &dist,
            &backend,
            false,
        )
        .unwrap();
        assert_abs_diff_eq!(l, 4.0 * 0.5_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn stage2_invariant_to_rescaling_non_nest_probabilities() {
        let params = SimParams::new(0.7, 0.4, 0.2, 0.6).unwrap();
        let attrs = basic_attrs();
        let wages = basic_wages();
        let dist = single_zone_dist();
        let cells = [tlc_cell(5.0, 2.0, 3.0)];
        let base = PerMode([0.15, 0.25, 0.1, 0.2, 0.2, 0.1]);
        let l_base = stage2_loglik(
            &params,
            &cells,
            &attrs,
            &wages,
            &dist,
            &ConstBackend(base),
            false,
        )
        .unwrap();
        // Shrink the non-nest modes and renormalize: the conditional
        // within-nest ratios are unchanged.
        let mut scaled = base;
        for m in [Mode::Transit, Mode::Walk, Mode::Drive] {
            scaled[m] *= 0.3;
        }
        let total = scaled.sum();
        let scaled = scaled.map(|_, &p| p / total);
        let l_scaled = stage2_loglik(
            &params,
            &cells,
            &attrs,
            &wages,
            &dist,
            &ConstBackend(scaled),
            false,
        )
        .unwrap();
        assert_abs_diff_eq!(l_base, l_scaled, epsilon = 1e-10);
    }

    #[test]
    fn stage2_constant_backend_is_unaffected_by_the_wage_mix() {
        // Identical probabilities for every wage group: the marginalized
        // mixture equals the common value regardless of the shares.
        let params = SimParams::new(0.7, 0.4, 0.2, 0.6).unwrap();
        let attrs = basic_attrs();
        let wages = basic_wages();
        let dist: WageDist = [(
            "Z1".to_owned(),
            [("w1".to_owned(), 0.25), ("w2".to_owned(), 0.75)]
                .into_iter()
                .collect(),
        )]
        .into_iter()
        .collect();
        let backend = ConstBackend(PerMode([0.2, 0.2, 0.2, 0.0, 0.2, 0.2]));
        let l = stage2_loglik(
            &params,
            &[tlc_cell(6.0, 0.0, 0.0)],
            &attrs,
            &wages,
            &dist,
            &backend,
            false,
        )
        .unwrap();
        // Conditional P_taxi/P_TFHV = 1/3 for both groups; shares sum to 1.
        assert_abs_diff_eq!(l, 6.0 * (1.0_f64 / 3.0).ln(), epsilon = 1e-12);
    }

    #[test]
    fn stage2_marginalizes_probabilities_over_the_wage_mix() {
        // A wage-sensitive backend: probabilities must be mixed across the
        // origin's wage groups before conditioning on the taxi nest, not
        // scored per group with share-weighted log-conditionals.
        struct SplitBackend {
            cutoff: f64,
            lo: PerMode<f64>,
            hi: PerMode<f64>,
        }
        impl ProbBackend for SplitBackend {
            fn probs(&self, x: &PerMode<f64>, _: f64, _: f64) -> Result<PerMode<f64>> {
                Ok(if x[Mode::Taxi] <= self.cutoff {
                    self.lo
                } else {
                    self.hi
                })
            }
        }

        let params = SimParams::new(0.7, 0.4, 0.2, 0.6).unwrap();
        let attrs = basic_attrs();
        let wages = basic_wages();
        let row = attrs.require("Z1", "Z2").unwrap();
        let x_at = |wage: f64| {
            scaled_log_costs(&restricted_costs(row, wage, params.beta, &Mode::ALL), params.sigma)
                .unwrap()[Mode::Taxi]
        };
        let (x_lo, x_hi) = (x_at(20.0), x_at(40.0));
        assert!(x_lo < x_hi);

        let backend = SplitBackend {
            cutoff: 0.5 * (x_lo + x_hi),
            lo: PerMode([0.1, 0.3, 0.1, 0.1, 0.3, 0.1]),
            hi: PerMode([0.4, 0.1, 0.1, 0.1, 0.1, 0.2]),
        };
        let dist: WageDist = [(
            "Z1".to_owned(),
            [("w1".to_owned(), 0.25), ("w2".to_owned(), 0.75)]
                .into_iter()
                .collect(),
        )]
        .into_iter()
        .collect();
        let l = stage2_loglik(
            &params,
            &[tlc_cell(2.0, 3.0, 4.0)],
            &attrs,
            &wages,
            &dist,
            &backend,
            false,
        )
        .unwrap();
        // Mixture 0.25·lo + 0.75·hi = (0.325, -, -, -, 0.15, 0.175);
        // nest mass 0.65 → conditionals (1/2, 3/13, 7/26).
        let expected = 2.0 * 0.5_f64.ln() + 3.0 * (3.0_f64 / 13.0).ln() + 4.0 * (7.0_f64 / 26.0).ln();
        assert_abs_diff_eq!(l, expected, epsilon = 1e-12);
        // Distinct from the per-group share-weighted log-conditional value.
        let per_group = 0.25 * (2.0 * 0.2_f64.ln() + 3.0 * 0.6_f64.ln() + 4.0 * 0.2_f64.ln())
            + 0.75
                * (2.0 * (4.0_f64 / 7.0).ln()
                    + 3.0 * (1.0_f64 / 7.0).ln()
                    + 4.0 * (2.0_f64 / 7.0).ln());
        assert!((l - per_group).abs() > 0.1);
    }

    #[test]
    fn posterior_weight_examples() {
        let p = SimParams::new(0.5, 0.5, 0.1, 0.5).unwrap();
        let mk = |l1: f64, l2: f64| ParameterSample {
            params: p,
            loglik_stage1: l1,
            loglik_stage2: l2,
            weight: 0.0,
        };
        // Equal joints → 1/k.
        let mut s = vec![mk(-3.0, -1.0); 4];
        posterior_weights(&mut s).unwrap();
        for x in &s {
            assert_abs_diff_eq!(x.weight, 0.25, epsilon = 1e-12);
        }
        // Joints ln2 apart → (2/3, 1/3).
        let mut s = vec![mk(-1.0, 0.0), mk(-1.0 - 2.0_f64.ln(), 0.0)];
        posterior_weights(&mut s).unwrap();
        assert_abs_diff_eq!(s[0].weight, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1].weight, 1.0 / 3.0, epsilon = 1e-12);
        // Single sample → weight 1; −inf neighbors get 0.
        let mut s = vec![mk(-5.0, -5.0)];
        posterior_weights(&mut s).unwrap();
        assert_eq!(s[0].weight, 1.0);
        let mut s = vec![mk(f64::NEG_INFINITY, 0.0), mk(-2.0, -2.0)];
        posterior_weights(&mut s).unwrap();
        assert_eq!(s[0].weight, 0.0);
        assert_eq!(s[1].weight, 1.0);
        // All −inf → degenerate.
        let mut s = vec![mk(f64::NEG_INFINITY, 0.0)];
        assert!(matches!(
            posterior_weights(&mut s),
            Err(Error::DegeneratePosterior)
        ));
    }

    proptest! {
        #[test]
        fn weights_invariant_to_joint_shift(
            raw in proptest::collection::vec(-60.0f64..0.0, 2..40),
            shift in -200.0f64..200.0,
        ) {
            let p = SimParams::new(0.5, 0.5, 0.1, 0.5).unwrap();
            let mk = |l: f64| ParameterSample {
                params: p, loglik_stage1: l, loglik_stage2: 0.0, weight: 0.0,
            };
            let mut a: Vec<_> = raw.iter().map(|&l| mk(l)).collect();
            let mut b: Vec<_> = raw.iter().map(|&l| mk(l + shift)).collect();
            posterior_weights(&mut a).unwrap();
            posterior_weights(&mut b).unwrap();
            let sum: f64 = a.iter().map(|s| s.weight).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.weight - y.weight).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn max_likelihood_selection_and_ties() {
        let mk = |beta: f64, j: f64| ParameterSample {
            params: SimParams::new(beta, 0.5, 0.1, 0.5).unwrap(),
            loglik_stage1: j,
            loglik_stage2: 0.0,
            weight: 0.0,
        };
        // The finite one wins over −infinity.
        let best = max_likelihood(&[mk(0.9, f64::NEG_INFINITY), mk(0.4, -10.0)]).unwrap();
        assert_eq!(best.beta, 0.4);
        // Ties break lexicographically.
        let best = max_likelihood(&[mk(0.8, -5.0), mk(0.3, -5.0)]).unwrap();
        assert_eq!(best.beta, 0.3);
        // Single sample → itself.
        let best = max_likelihood(&[mk(0.7, -1.0)]).unwrap();
        assert_eq!(best.beta, 0.7);
    }

    #[test]
    fn weighted_stats_examples() {
        // All weight on one value.
        let s = weighted_stats(&[3.0, 7.0], &[1.0, 0.0]).unwrap();
        assert_eq!((s.mean, s.std, s.ci95_low, s.ci95_high), (3.0, 0.0, 3.0, 3.0));
        // Two equal-weight points.
        let s = weighted_stats(&[0.0, 1.0], &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(s.mean, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.std, 0.5, epsilon = 1e-12);
        assert_eq!(s.ci95_low, 0.0);
        assert_eq!(s.ci95_high, 1.0);
        // Uniform weights reproduce unweighted moments.
        let vals = [2.0, 5.0, 11.0, 13.0];
        let s = weighted_stats(&vals, &[0.25; 4]).unwrap();
        let mean = vals.iter().sum::<f64>() / 4.0;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(s.mean, mean, epsilon = 1e-12);
        assert_abs_diff_eq!(s.std, var.sqrt(), epsilon = 1e-12);
        assert!(weighted_stats(&[], &[]).is_err());
    }

    #[test]
    fn corrupting_demand_lowers_the_likelihood_at_the_generating_point() {
        // L is linear in the trip counts with coefficients ln P; moving
        // trips from a high-probability mode to a low-probability one must
        // strictly decrease it.
        let params = SimParams::new(0.7, 0.4, 0.0, 0.0).unwrap();
        let attrs = basic_attrs();
        let wages = basic_wages();
        let backend = ConstBackend(PerMode([0.5, 0.3, 0.15, 0.05, 0.0, 0.0]));
        let clean = [survey_cell([50.0, 30.0, 15.0, 5.0])];
        let corrupted = [survey_cell([40.0, 30.0, 15.0, 15.0])];
        let l_clean = stage1_loglik(&params, &clean, &attrs, &wages, &backend, false).unwrap();
        let l_bad = stage1_loglik(&params, &corrupted, &attrs, &wages, &backend, false).unwrap();
        assert!(l_bad < l_clean);
    }

    #[test]
    fn oracle_backend_is_deterministic_and_input_keyed() {
        let backend = OracleBackend {
            draws: 20_000,
            seed: 9,
        };
        let x = PerMode([0.1, 0.4, -0.2, 0.9, f64::INFINITY, f64::INFINITY]);
        let a = backend.probs(&x, 0.0, 0.0).unwrap();
        let b = backend.probs(&x, 0.0, 0.0).unwrap();
        assert_eq!(a, b);
        // A different input gives an independent stream.
        let y = PerMode([0.1, 0.4, -0.2, 0.8, f64::INFINITY, f64::INFINITY]);
        let c = backend.probs(&y, 0.0, 0.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn evaluate_samples_memoizes_stage1_consistently() {
        // Two samples sharing (β, σ) must get identical stage-1 values,
        // and the weights must form a simplex.
        let attrs = basic_attrs();
        let wages = basic_wages();
        let dist = single_zone_dist();
        let demand4 = [survey_cell([10.0, 5.0, 3.0, 2.0])];
        let demand_tlc = [tlc_cell(6.0, 3.0, 1.0)];
        let backend = OracleBackend {
            draws: 20_000,
            seed: 42,
        };
        let params = [
            SimParams::new(0.7, 0.4, 0.1, 0.5).unwrap(),
            SimParams::new(0.7, 0.4, 0.3, 0.8).unwrap(),
            SimParams::new(0.9, 0.6, 0.1, 0.5).unwrap(),
        ];
        let samples = evaluate_samples(
            &params,
            &demand4,
            &demand_tlc,
            &attrs,
            &wages,
            &dist,
            &backend,
            false,
        )
        .unwrap();
        assert_eq!(samples[0].loglik_stage1, samples[1].loglik_stage1);
        assert_ne!(samples[0].loglik_stage2, samples[1].loglik_stage2);
        let total: f64 = samples.iter().map(|s| s.weight).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn posterior_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("posterior.csv");
        let samples = vec![
            ParameterSample {
                params: SimParams::new(0.7134469157671955, 0.38, 0.31, 0.58).unwrap(),
                loglik_stage1: -1234.5678901234567,
                loglik_stage2: f64::NEG_INFINITY,
                weight: 0.0,
            },
            ParameterSample {
                params: SimParams::new(0.5, 0.693, 0.0, 0.0).unwrap(),
                loglik_stage1: -2.5,
                loglik_stage2: -3.75,
                weight: 1.0,
            },
        ];
        write_posterior_csv(&path, &samples).unwrap();
        let back = read_posterior_csv(&path).unwrap();
        assert_eq!(samples, back);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("beta,sigma,corTFS,corFS,loglik1,loglik2,weight"));
        assert!(text.contains("-inf"));
    }
}
