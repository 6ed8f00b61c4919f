//! Individual-choice Monte Carlo engine: correlated preference-noise
//! draws, single-trip choice by noisy log-cost minimization, paired
//! counterfactual simulation with common random numbers, and the
//! brute-force probability oracle used to train and check the surrogate.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{Mode, PerMode, NUM_MODES};

/// Behavioral parameters of the individual-choice model.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimParams {
    /// Value-of-time coefficient (fraction of the hourly wage).
    pub beta: f64,
    /// Scale of the preference noise on log generalized cost.
    pub sigma: f64,
    /// Correlation of noise between taxi and each FHV mode.
    pub cor_tfs: f64,
    /// Correlation of noise between the two FHV modes.
    pub cor_fs: f64,
}

impl SimParams {
    pub fn new(beta: f64, sigma: f64, cor_tfs: f64, cor_fs: f64) -> Result<Self> {
        let p = SimParams {
            beta,
            sigma,
            cor_tfs,
            cor_fs,
        };
        p.validate()?;
        Ok(p)
    }

    /// The best-fit parameter set from the citywide calibration, shipped
    /// as a reference preset.
    pub fn citywide_best() -> Self {
        SimParams {
            beta: 0.71,
            sigma: 0.38,
            cor_tfs: 0.31,
            cor_fs: 0.58,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::invalid_parameter(format!(
                "beta must be finite and strictly positive, got {}",
                self.beta
            )));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::invalid_parameter(format!(
                "sigma must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        validate_correlations(self.cor_tfs, self.cor_fs)
    }
}

/// Check the correlation-pair invariant: both in [0,1] and either
/// `cor_fs > cor_tfs` or both exactly zero (the degenerate testing case).
pub fn validate_correlations(cor_tfs: f64, cor_fs: f64) -> Result<()> {
    for (value, what) in [(cor_tfs, "corTFS"), (cor_fs, "corFS")] {
        if !(value.is_finite() && (0.0..=1.0).contains(&value)) {
            return Err(Error::invalid_parameter(format!(
                "{what} must lie in [0, 1], got {value}"
            )));
        }
    }
    if !(cor_fs > cor_tfs || (cor_fs == 0.0 && cor_tfs == 0.0)) {
        return Err(Error::invalid_parameter(format!(
            "correlations must satisfy corFS > corTFS (or both zero), got corTFS={cor_tfs}, corFS={cor_fs}"
        )));
    }
    Ok(())
}

/// A 6×6 matrix in canonical mode order.
pub type Matrix6 = [[f64; NUM_MODES]; NUM_MODES];

/// Deterministic counter-based stream factory: every `(master seed, key
/// parts)` combination yields an independent, reproducible generator, so
/// parallel workers can draw without sharing state.
#[derive(Debug, Clone, Copy)]
pub struct RngStream {
    master: u64,
}

impl RngStream {
    pub fn new(master_seed: u64) -> Self {
        RngStream {
            master: master_seed,
        }
    }

    /// Generator for the given key parts (e.g. cell index, parameter
    /// index, replicate index).
    pub fn substream(&self, parts: &[u64]) -> ChaCha8Rng {
        let mut h = splitmix64(self.master);
        for &p in parts {
            h = splitmix64(h ^ p);
        }
        ChaCha8Rng::seed_from_u64(h)
    }
}

/// The 64-bit finalizer of the splitmix64 generator; mixes key parts into
/// well-separated seeds.
pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The noise correlation matrix implied by the parameters: identity except
/// corr(taxi, fhv) = corr(taxi, sfhv) = corTFS and corr(fhv, sfhv) = corFS.
pub fn correlation_matrix(params: &SimParams) -> Matrix6 {
    let mut c = [[0.0; NUM_MODES]; NUM_MODES];
    for (i, row) in c.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let (t, f, s) = (
        Mode::Taxi.index(),
        Mode::Fhv.index(),
        Mode::Sfhv.index(),
    );
    c[t][f] = params.cor_tfs;
    c[f][t] = params.cor_tfs;
    c[t][s] = params.cor_tfs;
    c[s][t] = params.cor_tfs;
    c[f][s] = params.cor_fs;
    c[s][f] = params.cor_fs;
    c
}

/// Lower-triangular factor `L` with `L·Lᵀ = m` for a positive
/// semidefinite matrix; rank-deficient pivots (within `1e-12`) zero out
/// their column instead of failing, so boundary correlations like
/// `corFS = 1` factor cleanly.
pub fn cholesky_psd(m: &Matrix6) -> Result<Matrix6> {
    const TOL: f64 = 1e-12;
    let mut l = [[0.0; NUM_MODES]; NUM_MODES];
    for i in 0..NUM_MODES {
        for j in 0..=i {
            let mut s = m[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s < -TOL {
                    return Err(Error::invalid_parameter(format!(
                        "matrix is not positive semidefinite (pivot {s} at {i})"
                    )));
                }
                l[i][i] = if s > TOL { s.sqrt() } else { 0.0 };
            } else {
                l[i][j] = if l[j][j] > 0.0 { s / l[j][j] } else { 0.0 };
            }
        }
    }
    Ok(l)
}

/// One multivariate-normal preference draw with covariance `σ²·C`,
/// computed as `σ·L·z` from six standard normals. `σ = 0` yields an
/// exactly-zero vector.
pub fn draw_epsilon(params: &SimParams, l: &Matrix6, rng: &mut impl Rng) -> PerMode<f64> {
    let z: [f64; NUM_MODES] = std::array::from_fn(|_| rng.sample(StandardNormal));
    correlated_noise(params.sigma, l, &z)
}

fn correlated_noise(sigma: f64, l: &Matrix6, z: &[f64; NUM_MODES]) -> PerMode<f64> {
    PerMode(std::array::from_fn(|i| {
        let mut s = 0.0;
        for j in 0..=i {
            s += l[i][j] * z[j];
        }
        sigma * s
    }))
}

/// Argmin of `log_costs + noise` over entries with finite log cost;
/// ties break toward the smaller canonical index. `None` when no entry
/// is finite.
fn argmin_noisy(log_costs: &PerMode<f64>, noise: &PerMode<f64>) -> Option<Mode> {
    let mut best: Option<(Mode, f64)> = None;
    for (mode, &lc) in log_costs.iter() {
        if !lc.is_finite() {
            continue;
        }
        let value = lc + noise[mode];
        match best {
            Some((_, b)) if value >= b => {}
            _ => best = Some((mode, value)),
        }
    }
    best.map(|(m, _)| m)
}

/// Log generalized costs for choice: `ln g_m` for available modes with
/// positive finite cost, `+inf` otherwise. Non-positive finite costs are
/// rejected (their log-utility is undefined).
fn log_costs(
    gen_costs: &PerMode<f64>,
    available: &PerMode<bool>,
) -> Result<PerMode<f64>> {
    for (mode, &g) in gen_costs.iter() {
        if available[mode] && g.is_finite() && g <= 0.0 {
            return Err(Error::InvalidCost { mode, value: g });
        }
        if g.is_nan() {
            return Err(Error::invalid_input("generalized cost is NaN".to_owned()));
        }
    }
    Ok(PerMode::from_fn(|m| {
        if available[m] && gen_costs[m].is_finite() {
            gen_costs[m].ln()
        } else {
            f64::INFINITY
        }
    }))
}

/// The availability mask implied by finite generalized costs.
pub fn availability(gen_costs: &PerMode<f64>) -> PerMode<bool> {
    gen_costs.map(|_, &g| g.is_finite())
}

/// Scaled log generalized costs `ln(g_m)/σ` — the coordinate the noise
/// model lives in. Infinite costs pass through as `+inf`; non-positive
/// finite costs are rejected and σ must be positive.
pub fn scaled_log_costs(gen_costs: &PerMode<f64>, sigma: f64) -> Result<PerMode<f64>> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid_parameter(format!(
            "sigma must be positive and finite to scale log costs, got {sigma}"
        )));
    }
    let lc = log_costs(gen_costs, &availability(gen_costs))?;
    Ok(lc.map(|_, &v| if v.is_finite() { v / sigma } else { v }))
}

/// One individual choice: the available mode minimizing
/// `ln(g_m) + eps_m` (noisy log generalized cost). Ties break toward the
/// canonical mode order.
pub fn choose(
    gen_costs: &PerMode<f64>,
    eps: &PerMode<f64>,
    available: &PerMode<bool>,
) -> Result<Mode> {
    let lc = log_costs(gen_costs, available)?;
    argmin_noisy(&lc, eps).ok_or(Error::NoAvailableMode)
}

/// Draws per parallel chunk in [`estimate_probs_mc`]; the chunk split is
/// part of the deterministic stream keying, so it is fixed, not tuned per
/// machine.
const ORACLE_CHUNK: u64 = 1 << 16;

/// Brute-force choice probabilities: empirical frequencies of the noisy
/// argmin over `n_draws` unit-variance correlated draws. Inputs are
/// *scaled* log costs `ln(g_m)/σ` (σ folded in), with `+inf` marking
/// unavailable modes. Counts are normalized so the result sums to 1
/// exactly. Deterministic given `seed`, independent of worker count.
pub fn estimate_probs_mc(
    scaled_log_costs: &PerMode<f64>,
    cor_tfs: f64,
    cor_fs: f64,
    n_draws: u64,
    seed: u64,
) -> Result<PerMode<f64>> {
    if n_draws == 0 {
        return Err(Error::invalid_input("estimate_probs_mc needs n_draws >= 1"));
    }
    validate_correlations(cor_tfs, cor_fs)?;
    for (_, &x) in scaled_log_costs.iter() {
        if x.is_nan() || x == f64::NEG_INFINITY {
            return Err(Error::invalid_input(format!(
                "scaled log cost must be finite or +inf, got {x}"
            )));
        }
    }
    if !scaled_log_costs.values().any(|x| x.is_finite()) {
        return Err(Error::NoAvailableMode);
    }
    let params = SimParams {
        beta: 1.0,
        sigma: 1.0,
        cor_tfs,
        cor_fs,
    };
    let l = cholesky_psd(&correlation_matrix(&params))?;
    let stream = RngStream::new(seed);
    let n_chunks = n_draws.div_ceil(ORACLE_CHUNK);
    let counts = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = stream.substream(&[chunk]);
            let lo = chunk * ORACLE_CHUNK;
            let hi = (lo + ORACLE_CHUNK).min(n_draws);
            let mut counts = [0u64; NUM_MODES];
            for _ in lo..hi {
                let eps = draw_epsilon(&params, &l, &mut rng);
                // Unwrap is safe: at least one finite entry checked above.
                let m = argmin_noisy(scaled_log_costs, &eps).unwrap();
                counts[m.index()] += 1;
            }
            counts
        })
        .reduce(
            || [0u64; NUM_MODES],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    // Quantize each frequency down to the 2^-53 grid. Every value below
    // one on that grid is exactly representable, so partial sums never
    // round; pinning the largest entry to 1 − Σ others then makes the
    // simplex sum to one exactly, in any summation order.
    const GRID: f64 = (1u64 << 53) as f64;
    let mut probs = PerMode::from_fn(|m| {
        let p = counts[m.index()] as f64 / n_draws as f64;
        (p * GRID).floor() / GRID
    });
    let top = Mode::ALL
        .into_iter()
        .max_by(|a, b| {
            counts[a.index()]
                .cmp(&counts[b.index()])
                .then(b.index().cmp(&a.index()))
        })
        .unwrap();
    let others: f64 = Mode::ALL
        .into_iter()
        .filter(|&m| m != top)
        .map(|m| probs[m])
        .sum();
    probs[top] = 1.0 - others;
    debug_assert_eq!(probs.sum(), 1.0);
    Ok(probs)
}

/// One paired draw under common random numbers: a single preference draw
/// applied to both scenarios' costs, so identical scenarios yield
/// identical choices exactly.
pub fn simulate_pair(
    gen_costs_a: &PerMode<f64>,
    gen_costs_b: &PerMode<f64>,
    params: &SimParams,
    l: &Matrix6,
    rng: &mut impl Rng,
) -> Result<(Mode, Mode)> {
    let eps = draw_epsilon(params, l, rng);
    let a = choose(gen_costs_a, &eps, &availability(gen_costs_a))?;
    let b = choose(gen_costs_b, &eps, &availability(gen_costs_b))?;
    Ok((a, b))
}

/// Simulate one demand cell under both scenarios: `n_reps` paired draws,
/// counted into a 6×6 (mode under A × mode under B) matrix and scaled so
/// the matrix total equals the cell's trips.
pub fn simulate_cell(
    total_trips: f64,
    gen_costs_a: &PerMode<f64>,
    gen_costs_b: &PerMode<f64>,
    params: &SimParams,
    n_reps: u32,
    rng: &mut impl Rng,
) -> Result<Matrix6> {
    if n_reps == 0 {
        return Err(Error::invalid_input("simulate_cell needs n_reps >= 1"));
    }
    params.validate()?;
    let l = cholesky_psd(&correlation_matrix(params))?;
    let mut counts = [[0u64; NUM_MODES]; NUM_MODES];
    for _ in 0..n_reps {
        let (a, b) = simulate_pair(gen_costs_a, gen_costs_b, params, &l, rng)?;
        counts[a.index()][b.index()] += 1;
    }
    let scale = total_trips / n_reps as f64;
    Ok(std::array::from_fn(|i| {
        std::array::from_fn(|j| counts[i][j] as f64 * scale)
    }))
}
