//! Synthetic fixture generation: a desk-scale city whose demand tables
//! are drawn from the choice model itself at known parameters, so
//! inference has a recoverable ground truth recorded in a manifest.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::closed_form::{restricted_costs, SURVEY_MODES};
use crate::error::{Error, Result};
use crate::io::bundle::{save_bundle, DatasetBundle};
use crate::mc::{estimate_probs_mc, scaled_log_costs, splitmix64, RngStream, SimParams};
use crate::types::{
    DemandCell, Mode, ModeAttributes, PerMode, WageDist, WageGroup, WageTable, Zone, ZoneMap,
};

const MANIFEST: &str = "manifest.json";
const BOROUGHS: [&str; 4] = ["Manhattan", "Brooklyn", "Queens", "Bronx"];
const WALK_LIMIT_MILES: f64 = 3.0;

/// The default generating parameters: the citywide best-fit point snapped
/// onto the default prior lattice, so a default inference grid contains
/// the truth exactly.
pub const DEFAULT_TRUE_PARAMS: SimParams = SimParams {
    beta: 0.713_446_915_767_195_7,
    sigma: 0.379_320_787_333_195_85,
    cor_tfs: 0.329_179_606_750_063_1,
    cor_fs: 0.563_966_744_387_541,
};

/// What to generate: city size, wage structure, generating parameters,
/// and the Monte Carlo resolution of the synthetic demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub n_zones: usize,
    pub n_wage_groups: usize,
    pub true_params: SimParams,
    pub seed: u64,
    /// Choice-model draws per generated demand cell.
    pub gen_draws: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            n_zones: 12,
            n_wage_groups: 4,
            true_params: DEFAULT_TRUE_PARAMS,
            seed: 7,
            gen_draws: 20_000,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_zones < 2 {
            return Err(Error::invalid_input("fixture needs at least 2 zones"));
        }
        if self.n_wage_groups == 0 {
            return Err(Error::invalid_input("fixture needs at least 1 wage group"));
        }
        if self.gen_draws == 0 {
            return Err(Error::invalid_input("fixture needs gen_draws >= 1"));
        }
        self.true_params.validate()
    }
}

/// Ground-truth record written next to the generated tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub true_params: SimParams,
    pub seed: u64,
    pub n_zones: usize,
    pub n_wage_groups: usize,
    pub gen_draws: u64,
}

/// Read the manifest of a generated fixture directory.
pub fn read_manifest(dir: &Path) -> Result<FixtureManifest> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn mix(master: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

/// Multiplicative log-normal jitter with log-scale `s`.
fn jitter(rng: &mut impl Rng, s: f64) -> f64 {
    Normal::new(0.0, s).expect("finite scale").sample(rng).exp()
}

fn zone_id(i: usize, width: usize) -> String {
    format!("z{:0width$}", i + 1)
}

/// Attribute surfaces for one origin-destination pair at distance `d`.
fn pair_attrs(d: f64, rng: &mut impl Rng) -> PerMode<ModeAttributes> {
    let walk = if d > WALK_LIMIT_MILES {
        ModeAttributes::unavailable()
    } else {
        let t = d / 3.0 * jitter(rng, 0.05);
        ModeAttributes {
            time_mean_hr: t,
            time_std_hr: 0.08 * t,
            cost_mean_usd: 0.0,
            cost_std_usd: 0.0,
            distance_miles: d,
        }
    };
    let transit_available = rng.gen::<f64>() >= 0.06;
    let transit = if transit_available {
        let t = d / 7.0 * jitter(rng, 0.15) + 0.12 * jitter(rng, 0.2);
        ModeAttributes {
            time_mean_hr: t,
            time_std_hr: 0.18 * t,
            cost_mean_usd: 2.75,
            cost_std_usd: 0.0,
            distance_miles: d,
        }
    } else {
        ModeAttributes::unavailable()
    };
    let drive_t = d / 11.0 * jitter(rng, 0.12) + 0.06;
    let drive_c = 0.55 * d + 3.0 * jitter(rng, 0.35);
    let drive = ModeAttributes {
        time_mean_hr: drive_t,
        time_std_hr: 0.15 * drive_t,
        cost_mean_usd: drive_c,
        cost_std_usd: 0.08 * drive_c,
        distance_miles: d,
    };
    let taxi_t = d / 10.5 * jitter(rng, 0.12) + 0.07;
    let taxi_c = (2.9 + 2.6 * d) * jitter(rng, 0.08);
    let taxi = ModeAttributes {
        time_mean_hr: taxi_t,
        time_std_hr: 0.15 * taxi_t,
        cost_mean_usd: taxi_c,
        cost_std_usd: 0.1 * taxi_c,
        distance_miles: d,
    };
    let fhv_t = d / 10.8 * jitter(rng, 0.12) + 0.06;
    let fhv_c = (2.2 + 2.35 * d) * jitter(rng, 0.08);
    let fhv = ModeAttributes {
        time_mean_hr: fhv_t,
        time_std_hr: 0.15 * fhv_t,
        cost_mean_usd: fhv_c,
        cost_std_usd: 0.1 * fhv_c,
        distance_miles: d,
    };
    let sfhv_t = fhv_t * 1.28 * jitter(rng, 0.06);
    let sfhv_c = fhv_c * 0.62 * jitter(rng, 0.06);
    let sfhv = ModeAttributes {
        time_mean_hr: sfhv_t,
        time_std_hr: 0.15 * sfhv_t,
        cost_mean_usd: sfhv_c,
        cost_std_usd: 0.1 * sfhv_c,
        distance_miles: d,
    };
    PerMode::from_fn(|m| match m {
        Mode::Taxi => taxi,
        Mode::Transit => transit,
        Mode::Walk => walk,
        Mode::Drive => drive,
        Mode::Fhv => fhv,
        Mode::Sfhv => sfhv,
    })
}

/// Generate a fixture into `out`: canonical bundle files plus
/// `manifest.json`. Deterministic — the same spec reproduces the same
/// bytes. Returns the generated bundle.
pub fn gen_fixture(spec: &FixtureSpec, out: &Path) -> Result<DatasetBundle> {
    spec.validate()?;
    let stream = RngStream::new(spec.seed);
    let width = spec.n_zones.to_string().len();

    let mut zones = ZoneMap::new();
    let mut coords: Vec<(f64, f64)> = Vec::with_capacity(spec.n_zones);
    for i in 0..spec.n_zones {
        let id = zone_id(i, width);
        let mut rng = stream.substream(&[0x20_4E, i as u64]);
        let side = Uniform::new(0.0, 12.0);
        coords.push((side.sample(&mut rng), side.sample(&mut rng)));
        zones.insert(
            id.clone(),
            Zone {
                id: id.clone(),
                borough: BOROUGHS[i % BOROUGHS.len()].to_owned(),
                name: format!("Zone {}", i + 1),
            },
        );
    }

    let mut wages = WageTable::new();
    for k in 0..spec.n_wage_groups {
        let id = format!("g{}", k + 1);
        let wage = if spec.n_wage_groups == 1 {
            30.0
        } else {
            let t = k as f64 / (spec.n_wage_groups - 1) as f64;
            (15.0 * 5f64.powf(t) * 100.0).round() / 100.0
        };
        wages.insert(
            id.clone(),
            WageGroup {
                id,
                hourly_wage_usd: wage,
            },
        );
    }
    let group_ids: Vec<String> = wages.keys().cloned().collect();

    let mut wage_dist = WageDist::new();
    for i in 0..spec.n_zones {
        let mut rng = stream.substream(&[0xD1_57, i as u64]);
        let raw: Vec<f64> = (0..spec.n_wage_groups)
            .map(|_| rng.gen_range(0.5..1.5))
            .collect();
        let total: f64 = raw.iter().sum();
        let mut shares: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let head: f64 = shares[..spec.n_wage_groups - 1].iter().sum();
        shares[spec.n_wage_groups - 1] = 1.0 - head;
        wage_dist.insert(
            zone_id(i, width),
            group_ids.iter().cloned().zip(shares).collect(),
        );
    }

    let mut attrs = crate::types::AttrTable::new();
    let mut demand4 = Vec::new();
    let mut demand_tlc = Vec::new();
    let params = &spec.true_params;
    for i in 0..spec.n_zones {
        for j in 0..spec.n_zones {
            let (origin, destination) = (zone_id(i, width), zone_id(j, width));
            let d = if i == j {
                0.6
            } else {
                let (dx, dy) = (coords[i].0 - coords[j].0, coords[i].1 - coords[j].1);
                dx.hypot(dy).max(0.4)
            };
            let mut rng = stream.substream(&[0xA7_75, i as u64, j as u64]);
            let row = pair_attrs(d, &mut rng);
            attrs.insert(origin.clone(), destination.clone(), row);

            let mut rng = stream.substream(&[0xDE_3A, i as u64, j as u64]);
            let dropped = rng.gen::<f64>() < 0.12;
            let total_trips = 600.0 * jitter(&mut rng, 0.5) / (1.0 + d / 6.0);
            if dropped {
                continue;
            }

            let mut tlc_trips = PerMode::splat(0.0);
            for (k, group) in group_ids.iter().enumerate() {
                let share = wage_dist[&origin][group];
                let wage = wages[group].hourly_wage_usd;
                let cell_trips = total_trips * share;

                let costs4 = restricted_costs(&row, wage, params.beta, &SURVEY_MODES);
                let x4 = scaled_log_costs(&costs4, params.sigma)?;
                let seed4 = mix(spec.seed, &[0x4D_0D, i as u64, j as u64, k as u64]);
                let p4 = estimate_probs_mc(&x4, 0.0, 0.0, spec.gen_draws, seed4)?;
                demand4.push(DemandCell {
                    origin: origin.clone(),
                    destination: destination.clone(),
                    wage_group: Some(group.clone()),
                    trips: PerMode::from_fn(|m| cell_trips * p4[m]),
                });

                let costs6 = restricted_costs(&row, wage, params.beta, &Mode::ALL);
                let x6 = scaled_log_costs(&costs6, params.sigma)?;
                let seed6 = mix(spec.seed, &[0x71_C0, i as u64, j as u64, k as u64]);
                let p6 =
                    estimate_probs_mc(&x6, params.cor_tfs, params.cor_fs, spec.gen_draws, seed6)?;
                for m in [Mode::Taxi, Mode::Fhv, Mode::Sfhv] {
                    tlc_trips[m] += cell_trips * p6[m];
                }
            }
            demand_tlc.push(DemandCell {
                origin,
                destination,
                wage_group: None,
                trips: tlc_trips,
            });
        }
    }

    let bundle = DatasetBundle {
        zones,
        wages,
        wage_dist,
        demand4,
        demand_tlc,
        attrs,
    };
    save_bundle(out, &bundle)?;
    let manifest = FixtureManifest {
        true_params: spec.true_params,
        seed: spec.seed,
        n_zones: spec.n_zones,
        n_wage_groups: spec.n_wage_groups,
        gen_draws: spec.gen_draws,
    };
    let mut body = serde_json::to_string_pretty(&manifest)?;
    body.push('\n');
    std::fs::write(out.join(MANIFEST), body)?;
    Ok(bundle)
}
