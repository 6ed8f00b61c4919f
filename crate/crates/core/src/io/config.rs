//! Run configuration: parameter-grid sizing, scenario presets and files,
//! and the canonical config digest stamped into every report.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::PriorSpec;
use crate::types::{Mode, Scenario};

/// Posterior grid dimensions as given on the command line (`BxSxC`);
/// the third number is the side of the square correlation lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_beta: usize,
    pub n_sigma: usize,
    pub n_corr: usize,
}

impl GridSpec {
    /// Total number of parameter samples the grid generates.
    pub fn total_samples(&self) -> usize {
        self.n_beta * self.n_sigma * self.n_corr * self.n_corr
    }

    /// Prior with these counts and the shipped location/scale defaults.
    pub fn prior(&self) -> PriorSpec {
        PriorSpec {
            n_beta: self.n_beta,
            n_sigma: self.n_sigma,
            n_corr: self.n_corr,
            ..PriorSpec::default()
        }
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        let p = PriorSpec::default();
        GridSpec {
            n_beta: p.n_beta,
            n_sigma: p.n_sigma,
            n_corr: p.n_corr,
        }
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<GridSpec> {
        let parts: Vec<&str> = s.split('x').collect();
        let [b, sg, c] = parts.as_slice() else {
            return Err(Error::invalid_input(format!(
                "grid must be BxSxC (e.g. 10x10x10), got '{s}'"
            )));
        };
        let parse = |p: &str| -> Result<usize> {
            p.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    Error::invalid_input(format!("grid component '{p}' must be a positive integer"))
                })
        };
        Ok(GridSpec {
            n_beta: parse(b)?,
            n_sigma: parse(sg)?,
            n_corr: parse(c)?,
        })
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.n_beta, self.n_sigma, self.n_corr)
    }
}

/// A named pair of scenarios: A is the intervention, B the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub a: Scenario,
    pub b: Scenario,
}

/// On-disk scenario file: `{"a": {...}, "b": {...}}` with B optional
/// (defaults to the do-nothing baseline).
#[derive(Deserialize)]
struct ScenarioFile {
    a: Scenario,
    #[serde(default)]
    b: Scenario,
}

impl ScenarioSpec {
    /// Counterfactual removal of shared for-hire vehicles.
    pub fn no_sfhv() -> ScenarioSpec {
        ScenarioSpec {
            name: "no-sfhv".to_owned(),
            a: Scenario::removal([Mode::Sfhv]),
            b: Scenario::default(),
        }
    }

    /// Congestion surcharge on for-hire trips originating in Manhattan:
    /// $2.50 taxi, $2.75 FHV, $1.50 shared FHV.
    pub fn manhattan_surcharge() -> ScenarioSpec {
        ScenarioSpec {
            name: "surcharge".to_owned(),
            a: Scenario::surcharge(
                &[(Mode::Taxi, 2.50), (Mode::Fhv, 2.75), (Mode::Sfhv, 1.50)],
                Some("Manhattan"),
            ),
            b: Scenario::default(),
        }
    }

    /// Load a scenario pair from a JSON file; the spec name is the file stem.
    pub fn from_file(path: &Path) -> Result<ScenarioSpec> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path)?;
        let file: ScenarioFile = serde_json::from_str(&text)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scenario".to_owned());
        let spec = ScenarioSpec {
            name,
            a: file.a,
            b: file.b,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Resolve a CLI scenario argument: a preset name or a JSON file path.
    pub fn resolve(arg: &str) -> Result<ScenarioSpec> {
        match arg {
            "no-sfhv" => Ok(ScenarioSpec::no_sfhv()),
            "surcharge" => Ok(ScenarioSpec::manhattan_surcharge()),
            path => ScenarioSpec::from_file(Path::new(path)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.a.validate()?;
        self.b.validate()
    }
}

/// The resolved knobs of one CLI invocation, in canonical key order, used
/// for logging and for the report's provenance digest.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub master_seed: u64,
    pub settings: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new(command: &str, master_seed: u64) -> RunConfig {
        RunConfig {
            command: command.to_owned(),
            master_seed,
            settings: BTreeMap::new(),
        }
    }

    /// Record one resolved setting under its flag name.
    pub fn set(&mut self, key: &str, value: impl fmt::Display) -> &mut Self {
        self.settings.insert(key.to_owned(), value.to_string());
        self
    }

    pub fn digest(&self) -> String {
        config_digest(self)
    }

    /// Log the full resolved configuration to stderr so any run can be
    /// reproduced from its transcript.
    pub fn log(&self) {
        let body = serde_json::to_string(self).unwrap_or_else(|_| "<unserializable>".to_owned());
        eprintln!("config {} (digest {})", body, self.digest());
    }
}

/// SHA-256 hex digest of a value's canonical JSON serialization.
pub fn config_digest(value: &impl Serialize) -> String {
    let json = serde_json::to_string(value).unwrap_or_default();
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
