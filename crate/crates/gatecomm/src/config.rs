//! Versioned TOML scenario and run configuration.
//!
//! A run file names or embeds a scenario; the resolved form (scenario
//! inlined, command-line overrides applied) is what gets archived.

use std::fs;
use std::path::{Path, PathBuf};

use gatecomm_core::nets::{ArchConfig, MAX_NEIGHBORS, MESSAGE_LEN};
use gatecomm_core::traffic::{
    build_grid_with, generate_flows, EnvSpec, FlowInterval, FlowProfile, FlowSchedule, GridSpec, ScenarioKind, SimConfig,
};
use gatecomm_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};

pub const CONFIG_VERSION: u32 = 1;

fn version_one() -> u32 {
    CONFIG_VERSION
}

fn default_edge() -> f64 {
    300.0
}

/// Road grid, demand and simulator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default = "version_one")]
    pub version: u32,
    pub rows: usize,
    pub cols: usize,
    #[serde(default = "default_edge")]
    pub edge_length: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fringe_length: Option<f64>,
    pub kind: ScenarioKind,
    /// Seed of the generated demand (ignored for custom flows).
    #[serde(default)]
    pub flow_seed: u64,
    #[serde(default)]
    pub profile: FlowProfile,
    /// Explicit intervals; only for `kind = "custom"`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flows: Vec<FlowInterval>,
    #[serde(default)]
    pub sim: SimConfig,
}

impl ScenarioSpec {
    pub fn environment(&self) -> AppResult<EnvSpec> {
        let network = build_grid_with(GridSpec {
            rows: self.rows,
            cols: self.cols,
            edge_length: self.edge_length,
            fringe_length: self.fringe_length,
        })?;
        let schedule = match self.kind {
            ScenarioKind::Custom => FlowSchedule::custom(self.flows.clone())?,
            kind => {
                if !self.flows.is_empty() {
                    return Err(AppError::Usage("explicit flows need kind = \"custom\"".into()));
                }
                generate_flows(&network, kind, &self.profile, self.flow_seed)?
            }
        };
        // Fail early on bad fringe references.
        schedule.insertions(&network, 0.0, 0.0)?;
        Ok(EnvSpec { network, schedule, sim: self.sim.clone() })
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let spec: Self = read_toml(path)?;
        check_version(path, spec.version)?;
        Ok(spec)
    }
}

/// Layer widths; message length and neighbour slots are fixed by the method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub hidden: usize,
    pub encoder: usize,
    pub mixer_embed: usize,
    pub hyper_hidden: usize,
}

impl Default for ArchSection {
    fn default() -> Self {
        let a = ArchConfig::new(1, 1, 1);
        Self { hidden: a.hidden, encoder: a.encoder, mixer_embed: a.mixer_embed, hyper_hidden: a.hyper_hidden }
    }
}

impl ArchSection {
    pub fn for_env(&self, env: &EnvSpec) -> ArchConfig {
        ArchConfig {
            hidden: self.hidden,
            encoder: self.encoder,
            mixer_embed: self.mixer_embed,
            hyper_hidden: self.hyper_hidden,
            message_len: MESSAGE_LEN,
            max_neighbors: MAX_NEIGHBORS,
            ..ArchConfig::new(env.obs_dim(), env.n_phases(), env.n_agents())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "version_one")]
    pub version: u32,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Scenario file, relative to the run file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSpec>,
    #[serde(default)]
    pub arch: ArchSection,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl RunConfig {
    pub fn new(scenario: ScenarioSpec, train: TrainConfig) -> Self {
        Self {
            version: CONFIG_VERSION,
            out_dir: default_out(),
            scenario_file: None,
            scenario: Some(scenario),
            arch: ArchSection::default(),
            train,
        }
    }

    /// Reads a run file and inlines its scenario.
    pub fn load(path: &Path) -> AppResult<Self> {
        let mut cfg: Self = read_toml(path)?;
        check_version(path, cfg.version)?;
        if let Some(rel) = cfg.scenario_file.take() {
            if cfg.scenario.is_some() {
                return Err(AppError::Parse {
                    path: path.to_path_buf(),
                    message: "give either scenario_file or [scenario], not both".into(),
                });
            }
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.scenario = Some(ScenarioSpec::load(&base.join(rel))?);
        }
        Ok(cfg)
    }

    pub fn scenario(&self) -> AppResult<&ScenarioSpec> {
        self.scenario.as_ref().ok_or_else(|| AppError::Usage("run configuration has no scenario".into()))
    }

    pub fn environment(&self) -> AppResult<EnvSpec> {
        self.scenario()?.environment()
    }

    pub fn validate(&self) -> AppResult<()> {
        self.train.validate()?;
        self.environment()?;
        let a = self.arch;
        if a.hidden == 0 || a.encoder == 0 || a.mixer_embed == 0 || a.hyper_hidden == 0 {
            return Err(AppError::Usage("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> AppResult<String> {
        toml::to_string_pretty(self).map_err(|e| AppError::Usage(format!("cannot serialise configuration: {e}")))
    }

    /// SHA-256 of the resolved TOML text.
    pub fn hash(&self) -> AppResult<String> {
        Ok(hex(&Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Writes the resolved configuration into `dir/config.toml`.
    pub fn archive(&self, dir: &Path) -> AppResult<PathBuf> {
        fs::create_dir_all(dir).map_err(AppError::io(dir))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()?).map_err(AppError::io(&path))?;
        Ok(path)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> AppResult<T> {
    let text = fs::read_to_string(path).map_err(AppError::io(path))?;
    toml::from_str(&text).map_err(|e| AppError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

fn check_version(path: &Path, v: u32) -> AppResult<()> {
    if v != CONFIG_VERSION {
        return Err(AppError::Parse {
            path: path.to_path_buf(),
            message: format!("unsupported configuration version {v} (expected {CONFIG_VERSION})"),
        });
    }
    Ok(())
}
