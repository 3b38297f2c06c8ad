//! Run configuration: TOML file, command-line overrides and the mapping onto
//! library settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dynrd::aggregate::{
    BandwidthMode, CohortSpec, EstimationConfig, EventStudyConfig, OnCohortError, WeightScheme,
};
use dynrd::bandwidth::BandwidthConfig;
use dynrd::data::ColumnMap;
use dynrd::estimator::NnConfig;
use dynrd::localpoly::{Kernel, KernelKind};
use dynrd::pretrend::PretestConfig;
use dynrd::sim::{DgpParams, McConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub input: Option<PathBuf>,
    pub cutoff: f64,
    pub columns: ColumnMap,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            input: None,
            cutoff: 0.0,
            columns: ColumnMap::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationSection {
    pub alpha: f64,
    pub kernel: KernelKind,
    pub jstar: usize,
    /// Main bandwidth; automatic selection when absent.
    pub h: Option<f64>,
    /// Pilot bandwidth; required together with `h`.
    pub b: Option<f64>,
    pub weights: WeightScheme,
    pub on_cohort_error: OnCohortError,
    pub min_per_side: usize,
    pub min_in_window: usize,
    pub fallback_ratio: f64,
    pub near_fraction: f64,
}

impl Default for EstimationSection {
    fn default() -> Self {
        let est = EstimationConfig::default();
        let sel = est.selector;
        Self {
            alpha: est.alpha,
            kernel: sel.kernel.kind,
            jstar: sel.nn.j_star,
            h: None,
            b: None,
            weights: est.weights,
            on_cohort_error: est.on_cohort_error,
            min_per_side: sel.min_per_side,
            min_in_window: sel.min_in_window,
            fallback_ratio: sel.fallback_ratio,
            near_fraction: sel.near_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub k: usize,
    pub k_pre: usize,
    pub tau_max: usize,
    /// Groups of focal periods pooled into one cohort; every period on its own when empty.
    pub groups: Vec<Vec<i64>>,
}

impl Default for StudySection {
    fn default() -> Self {
        let d = EventStudyConfig::default();
        Self {
            k: d.k,
            k_pre: d.k_pre,
            tau_max: d.tau_max,
            groups: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretestSection {
    /// Earlier pre-period lag.
    pub u: usize,
    /// Later pre-period lag.
    pub v: usize,
    pub horizon: usize,
    pub focal: Option<Vec<i64>>,
}

impl Default for PretestSection {
    fn default() -> Self {
        let d = PretestConfig::default();
        Self {
            u: d.far_lag,
            v: d.near_lag,
            horizon: d.horizon,
            focal: d.focal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub reps: usize,
    /// Run the common-trends test in every replication.
    pub pretest: bool,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            reps: 50,
            pretest: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Worker threads; zero uses every available core.
    pub workers: usize,
    pub data: DataSection,
    pub estimation: EstimationSection,
    pub study: StudySection,
    pub pretest: PretestSection,
    pub sim: DgpParams,
    pub mc: McSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("dynrd-out"),
            workers: 0,
            data: DataSection::default(),
            estimation: EstimationSection::default(),
            study: StudySection::default(),
            pretest: PretestSection::default(),
            sim: DgpParams {
                n: 5000,
                ..DgpParams::default()
            },
            mc: McSection::default(),
        }
    }
}

/// Values given on the command line; each replaces the configured one.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Overrides {
    #[serde(flatten)]
    pub values: BTreeMap<String, serde_json::Value>,
}

impl Overrides {
    pub fn set(&mut self, flag: &str, value: impl Serialize) {
        let value = serde_json::to_value(value).expect("flag values serialise");
        self.values.insert(flag.to_string(), value);
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let e = &self.estimation;
        if e.h.is_some() != e.b.is_some() {
            return Err(CliError::Config("h and b must be given together".into()));
        }
        self.estimation_config().validate()?;
        self.sim.validate()?;
        if self.mc.reps == 0 {
            return Err(CliError::Config("mc.reps must be at least 1".into()));
        }
        if self.pretest.v >= self.pretest.u {
            return Err(CliError::Config(
                "pretest.v must be smaller than pretest.u".into(),
            ));
        }
        if self.study.k == 0 {
            return Err(CliError::Config("study.k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn input(&self) -> Result<&Path, CliError> {
        self.data
            .input
            .as_deref()
            .ok_or_else(|| CliError::Config("no input file; pass --input or set data.input".into()))
    }

    pub fn estimation_config(&self) -> EstimationConfig {
        let e = &self.estimation;
        let bandwidth = match (e.h, e.b) {
            (Some(h), Some(b)) => BandwidthMode::Fixed { h, b },
            _ => BandwidthMode::Auto,
        };
        EstimationConfig {
            alpha: e.alpha,
            bandwidth,
            selector: BandwidthConfig {
                kernel: Kernel {
                    kind: e.kernel,
                    ..Kernel::triangular()
                },
                nn: NnConfig { j_star: e.jstar },
                min_per_side: e.min_per_side,
                fallback_ratio: e.fallback_ratio,
                near_fraction: e.near_fraction,
                min_in_window: e.min_in_window,
            },
            weights: e.weights,
            on_cohort_error: e.on_cohort_error,
        }
    }

    pub fn study_config(&self) -> EventStudyConfig {
        EventStudyConfig {
            k: self.study.k,
            k_pre: self.study.k_pre,
            tau_max: self.study.tau_max,
            cohorts: if self.study.groups.is_empty() {
                CohortSpec::Each
            } else {
                CohortSpec::Groups(self.study.groups.clone())
            },
            estimation: self.estimation_config(),
        }
    }

    pub fn pretest_config(&self) -> PretestConfig {
        PretestConfig {
            k: self.study.k,
            far_lag: self.pretest.u,
            near_lag: self.pretest.v,
            horizon: self.pretest.horizon,
            focal: self.pretest.focal.clone(),
            alpha: self.estimation.alpha,
        }
    }

    pub fn mc_config(&self) -> McConfig {
        McConfig {
            study: self.study_config(),
            pretest: self.mc.pretest.then(|| self.pretest_config()),
            workers: self.workers,
        }
    }

    /// SHA-256 of the resolved configuration in canonical JSON form.
    pub fn hash(&self, command: &str) -> String {
        let json = serde_json::to_string(self).expect("configuration serialises");
        let digest = Sha256::new()
            .chain_update(command.as_bytes())
            .chain_update([0u8])
            .chain_update(json.as_bytes())
            .finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
