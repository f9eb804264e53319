//! TOML run configuration.
//!
//! ```toml
//! [synth]
//! n_records = 50000
//! shift = "second_turbine"
//!
//! [split]
//! test_normal_ratio = 10
//!
//! [harness.transfer]
//! alpha = 0.1
//!
//! [eval]
//! score_convention = "swapped"
//! ```

use std::path::Path;

use icegan::data::SplitConfig;
use icegan::eval::{HarnessConfig, ScoreConvention};
use icegan::synth::{DomainShift, SynthConfig};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthSection,
    pub split: SplitSection,
    pub harness: HarnessConfig,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftName {
    #[default]
    None,
    SecondTurbine,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_records: usize,
    pub icing_fraction: f64,
    pub invalid_fraction: f64,
    pub noise_scale: f64,
    pub icing_power_factor: f64,
    pub shift: ShiftName,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSection {
            n_records: d.n_records,
            icing_fraction: d.icing_fraction,
            invalid_fraction: d.invalid_fraction,
            noise_scale: d.noise_scale,
            icing_power_factor: d.icing_power_factor,
            shift: ShiftName::None,
        }
    }
}

impl SynthSection {
    pub fn to_config(&self, shift: ShiftName, seed: u64) -> SynthConfig {
        SynthConfig {
            n_records: self.n_records,
            icing_fraction: self.icing_fraction,
            invalid_fraction: self.invalid_fraction,
            noise_scale: self.noise_scale,
            icing_power_factor: self.icing_power_factor,
            domain_shift: match shift {
                ShiftName::None => DomainShift::default(),
                ShiftName::SecondTurbine => DomainShift::second_turbine(),
            },
            seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train_icing_frac: f64,
    pub test_icing_frac: f64,
    pub test_normal_ratio: usize,
    pub transfer_icing_frac: f64,
    pub power_threshold: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let d = SplitConfig::default();
        SplitSection {
            train_icing_frac: d.train_icing_frac,
            test_icing_frac: d.test_icing_frac,
            test_normal_ratio: d.test_normal_ratio,
            transfer_icing_frac: d.transfer_icing_frac,
            power_threshold: d.power_threshold,
        }
    }
}

impl SplitSection {
    pub fn to_config(&self) -> Result<SplitConfig, CliError> {
        for (name, f) in [
            ("train_icing_frac", self.train_icing_frac),
            ("test_icing_frac", self.test_icing_frac),
            ("transfer_icing_frac", self.transfer_icing_frac),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(CliError::Config(format!(
                    "split.{name} must lie in [0, 1], got {f}"
                )));
            }
        }
        if self.train_icing_frac + self.test_icing_frac > 1.0
            || self.transfer_icing_frac + self.test_icing_frac > 1.0
        {
            return Err(CliError::Config(
                "split fractions of one icing pool must sum to at most 1".into(),
            ));
        }
        if !self.power_threshold.is_finite() {
            return Err(CliError::Config(
                "split.power_threshold must be finite".into(),
            ));
        }
        Ok(SplitConfig {
            train_icing_frac: self.train_icing_frac,
            test_icing_frac: self.test_icing_frac,
            test_normal_ratio: self.test_normal_ratio,
            transfer_icing_frac: self.transfer_icing_frac,
            power_threshold: self.power_threshold,
        })
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub score_convention: Option<String>,
}

impl EvalSection {
    pub fn convention(&self) -> Result<ScoreConvention, CliError> {
        match &self.score_convention {
            None => Ok(ScoreConvention::default()),
            Some(s) => ScoreConvention::parse(s).ok_or_else(|| {
                CliError::Config(format!(
                    "unknown score convention {s:?} (verbatim or swapped)"
                ))
            }),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("run config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::io(format!("reading {}", p.display()), e))?;
                RunConfig::parse(&text)
            }
        }
    }
}
