use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::features::{FeatureVector, FEATURE_COUNT, FEATURE_NAMES};
use crate::error::{Error, Result};

pub const Y_MIN: f64 = -1.0;
pub const Y_MAX: f64 = 1.0;

/// Per-feature min-max scaling onto `[Y_MIN, Y_MAX]`.
///
/// Values outside the fitted range are not clipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub min: [f64; FEATURE_COUNT],
    pub max: [f64; FEATURE_COUNT],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Range {
    min: f64,
    max: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    y_min: f64,
    y_max: f64,
    features: BTreeMap<String, Range>,
}

impl Scaler {
    pub fn fit(data: &[FeatureVector]) -> Result<Scaler> {
        if data.is_empty() {
            return Err(Error::Usage("cannot fit a scaler on no samples".into()));
        }
        let mut min = [f64::INFINITY; FEATURE_COUNT];
        let mut max = [f64::NEG_INFINITY; FEATURE_COUNT];
        for x in data {
            for k in 0..FEATURE_COUNT {
                min[k] = min[k].min(x.0[k]);
                max[k] = max[k].max(x.0[k]);
            }
        }
        for k in 0..FEATURE_COUNT {
            if min[k] == max[k] {
                warn!("feature {} is constant; it scales to 0", FEATURE_NAMES[k]);
            }
        }
        Ok(Scaler { min, max })
    }

    pub fn apply(&self, x: &FeatureVector) -> FeatureVector {
        FeatureVector(std::array::from_fn(|k| {
            let span = self.max[k] - self.min[k];
            if span > 0.0 {
                Y_MIN + (Y_MAX - Y_MIN) * (x.0[k] - self.min[k]) / span
            } else {
                0.5 * (Y_MIN + Y_MAX)
            }
        }))
    }

    pub fn apply_all(&self, data: &[FeatureVector]) -> Vec<FeatureVector> {
        data.iter().map(|x| self.apply(x)).collect()
    }

    /// Inverse map; constant features come back as their fitted value.
    pub fn invert(&self, x: &FeatureVector) -> FeatureVector {
        FeatureVector(std::array::from_fn(|k| {
            let span = self.max[k] - self.min[k];
            self.min[k] + span * (x.0[k] - Y_MIN) / (Y_MAX - Y_MIN)
        }))
    }

    /// CRC-32 over the bit patterns of the fitted ranges.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for v in self.min.iter().chain(&self.max) {
            h.update(&v.to_bits().to_le_bytes());
        }
        h.finalize()
    }

    pub fn to_toml(&self) -> String {
        let features = FEATURE_NAMES
            .iter()
            .enumerate()
            .map(|(k, n)| {
                (
                    n.to_string(),
                    Range {
                        min: self.min[k],
                        max: self.max[k],
                    },
                )
            })
            .collect();
        toml::to_string(&Sidecar {
            y_min: Y_MIN,
            y_max: Y_MAX,
            features,
        })
        .expect("scaler serializes")
    }

    pub fn from_toml(text: &str) -> Result<Scaler> {
        let s: Sidecar =
            toml::from_str(text).map_err(|e| Error::Config(format!("scaler sidecar: {e}")))?;
        if s.y_min != Y_MIN || s.y_max != Y_MAX {
            return Err(Error::Config(
                "scaler sidecar has an unsupported target range".into(),
            ));
        }
        let mut min = [0.0; FEATURE_COUNT];
        let mut max = [0.0; FEATURE_COUNT];
        for (k, name) in FEATURE_NAMES.iter().enumerate() {
            let r = s
                .features
                .get(*name)
                .ok_or_else(|| Error::Config(format!("scaler sidecar lacks {name}")))?;
            if !(r.min <= r.max) {
                return Err(Error::Config(format!(
                    "scaler range for {name} is inverted"
                )));
            }
            min[k] = r.min;
            max[k] = r.max;
        }
        if s.features.len() != FEATURE_COUNT {
            return Err(Error::Config("scaler sidecar has unknown features".into()));
        }
        Ok(Scaler { min, max })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Scaler> {
        Scaler::from_toml(&std::fs::read_to_string(path)?)
    }
}
