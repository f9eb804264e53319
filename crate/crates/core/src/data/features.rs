use super::raw::{RawVar, ScadaRecord};
use crate::error::{Error, Result};

pub const FEATURE_COUNT: usize = 28;

/// Engineered attribute names in model input order.
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "wind_speed",
    "generator_speed",
    "power",
    "wind_direction",
    "wind_direction_mean",
    "yaw_position",
    "yaw_speed",
    "acc_x",
    "acc_y",
    "environment_tmp",
    "int_tmp",
    "pitch1_ng5_tmp",
    "pitch2_ng5_tmp",
    "pitch3_ng5_tmp",
    "pitch1_ng5_DC",
    "pitch2_ng5_DC",
    "pitch3_ng5_DC",
    "pitch_angle_mean",
    "pitch_speed_mean",
    "pitch_moto_tmp_mean",
    "k_w2p",
    "k_w2g",
    "k_w2pg",
    "k1",
    "k2",
    "k3",
    "k4",
    "k5",
];

/// Index of a named feature.
pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|n| *n == name)
}

/// Smallest denominator magnitude used by the ratio features.
pub const DENOM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector(pub [f64; FEATURE_COUNT]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Engineered {
    pub features: FeatureVector,
    /// Set when a denominator had to be pushed away from zero.
    pub degenerate: bool,
}

fn guard(d: f64, degenerate: &mut bool) -> f64 {
    if d.abs() < DENOM_EPS {
        *degenerate = true;
        if d < 0.0 {
            d - DENOM_EPS
        } else {
            d + DENOM_EPS
        }
    } else {
        d
    }
}

/// Blade means plus the three growth ratios and five temperature/power
/// factors, appended to the pass-through raw variables.
pub fn engineer_features(record: &ScadaRecord) -> Result<Engineered> {
    if let Some(v) = RawVar::ALL.iter().find(|&&v| !record.get(v).is_finite()) {
        return Err(Error::Input(format!(
            "record {} has no finite {}",
            record.row,
            v.name()
        )));
    }
    let g = |v: RawVar| record.get(v);
    let mean3 = |a, b, c| (g(a) + g(b) + g(c)) / 3.0;
    let mut degenerate = false;
    let v_ws = g(RawVar::WindSpeed);
    let v_gs = g(RawVar::GeneratorSpeed);
    let p = g(RawVar::Power);

    let w2p = ((v_ws + 5.0) / guard(p + 5.0, &mut degenerate)).powi(2) - 1.0;
    let w2g = ((v_ws + 5.0) / guard(v_gs + 5.0, &mut degenerate)).powi(2) - 1.0;
    let w2pg = (w2p + 1.0) * (w2g + 1.0) - 1.0;
    let k1 = g(RawVar::IntTmp) - g(RawVar::EnvironmentTmp);
    let k2 = p / guard(v_gs, &mut degenerate);
    let k3 = p / guard(v_ws.powi(3), &mut degenerate);
    let k4 = k2 / guard(v_ws * v_ws, &mut degenerate);
    let k5 = v_gs / guard(v_ws, &mut degenerate);

    let f = [
        v_ws,
        v_gs,
        p,
        g(RawVar::WindDirection),
        g(RawVar::WindDirectionMean),
        g(RawVar::YawPosition),
        g(RawVar::YawSpeed),
        g(RawVar::AccX),
        g(RawVar::AccY),
        g(RawVar::EnvironmentTmp),
        g(RawVar::IntTmp),
        g(RawVar::Pitch1Ng5Tmp),
        g(RawVar::Pitch2Ng5Tmp),
        g(RawVar::Pitch3Ng5Tmp),
        g(RawVar::Pitch1Ng5Dc),
        g(RawVar::Pitch2Ng5Dc),
        g(RawVar::Pitch3Ng5Dc),
        mean3(
            RawVar::Pitch1Angle,
            RawVar::Pitch2Angle,
            RawVar::Pitch3Angle,
        ),
        mean3(
            RawVar::Pitch1Speed,
            RawVar::Pitch2Speed,
            RawVar::Pitch3Speed,
        ),
        mean3(
            RawVar::Pitch1MotoTmp,
            RawVar::Pitch2MotoTmp,
            RawVar::Pitch3MotoTmp,
        ),
        w2p,
        w2g,
        w2pg,
        k1,
        k2,
        k3,
        k4,
        k5,
    ];
    if let Some(i) = f.iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!(
            "record {}: {} is not finite",
            record.row, FEATURE_NAMES[i]
        )));
    }
    Ok(Engineered {
        features: FeatureVector(f),
        degenerate,
    })
}
