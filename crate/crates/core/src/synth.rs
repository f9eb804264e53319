//! Deterministic synthetic SCADA generator with normal and icing regimes.
//!
//! Units mimic an anonymized turbine export: wind speed in m/s, temperatures
//! in °C and power on a rescaled axis where rated output is 2.5, so readings
//! above 2 form a thin high-wind tail. Icing records lose power at a given wind
//! speed, turn the generator slightly slower, show sub-zero ambient
//! temperature and a small rotor imbalance.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Weibull};

use crate::data::{fill_trailing_direction_mean, Label, RawVar, ScadaRecord, RAW_COUNT};
use crate::error::{Error, Result};

pub const SAMPLE_INTERVAL_S: f64 = 7.0;
pub const DIRECTION_WINDOW_S: f64 = 25.0;

const RATED_POWER: f64 = 2.5;
/// Blade pitch while idling below cut-in, degrees.
const FEATHERED_PITCH: (f64, f64) = (60.0, 85.0);
/// Weibull scale of the site wind climate (shape 2), m/s.
const WIND_SCALE: f64 = 5.5;
const CUT_IN: f64 = 3.0;
const RATED_WIND: f64 = 12.0;
const MIN_WIND: f64 = 1.0;
const MAX_WIND: f64 = 22.0;
const ICING_WIND: (f64, f64) = (3.5, 8.5);

/// Per-variable affine map `x ↦ gain·x + offset`, applied after generation.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShift {
    pub gain: [f64; RAW_COUNT],
    pub offset: [f64; RAW_COUNT],
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            gain: [1.0; RAW_COUNT],
            offset: [0.0; RAW_COUNT],
        }
    }
}

impl DomainShift {
    pub fn from_pairs(pairs: &[(RawVar, f64, f64)]) -> DomainShift {
        let mut s = DomainShift::default();
        for &(v, g, o) in pairs {
            s.gain[v.index()] = g;
            s.offset[v.index()] = o;
        }
        s
    }

    /// A second turbine with recalibrated anemometer, power transducer and
    /// temperature sensors.
    pub fn second_turbine() -> DomainShift {
        DomainShift::from_pairs(&[
            (RawVar::WindSpeed, 0.8, 0.8),
            (RawVar::GeneratorSpeed, 1.2, 0.0),
            (RawVar::Power, 1.3, 0.4),
            (RawVar::EnvironmentTmp, 1.0, 4.0),
            (RawVar::IntTmp, 1.0, 6.0),
            (RawVar::AccX, 1.6, 0.04),
            (RawVar::AccY, 1.6, -0.04),
        ])
    }

    pub fn is_identity(&self) -> bool {
        self.gain.iter().all(|g| *g == 1.0) && self.offset.iter().all(|o| *o == 0.0)
    }

    pub fn apply(&self, v: RawVar, x: f64) -> f64 {
        self.gain[v.index()] * x + self.offset[v.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_records: usize,
    pub icing_fraction: f64,
    pub invalid_fraction: f64,
    /// Multiplies every noise standard deviation.
    pub noise_scale: f64,
    /// Power multiplier during icing, in `(0, 1)`.
    pub icing_power_factor: f64,
    pub domain_shift: DomainShift,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_records: 50_000,
            icing_fraction: 0.06,
            invalid_fraction: 0.05,
            noise_scale: 1.0,
            icing_power_factor: 0.5,
            domain_shift: DomainShift::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.icing_fraction, self.invalid_fraction];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || fracs.iter().sum::<f64>() > 1.0 {
            return Err(Error::Config(
                "icing and invalid fractions must lie in [0, 1] and sum to at most 1".into(),
            ));
        }
        if !(self.icing_power_factor > 0.0 && self.icing_power_factor < 1.0) {
            return Err(Error::Config(
                "icing_power_factor must lie in (0, 1)".into(),
            ));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(
                "noise_scale must be finite and non-negative".into(),
            ));
        }
        let s = &self.domain_shift;
        if s.gain.iter().chain(&s.offset).any(|v| !v.is_finite()) || s.gain.contains(&0.0) {
            return Err(Error::Config(
                "domain shift gains must be finite and nonzero".into(),
            ));
        }
        Ok(())
    }

    pub fn icing_count(&self) -> usize {
        (self.n_records as f64 * self.icing_fraction).round() as usize
    }

    pub fn invalid_count(&self) -> usize {
        (self.n_records as f64 * self.invalid_fraction).round() as usize
    }
}

fn power_curve(v: f64) -> f64 {
    let f = (v.powi(3) - CUT_IN.powi(3)) / (RATED_WIND.powi(3) - CUT_IN.powi(3));
    RATED_POWER * f.clamp(0.0, 1.0)
}

struct Noise {
    std: Normal<f64>,
    scale: f64,
}

impl Noise {
    fn draw<R: Rng>(&self, rng: &mut R, sd: f64) -> f64 {
        self.std.sample(rng) * sd * self.scale
    }
}

fn operating_point<R: Rng>(
    rng: &mut R,
    icing: bool,
    factor: f64,
    noise: &Noise,
    wind: &Weibull<f64>,
) -> [f64; RAW_COUNT] {
    let v = if icing {
        loop {
            let v = wind.sample(rng);
            if (ICING_WIND.0..=ICING_WIND.1).contains(&v) {
                break v;
            }
        }
    } else {
        wind.sample(rng).clamp(MIN_WIND, MAX_WIND)
    };
    let t_env = if icing {
        rng.gen_range(-10.0..-0.5)
    } else {
        4.0 + 6.0 * noise.std.sample(rng)
    };
    let p_ideal = power_curve(v) * if icing { factor } else { 1.0 };
    let p = (p_ideal + noise.draw(rng, 0.03 + 0.02 * p_ideal)).max(-0.5);
    let gs = (1.0 + 1.2 * v).min(16.0) * if icing { 0.9 } else { 1.0 } + noise.draw(rng, 0.1);
    let pitch = if v < CUT_IN {
        rng.gen_range(FEATHERED_PITCH.0..FEATHERED_PITCH.1)
    } else if v > RATED_WIND {
        2.5 * (v - RATED_WIND)
    } else {
        0.0
    } + noise.draw(rng, 0.2).abs();
    let pitch_speed = noise.draw(rng, 0.1);
    let t_int = t_env + 12.0 + if icing { 1.0 } else { 0.0 } + noise.draw(rng, 1.5);
    let moto = t_env + 25.0 + noise.draw(rng, 1.0);
    let imbalance = if icing { 0.04 } else { 0.0 };

    let mut x = [0.0; RAW_COUNT];
    let mut set = |var: RawVar, val: f64| x[var.index()] = val;
    set(RawVar::WindSpeed, v);
    set(RawVar::GeneratorSpeed, gs.max(0.5));
    set(RawVar::Power, p);
    set(RawVar::YawSpeed, noise.draw(rng, 0.3));
    for (a, s, m) in [
        (
            RawVar::Pitch1Angle,
            RawVar::Pitch1Speed,
            RawVar::Pitch1MotoTmp,
        ),
        (
            RawVar::Pitch2Angle,
            RawVar::Pitch2Speed,
            RawVar::Pitch2MotoTmp,
        ),
        (
            RawVar::Pitch3Angle,
            RawVar::Pitch3Speed,
            RawVar::Pitch3MotoTmp,
        ),
    ] {
        set(a, pitch + noise.draw(rng, 0.05));
        set(s, pitch_speed + noise.draw(rng, 0.02));
        set(m, moto + noise.draw(rng, 0.3));
    }
    set(RawVar::AccX, imbalance + noise.draw(rng, 0.02 + 0.004 * v));
    set(
        RawVar::AccY,
        0.5 * imbalance + noise.draw(rng, 0.02 + 0.004 * v),
    );
    set(RawVar::EnvironmentTmp, t_env);
    set(RawVar::IntTmp, t_int);
    for t in [
        RawVar::Pitch1Ng5Tmp,
        RawVar::Pitch2Ng5Tmp,
        RawVar::Pitch3Ng5Tmp,
    ] {
        set(t, t_int + 8.0 + noise.draw(rng, 1.0));
    }
    for d in [
        RawVar::Pitch1Ng5Dc,
        RawVar::Pitch2Ng5Dc,
        RawVar::Pitch3Ng5Dc,
    ] {
        set(d, 0.5 + noise.draw(rng, 0.1));
    }
    x
}

/// Generates `n_records` labeled records at a fixed sampling interval.
///
/// Exactly `icing_count()` records are icing and `invalid_count()` are
/// invalid (one to three fields blanked, label `-1`); the rest are normal.
pub fn generate(config: &SynthConfig) -> Result<Vec<ScadaRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_records;
    let mut labels = vec![Label::Normal; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (n_ic, n_inv) = (config.icing_count(), config.invalid_count());
    for &i in &order[..n_ic] {
        labels[i] = Label::Icing;
    }
    for &i in &order[n_ic..n_ic + n_inv] {
        labels[i] = Label::Invalid;
    }

    let noise = Noise {
        std: Normal::new(0.0, 1.0).expect("unit normal"),
        scale: config.noise_scale,
    };
    let wind = Weibull::new(WIND_SCALE, 2.0).expect("valid weibull");
    let mut direction: f64 = rng.gen_range(0.0..360.0);
    let mut records = Vec::with_capacity(n);
    for (row, &label) in labels.iter().enumerate() {
        let mut values = operating_point(
            &mut rng,
            label == Label::Icing,
            config.icing_power_factor,
            &noise,
            &wind,
        );
        direction = (direction + 3.0 * noise.std.sample(&mut rng)).rem_euclid(360.0);
        values[RawVar::WindDirection.index()] = direction;
        values[RawVar::YawPosition.index()] =
            (direction + noise.draw(&mut rng, 4.0)).rem_euclid(360.0);
        records.push(ScadaRecord {
            row,
            time: row as f64 * SAMPLE_INTERVAL_S,
            values,
            label,
        });
    }
    fill_trailing_direction_mean(
        &mut records,
        RawVar::WindDirection,
        RawVar::WindDirectionMean,
        DIRECTION_WINDOW_S,
    );

    for r in &mut records {
        for v in RawVar::ALL {
            let x = config.domain_shift.apply(v, r.get(v));
            let x = match v {
                // keep angles on the circle
                RawVar::WindDirection | RawVar::WindDirectionMean | RawVar::YawPosition => {
                    x.rem_euclid(360.0)
                }
                _ => x,
            };
            r.set(v, x);
        }
        if r.label == Label::Invalid {
            let blanks = rng.gen_range(1..=3);
            for v in RawVar::ALL.choose_multiple(&mut rng, blanks) {
                r.set(*v, f64::NAN);
            }
        }
    }
    Ok(records)
}
