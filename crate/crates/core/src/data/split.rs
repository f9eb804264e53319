use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::features::{engineer_features, FeatureVector};
use super::raw::{Label, RawVar, ScadaRecord};
use super::scaler::Scaler;
use crate::error::{Error, Result};

/// Training candidates for the normal class must produce less than this.
pub const DEFAULT_POWER_THRESHOLD: f64 = 2.0;

/// One model input with its label and source record identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub x: FeatureVector,
    pub label: Label,
}

impl Sample {
    pub fn class(&self) -> Option<usize> {
        self.label.class()
    }
}

pub fn features_of(samples: &[Sample]) -> Vec<FeatureVector> {
    samples.iter().map(|s| s.x).collect()
}

/// Icing indicator per sample; unlabeled samples count as normal.
pub fn icing_flags(samples: &[Sample]) -> Vec<bool> {
    samples.iter().map(|s| s.label == Label::Icing).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Train and test on one turbine.
    Single,
    /// Labeled source turbine, unlabeled target turbine, test on the target.
    Transfer,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Single => "single",
            Scenario::Transfer => "transfer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    /// Fraction of icing records used for training in the single-turbine case.
    pub train_icing_frac: f64,
    /// Fraction of (target) icing records used for testing.
    pub test_icing_frac: f64,
    /// Test normals per test icing record.
    pub test_normal_ratio: usize,
    /// Fraction of source and target icing records used for transfer training.
    pub transfer_icing_frac: f64,
    pub power_threshold: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_icing_frac: 0.1,
            test_icing_frac: 0.4,
            test_normal_ratio: 10,
            transfer_icing_frac: 0.6,
            power_threshold: DEFAULT_POWER_THRESHOLD,
        }
    }
}

/// Normalized train/test sets of one experiment.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub scenario: Scenario,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Unlabeled target-turbine training sample (transfer only).
    pub target: Vec<Sample>,
    /// Fitted on `train` only.
    pub scaler: Scaler,
    pub seed: u64,
}

fn shuffled<'a>(mut v: Vec<&'a ScadaRecord>, rng: &mut ChaCha8Rng) -> Vec<&'a ScadaRecord> {
    v.shuffle(rng);
    v
}

/// Keeps every icing record and a seeded random subset of low-power normals,
/// `ratio` normals per icing record.
pub fn balance(
    records: &[ScadaRecord],
    power_threshold: f64,
    ratio: f64,
    seed: u64,
) -> Result<Vec<ScadaRecord>> {
    let icing: Vec<_> = records.iter().filter(|r| r.label == Label::Icing).collect();
    let candidates: Vec<_> = records
        .iter()
        .filter(|r| r.label == Label::Normal && r.get(RawVar::Power) < power_threshold)
        .collect();
    let want = (icing.len() as f64 * ratio).round() as usize;
    if candidates.len() < want {
        return Err(Error::Insufficient(format!(
            "{want} normal records requested, {} below power {power_threshold}",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<_> = shuffled(candidates, &mut rng)
        .into_iter()
        .take(want)
        .collect();
    chosen.extend(icing);
    chosen.sort_by_key(|r| r.row);
    Ok(chosen.into_iter().cloned().collect())
}

fn to_samples(records: &[&ScadaRecord], keep_label: bool) -> Result<Vec<Sample>> {
    let mut degenerate = 0;
    let out = records
        .iter()
        .map(|r| {
            let e = engineer_features(r)?;
            degenerate += e.degenerate as usize;
            Ok(Sample {
                id: r.row,
                x: e.features,
                label: if keep_label {
                    r.label
                } else {
                    Label::Unlabeled
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if degenerate > 0 {
        warn!("{degenerate} records hit a guarded denominator");
    }
    Ok(out)
}

fn normalize(samples: &mut [Sample], scaler: &Scaler) {
    for s in samples {
        s.x = scaler.apply(&s.x);
    }
}

fn take<'a>(pool: &mut Vec<&'a ScadaRecord>, n: usize, what: &str) -> Result<Vec<&'a ScadaRecord>> {
    if pool.len() < n {
        return Err(Error::Insufficient(format!(
            "{what}: need {n}, have {}",
            pool.len()
        )));
    }
    Ok(pool.drain(..n).collect())
}

struct Pools<'a> {
    icing: Vec<&'a ScadaRecord>,
    normal: Vec<&'a ScadaRecord>,
}

fn pools<'a>(records: &'a [ScadaRecord], rng: &mut ChaCha8Rng) -> Pools<'a> {
    let of = |l: Label| records.iter().filter(|r| r.label == l).collect::<Vec<_>>();
    let icing = shuffled(of(Label::Icing), rng);
    let normal = shuffled(of(Label::Normal), rng);
    Pools { icing, normal }
}

/// Low-power normals taken from the pool, preserving the shuffled order of the rest.
fn take_low_power<'a>(
    pool: &mut Vec<&'a ScadaRecord>,
    n: usize,
    threshold: f64,
    what: &str,
) -> Result<Vec<&'a ScadaRecord>> {
    let mut picked = Vec::with_capacity(n);
    let mut rest = Vec::with_capacity(pool.len());
    for r in pool.drain(..) {
        if picked.len() < n && r.get(RawVar::Power) < threshold {
            picked.push(r);
        } else {
            rest.push(r);
        }
    }
    *pool = rest;
    if picked.len() < n {
        return Err(Error::Insufficient(format!(
            "{what}: need {n}, have {}",
            picked.len()
        )));
    }
    Ok(picked)
}

fn frac(n: usize, f: f64) -> usize {
    (n as f64 * f).round() as usize
}

/// Builds the train/test (and target) sets of one experiment from valid,
/// labeled records. Test sets keep the natural normal population; training
/// normals come from the low-power candidates.
pub fn split_experiment(
    source: &[ScadaRecord],
    target: Option<&[ScadaRecord]>,
    scenario: Scenario,
    config: &SplitConfig,
    seed: u64,
) -> Result<DatasetSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut src = pools(source, &mut rng);
    let (train, test_records, target_records) = match scenario {
        Scenario::Single => {
            let n_ic = src.icing.len();
            let n_train = frac(n_ic, config.train_icing_frac);
            let n_test = frac(n_ic, config.test_icing_frac);
            let mut train = take(&mut src.icing, n_train, "training icing")?;
            let test_ic = take(&mut src.icing, n_test, "test icing")?;
            train.extend(take_low_power(
                &mut src.normal,
                n_train,
                config.power_threshold,
                "training normal",
            )?);
            let mut test = take(
                &mut src.normal,
                n_test * config.test_normal_ratio,
                "test normal",
            )?;
            test.extend(test_ic);
            (train, test, Vec::new())
        }
        Scenario::Transfer => {
            let target =
                target.ok_or_else(|| Error::Usage("transfer split needs target records".into()))?;
            let mut tgt = pools(target, &mut rng);
            let n_src = frac(src.icing.len(), config.transfer_icing_frac);
            let mut train = take(&mut src.icing, n_src, "source icing")?;
            train.extend(take_low_power(
                &mut src.normal,
                n_src,
                config.power_threshold,
                "source normal",
            )?);

            let n_tgt_ic = tgt.icing.len();
            let n_test = frac(n_tgt_ic, config.test_icing_frac);
            let n_unl = frac(n_tgt_ic, config.transfer_icing_frac);
            let test_ic = take(&mut tgt.icing, n_test, "target test icing")?;
            let mut unl = take(&mut tgt.icing, n_unl, "target icing")?;
            unl.extend(take_low_power(
                &mut tgt.normal,
                n_unl,
                config.power_threshold,
                "target normal",
            )?);
            let mut test = take(
                &mut tgt.normal,
                n_test * config.test_normal_ratio,
                "target test normal",
            )?;
            test.extend(test_ic);
            (train, test, unl)
        }
    };

    let mut train = to_samples(&train, true)?;
    let mut test = to_samples(&test_records, true)?;
    let mut target = to_samples(&target_records, false)?;
    let scaler = Scaler::fit(&features_of(&train))?;
    normalize(&mut train, &scaler);
    normalize(&mut test, &scaler);
    normalize(&mut target, &scaler);
    Ok(DatasetSplit {
        scenario,
        train,
        test,
        target,
        scaler,
        seed,
    })
}
