use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{gather, shuffled_batches};
use super::losses::{discriminator_terms, generator_terms, GanLossWeights};
use super::report::{EarlyStop, LossReport};
use super::OptimConfig;
use crate::data::{features_of, Label, Sample};
use crate::diffnet::{adam_step, AdamConfig, AdamState, BnMode, Module, Tape};
use crate::error::{Error, Result};
use crate::models::GanModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainConfig {
    pub weights: GanLossWeights,
    pub optim: OptimConfig,
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.optim.validate()
    }
}

/// Adversarial training of one GAN on samples of a single class.
///
/// Each iteration takes a discriminator step against detached generator
/// output, then a generator step with the discriminator held fixed. Epoch
/// means of `L_G`, `L_con`, `L_adv`, `L_f` and `L_D` are recorded under the
/// GAN's prefix; early stopping watches `L_G`.
pub fn train_gan(
    gan: &mut GanModel,
    samples: &[Sample],
    class: Label,
    cfg: &GanTrainConfig,
    seed: u64,
) -> Result<LossReport> {
    cfg.validate()?;
    if let Some(s) = samples.iter().find(|s| s.label != class) {
        return Err(Error::Usage(format!(
            "{} trains on {class:?} samples only, sample {} is {:?}",
            gan.prefix, s.id, s.label
        )));
    }
    let mut report = LossReport::new();
    let o = &cfg.optim;
    if o.epochs == 0 {
        return Ok(report);
    }
    if samples.len() < 2 {
        return Err(Error::Insufficient(format!(
            "{} needs at least 2 samples, got {}",
            gan.prefix,
            samples.len()
        )));
    }
    let xs = features_of(samples);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adam = AdamConfig::with_lr(o.lr);
    let mut d_state = AdamState::new(adam);
    let mut g_state = AdamState::new(adam);
    let mut stop = EarlyStop::new(o.patience);
    let names = ["L_G", "L_con", "L_adv", "L_f", "L_D"].map(|n| format!("{}.{n}", gan.prefix));

    for epoch in 1..=o.epochs {
        let mut sums = [0.0; 5];
        let batches = shuffled_batches(xs.len(), o.batch_size, &mut rng);
        for idx in &batches {
            let x = gather(&xs, idx)?;

            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let l_d = discriminator_terms(&mut tape, gan, xv, BnMode::Batch, BnMode::Train)?;
            let grads = tape.backward(l_d)?;
            adam_step(gan.discriminator_layers_mut(), grads.params(), &mut d_state)?;
            gan.absorb_stats(tape.stat_updates());
            gan.apply_precision(o.precision);
            sums[4] += tape.value(l_d).item();

            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let g = generator_terms(
                &mut tape,
                gan,
                xv,
                &cfg.weights,
                BnMode::Train,
                BnMode::Batch,
            )?;
            let grads = tape.backward(g.l_g)?;
            adam_step(gan.generator_layers_mut(), grads.params(), &mut g_state)?;
            gan.absorb_stats(tape.stat_updates());
            gan.apply_precision(o.precision);
            for (k, v) in [g.l_g, g.l_con, g.l_adv, g.l_f].into_iter().enumerate() {
                sums[k] += tape.value(v).item();
            }
        }
        let n = batches.len() as f64;
        for (name, sum) in names.iter().zip(sums) {
            report.push(epoch, name.clone(), sum / n)?;
        }
        if stop.update(sums[0] / n) {
            log::debug!("{}: plateau after epoch {epoch}", gan.prefix);
            break;
        }
    }
    Ok(report)
}
