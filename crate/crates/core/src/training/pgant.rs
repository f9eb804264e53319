use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adversarial::GanTrainConfig;
use super::batch::{gather, shuffled_batches, stratified_batches};
use super::losses::{
    labeled_classes, transfer_forward, transfer_terms, Bandwidth, TransferWeights,
};
use super::pganc::{pretrain_branches, DataFlowLog, Pretrained};
use super::report::{EarlyStop, LossReport};
use super::{sub_seed, OptimConfig};
use crate::data::{features_of, FeatureVector, Sample};
use crate::diffnet::{adam_step, AdamConfig, AdamState, BnMode, Module, Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{batch_tensor, ArchConfig, Branch, FrontKind, Modes, ParamGroup, PgantModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    /// Weight of the source class-separation term.
    pub alpha: f64,
    /// Weight of the source/target discrepancy term.
    pub beta: f64,
    pub bandwidth: Bandwidth,
    /// `batch_size` is the source batch size.
    pub optim: OptimConfig,
    pub target_batch_size: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            alpha: 0.1,
            beta: 1.0,
            bandwidth: Bandwidth::Median,
            optim: OptimConfig::default(),
            target_batch_size: 64,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::Config(format!(
                    "fixed bandwidth must be positive, got {s}"
                )));
            }
        }
        if self.target_batch_size < 2 {
            return Err(Error::Config("target batch size must be at least 2".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> TransferWeights {
        TransferWeights {
            alpha: self.alpha,
            beta: self.beta,
            bandwidth: self.bandwidth,
        }
    }
}

/// Combines the classification gradient with the domain-term gradient:
/// feature extractors get both, the fully-connected classifier gets the
/// classification gradient only.
pub fn partition_update(
    grads_c: &BTreeMap<String, Tensor>,
    grads_domain: &BTreeMap<String, Tensor>,
) -> BTreeMap<String, Tensor> {
    let mut out = grads_c.clone();
    for (name, g) in grads_domain {
        if PgantModel::group_of(name) == ParamGroup::Classifier {
            continue;
        }
        match out.get_mut(name) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                out.insert(name.clone(), g.clone());
            }
        }
    }
    out
}

/// Gradient magnitudes of the domain terms on one batch, before and after
/// the update partition.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientAudit {
    /// Largest |∂(−αL_ms + βL_md)/∂θ| over classifier parameters, before partitioning.
    pub raw_domain_on_classifier: f64,
    /// Largest domain contribution to the applied classifier update; zero by construction.
    pub applied_domain_on_classifier: f64,
    /// Largest domain contribution to the applied feature-extractor update.
    pub applied_domain_on_features: f64,
    /// Classifier parameter tensors inspected.
    pub classifier_tensors: usize,
}

fn source_modes(model: &PgantModel, head: BnMode) -> Modes {
    let branches = match model.arch().front {
        FrontKind::Gan => BnMode::Eval,
        FrontKind::Plain => head,
    };
    Modes { branches, head }
}

struct StepGrads {
    applied: BTreeMap<String, Tensor>,
    grads_c: BTreeMap<String, Tensor>,
    grads_domain: BTreeMap<String, Tensor>,
    values: [f64; 4],
}

fn step_grads(
    tape: &mut Tape,
    model: &PgantModel,
    xs: Tensor,
    ys: &[usize],
    xt: Tensor,
    w: &TransferWeights,
    head: BnMode,
) -> Result<StepGrads> {
    let (s, t) = transfer_forward(tape, model, xs, xt, source_modes(model, head))?;
    let terms = transfer_terms(tape, &s, ys, &t, w)?;
    let grads_c = tape.backward(terms.l_c)?.into_params();
    let grads_domain = tape.backward(terms.domain)?.into_params();
    let applied = partition_update(&grads_c, &grads_domain);
    let v = |v| tape.value(v).item();
    Ok(StepGrads {
        applied,
        values: [v(terms.l_c), v(terms.l_md), v(terms.l_ms), v(terms.total)],
        grads_c,
        grads_domain,
    })
}

fn max_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Inspects the gradients of one training step without updating the model.
pub fn audit_update(
    model: &PgantModel,
    source: &[Sample],
    target: &[FeatureVector],
    cfg: &TransferConfig,
) -> Result<GradientAudit> {
    let ys = labeled_classes(source)?;
    let mut tape = Tape::new();
    let g = step_grads(
        &mut tape,
        model,
        batch_tensor(&features_of(source))?,
        &ys,
        batch_tensor(target)?,
        &cfg.weights(),
        BnMode::Batch,
    )?;
    let mut audit = GradientAudit {
        raw_domain_on_classifier: 0.0,
        applied_domain_on_classifier: 0.0,
        applied_domain_on_features: 0.0,
        classifier_tensors: 0,
    };
    for (name, applied) in &g.applied {
        let c = &g.grads_c[name];
        let contribution = applied
            .data()
            .iter()
            .zip(c.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if PgantModel::group_of(name) == ParamGroup::Classifier {
            audit.classifier_tensors += 1;
            audit.raw_domain_on_classifier = audit
                .raw_domain_on_classifier
                .max(max_abs(&g.grads_domain[name]));
            audit.applied_domain_on_classifier =
                audit.applied_domain_on_classifier.max(contribution);
        } else {
            audit.applied_domain_on_features = audit.applied_domain_on_features.max(contribution);
        }
    }
    Ok(audit)
}

const LOSS_NAMES: [&str; 4] = [
    "transfer.L_c",
    "transfer.L_md",
    "transfer.L_ms",
    "transfer.L_total",
];

/// Trains the transfer model on labeled source and unlabeled target samples.
///
/// Epoch 0 holds the losses of the untouched model over the first epoch's
/// batches. Feature extractors follow the gradient of the full objective;
/// the fully-connected classifier follows `L_c` alone. Pretrained GAN
/// branches keep their batchnorm running statistics.
pub fn train_pgant(
    model: &mut PgantModel,
    source: &[Sample],
    target: &[FeatureVector],
    cfg: &TransferConfig,
    seed: u64,
) -> Result<LossReport> {
    cfg.validate()?;
    let ys_all = labeled_classes(source)?;
    if target.len() < 2 {
        return Err(Error::Insufficient(format!(
            "need at least 2 target samples, got {}",
            target.len()
        )));
    }
    let xs = features_of(source);
    let w = cfg.weights();
    let o = &cfg.optim;
    let mut src_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1));
    let mut state = AdamState::new(AdamConfig::with_lr(o.lr));
    let mut stop = EarlyStop::new(o.patience);
    let mut report = LossReport::new();

    for epoch in 0..=o.epochs {
        let src_batches = stratified_batches(&ys_all, o.batch_size, &mut src_rng)?;
        let tgt_batches = shuffled_batches(target.len(), cfg.target_batch_size, &mut tgt_rng);
        let mut sums = [0.0; 4];
        for (k, idx) in src_batches.iter().enumerate() {
            let ys: Vec<usize> = idx.iter().map(|&i| ys_all[i]).collect();
            let xt = gather(target, &tgt_batches[k % tgt_batches.len()])?;
            let mut tape = Tape::new();
            let head = if epoch == 0 {
                BnMode::Batch
            } else {
                BnMode::Train
            };
            let g = step_grads(&mut tape, model, gather(&xs, idx)?, &ys, xt, &w, head)?;
            if epoch > 0 {
                adam_step(model.layers_mut(), &g.applied, &mut state)?;
                model.absorb_stats(tape.stat_updates());
                model.apply_precision(o.precision);
            }
            for (s, v) in sums.iter_mut().zip(g.values) {
                *s += v;
            }
        }
        let n = src_batches.len() as f64;
        for (name, sum) in LOSS_NAMES.iter().zip(sums) {
            report.push(epoch, *name, sum / n)?;
        }
        if epoch > 0 && stop.update(sums[3] / n) {
            break;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct PgantOutcome {
    /// Transfer model right after branch pretraining.
    pub pretrained: PgantModel,
    pub model: PgantModel,
    pub report: LossReport,
    pub data_flow: DataFlowLog,
}

/// Branch pretraining on source classes (GAN front only), then transfer training.
pub fn fit_pgant(
    source: &[Sample],
    target: &[FeatureVector],
    arch: &ArchConfig,
    gan: &GanTrainConfig,
    cfg: &TransferConfig,
    seed: u64,
) -> Result<PgantOutcome> {
    let pre = match arch.front {
        FrontKind::Gan => Some(pretrain_branches(source, arch, gan, seed)?),
        FrontKind::Plain => None,
    };
    fit_pgant_from(pre, source, target, arch, cfg, seed)
}

/// Transfer training on pretrained GAN branches, or on fresh plain branches
/// when `pre` is `None` and the front is plain.
pub fn fit_pgant_from(
    pre: Option<Pretrained>,
    source: &[Sample],
    target: &[FeatureVector],
    arch: &ArchConfig,
    cfg: &TransferConfig,
    seed: u64,
) -> Result<PgantOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 40));
    let (mut model, mut report, mut data_flow) = match (arch.front, pre) {
        (FrontKind::Gan, Some(pre)) => {
            let m = PgantModel::from_branches(pre.normal, pre.icing, arch, &mut rng);
            (m, pre.report, pre.data_flow)
        }
        (FrontKind::Plain, None) => {
            let normal = Branch::plain("cnn_normal", arch.leaky_slope, &mut rng);
            let icing = Branch::plain("cnn_icing", arch.leaky_slope, &mut rng);
            let m = PgantModel::from_branches(normal, icing, arch, &mut rng);
            (m, LossReport::new(), DataFlowLog::default())
        }
        (front, pre) => {
            return Err(Error::Usage(format!(
                "{front:?} front with{} pretrained branches",
                if pre.is_some() { "" } else { "out" }
            )))
        }
    };
    let pretrained = model.clone();
    report.extend(train_pgant(
        &mut model,
        source,
        target,
        cfg,
        sub_seed(seed, 41),
    )?);
    data_flow.record("transfer.source", source.iter().map(|s| s.id));
    Ok(PgantOutcome {
        pretrained,
        model,
        report,
        data_flow,
    })
}
