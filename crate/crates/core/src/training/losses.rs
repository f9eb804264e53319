use serde::{Deserialize, Serialize};

use crate::data::{FeatureVector, Sample};
use crate::diffnet::{BnMode, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{batch_tensor, GanModel, Modes, PgantModel, PgantVars};

/// Weights of the reconstruction, adversarial and feature-matching terms of
/// the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanLossWeights {
    pub w_con: f64,
    pub w_adv: f64,
    pub w_f: f64,
}

impl Default for GanLossWeights {
    fn default() -> Self {
        GanLossWeights {
            w_con: 50.0,
            w_adv: 1.0,
            w_f: 1.0,
        }
    }
}

impl GanLossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_con, self.w_adv, self.w_f];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "GAN loss weights must be finite and >= 0, got {w:?}"
            )));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config(
                "at least one GAN loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLossValues {
    pub l_g: f64,
    pub l_con: f64,
    pub l_adv: f64,
    pub l_f: f64,
    pub l_d: f64,
}

/// Generator-side terms recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GeneratorTerms {
    pub l_g: Var,
    pub l_con: Var,
    pub l_adv: Var,
    pub l_f: Var,
}

/// Batch mean of the row-wise Euclidean distance between `a` and `b`.
pub(crate) fn mean_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let n = tape.row_norm(d)?;
    tape.mean(n)
}

/// `mean log(1 − σ(z)) = −mean softplus(z)`.
fn adversarial_term(tape: &mut Tape, z_fake: Var) -> Result<Var> {
    let s = tape.softplus(z_fake)?;
    let m = tape.mean(s)?;
    tape.scale(m, -1.0)
}

/// Binary cross-entropy with real labelled 1 and fake labelled 0.
pub(crate) fn discriminator_bce(tape: &mut Tape, z_real: Var, z_fake: Var) -> Result<Var> {
    let neg = tape.scale(z_real, -1.0)?;
    let real = tape.softplus(neg)?;
    let real = tape.mean(real)?;
    let fake = tape.softplus(z_fake)?;
    let fake = tape.mean(fake)?;
    tape.add(real, fake)
}

pub(crate) fn generator_terms(
    tape: &mut Tape,
    gan: &GanModel,
    x: Var,
    weights: &GanLossWeights,
    g_mode: BnMode,
    d_mode: BnMode,
) -> Result<GeneratorTerms> {
    let (h_ge, x_gd) = gan.generate(tape, x, g_mode)?;
    let h_de = gan.discriminator_features(tape, x_gd, d_mode)?;
    let z_fake = gan.score_logit(tape, h_de)?;
    let l_con = mean_distance(tape, x, x_gd)?;
    let l_adv = adversarial_term(tape, z_fake)?;
    let l_f = mean_distance(tape, h_ge, h_de)?;
    let a = tape.scale(l_con, weights.w_con)?;
    let b = tape.scale(l_adv, weights.w_adv)?;
    let c = tape.scale(l_f, weights.w_f)?;
    let ab = tape.add(a, b)?;
    let l_g = tape.add(ab, c)?;
    Ok(GeneratorTerms {
        l_g,
        l_con,
        l_adv,
        l_f,
    })
}

/// Discriminator loss on real `x` against detached generator output.
pub(crate) fn discriminator_terms(
    tape: &mut Tape,
    gan: &GanModel,
    x: Var,
    g_mode: BnMode,
    d_mode: BnMode,
) -> Result<Var> {
    let (_, x_gd) = gan.generate(tape, x, g_mode)?;
    let fake = tape.detach(x_gd)?;
    let h_real = gan.discriminator_features(tape, x, d_mode)?;
    let z_real = gan.score_logit(tape, h_real)?;
    let h_fake = gan.discriminator_features(tape, fake, d_mode)?;
    let z_fake = gan.score_logit(tape, h_fake)?;
    discriminator_bce(tape, z_real, z_fake)
}

/// Eval-mode GAN losses of a one-class batch.
pub fn gan_losses(
    gan: &GanModel,
    batch: &[FeatureVector],
    weights: &GanLossWeights,
) -> Result<GanLossValues> {
    if batch.is_empty() {
        return Err(Error::Usage("gan_losses needs a non-empty batch".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(batch_tensor(batch)?);
    let g = generator_terms(&mut tape, gan, x, weights, BnMode::Eval, BnMode::Eval)?;
    let l_d = discriminator_terms(&mut tape, gan, x, BnMode::Eval, BnMode::Eval)?;
    let v = |v: Var| tape.value(v).item();
    Ok(GanLossValues {
        l_g: v(g.l_g),
        l_con: v(g.l_con),
        l_adv: v(g.l_adv),
        l_f: v(g.l_f),
        l_d: v(l_d),
    })
}

/// Per-sample weights `1/N_class` over a batch containing both classes.
pub(crate) fn class_balanced_weights(classes: &[usize]) -> Result<Vec<f64>> {
    let mut counts = [0usize; 2];
    for &c in classes {
        *counts
            .get_mut(c)
            .ok_or_else(|| Error::Usage(format!("class index {c} out of range")))? += 1;
    }
    if counts.contains(&0) {
        return Err(Error::Usage(format!(
            "class-balanced loss needs both classes in the batch, got counts {counts:?}"
        )));
    }
    Ok(classes.iter().map(|&c| 1.0 / counts[c] as f64).collect())
}

/// Sum over classes of the per-class mean negative log-likelihood.
pub fn cross_entropy_classbalanced(probs: &[[f64; 2]], classes: &[usize]) -> Result<f64> {
    if probs.len() != classes.len() {
        return Err(Error::Usage(format!(
            "{} outputs for {} labels",
            probs.len(),
            classes.len()
        )));
    }
    let w = class_balanced_weights(classes)?;
    let mut tape = Tape::new();
    let data: Vec<f64> = probs.iter().flatten().copied().collect();
    let p = tape.constant(Tensor::new(&[probs.len(), 1, 1, 2], data)?);
    let l = tape.weighted_nll(p, classes, &w)?;
    Ok(tape.value(l).item())
}

/// Biased squared MMD with an RBF kernel between two sets of equal-length vectors.
pub fn mmd2_rbf(a: &[Vec<f64>], b: &[Vec<f64>], sigma: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let ta = tape.constant(rows_tensor(a)?);
    let tb = tape.constant(rows_tensor(b)?);
    let m = tape.mmd2_rbf(ta, tb, sigma)?;
    Ok(tape.value(m).item())
}

fn rows_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || dim == 0 {
        return Err(Error::Usage(
            "mmd2_rbf needs non-empty sets of non-empty vectors".into(),
        ));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::shape(
            "mmd2_rbf",
            format!("vectors of length {dim}"),
            format!("{}", r.len()),
        ));
    }
    Tensor::new(&[rows.len(), 1, 1, dim], rows.concat())
}

/// Median pairwise Euclidean distance between the items of the given
/// batches (upper median for an even pair count), 1.0 when there are fewer
/// than two items or the median is zero.
pub fn median_bandwidth(batches: &[&Tensor]) -> f64 {
    let mut items: Vec<&[f64]> = Vec::new();
    for t in batches {
        let per = t.per_item();
        if per > 0 {
            items.extend(t.data().chunks(per));
        }
    }
    let mut d = Vec::with_capacity(items.len() * items.len().saturating_sub(1) / 2);
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let s: f64 = items[i]
                .iter()
                .zip(items[j])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            d.push(s.sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if m > 0.0 && m.is_finite() {
        m
    } else {
        1.0
    }
}

/// RBF bandwidth policy of the domain critic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance over the items compared, recomputed per batch.
    Median,
    Fixed(f64),
}

impl Bandwidth {
    fn resolve(&self, tape: &Tape, parts: &[Var]) -> f64 {
        match *self {
            Bandwidth::Fixed(s) => s,
            Bandwidth::Median => {
                let ts: Vec<&Tensor> = parts.iter().map(|&v| tape.value(v)).collect();
                median_bandwidth(&ts)
            }
        }
    }
}

/// Loss weights of the transfer objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferWeights {
    pub alpha: f64,
    pub beta: f64,
    pub bandwidth: Bandwidth,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct TransferTerms {
    pub l_c: Var,
    pub l_md: Var,
    pub l_ms: Var,
    /// `−α·L_ms + β·L_md`.
    pub domain: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferLossValues {
    pub l_c: f64,
    pub l_md: f64,
    pub l_ms: f64,
    pub l_total: f64,
}

fn mmd_pair(tape: &mut Tape, a: Var, b: Var, bw: &Bandwidth) -> Result<Var> {
    let sigma = bw.resolve(tape, &[a, b]);
    tape.mmd2_rbf(a, b, sigma)
}

/// Records the transfer objective given source and target passes.
pub(crate) fn transfer_terms(
    tape: &mut Tape,
    source: &PgantVars,
    classes: &[usize],
    target: &PgantVars,
    w: &TransferWeights,
) -> Result<TransferTerms> {
    let normal: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == 0).collect();
    let icing: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == 1).collect();
    if normal.is_empty() || icing.is_empty() {
        return Err(Error::Usage(
            "transfer loss needs both classes in the source batch".into(),
        ));
    }
    let n = classes.len() as f64;
    let l_c = tape.weighted_nll(source.probs, classes, &vec![1.0 / n; classes.len()])?;

    let md_d = mmd_pair(tape, source.d, target.d, &w.bandwidth)?;
    let md_f = mmd_pair(tape, source.fc1, target.fc1, &w.bandwidth)?;
    let l_md = tape.add(md_d, md_f)?;

    let mut ms = Vec::with_capacity(2);
    for feat in [source.d, source.fc1] {
        let a = tape.select_batch(feat, &normal)?;
        let b = tape.select_batch(feat, &icing)?;
        ms.push(mmd_pair(tape, a, b, &w.bandwidth)?);
    }
    let l_ms = tape.add(ms[0], ms[1])?;

    let neg_ms = tape.scale(l_ms, -w.alpha)?;
    let pos_md = tape.scale(l_md, w.beta)?;
    let domain = tape.add(neg_ms, pos_md)?;
    let total = tape.add(l_c, domain)?;
    Ok(TransferTerms {
        l_c,
        l_md,
        l_ms,
        domain,
        total,
    })
}

/// Source and target passes of the transfer model. The source pass runs the
/// head in `source_modes`; the target pass is always eval mode.
pub(crate) fn transfer_forward(
    tape: &mut Tape,
    model: &PgantModel,
    xs: Tensor,
    xt: Tensor,
    source_modes: Modes,
) -> Result<(PgantVars, PgantVars)> {
    let xs = tape.constant(xs);
    let xt = tape.constant(xt);
    let s = model.forward(tape, xs, source_modes)?;
    let t = model.forward(tape, xt, Modes::EVAL)?;
    Ok((s, t))
}

/// Eval-mode transfer losses on one source batch and one target batch.
pub fn transfer_losses(
    model: &PgantModel,
    source: &[Sample],
    target: &[FeatureVector],
    weights: &TransferWeights,
) -> Result<TransferLossValues> {
    if target.is_empty() {
        return Err(Error::Usage(
            "transfer loss needs a non-empty target batch".into(),
        ));
    }
    let xs: Vec<FeatureVector> = source.iter().map(|s| s.x).collect();
    let classes = labeled_classes(source)?;
    let mut tape = Tape::new();
    let (s, t) = transfer_forward(
        &mut tape,
        model,
        batch_tensor(&xs)?,
        batch_tensor(target)?,
        Modes::EVAL,
    )?;
    let terms = transfer_terms(&mut tape, &s, &classes, &t, weights)?;
    let v = |v: Var| tape.value(v).item();
    Ok(TransferLossValues {
        l_c: v(terms.l_c),
        l_md: v(terms.l_md),
        l_ms: v(terms.l_ms),
        l_total: v(terms.total),
    })
}

/// Class index of every sample; unlabeled or invalid samples are an error.
pub(crate) fn labeled_classes(samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            s.class()
                .ok_or_else(|| Error::Usage(format!("sample {} has no class label", s.id)))
        })
        .collect()
}

/// `L_c − α·L_ms + β·L_md` from component values.
pub fn combine_transfer(l_c: f64, l_ms: f64, l_md: f64, alpha: f64, beta: f64) -> f64 {
    l_c + (-alpha * l_ms + beta * l_md)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use crate::diffnet::Module;
    use crate::models::ArchConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vectors(rng: &mut ChaCha8Rng, n: usize) -> Vec<FeatureVector> {
        (0..n)
            .map(|_| {
                let mut v = [0.0; 28];
                v.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
                FeatureVector(v)
            })
            .collect()
    }

    #[test]
    fn zero_residual_terms_vanish() {
        let mut tape = Tape::new();
        let x =
            tape.constant(Tensor::new(&[3, 1, 1, 2], vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap());
        let same = tape.constant(tape.value(x).clone());
        let d = mean_distance(&mut tape, x, same).unwrap();
        assert_eq!(tape.value(d).item(), 0.0);
    }

    #[test]
    fn neutral_discriminator_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[4, 1, 1, 1]));
        let adv = adversarial_term(&mut tape, z).unwrap();
        assert!((tape.value(adv).item() - 0.5f64.ln()).abs() < 1e-15);
        let z2 = tape.constant(Tensor::zeros(&[4, 1, 1, 1]));
        let d = discriminator_bce(&mut tape, z, z2).unwrap();
        assert!((tape.value(d).item() - (-2.0 * 0.5f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn gan_losses_with_neutral_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gan = GanModel::new("g", 0.01, &mut rng);
        gan.d_head.weight.data_mut().fill(0.0);
        gan.d_head.bias.data_mut().fill(0.0);
        let w = GanLossWeights::default();
        let v = gan_losses(&gan, &random_vectors(&mut rng, 5), &w).unwrap();
        assert!((v.l_adv - 0.5f64.ln()).abs() < 1e-15);
        assert!((v.l_d - 1.3862943611198906).abs() < 1e-12);
        assert!((v.l_g - (w.w_con * v.l_con + w.w_adv * v.l_adv + w.w_f * v.l_f)).abs() < 1e-12);
        assert!(gan_losses(&gan, &[], &w).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(GanLossWeights::default().validate().is_ok());
        let zero = GanLossWeights {
            w_con: 0.0,
            w_adv: 0.0,
            w_f: 0.0,
        };
        assert!(zero.validate().is_err());
        let neg = GanLossWeights {
            w_con: -1.0,
            ..zero
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn class_balanced_examples() {
        let perfect =
            cross_entropy_classbalanced(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], &[0, 1, 0]).unwrap();
        assert_eq!(perfect, 0.0);
        let half = cross_entropy_classbalanced(&[[0.5, 0.5]; 5], &[0, 1, 1, 0, 0]).unwrap();
        assert!((half - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy_classbalanced(&[[0.5, 0.5]; 2], &[1, 1]).is_err());
    }

    #[test]
    fn class_balanced_versus_unweighted_mean() {
        // Independent oracle: per-class means summed, compared with the plain mean.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let (nn, ni) = if trial % 2 == 0 {
                (6, 6)
            } else {
                (rng.gen_range(2..9), rng.gen_range(9..15))
            };
            let mut probs = Vec::new();
            let mut classes = Vec::new();
            for (c, count) in [(0usize, nn), (1usize, ni)] {
                for _ in 0..count {
                    let p1: f64 = rng.gen_range(0.05..0.95);
                    probs.push([1.0 - p1, p1]);
                    classes.push(c);
                }
            }
            let nll: Vec<f64> = probs
                .iter()
                .zip(&classes)
                .map(|(p, &c)| -p[c].ln())
                .collect();
            let mean_of = |c: usize| {
                let v: Vec<f64> = nll
                    .iter()
                    .zip(&classes)
                    .filter(|(_, &k)| k == c)
                    .map(|(l, _)| *l)
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            let oracle = mean_of(0) + mean_of(1);
            let plain = nll.iter().sum::<f64>() / nll.len() as f64;
            let got = cross_entropy_classbalanced(&probs, &classes).unwrap();
            assert!((got - oracle).abs() < 1e-12);
            if nn == ni {
                assert!((got - 2.0 * plain).abs() < 1e-12);
            } else {
                assert!((got - 2.0 * plain).abs() > 1e-9);
            }
        }
    }

    #[test]
    fn mmd_examples() {
        let v = mmd2_rbf(&[vec![0.0]], &[vec![1.0]], 1.0).unwrap();
        assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-12);
        assert!((v - 0.786939).abs() < 1e-6);
        let a = vec![vec![0.3, -1.0], vec![2.0, 0.1]];
        assert!(mmd2_rbf(&a, &a, 0.7).unwrap().abs() <= 1e-12);
        assert!(mmd2_rbf(&a, &[vec![1.0]], 1.0).is_err());
        assert!(mmd2_rbf(&a, &a, 0.0).is_err());
        assert!(mmd2_rbf(&[], &a, 1.0).is_err());
    }

    #[test]
    fn mmd_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let na = rng.gen_range(1..7);
            let nb = rng.gen_range(1..7);
            let a: Vec<Vec<f64>> = (0..na)
                .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let b: Vec<Vec<f64>> = (0..nb)
                .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let s = rng.gen_range(0.2..3.0);
            assert_eq!(
                mmd2_rbf(&a, &b, s).unwrap().to_bits(),
                mmd2_rbf(&b, &a, s).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn median_bandwidth_oracle() {
        let t = Tensor::new(&[3, 1, 1, 1], vec![0.0, 1.0, 3.0]).unwrap();
        // Distances 1, 3, 2 -> median 2.
        assert_eq!(median_bandwidth(&[&t]), 2.0);
        let same = Tensor::new(&[2, 1, 1, 1], vec![4.0, 4.0]).unwrap();
        assert_eq!(median_bandwidth(&[&same]), 1.0);
        assert_eq!(median_bandwidth(&[]), 1.0);
    }

    fn source_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<Sample> {
        random_vectors(rng, n)
            .into_iter()
            .enumerate()
            .map(|(id, x)| Sample {
                id,
                x,
                label: if id % 3 == 0 {
                    Label::Icing
                } else {
                    Label::Normal
                },
            })
            .collect()
    }

    #[test]
    fn transfer_total_decomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = PgantModel::new(&ArchConfig::default(), &mut rng);
        let src = source_batch(&mut rng, 9);
        let tgt = random_vectors(&mut rng, 7);
        for (alpha, beta) in [(0.0, 0.0), (0.1, 1.0), (1.0, 1.0), (2.5, 0.3)] {
            let w = TransferWeights {
                alpha,
                beta,
                bandwidth: Bandwidth::Median,
            };
            let v = transfer_losses(&model, &src, &tgt, &w).unwrap();
            assert!(
                (combine_transfer(v.l_c, v.l_ms, v.l_md, alpha, beta) - v.l_total).abs() < 1e-12
            );
            if alpha == 0.0 && beta == 0.0 {
                assert_eq!(v.l_total, v.l_c);
            }
            assert!(v.l_ms <= 4.0 && v.l_ms >= -1e-12);
            assert!(v.l_md >= -1e-12);
        }
        assert!((combine_transfer(1.0, 0.5, 0.2, 1.0, 1.0) - 0.7).abs() < 1e-15);
        let single: Vec<Sample> = src
            .iter()
            .filter(|s| s.label == Label::Normal)
            .cloned()
            .collect();
        let w = TransferWeights {
            alpha: 0.1,
            beta: 1.0,
            bandwidth: Bandwidth::Median,
        };
        assert!(matches!(
            transfer_losses(&model, &single, &tgt, &w),
            Err(Error::Usage(_))
        ));
        assert!(model.param_count() > 0);
    }

    #[test]
    fn source_separation_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let model = PgantModel::new(&ArchConfig::default(), &mut rng);
            let src = source_batch(&mut rng, 12);
            let tgt = random_vectors(&mut rng, 6);
            let w = TransferWeights {
                alpha: 1.0,
                beta: 1.0,
                bandwidth: Bandwidth::Fixed(rng.gen_range(0.01..2.0)),
            };
            let v = transfer_losses(&model, &src, &tgt, &w).unwrap();
            assert!(v.l_ms <= 4.0 + 1e-12);
        }
    }
}
