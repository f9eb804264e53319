use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::knn::knn_baseline;
use super::metrics::{
    competition_score, confusion, mcc, roc_auc, RocCurve, ScoreConvention, DEFAULT_THRESHOLD,
};
use crate::data::{features_of, icing_flags, DatasetSplit, Scenario};
use crate::error::{Error, Result};
use crate::models::{ArchConfig, FrontKind, PgancModel};
use crate::training::{
    fit_pgant_from, pretrain_branches, train_plain_cnn, train_two_stage_from, GanTrainConfig,
    OptimConfig, PgancConfig, Pretrained, TransferConfig,
};

/// Methods the comparison harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Knn,
    PlainCnn,
    PgancStage1,
    PgancStage2,
    Pgant,
    /// Transfer model trained without the source class-separation term.
    Pgant1Loss,
    /// Transfer objective on plain convolutional branches.
    Cnn2Loss,
    /// As `Cnn2Loss`, without the class-separation term.
    Cnn1Loss,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Knn,
        Method::PlainCnn,
        Method::PgancStage1,
        Method::PgancStage2,
        Method::Pgant,
        Method::Pgant1Loss,
        Method::Cnn2Loss,
        Method::Cnn1Loss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Knn => "KNN",
            Method::PlainCnn => "plain-CNN",
            Method::PgancStage1 => "PGANC-stage1",
            Method::PgancStage2 => "PGANC-stage2",
            Method::Pgant => "PGANT",
            Method::Pgant1Loss => "PGANT-1loss",
            Method::Cnn2Loss => "CNN-2loss",
            Method::Cnn1Loss => "CNN-1loss",
        }
    }

    /// Methods that need an unlabeled target sample.
    pub fn is_transfer(self) -> bool {
        matches!(
            self,
            Method::Pgant | Method::Pgant1Loss | Method::Cnn2Loss | Method::Cnn1Loss
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let known: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!(
                    "unknown method {s:?}, expected one of {}",
                    known.join(", ")
                ))
            })
    }
}

/// Everything a comparison run needs besides data and seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub pganc: PgancConfig,
    pub transfer: TransferConfig,
    /// End-to-end training of the plain-CNN ablation.
    pub plain: OptimConfig,
    pub knn_k: usize,
    pub threshold: f64,
    pub leaky_slope: f64,
    pub fc1_width: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        HarnessConfig {
            pganc: PgancConfig::default(),
            transfer: TransferConfig::default(),
            plain: OptimConfig::default(),
            knn_k: 5,
            threshold: DEFAULT_THRESHOLD,
            leaky_slope: arch.leaky_slope,
            fc1_width: arch.fc1_width,
        }
    }
}

impl HarnessConfig {
    pub fn arch(&self, front: FrontKind) -> ArchConfig {
        ArchConfig {
            front,
            leaky_slope: self.leaky_slope,
            fc1_width: self.fc1_width,
        }
    }

    pub fn gan(&self) -> &GanTrainConfig {
        &self.pganc.gan
    }

    pub fn validate(&self) -> Result<()> {
        self.pganc.validate()?;
        self.transfer.validate()?;
        self.plain.validate()?;
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        if !self.leaky_slope.is_finite() || self.leaky_slope < 0.0 {
            return Err(Error::Config(format!(
                "leaky_slope must be finite and >= 0, got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Sets the epoch budget of every training stage.
    pub fn set_epochs(&mut self, epochs: usize) {
        for o in [
            &mut self.pganc.gan.optim,
            &mut self.pganc.classifier,
            &mut self.pganc.stage2,
            &mut self.plain,
            &mut self.transfer.optim,
        ] {
            o.epochs = epochs;
        }
    }
}

/// Metrics of one method on one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: Method,
    pub scenario: Scenario,
    pub seed: u64,
    pub score: f64,
    pub auc: f64,
    pub mcc: f64,
    pub roc: RocCurve,
}

/// Score, AUC and MCC of icing scores against icing labels.
pub fn evaluate_scores(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
    convention: ScoreConvention,
) -> Result<(f64, RocCurve, f64)> {
    let c = confusion(scores, labels, threshold)?;
    let roc = roc_auc(scores, labels)?;
    Ok((competition_score(&c, convention)?, roc, mcc(&c)))
}

fn icing_scores(probs: Vec<[f64; 2]>) -> Vec<f64> {
    probs.into_iter().map(|p| p[1]).collect()
}

/// Trains and scores every requested method on one split.
pub fn run_split(
    split: &DatasetSplit,
    methods: &[Method],
    cfg: &HarnessConfig,
    convention: ScoreConvention,
) -> Result<Vec<MethodResult>> {
    cfg.validate()?;
    if split.scenario == Scenario::Single {
        if let Some(m) = methods.iter().find(|m| m.is_transfer()) {
            return Err(Error::Config(format!("{m} needs the transfer scenario")));
        }
    }
    let seed = split.seed;
    let test_x = features_of(&split.test);
    let labels = icing_flags(&split.test);
    let target_x = features_of(&split.target);
    let gan_arch = cfg.arch(FrontKind::Gan);

    let mut ordered: Vec<Method> = methods.to_vec();
    ordered.sort();
    ordered.dedup();

    let needs_gans = ordered.iter().any(|m| {
        matches!(
            m,
            Method::PgancStage1 | Method::PgancStage2 | Method::Pgant | Method::Pgant1Loss
        )
    });
    let pretrained: Option<Pretrained> = if needs_gans {
        Some(pretrain_branches(&split.train, &gan_arch, cfg.gan(), seed)?)
    } else {
        None
    };
    let mut pganc: Option<(PgancModel, PgancModel)> = None;

    let mut out = Vec::with_capacity(ordered.len());
    for method in ordered {
        log::info!("{} seed {seed}: {method}", split.scenario.name());
        let scores = match method {
            Method::Knn => knn_baseline(
                &features_of(&split.train),
                &icing_flags(&split.train),
                &test_x,
                cfg.knn_k,
            )?,
            Method::PlainCnn => {
                let (m, _) = train_plain_cnn(&split.train, &gan_arch, &cfg.plain, seed)?;
                icing_scores(m.predict(&test_x)?)
            }
            Method::PgancStage1 | Method::PgancStage2 => {
                if pganc.is_none() {
                    let pre = pretrained.clone().expect("pretrained when needed");
                    let o = train_two_stage_from(pre, &split.train, &gan_arch, &cfg.pganc, seed)?;
                    pganc = Some((o.stage1, o.stage2));
                }
                let (s1, s2) = pganc.as_ref().expect("trained above");
                let m = if method == Method::PgancStage1 {
                    s1
                } else {
                    s2
                };
                icing_scores(m.predict(&test_x)?)
            }
            Method::Pgant | Method::Pgant1Loss | Method::Cnn2Loss | Method::Cnn1Loss => {
                let mut t = cfg.transfer;
                if matches!(method, Method::Pgant1Loss | Method::Cnn1Loss) {
                    t.alpha = 0.0;
                }
                let (arch, pre) = if matches!(method, Method::Pgant | Method::Pgant1Loss) {
                    (gan_arch, pretrained.clone())
                } else {
                    (cfg.arch(FrontKind::Plain), None)
                };
                let o = fit_pgant_from(pre, &split.train, &target_x, &arch, &t, seed)?;
                icing_scores(o.model.predict(&test_x)?)
            }
        };
        let (score, roc, mcc) = evaluate_scores(&scores, &labels, cfg.threshold, convention)?;
        out.push(MethodResult {
            method,
            scenario: split.scenario,
            seed,
            score,
            auc: roc.auc,
            mcc,
            roc,
        });
    }
    Ok(out)
}

/// Per-seed results of a comparison, keyed by `(method, seed)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComparisonTable {
    pub rows: BTreeMap<(Method, u64), MethodResult>,
}

/// Mean metrics of one method over all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub scenario: Scenario,
    pub seeds: usize,
    pub score: f64,
    pub auc: f64,
    pub mcc: f64,
}

impl ComparisonTable {
    pub fn get(&self, method: Method, seed: u64) -> Option<&MethodResult> {
        self.rows.get(&(method, seed))
    }

    pub fn of(&self, method: Method) -> Vec<&MethodResult> {
        self.rows.values().filter(|r| r.method == method).collect()
    }

    pub fn means(&self) -> Vec<MethodSummary> {
        let mut out: Vec<MethodSummary> = Vec::new();
        for r in self.rows.values() {
            match out.last_mut() {
                Some(s) if s.method == r.method => {
                    s.seeds += 1;
                    s.score += r.score;
                    s.auc += r.auc;
                    s.mcc += r.mcc;
                }
                _ => out.push(MethodSummary {
                    method: r.method,
                    scenario: r.scenario,
                    seeds: 1,
                    score: r.score,
                    auc: r.auc,
                    mcc: r.mcc,
                }),
            }
        }
        for s in &mut out {
            let n = s.seeds as f64;
            s.score /= n;
            s.auc /= n;
            s.mcc /= n;
        }
        out
    }

    /// Columns `method,scenario,seed,score,auc,mcc`, ordered by method then seed.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "scenario", "seed", "score", "auc", "mcc"])?;
        for r in self.rows.values() {
            w.write_record([
                r.method.name().to_string(),
                r.scenario.name().to_string(),
                r.seed.to_string(),
                r.score.to_string(),
                r.auc.to_string(),
                r.mcc.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Columns `method,scenario,seeds,score,auc,mcc` with per-method means.
    pub fn write_means_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "scenario", "seeds", "score", "auc", "mcc"])?;
        for s in self.means() {
            w.write_record([
                s.method.name().to_string(),
                s.scenario.name().to_string(),
                s.seeds.to_string(),
                s.score.to_string(),
                s.auc.to_string(),
                s.mcc.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Columns `threshold,fpr,tpr`.
pub fn write_roc_csv<W: Write>(roc: &RocCurve, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["threshold", "fpr", "tpr"])?;
    for p in &roc.points {
        w.write_record([
            p.threshold.to_string(),
            p.fpr.to_string(),
            p.tpr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the methods on one split per seed, seeds in parallel. `make_split`
/// builds the split of a seed.
pub fn run_comparison<F>(
    make_split: F,
    methods: &[Method],
    seeds: &[u64],
    cfg: &HarnessConfig,
    convention: ScoreConvention,
) -> Result<ComparisonTable>
where
    F: Fn(u64) -> Result<DatasetSplit> + Sync,
{
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::Usage(
            "comparison needs at least one method and one seed".into(),
        ));
    }
    let per_seed: Vec<Vec<MethodResult>> = seeds
        .par_iter()
        .map(|&seed| run_split(&make_split(seed)?, methods, cfg, convention))
        .collect::<Result<_>>()?;
    let mut table = ComparisonTable::default();
    for r in per_seed.into_iter().flatten() {
        table.rows.insert((r.method, r.seed), r);
    }
    Ok(table)
}
