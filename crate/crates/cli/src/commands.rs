use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use icegan::checkpoint::{Checkpoint, SavedModel};
use icegan::data::{
    eliminate_invalid, features_of, icing_flags, ingest_scada, load_processed, save_processed,
    save_scada, split_experiment, DatasetSplit, Label, Manifest, ScadaRecord, Scaler, Scenario,
};
use icegan::eval::{
    competition_score, confusion, mcc, roc_auc, run_comparison, write_roc_csv, HarnessConfig,
    Method, ScoreConvention,
};
use icegan::models::FrontKind;
use icegan::synth::generate;
use icegan::training::{fit_pgant, pretrain_branches, train_two_stage_from};
use serde::{Deserialize, Serialize};

use crate::args::{
    CompareArgs, ConventionArg, DataArgs, EvalArgs, Framework, PreprocessArgs, ScenarioArg,
    ShiftArg, SynthArgs, TrainArgs, TrainOverrides,
};
use crate::config::{RunConfig, ShiftName};
use crate::CliError;

/// Seed offset of the synthetic target turbine relative to its source.
pub const TARGET_SEED_OFFSET: u64 = 1000;

const SPLIT_META: &str = "split.toml";
const SCALER_FILE: &str = "scaler.toml";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitMeta {
    scenario: String,
    seed: u64,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(format!("creating {}", path.display()), e))
}

fn make_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

fn manifest(args: &DataArgs) -> Result<Manifest, CliError> {
    Ok(match &args.manifest {
        Some(p) => Manifest::load(p)?,
        None => Manifest::builtin(),
    })
}

fn convention(flag: Option<ConventionArg>, cfg: &RunConfig) -> Result<ScoreConvention, CliError> {
    match flag {
        Some(ConventionArg::Verbatim) => Ok(ScoreConvention::Verbatim),
        Some(ConventionArg::Swapped) => Ok(ScoreConvention::Swapped),
        None => cfg.eval.convention(),
    }
}

fn harness(cfg: &RunConfig, o: &TrainOverrides) -> Result<HarnessConfig, CliError> {
    let mut h = cfg.harness;
    if let Some(e) = o.epochs {
        h.set_epochs(e);
    }
    if let Some(a) = o.alpha {
        h.transfer.alpha = a;
    }
    if let Some(b) = o.beta {
        h.transfer.beta = b;
    }
    h.validate()?;
    Ok(h)
}

fn synthetic(cfg: &RunConfig, shift: ShiftName, seed: u64) -> Result<Vec<ScadaRecord>, CliError> {
    let c = cfg.synth.to_config(shift, seed);
    c.validate()?;
    Ok(generate(&c)?)
}

/// Valid records of the source and (optionally) target turbine plus the scenario they make up.
struct RawPair {
    source: Vec<ScadaRecord>,
    target: Option<Vec<ScadaRecord>>,
    scenario: Scenario,
}

fn ingest(
    path: &Option<PathBuf>,
    what: &str,
    manifest: &Manifest,
) -> Result<Vec<ScadaRecord>, CliError> {
    let path = path
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("this scenario needs --{what}")))?;
    let records = ingest_scada(path, manifest)?;
    if records.is_empty() {
        return Err(CliError::Config(format!(
            "{} holds no records",
            path.display()
        )));
    }
    Ok(records)
}

fn raw_pair(args: &DataArgs, cfg: &RunConfig, seed: u64) -> Result<RawPair, CliError> {
    let scenario = args
        .scenario
        .ok_or_else(|| CliError::Config("pass --data DIR or --scenario".into()))?;
    let m = manifest(args)?;
    let synthetic_only = matches!(
        scenario,
        ScenarioArg::WtSynth | ScenarioArg::WtSynthTransfer
    );
    if synthetic_only && (args.source.is_some() || args.target.is_some()) {
        return Err(CliError::Config(
            "synthetic scenarios take no --source/--target".into(),
        ));
    }
    let (source, target, scenario) = match scenario {
        ScenarioArg::WtSynth => return synthetic_pair(cfg, Scenario::Single, seed),
        ScenarioArg::WtSynthTransfer => return synthetic_pair(cfg, Scenario::Transfer, seed),
        ScenarioArg::Single => {
            if args.target.is_some() {
                return Err(CliError::Config(
                    "--target needs --scenario transfer".into(),
                ));
            }
            (ingest(&args.source, "source", &m)?, None, Scenario::Single)
        }
        ScenarioArg::Transfer => (
            ingest(&args.source, "source", &m)?,
            Some(ingest(&args.target, "target", &m)?),
            Scenario::Transfer,
        ),
    };
    Ok(RawPair {
        source: eliminate_invalid(source, &m),
        target: target.map(|t| eliminate_invalid(t, &m)),
        scenario,
    })
}

fn synthetic_pair(cfg: &RunConfig, scenario: Scenario, seed: u64) -> Result<RawPair, CliError> {
    let m = Manifest::builtin();
    let source = eliminate_invalid(synthetic(cfg, ShiftName::None, seed)?, &m);
    let target = match scenario {
        Scenario::Single => None,
        Scenario::Transfer => Some(eliminate_invalid(
            synthetic(cfg, ShiftName::SecondTurbine, seed + TARGET_SEED_OFFSET)?,
            &m,
        )),
    };
    Ok(RawPair {
        source,
        target,
        scenario,
    })
}

/// The synthetic experiment of one seed: a turbine generated from `seed`
/// and, for transfer, a recalibrated second turbine.
pub fn synthetic_split(
    cfg: &RunConfig,
    scenario: Scenario,
    seed: u64,
) -> Result<DatasetSplit, CliError> {
    split_of(&synthetic_pair(cfg, scenario, seed)?, cfg, seed)
}

fn split_of(raw: &RawPair, cfg: &RunConfig, seed: u64) -> Result<DatasetSplit, CliError> {
    Ok(split_experiment(
        &raw.source,
        raw.target.as_deref(),
        raw.scenario,
        &cfg.split.to_config()?,
        seed,
    )?)
}

fn load_split_dir(dir: &Path) -> Result<DatasetSplit, CliError> {
    let meta_path = dir.join(SPLIT_META);
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| CliError::io(format!("reading {}", meta_path.display()), e))?;
    let meta: SplitMeta = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", meta_path.display())))?;
    let scenario = match meta.scenario.as_str() {
        "single" => Scenario::Single,
        "transfer" => Scenario::Transfer,
        s => {
            return Err(CliError::Config(format!(
                "unknown scenario {s:?} in {}",
                meta_path.display()
            )))
        }
    };
    let target = match scenario {
        Scenario::Transfer => load_processed(&dir.join("target.csv"))?,
        Scenario::Single => Vec::new(),
    };
    Ok(DatasetSplit {
        scenario,
        train: load_processed(&dir.join("train.csv"))?,
        test: load_processed(&dir.join("test.csv"))?,
        target,
        scaler: Scaler::load(&dir.join(SCALER_FILE))?,
        seed: meta.seed,
    })
}

fn resolve_split(args: &DataArgs, cfg: &RunConfig, seed: u64) -> Result<DatasetSplit, CliError> {
    match &args.data {
        Some(dir) => load_split_dir(dir),
        None => split_of(&raw_pair(args, cfg, seed)?, cfg, seed),
    }
}

pub fn synth(args: &SynthArgs, cfg: &RunConfig, seed: u64) -> Result<(), CliError> {
    let mut s = cfg.synth.clone();
    if let Some(n) = args.n {
        s.n_records = n;
    }
    if let Some(f) = args.icing_frac {
        s.icing_fraction = f;
    }
    if let Some(f) = args.invalid_frac {
        s.invalid_fraction = f;
    }
    if let Some(x) = args.noise_scale {
        s.noise_scale = x;
    }
    let shift = match args.shift {
        Some(ShiftArg::None) => ShiftName::None,
        Some(ShiftArg::SecondTurbine) => ShiftName::SecondTurbine,
        None => s.shift,
    };
    let records = {
        let c = s.to_config(shift, seed);
        c.validate()?;
        generate(&c)?
    };
    let icing = records.iter().filter(|r| r.label == Label::Icing).count();
    log::info!("{} records, {icing} icing", records.len());
    save_scada(&args.out, &records, &Manifest::builtin())?;
    Ok(())
}

pub fn preprocess(args: &PreprocessArgs, cfg: &RunConfig, seed: u64) -> Result<(), CliError> {
    if args.data.data.is_some() {
        return Err(CliError::Config(
            "preprocess reads raw exports, not --data".into(),
        ));
    }
    let split = resolve_split(&args.data, cfg, seed)?;
    let dir = &args.out_dir;
    make_dir(dir)?;
    save_processed(&dir.join("train.csv"), &split.train)?;
    save_processed(&dir.join("test.csv"), &split.test)?;
    if split.scenario == Scenario::Transfer {
        save_processed(&dir.join("target.csv"), &split.target)?;
    }
    split.scaler.save(&dir.join(SCALER_FILE))?;
    let meta = SplitMeta {
        scenario: split.scenario.name().to_string(),
        seed: split.seed,
    };
    let mut w = create(&dir.join(SPLIT_META))?;
    w.write_all(
        toml::to_string(&meta)
            .expect("split metadata serializes")
            .as_bytes(),
    )
    .and_then(|_| w.flush())
    .map_err(|e| CliError::io("writing split metadata", e))?;
    log::info!(
        "{}: {} train, {} test, {} target samples",
        split.scenario.name(),
        split.train.len(),
        split.test.len(),
        split.target.len()
    );
    Ok(())
}

fn save_checkpoint(path: PathBuf, model: SavedModel, scaler: &Scaler) -> Result<(), CliError> {
    Checkpoint {
        model,
        scaler: Some(scaler.clone()),
    }
    .save(&path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn train(args: &TrainArgs, cfg: &RunConfig, seed: u64) -> Result<(), CliError> {
    let h = harness(cfg, &args.overrides)?;
    let split = resolve_split(&args.data, cfg, seed)?;
    let arch = h.arch(FrontKind::Gan);
    let dir = &args.out_dir;
    make_dir(dir)?;
    let report = match args.framework {
        Framework::Pganc => {
            let pre = pretrain_branches(&split.train, &arch, h.gan(), split.seed)?;
            let o = train_two_stage_from(pre, &split.train, &arch, &h.pganc, split.seed)?;
            save_checkpoint(
                dir.join("stage1.ckpt"),
                SavedModel::Pganc(o.stage1),
                &split.scaler,
            )?;
            save_checkpoint(
                dir.join("stage2.ckpt"),
                SavedModel::Pganc(o.stage2),
                &split.scaler,
            )?;
            o.report
        }
        Framework::Pgant => {
            if split.scenario != Scenario::Transfer {
                return Err(CliError::Config("pgant needs a transfer scenario".into()));
            }
            let target = features_of(&split.target);
            let o = fit_pgant(
                &split.train,
                &target,
                &arch,
                h.gan(),
                &h.transfer,
                split.seed,
            )?;
            save_checkpoint(
                dir.join("pretrain.ckpt"),
                SavedModel::Pgant(o.pretrained),
                &split.scaler,
            )?;
            save_checkpoint(
                dir.join("transfer.ckpt"),
                SavedModel::Pgant(o.model),
                &split.scaler,
            )?;
            o.report
        }
    };
    report.write_csv(create(&dir.join("losses.csv"))?)?;
    Ok(())
}

pub fn eval(args: &EvalArgs, cfg: &RunConfig, seed: u64) -> Result<(), CliError> {
    let conv = convention(args.score_convention, cfg)?;
    let threshold = args.threshold.unwrap_or(cfg.harness.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Config(format!(
            "threshold must lie in [0, 1], got {threshold}"
        )));
    }
    let ck = Checkpoint::load(&args.checkpoint)?;
    let split = resolve_split(&args.data, cfg, seed)?;
    if let Some(s) = &ck.scaler {
        if s != &split.scaler {
            return Err(CliError::Config(format!(
                "{} was trained on differently normalized data (scaler {:08x}, data {:08x})",
                args.checkpoint.display(),
                s.fingerprint(),
                split.scaler.fingerprint()
            )));
        }
    }
    let scores: Vec<f64> = ck
        .model
        .predict(&features_of(&split.test))?
        .into_iter()
        .map(|p| p[1])
        .collect();
    let labels = icing_flags(&split.test);
    let c = confusion(&scores, &labels, threshold)?;
    let roc = roc_auc(&scores, &labels)?;
    let score = competition_score(&c, conv)?;

    let mut w = csv::Writer::from_writer(create(&args.out)?);
    let row = [
        ck.model.kind_name().to_string(),
        split.scenario.name().to_string(),
        split.seed.to_string(),
        score.to_string(),
        roc.auc.to_string(),
        mcc(&c).to_string(),
        c.tp.to_string(),
        c.fn_.to_string(),
        c.fp.to_string(),
        c.tn.to_string(),
    ];
    w.write_record([
        "method", "scenario", "seed", "score", "auc", "mcc", "tp", "fn", "fp", "tn",
    ])
    .and_then(|_| w.write_record(&row))
    .and_then(|_| w.flush().map_err(Into::into))
    .map_err(icegan::Error::from)?;
    if let Some(p) = &args.roc {
        write_roc_csv(&roc, create(p)?)?;
    }
    Ok(())
}

pub fn compare(args: &CompareArgs, cfg: &RunConfig, seed: u64) -> Result<(), CliError> {
    let h = harness(cfg, &args.overrides)?;
    let conv = convention(args.score_convention, cfg)?;
    let seeds: Vec<u64> = if args.seeds.is_empty() {
        (seed..seed + 5).collect()
    } else {
        args.seeds.clone()
    };

    // Synthetic data is regenerated per seed; user data is read once and re-split per seed.
    enum Source {
        Fixed(DatasetSplit),
        Raw(RawPair),
        Synthetic,
    }
    let source = match (&args.data.data, args.data.scenario) {
        (Some(dir), _) => Source::Fixed(load_split_dir(dir)?),
        (None, Some(ScenarioArg::WtSynth | ScenarioArg::WtSynthTransfer)) => {
            raw_pair(&args.data, cfg, seeds[0]).map(|_| ())?;
            Source::Synthetic
        }
        (None, _) => Source::Raw(raw_pair(&args.data, cfg, seed)?),
    };
    let scenario = match &source {
        Source::Fixed(s) => s.scenario,
        Source::Raw(r) => r.scenario,
        Source::Synthetic => match args.data.scenario {
            Some(ScenarioArg::WtSynthTransfer) => Scenario::Transfer,
            _ => Scenario::Single,
        },
    };
    let methods: Vec<Method> = if args.methods.is_empty() {
        Method::ALL
            .into_iter()
            .filter(|m| scenario == Scenario::Transfer || !m.is_transfer())
            .collect()
    } else {
        args.methods
            .iter()
            .map(|m| m.parse())
            .collect::<Result<_, _>>()?
    };

    let make_split = |s: u64| -> icegan::Result<DatasetSplit> {
        let to_core = |e: CliError| match e {
            CliError::Core(e) => e,
            other => icegan::Error::Config(other.to_string()),
        };
        match &source {
            Source::Fixed(split) => Ok(DatasetSplit {
                seed: s,
                ..split.clone()
            }),
            Source::Raw(raw) => split_of(raw, cfg, s).map_err(to_core),
            Source::Synthetic => raw_pair(&args.data, cfg, s)
                .and_then(|raw| split_of(&raw, cfg, s))
                .map_err(to_core),
        }
    };
    let table = run_comparison(make_split, &methods, &seeds, &h, conv)?;

    let dir = &args.out_dir;
    make_dir(dir)?;
    table.write_csv(create(&dir.join("results.csv"))?)?;
    table.write_means_csv(create(&dir.join("means.csv"))?)?;
    let roc_dir = dir.join("roc");
    make_dir(&roc_dir)?;
    for r in table.rows.values() {
        write_roc_csv(
            &r.roc,
            create(&roc_dir.join(format!("{}_seed{}.csv", r.method, r.seed)))?,
        )?;
    }

    println!(
        "{:<14} {:>9} {:>6} {:>8} {:>8} {:>8}",
        "method", "scenario", "seeds", "score", "auc", "mcc"
    );
    for s in table.means() {
        println!(
            "{:<14} {:>9} {:>6} {:>8.4} {:>8.4} {:>8.4}",
            s.method.name(),
            s.scenario.name(),
            s.seeds,
            s.score,
            s.auc,
            s.mcc
        );
    }
    Ok(())
}
