//! End-to-end acceptance checks, one verdict line per criterion.
//!
//! Run alone with `cargo test -p icegan-cli --test acceptance`.

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use icegan::checkpoint::Checkpoint;
use icegan::data::{
    eliminate_invalid, ingest_scada, FeatureVector, Label, Manifest, Sample, Scenario,
};
use icegan::diffnet::{conv1d, conv2d, conv_transpose1d, BnMode, LayerParams, Tape, Tensor, Var};
use icegan::eval::{
    competition_score, mcc, roc_auc, run_split, ConfusionCounts, Method, MethodResult,
    ScoreConvention,
};
use icegan::models::{
    concatenate, gan_forward, pgant_forward, ArchConfig, FrontKind, GanModel, PgantModel,
};
use icegan::training::{
    audit_update, mmd2_rbf, transfer_losses, OptimConfig, TransferConfig, TransferWeights,
};
use icegan::Error;
use icegan_cli::commands::synthetic_split;
use icegan_cli::config::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Writes straight to stdout so the lines survive the test harness's capture.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

fn criterion(n: usize, title: &str, check: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    let tag = if v.pass { "PASS" } else { "FAIL" };
    say(&format!(
        "[{tag}] {n} {title}: {} ({:.1?})",
        v.detail,
        start.elapsed()
    ));
    v.pass
}

// ---------------------------------------------------------------- gradients

type Build = dyn Fn(&mut Tape, Var, &[LayerParams]) -> icegan::Result<Var>;

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn randomized(mut l: LayerParams, rng: &mut ChaCha8Rng) -> LayerParams {
    for v in l
        .weight
        .data_mut()
        .iter_mut()
        .chain(l.bias.data_mut().iter_mut())
    {
        *v = rng.gen_range(-1.0..1.0);
    }
    l
}

fn objective(x: &Tensor, layers: &[LayerParams], build: &Build) -> (Tape, Var, Var) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = build(&mut tape, xv, layers).unwrap();
    let t = tape.tanh(y).unwrap();
    let l = tape.sum(t).unwrap();
    (tape, xv, l)
}

fn objective_value(x: &Tensor, layers: &[LayerParams], build: &Build) -> f64 {
    let (tape, _, l) = objective(x, layers, build);
    tape.value(l).item()
}

/// Worst relative error of analytic against central-difference gradients
/// over the input and every parameter element.
fn worst_gradient_error(x: &Tensor, layers: &[LayerParams], build: &Build) -> f64 {
    let (tape, xv, l) = objective(x, layers, build);
    let grads = tape.backward(l).unwrap();
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
    let mut worst = 0.0f64;
    let gx = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    for i in 0..x.len() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data_mut()[i] += H;
        m.data_mut()[i] -= H;
        let num =
            (objective_value(&p, layers, build) - objective_value(&m, layers, build)) / (2.0 * H);
        worst = worst.max(rel(gx.data()[i], num));
    }
    for (li, layer) in layers.iter().enumerate() {
        for weight in [true, false] {
            let name = format!("{}.{}", layer.name, if weight { "weight" } else { "bias" });
            let len = if weight {
                layer.weight.len()
            } else {
                layer.bias.len()
            };
            let g = grads
                .param(&name)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&[len]));
            for i in 0..len {
                let nudged = |d: f64| {
                    let mut ls = layers.to_vec();
                    let t = if weight {
                        &mut ls[li].weight
                    } else {
                        &mut ls[li].bias
                    };
                    t.data_mut()[i] += d;
                    objective_value(x, &ls, build)
                };
                worst = worst.max(rel(g.data()[i], (nudged(H) - nudged(-H)) / (2.0 * H)));
            }
        }
    }
    worst
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> (Tensor, Vec<LayerParams>, Box<Build>)>;

fn gradient_cases() -> Vec<(&'static str, Case)> {
    let single: fn() -> Box<Build> = || Box::new(|t, x, ls| t.layer(x, &ls[0]));
    vec![
        (
            "conv1d",
            Box::new(move |rng| {
                let (n, c, f, k, s) = (
                    rng.gen_range(1..4),
                    rng.gen_range(1..4),
                    rng.gen_range(1..5),
                    rng.gen_range(1..5),
                    rng.gen_range(1..3),
                );
                let x = random_tensor(&[n, c, 1, k + s * rng.gen_range(0..5)], rng);
                (
                    x,
                    vec![randomized(LayerParams::conv1d("c", c, f, k, s), rng)],
                    single(),
                )
            }),
        ),
        (
            "conv_transpose1d",
            Box::new(move |rng| {
                let (n, c, f, k, s) = (
                    rng.gen_range(1..4),
                    rng.gen_range(1..4),
                    rng.gen_range(1..5),
                    rng.gen_range(1..5),
                    rng.gen_range(1..3),
                );
                let x = random_tensor(&[n, c, 1, rng.gen_range(1..8)], rng);
                (
                    x,
                    vec![randomized(
                        LayerParams::conv_transpose1d("t", c, f, k, s),
                        rng,
                    )],
                    single(),
                )
            }),
        ),
        (
            "conv2d",
            Box::new(move |rng| {
                let (n, c, f) = (
                    rng.gen_range(1..3),
                    rng.gen_range(1..4),
                    rng.gen_range(1..4),
                );
                let (kr, kc) = (rng.gen_range(1..3), rng.gen_range(1..4));
                let (sr, sc) = (rng.gen_range(1..3), rng.gen_range(1..3));
                let x = random_tensor(
                    &[
                        n,
                        c,
                        kr + sr * rng.gen_range(0..3),
                        kc + sc * rng.gen_range(0..4),
                    ],
                    rng,
                );
                (
                    x,
                    vec![randomized(
                        LayerParams::conv2d("k", c, f, (kr, kc), (sr, sc)),
                        rng,
                    )],
                    single(),
                )
            }),
        ),
        (
            "fully_connected",
            Box::new(move |rng| {
                let (n, i, o) = (
                    rng.gen_range(1..5),
                    rng.gen_range(1..12),
                    rng.gen_range(1..6),
                );
                let x = random_tensor(&[n, 1, 1, i], rng);
                (
                    x,
                    vec![randomized(LayerParams::fully_connected("fc", i, o), rng)],
                    single(),
                )
            }),
        ),
        (
            "batchnorm",
            Box::new(|rng| {
                let (n, c, w) = (
                    rng.gen_range(2..5),
                    rng.gen_range(1..4),
                    rng.gen_range(1..6),
                );
                let x = random_tensor(&[n, c, 1, w], rng);
                let mut bn = randomized(LayerParams::batchnorm("bn", c), rng);
                bn.weight.data_mut().iter_mut().for_each(|v| *v += 1.5);
                (
                    x,
                    vec![bn],
                    Box::new(|t, x, ls| t.batchnorm(x, &ls[0], BnMode::Train)),
                )
            }),
        ),
        (
            "encoder stack",
            Box::new(|rng| {
                let x = random_tensor(&[rng.gen_range(2..4), 1, 1, 10], rng);
                let layers = vec![
                    randomized(LayerParams::conv1d("a", 1, 3, 3, 1), rng),
                    randomized(LayerParams::batchnorm("b", 3), rng),
                    randomized(LayerParams::conv1d("c", 3, 2, 3, 1), rng),
                ];
                let build: Box<Build> = Box::new(|t, x, ls| {
                    let h = t.layer(x, &ls[0])?;
                    let h = t.leaky_relu(h, 0.01)?;
                    let h = t.batchnorm(h, &ls[1], BnMode::Train)?;
                    t.layer(h, &ls[2])
                });
                (x, layers, build)
            }),
        ),
        (
            "mmd2_rbf",
            Box::new(|rng| {
                let (n, d) = (rng.gen_range(4..9), rng.gen_range(1..5));
                let split = rng.gen_range(2..n - 1);
                let x = random_tensor(&[n, 1, 1, d], rng);
                let sigma = rng.gen_range(0.5..2.0);
                let build: Box<Build> = Box::new(move |t, x, _| {
                    let rows: Vec<usize> = (0..n).collect();
                    let a = t.select_batch(x, &rows[..split])?;
                    let b = t.select_batch(x, &rows[split..])?;
                    t.mmd2_rbf(a, b, sigma)
                });
                (x, vec![], build)
            }),
        ),
    ]
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut checked = 0;
    for (name, case) in gradient_cases() {
        for seed in 0..GRAD_SEEDS {
            let (x, layers, build) = case(&mut ChaCha8Rng::seed_from_u64(seed));
            let err = worst_gradient_error(&x, &layers, &*build);
            checked += 1;
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst.0 <= GRAD_TOL && elapsed <= Duration::from_secs(60),
        format!(
            "{checked} shape/seed cases ({GRAD_SEEDS} per operation), worst rel err {:.2e} in {}, {:.1?}",
            worst.0, worst.1, elapsed
        ),
    )
}

// ------------------------------------------------------------------ shapes

fn dims(t: &Tensor) -> String {
    t.shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn with_hyper(t: &Tensor, l: &LayerParams) -> String {
    format!(
        "{}({}/{}/{})",
        dims(t),
        l.hyper.filters,
        l.hyper.kernel.1,
        l.hyper.stride.1
    )
}

fn shape_check() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x_fv = FeatureVector(std::array::from_fn(|k| ((k as f64) * 0.37).sin()));
    let gan = GanModel::new("gan_icing", 0.01, &mut rng);
    let x = Tensor::chw(1, 1, 28, x_fv.0.to_vec()).unwrap();
    let h1 = conv1d(&x, &gan.ge.conv1).unwrap();
    let h2 = conv1d(&h1, &gan.ge.conv2).unwrap();
    let d1 = conv_transpose1d(&h2, &gan.gd.convt1).unwrap();
    let d2 = conv_transpose1d(&d1, &gan.gd.convt2).unwrap();
    let e1 = conv1d(&d2, &gan.de.conv1).unwrap();
    let e2 = conv1d(&e1, &gan.de.conv2).unwrap();
    let mut got = vec![
        with_hyper(&h1, &gan.ge.conv1),
        with_hyper(&h2, &gan.ge.conv2),
        with_hyper(&d1, &gan.gd.convt1),
        with_hyper(&d2, &gan.gd.convt2),
        with_hyper(&e1, &gan.de.conv1),
        with_hyper(&e2, &gan.de.conv2),
    ];
    let mut want: Vec<&str> = vec![
        "4x1x25(4/4/1)",
        "8x1x22(8/4/1)",
        "8x1x25(8/4/1)",
        "1x1x28(1/4/1)",
        "4x1x25(4/4/1)",
        "8x1x22(8/4/1)",
    ];

    let model = PgantModel::new(&ArchConfig::default(), &mut rng);
    let y_n = gan_forward(model.normal.gan().unwrap(), &x_fv).unwrap().y;
    let y_ic = gan_forward(model.icing.gan().unwrap(), &x_fv).unwrap().y;
    let f = concatenate(&y_n, &y_ic).unwrap();
    let c = conv2d(&f, &model.cnn_fe.conv).unwrap();
    let h = model.cnn_fe.conv.hyper;
    got.push(dims(&f));
    got.push(format!(
        "{}({}/({},{})/({},{}))",
        dims(&c),
        h.filters,
        h.kernel.0,
        h.kernel.1,
        h.stride.0,
        h.stride.1
    ));
    want.extend(["8x2x22", "4x2x19(4/(1,4)/(1,1))"]);
    let (_, d, fc1) = pgant_forward(&model, &x_fv).unwrap();
    got.push(format!("d={} fc1={}", d.len(), fc1.len()));
    want.push("d=152 fc1=16");

    let mismatches: Vec<String> = got
        .iter()
        .zip(&want)
        .filter(|(g, w)| g != w)
        .map(|(g, w)| format!("{g} != {w}"))
        .collect();
    if mismatches.is_empty() && got.len() == want.len() {
        verdict(true, format!("{} layer shapes exact", got.len()))
    } else {
        verdict(false, mismatches.join("; "))
    }
}

// ----------------------------------------------------------------- oracles

fn oracle_check() -> Verdict {
    let kernel = |x: &[f64], y: &[f64], s: f64| {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        (-d2 / (2.0 * s * s)).exp()
    };
    let mean_k = |p: &[Vec<f64>], q: &[Vec<f64>], s: f64| {
        p.iter()
            .flat_map(|x| q.iter().map(move |y| kernel(x, y, s)))
            .sum::<f64>()
            / (p.len() * q.len()) as f64
    };
    let mut mmd_err = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = rng.gen_range(1..20);
        let shift = rng.gen_range(-1.0..1.0);
        let mut pts = |n: usize, off: f64| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0) + off).collect())
                .collect()
        };
        let (a, b) = (
            pts(1 + seed as usize % 29, 0.0),
            pts(1 + (seed as usize * 7) % 29, shift),
        );
        let s = 0.1 + (seed as f64) * 0.04;
        let want = mean_k(&a, &a, s) + mean_k(&b, &b, s) - 2.0 * mean_k(&a, &b, s);
        mmd_err = mmd_err.max((mmd2_rbf(&a, &b, s).unwrap() - want).abs());
    }

    let mut auc_err = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let n = rng.gen_range(2..150);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let levels = rng.gen_range(2..40) as f64;
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.gen_range(0.0..1.0) * levels).floor() / levels)
            .collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        auc_err = auc_err.max((roc_auc(&scores, &labels).unwrap().auc - wins / pairs).abs());
    }

    let score = competition_score(
        &ConfusionCounts {
            tp: 8,
            fn_: 2,
            fp: 1,
            tn: 99,
        },
        ScoreConvention::Verbatim,
    )
    .unwrap();
    // N_normal = 100, N_fault = 10.
    let alpha = 10.0f64 / 100.0;
    let score_direct = 1.0 - alpha * 2.0 / 100.0 - (1.0 - alpha) * 1.0 / 10.0;
    let m = mcc(&ConfusionCounts {
        tp: 90,
        fn_: 10,
        fp: 20,
        tn: 80,
    });
    let mcc_direct = 7000.0 / (110.0f64 * 100.0 * 100.0 * 90.0).sqrt();
    let exact = score.to_bits() == score_direct.to_bits() && m.to_bits() == mcc_direct.to_bits();
    verdict(
        mmd_err <= 1e-12 && auc_err <= 1e-12 && exact,
        format!(
            "mmd2 max err {mmd_err:.1e}, AUC max err {auc_err:.1e} (100 instances each), score {score} exact={}, mcc exact={}",
            score.to_bits() == score_direct.to_bits(),
            m.to_bits() == mcc_direct.to_bits()
        ),
    )
}

// ----------------------------------------------------------- transfer head

fn toy_source(n: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    (0..n)
        .map(|id| {
            let icing = id % 2 == 0;
            let shift = if icing { 0.4 } else { -0.2 };
            Sample {
                id,
                x: FeatureVector(std::array::from_fn(|k| {
                    rng.gen_range(-0.6..0.6) + shift * ((k % 3) as f64 - 1.0)
                })),
                label: if icing { Label::Icing } else { Label::Normal },
            }
        })
        .collect()
}

fn toy_target(n: usize, rng: &mut ChaCha8Rng) -> Vec<FeatureVector> {
    (0..n)
        .map(|_| FeatureVector(std::array::from_fn(|_| rng.gen_range(-0.6..0.6) + 0.8)))
        .collect()
}

fn routing_check() -> Verdict {
    let cfg = TransferConfig {
        alpha: 0.3,
        beta: 1.0,
        optim: OptimConfig {
            epochs: 1,
            batch_size: 16,
            patience: 0,
            ..OptimConfig::default()
        },
        target_batch_size: 16,
        ..TransferConfig::default()
    };
    let mut routed = true;
    let mut raw = f64::INFINITY;
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let front = if seed % 2 == 0 {
            FrontKind::Gan
        } else {
            FrontKind::Plain
        };
        let model = PgantModel::new(
            &ArchConfig {
                front,
                ..ArchConfig::default()
            },
            &mut rng,
        );
        let a = audit_update(
            &model,
            &toy_source(12, &mut rng),
            &toy_target(10, &mut rng),
            &cfg,
        )
        .unwrap();
        routed &= a.applied_domain_on_classifier == 0.0 && a.applied_domain_on_features > 0.0;
        raw = raw.min(a.raw_domain_on_classifier);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = PgantModel::new(&ArchConfig::default(), &mut rng);
    let zero = TransferWeights {
        alpha: 0.0,
        beta: 0.0,
        ..cfg.weights()
    };
    let mut gap = 0.0f64;
    for _ in 0..10 {
        let n = rng.gen_range(4..20);
        let src = toy_source(n, &mut rng);
        let v = transfer_losses(
            &model,
            &src,
            &toy_target(rng.gen_range(2..20), &mut rng),
            &zero,
        )
        .unwrap();
        gap = gap.max((v.l_total - v.l_c).abs());
    }
    verdict(
        routed && raw > 0.0 && gap <= 1e-12,
        format!(
            "domain gradient applied to classifier = 0 on 6 models (raw magnitude >= {raw:.2e}), \
             alpha=beta=0 max |L_total - L_c| = {gap:.1e}"
        ),
    )
}

// -------------------------------------------------------- synthetic benchmarks

fn result(rs: &[MethodResult], m: Method) -> &MethodResult {
    rs.iter().find(|r| r.method == m).expect("method ran")
}

fn single_turbine_check() -> Verdict {
    let cfg = RunConfig::default();
    let mut ok = true;
    let mut improved = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let start = Instant::now();
        let split = synthetic_split(&cfg, Scenario::Single, seed).unwrap();
        let rs = run_split(
            &split,
            &[Method::PgancStage1, Method::PgancStage2],
            &cfg.harness,
            ScoreConvention::Verbatim,
        )
        .unwrap();
        let elapsed = start.elapsed();
        let (s1, s2) = (
            result(&rs, Method::PgancStage1),
            result(&rs, Method::PgancStage2),
        );
        ok &= s2.auc >= 0.95 && s2.score >= 0.85 && elapsed <= Duration::from_secs(300);
        if s2.score >= s1.score {
            improved += 1;
        }
        say(&format!(
            "    seed {seed}: stage1 score {:.4} auc {:.4} | stage2 score {:.4} auc {:.4} | {:.1?}",
            s1.score, s1.auc, s2.score, s2.auc, elapsed
        ));
        lines.push(format!("{:.3}/{:.4}", s2.score, s2.auc));
    }
    verdict(
        ok && improved >= 4,
        format!(
            "stage-2 score/AUC per seed [{}], stage 2 >= stage 1 on {improved}/5 seeds",
            lines.join(", ")
        ),
    )
}

fn transfer_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/transfer.toml");
    RunConfig::load(Some(&path)).unwrap()
}

fn transfer_check() -> Verdict {
    let cfg = transfer_config();
    let methods = [
        Method::Knn,
        Method::PgancStage2,
        Method::Pgant,
        Method::Pgant1Loss,
    ];
    let mut sums = [0.0f64; 4];
    for seed in SEEDS {
        let split = synthetic_split(&cfg, Scenario::Transfer, seed).unwrap();
        let rs = run_split(&split, &methods, &cfg.harness, ScoreConvention::Verbatim).unwrap();
        let aucs: Vec<f64> = methods.iter().map(|&m| result(&rs, m).auc).collect();
        for (s, a) in sums.iter_mut().zip(&aucs) {
            *s += a;
        }
        say(&format!(
            "    seed {seed}: KNN {:.4} | PGANC-stage2 {:.4} | PGANT {:.4} | PGANT alpha=0 {:.4}",
            aucs[0], aucs[1], aucs[2], aucs[3]
        ));
    }
    let [knn, source_only, pgant, ablation] = sums.map(|s| s / SEEDS.len() as f64);
    verdict(
        pgant >= source_only + 0.02 && pgant > knn,
        format!(
            "mean AUC: PGANT {pgant:.4}, source-only PGANC {source_only:.4}, KNN {knn:.4}, PGANT alpha=0 {ablation:.4}"
        ),
    )
}

// ------------------------------------------------------------------ CLI runs

fn icegan(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_icegan"))
        .args(args)
        .current_dir(dir)
        .env_remove("ICEGAN_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn reproducibility_check() -> Verdict {
    let t = TempDir::new().unwrap();
    let d = t.path();
    fs::write(d.join("small.toml"), "[synth]\nn_records = 20000\n").unwrap();
    let run = |out: &str| {
        let dir = d.join(out);
        fs::create_dir_all(&dir).unwrap();
        let c = "../small.toml";
        icegan(
            &dir,
            &["--config", c, "--seed", "4", "synth", "--out", "raw.csv"],
        );
        icegan(
            &dir,
            &[
                "--config",
                c,
                "--seed",
                "4",
                "preprocess",
                "--scenario",
                "wt-synth-transfer",
                "--out-dir",
                "data",
            ],
        );
        icegan(
            &dir,
            &[
                "--config",
                c,
                "--seed",
                "4",
                "train",
                "pganc",
                "--data",
                "data",
                "--out-dir",
                "m",
                "--epochs",
                "2",
            ],
        );
        icegan(
            &dir,
            &[
                "--config",
                c,
                "--seed",
                "4",
                "train",
                "pgant",
                "--data",
                "data",
                "--out-dir",
                "t",
                "--epochs",
                "2",
            ],
        );
        icegan(
            &dir,
            &[
                "eval",
                "--checkpoint",
                "t/transfer.ckpt",
                "--data",
                "data",
                "--out",
                "r.csv",
                "--roc",
                "roc.csv",
            ],
        );
        let methods = "KNN,PGANC-stage2,PGANT";
        icegan(
            &dir,
            &[
                "--config",
                c,
                "compare",
                "--scenario",
                "wt-synth-transfer",
                "--methods",
                methods,
                "--seeds",
                "0,1",
                "--epochs",
                "1",
                "--out-dir",
                "cmp",
            ],
        );
        files_under(&dir)
    };
    let (a, b) = (run("a"), run("b"));
    let identical = a == b;

    let mut bit_exact = true;
    for f in [
        "m/stage1.ckpt",
        "m/stage2.ckpt",
        "t/pretrain.ckpt",
        "t/transfer.ckpt",
    ] {
        let path = d.join("a").join(f);
        let bytes = fs::read(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        let again = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        bit_exact &= ck.to_bytes().unwrap() == bytes && again == ck;
    }

    let mut bytes = fs::read(d.join("a/m/stage2.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let caught = matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checksum { .. }));
    verdict(
        identical && bit_exact && caught,
        format!(
            "{} output files byte-identical across reruns: {identical}; 4 checkpoints round-trip bit-exact: {bit_exact}; \
             corrupted byte rejected by CRC: {caught}",
            a.len()
        ),
    )
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn sample_counts(path: &Path) -> (usize, usize) {
    let rows = csv_rows(path);
    let icing = rows[1..]
        .iter()
        .filter(|r| r.last().map(String::as_str) == Some("1"))
        .count();
    (icing, rows.len() - 1 - icing)
}

fn valid_icing(path: &Path) -> usize {
    let m = Manifest::builtin();
    eliminate_invalid(ingest_scada(path, &m).unwrap(), &m)
        .iter()
        .filter(|r| r.label == Label::Icing)
        .count()
}

fn round_frac(n: usize, f: f64) -> usize {
    (n as f64 * f).round() as usize
}

fn real_data_check() -> Verdict {
    let t = TempDir::new().unwrap();
    let d = t.path();
    icegan(
        d,
        &["--seed", "21", "synth", "--n", "20000", "--out", "wt15.csv"],
    );
    icegan(
        d,
        &[
            "--seed",
            "22",
            "synth",
            "--n",
            "20000",
            "--shift",
            "second-turbine",
            "--out",
            "wt21.csv",
        ],
    );
    let (ic15, ic21) = (
        valid_icing(&d.join("wt15.csv")),
        valid_icing(&d.join("wt21.csv")),
    );

    icegan(
        d,
        &[
            "--seed",
            "3",
            "preprocess",
            "--scenario",
            "single",
            "--source",
            "wt15.csv",
            "--out-dir",
            "s",
        ],
    );
    icegan(
        d,
        &[
            "--seed",
            "3",
            "preprocess",
            "--scenario",
            "transfer",
            "--source",
            "wt15.csv",
            "--target",
            "wt21.csv",
            "--out-dir",
            "x",
        ],
    );
    let (tr, te) = (round_frac(ic15, 0.1), round_frac(ic15, 0.4));
    let (src, tst, unl) = (
        round_frac(ic15, 0.6),
        round_frac(ic21, 0.4),
        round_frac(ic21, 0.6),
    );
    let splits_ok = sample_counts(&d.join("s/train.csv")) == (tr, tr)
        && sample_counts(&d.join("s/test.csv")) == (te, 10 * te)
        && sample_counts(&d.join("x/train.csv")) == (src, src)
        && sample_counts(&d.join("x/test.csv")) == (tst, 10 * tst)
        && csv_rows(&d.join("x/target.csv")).len() - 1 == 2 * unl;

    let compare = |scenario: &str, extra: &[&str], out: &str| {
        let mut args = vec!["compare", "--scenario", scenario, "--source", "wt15.csv"];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--seeds", "0,1", "--epochs", "1", "--out-dir", out]);
        icegan(d, &args);
        (
            csv_rows(&d.join(out).join("results.csv")),
            csv_rows(&d.join(out).join("means.csv")),
        )
    };
    let (single, single_means) = compare("single", &[], "single");
    let (transfer, transfer_means) = compare("transfer", &["--target", "wt21.csv"], "transfer");

    let header = ["method", "scenario", "seed", "score", "auc", "mcc"];
    let shaped = |rows: &[Vec<String>], methods: &[&str], seeds: usize| {
        rows[0][..6] == header
            && rows.len() == 1 + methods.len() * seeds
            && methods
                .iter()
                .all(|m| rows.iter().filter(|r| r[0] == *m).count() == seeds)
            && rows[1..].iter().all(|r| {
                r[3..6]
                    .iter()
                    .all(|v| v.parse::<f64>().map(f64::is_finite).unwrap_or(false))
            })
    };
    let single_methods = ["KNN", "plain-CNN", "PGANC-stage1", "PGANC-stage2"];
    let transfer_methods: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
    let tables_ok = shaped(&single, &single_methods, 2)
        && single_means.len() == 1 + single_methods.len()
        && transfer_methods
            .iter()
            .all(|m| transfer.iter().any(|r| r[0] == *m))
        && shaped(&transfer, &transfer_methods, 2)
        && transfer_means.len() == 1 + transfer_methods.len();
    verdict(
        splits_ok && tables_ok,
        format!(
            "splits of two canonical CSVs (valid icing {ic15}/{ic21}) sized as configured: {splits_ok}; \
             single ({} rows) and transfer ({} rows) result tables shaped: {tables_ok}",
            single.len() - 1,
            transfer.len() - 1
        ),
    )
}

#[test]
fn acceptance() {
    // Starts the verdicts on their own line after libtest's `test acceptance ...`.
    say("");
    let verdicts = [
        criterion(1, "finite-difference gradients", gradient_check),
        criterion(2, "layer output shapes", shape_check),
        criterion(3, "mmd2/AUC oracles, exact score and MCC", oracle_check),
        criterion(
            4,
            "transfer gradient routing and zero-weight reduction",
            routing_check,
        ),
        criterion(
            5,
            "single-turbine PGANC on synthetic data",
            single_turbine_check,
        ),
        criterion(6, "PGANT transfer gain", transfer_check),
        criterion(
            7,
            "reproducibility and checkpoint integrity",
            reproducibility_check,
        ),
        criterion(8, "canonical CSV pipeline", real_data_check),
    ];
    let passed = verdicts.iter().filter(|&&p| p).count();
    say(&format!(
        "acceptance: {passed}/{} criteria passed",
        verdicts.len()
    ));
    assert_eq!(passed, verdicts.len());
}
