//! Acceptance run: one line per criterion, exit status nonzero if any gate fails.
//!
//! Criteria that need the public benchmark images read them from
//! `NORMSCAPE_SET5_DIR` (evaluation) and `NORMSCAPE_T91_DIR` (training); the
//! full 45-epoch experiment additionally requires `NORMSCAPE_FULL_EXPERIMENT=1`.
//! Without them those criteria are reported as NOT RUN rather than passed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use normscape_cli::commands::{self, EvalSource, ExperimentReport, Resume};
use normscape_cli::RunConfig;
use normscape_core::conv::{self, reference, ConvSpec};
use normscape_core::model::{build_model, ModelConfig, Subnet};
use normscape_core::objective::{
    capacity_penalty, empirical_error, intermediate_loss, total_loss, NormKind, NormSetting, ObjectiveConfig,
};
use normscape_core::{Precision, Scalar, Tensor, OVERPARAMETRIZATION_THRESHOLD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BICUBIC_SET5_X2: f64 = 33.66;
const BICUBIC_TOLERANCE: f64 = 0.15;
const FULL_RUN_HARD_GATE: f64 = 34.0;
const FULL_RUN_TARGET: f64 = 35.0;

enum Status {
    Pass,
    Fail,
    NotRun,
    Reported,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn gate(ok: bool, detail: String) -> Self {
        Outcome {
            status: if ok { Status::Pass } else { Status::Fail },
            detail,
        }
    }

    fn fail(detail: impl Into<String>) -> Self {
        Outcome {
            status: Status::Fail,
            detail: detail.into(),
        }
    }

    fn not_run(detail: impl Into<String>) -> Self {
        Outcome {
            status: Status::NotRun,
            detail: detail.into(),
        }
    }
}

fn within(limit: Duration, elapsed: Duration, detail: &mut String) -> bool {
    let _ = write!(detail, "; runtime limit {} s", limit.as_secs());
    elapsed <= limit
}

fn scratch() -> tempfile::TempDir {
    tempfile::tempdir().expect("temporary directory")
}

// ---------------------------------------------------------------------------
// 1. bicubic baseline
// ---------------------------------------------------------------------------

fn bicubic_baseline() -> Outcome {
    let Some(dir) = std::env::var_os("NORMSCAPE_SET5_DIR") else {
        return Outcome::not_run("Set5 not available; set NORMSCAPE_SET5_DIR to the directory of its five HR images");
    };
    let start = Instant::now();
    let r = match commands::eval(&EvalSource::Dir(PathBuf::from(dir)), 2, None) {
        Ok(r) => r,
        Err(e) => return Outcome::fail(format!("eval failed: {e}")),
    };
    let elapsed = start.elapsed();
    let gap = r.mean_psnr - BICUBIC_SET5_X2;
    let mut detail = format!(
        "mean {:.3} dB over {} images, {:+.3} dB vs {BICUBIC_SET5_X2} (tolerance {BICUBIC_TOLERANCE})",
        r.mean_psnr, r.images, gap
    );
    let fast = within(Duration::from_secs(30), elapsed, &mut detail);
    Outcome::gate(gap.abs() <= BICUBIC_TOLERANCE && r.images == 5 && fast, detail)
}

// ---------------------------------------------------------------------------
// 2. overparametrization
// ---------------------------------------------------------------------------

fn overparametrization() -> Outcome {
    let r = commands::param_count(&RunConfig::default().model);
    Outcome::gate(
        r.total > OVERPARAMETRIZATION_THRESHOLD && r.exceeds_threshold,
        format!(
            "total {} > {} (Enet {}, Inet {}, Rnet {}; reference {}, delta {:+})",
            r.total, OVERPARAMETRIZATION_THRESHOLD, r.enet, r.inet, r.rnet, r.reference_total, r.delta_vs_reference
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. gradient correctness
// ---------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let r = match commands::gradcheck(&ModelConfig::tiny(), &ObjectiveConfig::default(), 8, 7, 1e-4) {
        Ok(r) => r,
        Err(e) => return Outcome::fail(format!("gradient check failed to run: {e}")),
    };
    let elapsed = start.elapsed();
    let layers: Vec<_> = r.checks.iter().flat_map(|c| c.layers.iter()).collect();
    let worst = layers
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .expect("at least one layer");
    let settings: Vec<_> = r.checks.iter().filter_map(|c| c.layers.first()).map(|l| l.setting).collect();
    let mut detail = format!(
        "{} layer checks over {:?}; worst max rel error {:.2e} ({} under {}), tolerance 1e-4",
        layers.len(),
        settings.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
        worst.report.max_rel_error,
        worst.layer,
        worst.setting.as_str()
    );
    let all_settings = NormSetting::ALL.iter().all(|s| settings.contains(s));
    let fast = within(Duration::from_secs(120), elapsed, &mut detail);
    Outcome::gate(r.passed && all_settings && fast, detail)
}

// ---------------------------------------------------------------------------
// 4. optimized vs naive convolution
// ---------------------------------------------------------------------------

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn scaled_gap(a: &Tensor<f32>, b: &Tensor<f32>, scale: &Tensor<f32>) -> f64 {
    a.sub(b).unwrap().max_abs().as_f64() / scale.max_abs().as_f64().max(f64::MIN_POSITIVE)
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = [0.0f64; 3];
    for _ in 0..200 {
        let n = rng.random_range(1..=3);
        let c = rng.random_range(1..=16);
        let o = rng.random_range(1..=16);
        let k = if rng.random_bool(0.75) { 3 } else { 1 };
        let h = rng.random_range(1..=20);
        let w = rng.random_range(1..=20);
        let spec = ConvSpec::new(c, o, k).unwrap();
        let x = random_tensor(&[n, c, h, w], &mut rng);
        let wt = random_tensor(&spec.weight_shape(), &mut rng);
        let g = random_tensor(&[n, o, h, w], &mut rng);
        let fast = conv::conv2d_forward(&x, &wt, &spec).unwrap();
        let slow = reference::conv2d_forward(&x, &wt, &spec).unwrap();
        let (gi, gw) = conv::conv2d_backward(&x, &wt, &g).unwrap();
        let (rgi, rgw) = reference::conv2d_backward(&x, &wt, &g).unwrap();
        // Backward sums cancel heavily, so they are measured against the same
        // sums taken over absolute values.
        let abs = |t: &Tensor<f32>| t.map(f32::abs);
        let (cgi, cgw) = reference::conv2d_backward(&abs(&x), &abs(&wt), &abs(&g)).unwrap();
        let gaps = [scaled_gap(&fast, &slow, &slow), scaled_gap(&gi, &rgi, &cgi), scaled_gap(&gw, &rgw, &cgw)];
        for (w, g) in worst.iter_mut().zip(gaps) {
            *w = w.max(g);
        }
    }
    let elapsed = start.elapsed();
    let mut detail = format!(
        "200 f32 cases; worst relative gap forward {:.2e}, input grad {:.2e}, weight grad {:.2e} (tolerance 1e-6)",
        worst[0], worst[1], worst[2]
    );
    let fast = within(Duration::from_secs(60), elapsed, &mut detail);
    Outcome::gate(worst.iter().all(|&w| w < 1e-6) && fast, detail)
}

// ---------------------------------------------------------------------------
// 5. loss algebra
// ---------------------------------------------------------------------------

fn check(failures: &mut Vec<String>, ok: bool, what: impl FnOnce() -> String) {
    if !ok {
        failures.push(what());
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn loss_algebra() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let t = |shape: &[usize], v: Vec<f64>| Tensor::new(shape, v).unwrap();

    // Hand-computed empirical and intermediate losses.
    let e = empirical_error(&t(&[1, 1, 1, 1], vec![1.0]), &t(&[1, 1, 1, 1], vec![0.0])).unwrap();
    check(&mut failures, e == 0.5, || format!("single-pixel empirical error {e} != 0.5"));
    let y = t(&[2, 1, 1, 2], vec![0.0; 4]);
    let yh = t(&[2, 1, 1, 2], vec![1.0, 1.0, 2.0, 0.0]);
    let e = empirical_error(&y, &yh).unwrap();
    check(&mut failures, e == 1.5, || format!("two-sample empirical error {e} != 1.5"));
    let y = t(&[1, 1, 1, 2], vec![0.0, 0.0]);
    let (a, b) = (t(&[1, 1, 1, 2], vec![1.0, 1.0]), t(&[1, 1, 1, 2], vec![2.0, std::f64::consts::SQRT_2]));
    let il = intermediate_loss(&y, &[a.clone(), b]).unwrap();
    check(&mut failures, (il - 2.0).abs() < 1e-12, || format!("R=2 intermediate loss {il} != 2"));
    let il = intermediate_loss(&y, std::slice::from_ref(&a)).unwrap();
    check(&mut failures, il == empirical_error(&y, &a).unwrap(), || "R=1 reduction differs".into());

    // Hand-computed penalties on a model whose only nonzero weights are [3, -4] in Inet.
    let mut params = build_model::<f64>(&ModelConfig::tiny(), 0).unwrap();
    for l in &mut params.layers {
        l.weight = Tensor::zeros(l.weight.shape());
    }
    let inet = params.layers.iter_mut().find(|l| l.subnet == Subnet::Inet).unwrap();
    inet.weight.data_mut()[0] = 3.0;
    inet.weight.data_mut()[1] = -4.0;
    let cfg = ObjectiveConfig {
        lambda: 0.0002,
        ..Default::default()
    };
    let (l1, _) = capacity_penalty(&params, NormSetting::AllL1, &cfg);
    let (l2, _) = capacity_penalty(&params, NormSetting::AllL2, &cfg);
    check(&mut failures, rel(l1, 0.0014) < 1e-12, || format!("L1 penalty {l1} != 0.0014"));
    check(&mut failures, rel(l2, 0.005) < 1e-12, || format!("squared-L2 penalty {l2} != 0.005"));

    // Setting table, by construction on distinguishable subnet weights.
    let mut params = build_model::<f64>(&ModelConfig::tiny(), 1).unwrap();
    for l in &mut params.layers {
        let v = match l.subnet {
            Subnet::Enet => -0.5,
            Subnet::Inet => 0.25,
            Subnet::Rnet => 2.0,
        };
        l.weight = Tensor::full(l.weight.shape(), v);
    }
    let cfg = ObjectiveConfig::default();
    for setting in NormSetting::ALL {
        let (_, per) = capacity_penalty(&params, setting, &cfg);
        for (i, subnet) in Subnet::ALL.into_iter().enumerate() {
            let ws: Vec<f64> = params.subnet_layers(subnet).flat_map(|l| l.weight.data().to_vec()).collect();
            let want = cfg.lambda
                * match setting.norm_for(subnet) {
                    NormKind::L1 => ws.iter().map(|w| w.abs()).sum::<f64>(),
                    NormKind::L2 => ws.iter().map(|w| w * w).sum::<f64>(),
                };
            check(&mut failures, rel(per[i], want) < 1e-12, || {
                format!("{} {subnet:?} penalty {} != {want}", setting.as_str(), per[i])
            });
        }
    }
    let expected = [
        (NormSetting::AllL2, [NormKind::L2, NormKind::L2, NormKind::L2]),
        (NormSetting::Mix, [NormKind::L2, NormKind::L1, NormKind::L2]),
        (NormSetting::AllL1, [NormKind::L1, NormKind::L1, NormKind::L1]),
    ];
    for (setting, kinds) in expected {
        let got: Vec<_> = Subnet::ALL.into_iter().map(|s| setting.norm_for(s)).collect();
        check(&mut failures, got == kinds, || format!("{} maps to {got:?}", setting.as_str()));
    }

    // Homogeneity and the weighted-total identity on random parameters.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_total = 0.0f64;
    for i in 0..100 {
        let mut params = build_model::<f64>(&ModelConfig::tiny(), i).unwrap();
        for l in &mut params.layers {
            l.weight = Tensor::from_fn(l.weight.shape(), |_| rng.random_range(-1.0..1.0));
        }
        let c: f64 = rng.random_range(1.1..5.0);
        let mut scaled = params.clone();
        for l in &mut scaled.layers {
            l.weight = l.weight.scale(c);
        }
        let (a1, _) = capacity_penalty(&params, NormSetting::AllL1, &cfg);
        let (b1, _) = capacity_penalty(&scaled, NormSetting::AllL1, &cfg);
        let (a2, _) = capacity_penalty(&params, NormSetting::AllL2, &cfg);
        let (b2, _) = capacity_penalty(&scaled, NormSetting::AllL2, &cfg);
        check(&mut failures, rel(b1, c * a1) < 1e-10, || format!("L1 not 1-homogeneous: {b1} vs {}", c * a1));
        check(&mut failures, rel(b2, c * c * a2) < 1e-10, || format!("L2 not 2-homogeneous: {b2} vs {}", c * c * a2));

        let x = Tensor::from_fn(&[1, 1, 6, 6], |_| rng.random_range(0.0..1.0));
        let y = Tensor::from_fn(&[1, 1, 6, 6], |_| rng.random_range(0.0..1.0));
        let obj = ObjectiveConfig {
            alpha: rng.random_range(0.0..=1.0),
            ..Default::default()
        };
        let setting = NormSetting::ALL[i as usize % 3];
        let b = total_loss(&params, &x, &y, setting, &obj).unwrap();
        let identity = (1.0 - obj.alpha) * b.l1_term + obj.alpha * b.l2_term + b.l3_term;
        worst_total = worst_total.max(rel(b.total, identity));
    }
    check(&mut failures, worst_total < 1e-12, || format!("weighted total off by rel {worst_total:e}"));

    let elapsed = start.elapsed();
    let mut detail = if failures.is_empty() {
        format!("hand-computed instances, setting table, homogeneity and weighted total (worst rel {worst_total:.1e}) hold")
    } else {
        failures.join("; ")
    };
    let fast = within(Duration::from_secs(10), elapsed, &mut detail);
    Outcome::gate(failures.is_empty() && fast, detail)
}

// ---------------------------------------------------------------------------
// 6 and 8. desk-scale training and determinism
// ---------------------------------------------------------------------------

/// Eight 128×128 training images plus one held out for the plateau rule, and
/// three evaluation images standing in for the Set5 subset.
fn desk_config(data: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig::desk(),
        ..Default::default()
    };
    cfg.train.epochs = 5;
    cfg.train.lr_initial = 1e-5;
    cfg.train.batch_size = 16;
    cfg.train.setting = NormSetting::AllL2;
    cfg.train.precision = Precision::F32;
    cfg.data.train_dir = Some(data.join("train"));
    cfg.data.eval_dir = Some(data.join("eval"));
    cfg.data.holdout = 1;
    cfg
}

fn desk_run(data: &Path, out: &Path) -> Result<ExperimentReport, String> {
    let cfg = desk_config(data);
    commands::experiment(&cfg, &[cfg.train.setting], out, &Resume::Fresh, false).map_err(|e| e.to_string())
}

struct Desk {
    dir: tempfile::TempDir,
    first: Result<(ExperimentReport, Duration), String>,
}

fn desk_training(desk: &Desk) -> Outcome {
    let (report, elapsed) = match &desk.first {
        Ok(r) => r,
        Err(e) => return Outcome::fail(format!("desk run failed: {e}")),
    };
    let s = &report.settings[0];
    let records = &s.records;
    if records.len() != 5 {
        return Outcome::fail(format!("expected 5 epoch records, got {}", records.len()));
    }
    let (first, last) = (&records[0], &records[4]);
    let ratio = last.total_loss / first.total_loss;
    let mut detail = format!(
        "{} loss {:.4} -> {:.4} (ratio {:.3}, must be < 0.5); eval PSNR {:.3} dB at init -> {:.3} dB; {} steps in {:.1} s",
        s.setting.as_str(),
        first.total_loss,
        last.total_loss,
        ratio,
        s.initial_psnr,
        last.psnr_eval,
        s.global_step,
        elapsed.as_secs_f64()
    );
    let fast = within(Duration::from_secs(15 * 60), *elapsed, &mut detail);
    Outcome::gate(ratio < 0.5 && last.psnr_eval > s.initial_psnr && fast, detail)
}

fn determinism(desk: &Desk) -> Outcome {
    let Ok((first, first_time)) = &desk.first else {
        return Outcome::fail("first desk run failed");
    };
    let out = desk.dir.path().join("run2");
    let start = Instant::now();
    let second = match desk_run(&desk.dir.path().join("data"), &out) {
        Ok(r) => r,
        Err(e) => return Outcome::fail(format!("second desk run failed: {e}")),
    };
    let elapsed = start.elapsed();
    let read = |p: &Path| std::fs::read(p).unwrap_or_default();
    let (a, b) = (read(&first.landscape_csv), read(&second.landscape_csv));
    let same = !a.is_empty() && a == b;
    let mut detail = format!(
        "landscape CSV {} ({} bytes); second run {:.1} s",
        if same { "byte-identical" } else { "DIFFERS" },
        a.len(),
        elapsed.as_secs_f64()
    );
    let fast = within(Duration::from_secs(15 * 60).max(*first_time * 2), elapsed, &mut detail);
    Outcome::gate(same && fast, detail)
}

// ---------------------------------------------------------------------------
// 7. full experiment
// ---------------------------------------------------------------------------

fn full_experiment() -> Outcome {
    let (Some(t91), Some(set5)) = (std::env::var_os("NORMSCAPE_T91_DIR"), std::env::var_os("NORMSCAPE_SET5_DIR")) else {
        return Outcome::not_run("needs NORMSCAPE_T91_DIR and NORMSCAPE_SET5_DIR (datasets not available here)");
    };
    if std::env::var("NORMSCAPE_FULL_EXPERIMENT").as_deref() != Ok("1") {
        return Outcome::not_run("hours-long; set NORMSCAPE_FULL_EXPERIMENT=1 to run");
    }
    let out = std::env::var_os("NORMSCAPE_FULL_OUT").map(PathBuf::from).unwrap_or_else(|| scratch().keep());
    let mut cfg = RunConfig::default();
    cfg.data.train_dir = Some(PathBuf::from(t91));
    cfg.data.eval_dir = Some(PathBuf::from(set5));
    let report = match commands::experiment(&cfg, &NormSetting::ALL, &out, &Resume::Latest, false) {
        Ok(r) => r,
        Err(e) => return Outcome::fail(format!("experiment failed: {e}")),
    };
    let mut ok = true;
    let mut detail = String::new();
    for s in &report.settings {
        let beats = s.final_psnr > BICUBIC_SET5_X2;
        let gate = s.final_psnr >= FULL_RUN_HARD_GATE;
        ok &= beats && gate;
        let _ = write!(
            detail,
            "{} {:.3} dB ({:+.3} vs {FULL_RUN_TARGET}); ",
            s.setting.as_str(),
            s.final_psnr,
            s.final_psnr - FULL_RUN_TARGET
        );
    }
    let find = |set: NormSetting| report.settings.iter().find(|s| s.setting == set).map(|s| s.sparsity.clone());
    match (find(NormSetting::AllL1), find(NormSetting::AllL2)) {
        (Some(l1), Some(l2)) => {
            let sparser = l1.overall > l2.overall && l1.enet_rnet > l2.enet_rnet;
            ok &= sparser;
            let _ = write!(
                detail,
                "near-zero fraction all-l1 {:.4}/{:.4} vs all-l2 {:.4}/{:.4} (overall/Enet+Rnet)",
                l1.overall, l1.enet_rnet, l2.overall, l2.enet_rnet
            );
        }
        _ => ok = false,
    }
    let _ = write!(detail, "; outputs in {}", out.display());
    Outcome::gate(ok, detail)
}

// ---------------------------------------------------------------------------
// 9. stage ordering (reported only)
// ---------------------------------------------------------------------------

fn stage_ordering() -> Outcome {
    let dir = scratch();
    let data = dir.path().join("data");
    if let Err(e) = commands::synth_data(&data, 5, 2, 48, 48, 9) {
        return Outcome::fail(format!("synthetic data: {e}"));
    }
    let mut cfg = RunConfig {
        model: ModelConfig::tiny(),
        ..Default::default()
    };
    cfg.train.epochs = 45;
    cfg.train.lr_initial = 1e-4;
    cfg.train.batch_size = 8;
    cfg.train.precision = Precision::F32;
    cfg.data.train_dir = Some(data.join("train"));
    cfg.data.eval_dir = Some(data.join("eval"));
    cfg.data.holdout = 1;
    cfg.data.patch_size = 13;
    cfg.data.patch_stride = 9;
    let report = match commands::experiment(&cfg, &NormSetting::ALL, &dir.path().join("run"), &Resume::Fresh, false) {
        Ok(r) => r,
        Err(e) => return Outcome::fail(format!("experiment failed: {e}")),
    };
    let mut detail = String::from("tiny synthetic 45-epoch run (tendencies only):");
    for c in &report.stage_report.comparisons {
        let _ = write!(
            detail,
            " stage {} {} {:.4} {} {} {:.4};",
            c.stage,
            c.first.as_str(),
            c.first_mean,
            if c.first_higher { ">" } else { "<=" },
            c.second.as_str(),
            c.second_mean
        );
    }
    Outcome {
        status: Status::Reported,
        detail,
    }
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--nocapture`; they do not apply here.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }

    let desk_dir = scratch();
    let desk = {
        let data = desk_dir.path().join("data");
        let first = commands::synth_data(&data, 9, 3, 128, 128, 2018)
            .map_err(|e| e.to_string())
            .and_then(|_| {
                let start = Instant::now();
                desk_run(&data, &desk_dir.path().join("run1")).map(|r| (r, start.elapsed()))
            });
        Desk { dir: desk_dir, first }
    };

    type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("bicubic baseline (Set5 x2)", Box::new(bicubic_baseline)),
        ("overparametrization", Box::new(overparametrization)),
        ("gradient correctness", Box::new(gradient_correctness)),
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("loss algebra", Box::new(loss_algebra)),
        ("desk-scale training", Box::new(|| desk_training(&desk))),
        ("full experiment", Box::new(full_experiment)),
        ("determinism", Box::new(|| determinism(&desk))),
        ("stage ordering", Box::new(stage_ordering)),
    ];

    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let tag = match outcome.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::NotRun => "NOT RUN",
            Status::Reported => "REPORTED",
        };
        println!(
            "[{tag}] {} {name}: {} ({:.2} s)",
            i + 1,
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
