//! Acceptance suite: one test per criterion, each writing a single
//! `[PASS]`/`[FAIL]` line to stdout (uncaptured) before asserting.
//!
//! The trained-model criteria share one set of full-length training runs
//! (affine seeds 0, 1, 2 and spline seed 0), built once per test binary.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use condflow::diagnostics::convex_oracle;
use condflow::flow::FlowConfig;
use condflow::io::Checkpoint;
use condflow::tensor::{finite_diff_gradient, max_rel_err};
use condflow::training::convex_objective;
use condflow::transforms::{tail_derivative_bounds, Transform};
use condflow::{FlowModel64, Graph, ScaleVariant, SplineConfig, Tensor64, TransformKind};
use condflow_cli::commands::{evaluate_checkpoints, train_checkpoint};
use condflow_cli::config::{RunConfig, TransformChoice, VariantChoice};
use condflow_cli::evaluate::Summary;
use rand::Rng;

fn report(criterion: u8, name: &str, passed: bool, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{tag}] criterion {criterion} ({name}): {detail}");
    let _ = out.flush();
    assert!(passed, "criterion {criterion} ({name}) failed: {detail}");
}

const AFFINE_SEEDS: [u64; 3] = [0, 1, 2];

struct Runs {
    affine: Vec<(PathBuf, FlowModel64)>,
    spline: (PathBuf, FlowModel64),
    summary: Summary,
}

fn workdir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn train_one(transform: TransformChoice, seed: u64) -> (PathBuf, FlowModel64) {
    let mut cfg = RunConfig::default();
    cfg.train.transform = transform;
    cfg.train.variant = VariantChoice::UnitBounded;
    cfg.train.seed = seed;
    let start = std::time::Instant::now();
    let trained = train_checkpoint(&cfg).unwrap();
    let path = workdir().join(format!("{transform:?}_{seed}.json").to_lowercase());
    condflow::io::save_checkpoint(&path, &trained.checkpoint).unwrap();
    let meta = trained.checkpoint.training.as_ref().unwrap();
    eprintln!(
        "trained {transform:?} seed {seed}: final nll {:?}, skipped {}, {:.0}s",
        meta.final_nll,
        meta.skipped,
        start.elapsed().as_secs_f64()
    );
    (path, trained.model)
}

fn runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let affine: Vec<_> = AFFINE_SEEDS.iter().map(|&s| train_one(TransformChoice::Affine, s)).collect();
        let spline = train_one(TransformChoice::Spline, 0);
        let paths: Vec<PathBuf> = affine.iter().map(|(p, _)| p.clone()).collect();
        let summary = evaluate_checkpoints(&RunConfig::default(), &paths, Some(&spline.0)).unwrap();
        std::fs::write(workdir().join("summary.json"), serde_json::to_string_pretty(&summary).unwrap()).unwrap();
        Runs {
            affine,
            spline,
            summary,
        }
    })
}

#[test]
fn criterion_1_exploding_variance() {
    let s = &runs().summary;
    let per_seed: Vec<String> = s
        .affine
        .iter()
        .map(|m| format!("seed {}: ood {:.3e}, in {:.3}", m.seed, m.max_ratio_ood, m.max_ratio_in))
        .collect();
    let passed = s.affine.iter().any(|m| m.max_ratio_ood >= 100.0 && m.max_ratio_in <= 10.0);
    report(
        1,
        "exploding variance",
        passed,
        &format!("max variance ratio, need ood >= 100 with in <= 10 for one seed [{}]", per_seed.join("; ")),
    );
}

#[test]
fn criterion_2_affine_escape() {
    let m = &runs().summary.affine[0];
    let passed = m.escape_ood >= 0.01 && m.escape_in <= 0.005;
    report(
        2,
        "affine escape",
        passed,
        &format!(
            "seed {}: ood escape {:.4} (>= 0.01), in escape {:.4} (<= 0.005)",
            m.seed, m.escape_ood, m.escape_in
        ),
    );
}

#[test]
fn criterion_3_spline_remedy() {
    let s = &runs().summary;
    let sp = s.spline.as_ref().unwrap();
    let af = &s.affine[0];
    let gap = (sp.final_nll.unwrap_or(f64::INFINITY) - af.final_nll.unwrap_or(f64::NAN)).abs();
    let ratio = sp.max_ratio_ood.max(sp.max_ratio_in);
    let passed = sp.escape_ood <= 0.001 && ratio <= 10.0 && gap <= 0.5;
    report(
        3,
        "spline remedy",
        passed,
        &format!(
            "ood escape {:.4} (<= 0.001), max ratio {ratio:.3} (<= 10), nll {:?} vs affine {:?}, gap {gap:.3} (<= 0.5)",
            sp.escape_ood, sp.final_nll, af.final_nll
        ),
    );
}

fn read_trajectory(path: &Path) -> Vec<[f64; 4]> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iteration,s,t,objective"));
    lines
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            [v[0], v[1], v[2], v[3]]
        })
        .collect()
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_condflow")).args(args).output().unwrap()
}

#[test]
fn criterion_4_convex_degeneracy() {
    let dir = tempfile::tempdir().unwrap();
    let unb = dir.path().join("unbounded.csv");
    let bnd = dir.path().join("bounded.csv");
    assert!(cli(&["convex-demo", "--unbounded", "--out", unb.to_str().unwrap()]).status.success());
    assert!(cli(&["convex-demo", "--bounded", "--out", bnd.to_str().unwrap()]).status.success());
    let unb = read_trajectory(&unb);
    let bnd = read_trajectory(&bnd);
    let crossed = unb.iter().find(|r| r[1] > 10.0).map(|r| r[0] as usize);
    let x = RunConfig::default().convex_demo.x;
    let sigma_z = RunConfig::default().convex_demo.sigma_z;
    let opt = convex_oracle(&x, sigma_z, 1.0).unwrap();
    let last = bnd.last().unwrap();
    let (ds, dt) = ((last[1] - opt.s).abs(), (last[2] - opt.t).abs());

    let mut rng = condflow::rng::seeded(4);
    let beaten = (0..10_000).all(|_| {
        let s: f64 = rng.random_range(1e-6..=1.0);
        let t: f64 = rng.random_range(-5.0..5.0);
        opt.objective <= convex_objective(&x, sigma_z, s, t)
    });
    let passed = crossed.is_some_and(|i| i <= 8000) && ds <= 1e-2 && dt <= 1e-2 && beaten;
    report(
        4,
        "convex degeneracy",
        passed,
        &format!(
            "unbounded s > 10 at iteration {crossed:?} (final s {:.2}); bounded |s-s*| {ds:.2e}, |t-t*| {dt:.2e}; oracle beats 10^4 probes: {beaten}",
            unb.last().unwrap()[1]
        ),
    );
}

#[test]
fn criterion_5_tail_derivatives() {
    let mut rng = condflow::rng::seeded(5);
    let spline = TransformKind::Spline(SplineConfig::default());
    let unit = TransformKind::Affine {
        variant: ScaleVariant::UnitBounded,
    };
    let (mut worst, mut affine_ok) = (0.0_f64, true);
    for _ in 0..100 {
        let raw: Vec<f64> = (0..4).map(|_| rng.random_range(-4.0..4.0)).collect();
        for kind in [spline, TransformKind::Additive] {
            let tr = kind.parameterize(&raw[..kind.arity()]);
            let (lo, hi) = tail_derivative_bounds(&tr, 10.0);
            worst = worst.max((lo - 1.0).abs()).max((hi - 1.0).abs());
        }
        let tr = unit.parameterize(&raw[..2]);
        let Transform::Affine(p) = tr else { unreachable!() };
        let (lo, hi) = tail_derivative_bounds(&tr, 10.0);
        affine_ok &= (lo - p.s).abs() <= 1e-12 && (hi - p.s).abs() <= 1e-12 && p.s <= 1.0;
    }
    let passed = worst <= 1e-12 && affine_ok;
    report(
        5,
        "tail derivatives",
        passed,
        &format!("spline/additive max |bound - 1| {worst:.1e} (<= 1e-12); unit-bounded affine gives (s, s), s <= 1: {affine_ok}"),
    );
}

fn random_model(kind: TransformKind, widths: Vec<usize>, seed: u64) -> FlowModel64 {
    let cfg = FlowConfig {
        hidden_widths: widths,
        ..FlowConfig::toy(kind)
    };
    let mut m = FlowModel64::new(cfg, &mut condflow::rng::seeded(seed)).unwrap();
    let mut rng = condflow::rng::seeded(seed + 1000);
    for (name, p) in m.params_mut() {
        let mixer = name.ends_with("weight") && p.shape() == [2, 2];
        for v in p.data_mut() {
            *v += if mixer { 0.05 } else { 0.1 } * rng.random_range(-1.0..1.0);
        }
    }
    m
}

fn all_kinds() -> Vec<TransformKind> {
    vec![
        TransformKind::Affine {
            variant: ScaleVariant::UnitBounded,
        },
        TransformKind::Affine {
            variant: ScaleVariant::ShiftedBounded,
        },
        TransformKind::Affine {
            variant: ScaleVariant::Unbounded,
        },
        TransformKind::Additive,
        TransformKind::Spline(SplineConfig::default()),
    ]
}

fn uniform(rng: &mut impl Rng, rows: usize, half: f64) -> Tensor64 {
    Tensor64::new(rows, 2, (0..2 * rows).map(|_| rng.random_range(-half..half)).collect()).unwrap()
}

#[test]
fn criterion_6_numerical_core() {
    let mut rng = condflow::rng::seeded(6);
    let (mut round_trip, mut logdet, mut grad) = (0.0_f64, 0.0_f64, 0.0_f64);
    for (k, kind) in all_kinds().into_iter().enumerate() {
        let m = random_model(kind, vec![64; 4], k as u64);
        let x = uniform(&mut rng, 2000, 1.0);
        let y = uniform(&mut rng, 2000, 0.5);
        let z = m.forward_batch(&x, &y, false).unwrap().output;
        round_trip = round_trip.max(m.inverse_batch(&z, &y, false).unwrap().output.max_abs_diff(&x));

        for i in 0..20 {
            let (xi, yi) = ([x.get(i, 0), x.get(i, 1)], [y.get(i, 0), y.get(i, 1)]);
            let (_, ld) = m.flow_forward(&xi, &yi).unwrap();
            let h = 1e-6;
            let mut jac = [[0.0; 2]; 2];
            for c in 0..2 {
                let (mut up, mut dn) = (xi, xi);
                up[c] += h;
                dn[c] -= h;
                let (zu, _) = m.flow_forward(&up, &yi).unwrap();
                let (zd, _) = m.flow_forward(&dn, &yi).unwrap();
                for r in 0..2 {
                    jac[r][c] = (zu[r] - zd[r]) / (2.0 * h);
                }
            }
            let det = (jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0]).abs();
            logdet = logdet.max((ld.exp() - det).abs() / det);
        }

        let small = random_model(kind, vec![8, 8], 50 + k as u64);
        let xb = uniform(&mut rng, 8, 1.0);
        let yb = uniform(&mut rng, 8, 0.5);
        let mut g = Graph::new();
        let lp = small.log_prob_on_tape(&mut g, &xb, &yb).unwrap();
        let loss = g.mean(lp, None).unwrap();
        let grads = g.backward(loss).unwrap();
        for idx in 0..small.params().len() {
            let (name, p) = {
                let ps = small.params();
                (ps[idx].0.clone(), ps[idx].1.clone())
            };
            let fd = finite_diff_gradient(
                |probe| {
                    let mut m2 = small.clone();
                    *m2.params_mut()[idx].1 = probe.clone();
                    let v = m2.log_prob_batch(&xb, &yb).unwrap();
                    v.iter().sum::<f64>() / v.len() as f64
                },
                &p,
                1e-5,
            );
            grad = grad.max(max_rel_err(grads.get(&name).unwrap(), &fd, 1e-3));
        }
    }
    let passed = round_trip <= 1e-8 && logdet <= 1e-5 && grad <= 1e-4;
    report(
        6,
        "numerical core",
        passed,
        &format!(
            "10^4 round trips max err {round_trip:.1e} (<= 1e-8), log-det rel err {logdet:.1e} (<= 1e-5), gradient rel err {grad:.1e} (<= 1e-4)"
        ),
    );
}

#[test]
fn criterion_7_ood_separation() {
    let s = &runs().summary.ood_scores;
    let factor = s.mean_ood / s.mean_in;
    let (top, bottom) = (s.top_decile_escape.unwrap(), s.bottom_decile_escape.unwrap());
    let passed = factor >= 2.0 && top > bottom;
    report(
        7,
        "ood score separation",
        passed,
        &format!(
            "mean score ood {:.3} vs in {:.3} (factor {factor:.2} >= 2); top-decile escape {top:.4} > bottom {bottom:.4}",
            s.mean_ood, s.mean_in
        ),
    );
}

fn run_pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let small = ["--n-train", "4000"];
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-data", "--seed", "7", "--n", "1000", "--out", &p("data.csv")].into_iter().map(String::from).collect(),
        [&["train", "--iterations", "150", "--batch-size", "200", "--checkpoint", &p("affine.json"), "--loss-curve", &p("affine_loss.csv")][..], &small].concat().into_iter().map(String::from).collect(),
        [&["train", "--transform", "spline", "--iterations", "150", "--batch-size", "200", "--checkpoint", &p("spline.json"), "--loss-curve", &p("spline_loss.csv")][..], &small].concat().into_iter().map(String::from).collect(),
        vec!["sample", "--checkpoint", &p("affine.json"), "--n", "2000", "--ood", "--out", &p("samples.csv")].into_iter().map(String::from).collect(),
        vec!["variance-trace", "--checkpoint", &p("affine.json"), "--n", "2000", "--out-in", &p("trace_in.csv"), "--out-ood", &p("trace_ood.csv")].into_iter().map(String::from).collect(),
        [&["ood-rank", "--checkpoint", &p("affine.json"), "--n-in", "200", "--n-ood", "200", "--samples-per-input", "10", "--out", &p("rank.csv")][..], &small].concat().into_iter().map(String::from).collect(),
        vec!["convex-demo", "--bounded", "--iterations", "500", "--out", &p("convex.csv")].into_iter().map(String::from).collect(),
        [&["evaluate", "--affine", &p("affine.json"), "--spline", &p("spline.json"), "--n", "2000", "--out", &p("summary.json")][..], &small].concat().into_iter().map(String::from).collect(),
    ];
    for args in &steps {
        let out = cli(&args.iter().map(String::as_str).collect::<Vec<_>>());
        // evaluate on undertrained models reports failed checks with code 3
        let code = out.status.code().unwrap();
        assert!(code == 0 || (args[0] == "evaluate" && code == 3), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_8_determinism() {
    // same directory both times: the summary records checkpoint paths
    let dir = tempfile::tempdir().unwrap();
    let first = run_pipeline(dir.path());
    for (name, _) in &first {
        std::fs::remove_file(dir.path().join(name)).unwrap();
    }
    let second = run_pipeline(dir.path());
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    let identical = first == second && first.len() == 13;

    // trained checkpoints: reload matches the in-memory model bit for bit and
    // re-saving reproduces the file
    let mut rng = condflow::rng::seeded(8);
    let x = uniform(&mut rng, 256, 0.6);
    let y = uniform(&mut rng, 256, 0.4);
    let r = runs();
    let mut bitwise = true;
    for (path, model) in r.affine.iter().chain(std::iter::once(&r.spline)) {
        let text = std::fs::read_to_string(path).unwrap();
        let ck = Checkpoint::from_json(&text).unwrap();
        let back: FlowModel64 = ck.to_model().unwrap();
        let bits = |m: &FlowModel64| m.log_prob_batch(&x, &y).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let resaved = Checkpoint::from_model(&back, ck.rng.seed, ck.training.clone()).unwrap().to_json().unwrap();
        bitwise &= back == *model && bits(&back) == bits(model) && resaved == text;
    }
    report(
        8,
        "determinism",
        identical && bitwise,
        &format!(
            "two pipeline runs byte-identical over {} artifacts [{}]: {identical}; trained checkpoints round-trip bitwise: {bitwise}",
            first.len(),
            names.join(", ")
        ),
    );
}
