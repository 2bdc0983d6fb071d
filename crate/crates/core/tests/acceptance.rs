//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mcbsvm::active::{run_active_learning, ALConfig, ActiveLearningTrace, Policy};
use mcbsvm::gradcheck::random_instance;
use mcbsvm::kernel::{InducingInputs, KernelHyperparams};
use mcbsvm::model::{alpha_closed_form, competitor_classes, grad_alpha, NaturalParams, Objective};
use mcbsvm::optim::{target_natural_params, train, Method, TrainConfig};
use mcbsvm::predict::{decide, predict_dist};
use mcbsvm::rank::{average_ranks, mean_ranks, AccuracyTable};
use mcbsvm::special::{bessel_k_half, gig_inv_mean, gig_mean, GigParams};
use mcbsvm::{Dataset, ModelState};
use nalgebra::{DMatrix, DVector};

use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

const GRAD_INSTANCES: u64 = 10;

/// Criterion 1: analytic gradients against central differences.
fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    for seed in 0..GRAD_INSTANCES {
        let inst = random_instance(seed).unwrap();
        let (n, c, p) = (inst.labels.len(), inst.state.n_classes(), inst.state.vp.n_inducing());
        assert!(n <= 30 && c <= 4 && p <= 6);
        let labels = &inst.labels;
        let comp = competitor_classes(&inst.state, labels).unwrap();
        let obj = Objective::with_competitors(&inst.state, labels, comp.clone()).unwrap();
        let g_mu = obj.grad_mu().unwrap();
        let g_l = obj.grad_chol_sigma().unwrap();
        let g_a = obj.grad_alpha().unwrap();
        drop(obj);
        let eval = |s: &ModelState| Objective::with_competitors(s, labels, comp.clone()).unwrap().value().unwrap();

        let mut s = inst.state.clone();
        let theta = DVector::from_iterator(c * p, s.vp.mu.transpose().iter().copied());
        let fd = fd_gradient(&theta, |t| {
            s.vp.mu = DMatrix::from_row_slice(c, p, t.as_slice());
            eval(&s)
        });
        let an = DVector::from_iterator(c * p, g_mu.transpose().iter().copied());
        let e_mu = max_rel_err(&an, &fd);

        let mut e_l = 0.0f64;
        for j in 0..c {
            let mut s = inst.state.clone();
            let idx: Vec<(usize, usize)> = (0..p).flat_map(|r| (0..=r).map(move |k| (r, k))).collect();
            let theta = DVector::from_iterator(idx.len(), idx.iter().map(|&rc| s.vp.chol_sigma[j][rc]));
            let fd = fd_gradient(&theta, |t| {
                for (i, &rc) in idx.iter().enumerate() {
                    s.vp.chol_sigma[j][rc] = t[i];
                }
                eval(&s)
            });
            let an = DVector::from_iterator(idx.len(), idx.iter().map(|&rc| g_l[j][rc]));
            e_l = e_l.max(max_rel_err(&an, &fd));
        }

        let mut s = inst.state.clone();
        let theta = s.vp.alpha.clone();
        let fd = fd_gradient(&theta, |t| {
            s.vp.alpha = t.clone();
            eval(&s)
        });
        let e_a = max_rel_err(&g_a, &fd);
        for (name, e) in [("mu", e_mu), ("chol", e_l), ("alpha", e_a)] {
            if e > worst.0 {
                worst = (e, format!("seed {seed} block {name}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 <= 1e-5 && secs < 30.0,
        format!("max rel err {:.2e} ({}), {secs:.2} s", worst.0, worst.1),
    )
}

/// Criterion 2: special functions against quadrature.
fn special_functions() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for x in log_spaced(1e-3, 1e2, 25) {
        worst = worst.max(rel(bessel_k_half(x).unwrap(), bessel_k_quad(0.5, x)));
    }
    for a in log_spaced(1e-3, 1e3, 25) {
        let g = GigParams::new(a).unwrap();
        worst = worst.max(rel(gig_mean(g), gig_moment_quad(a, 1.0)));
        worst = worst.max(rel(gig_inv_mean(g), gig_moment_quad(a, -1.0)));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-6 && secs < 5.0, format!("max rel err {worst:.2e}, {secs:.2} s"))
}

/// Criterion 3: ∂O/∂α vanishes after the closed-form update.
fn alpha_stationarity() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..GRAD_INSTANCES {
        let mut inst = random_instance(seed).unwrap();
        inst.state.vp.alpha = alpha_closed_form(&inst.state, &inst.labels).unwrap();
        let g = grad_alpha(&inst.state, &inst.labels).unwrap();
        worst = worst.max(g.amax());
    }
    outcome(worst <= 1e-10, format!("max |grad_alpha| {worst:.2e}"))
}

fn max_abs_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

/// Criterion 4: a ρ = 1 update of any class block is a fixed point of the
/// stationary natural parameters (α and competitors frozen).
fn natural_fixed_point() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..GRAD_INSTANCES {
        let inst = random_instance(seed).unwrap();
        let labels = &inst.labels;
        let n = labels.len();
        let rows: Vec<usize> = (0..n).collect();
        let comp = competitor_classes(&inst.state, labels).unwrap();
        for j in 0..inst.state.n_classes() {
            let mut state = inst.state.clone();
            let (t1, t2) = target_natural_params(&state, labels, &comp, &rows, 1.0, j).unwrap();
            let mut nat = NaturalParams::from_variational(&state.vp).unwrap();
            nat.eta1.set_row(j, &t1.transpose());
            nat.eta2[j] = t2;
            nat.write_into(&mut state.vp).unwrap();
            let (r1, r2) = target_natural_params(&state, labels, &comp, &rows, 1.0, j).unwrap();
            let cur = NaturalParams::from_variational(&state.vp).unwrap();
            let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
            let e1 = max_abs_rel(&col(&r1), &col(&cur.eta1.row(j).transpose()));
            let e2 = max_abs_rel(&r2, &cur.eta2[j]);
            worst = worst.max(e1).max(e2);
        }
    }
    outcome(worst <= 1e-8, format!("max rel deviation {worst:.2e}"))
}

/// Criterion 5: triangular-solve objective and predictions against dense
/// inverses.
fn dense_oracle() -> Outcome {
    let mut e_elbo = 0.0f64;
    let mut e_pred = 0.0f64;
    for seed in 0..GRAD_INSTANCES {
        let inst = random_instance(seed).unwrap();
        let v = mcbsvm::model::elbo(&inst.state, &inst.labels).unwrap();
        e_elbo = e_elbo.max(rel(v, dense_elbo(&inst.state, &inst.x, &inst.labels)));
        let xt = inst.x.map(|v| 0.8 * v + 0.3);
        let d = predict_dist(&inst.state, &xt).unwrap();
        let (m, s) = dense_predict(&inst.state, &xt);
        e_pred = e_pred.max((&d.means - &m).amax() / m.amax()).max((&d.variances - &s).amax() / s.amax());
    }
    outcome(
        e_elbo <= 1e-9 && e_pred <= 1e-9,
        format!("objective rel err {e_elbo:.2e}, predictive rel err {e_pred:.2e}"),
    )
}

/// Criterion 6: Z = X leaves no residual variance.
fn sparse_degeneracy() -> Outcome {
    let mut worst = 0.0f64;
    let grid2 = DMatrix::from_fn(25, 2, |i, d| if d == 0 { (i % 5) as f64 } else { (i / 5) as f64 });
    let grid3 = DMatrix::from_fn(27, 3, |i, d| ((i / 3usize.pow(d as u32)) % 3) as f64 * 1.3);
    for (x, ls, sv) in [(grid2, 1.0, 1.5), (grid3, 1.1, 0.7)] {
        let h = KernelHyperparams::new(vec![ls], sv, 1e-10).unwrap();
        let state = ModelState::new(&x, h, InducingInputs::new(x.clone()).unwrap(), 2).unwrap();
        let kt = state.cache().unwrap().ktilde_diag().amax();
        worst = worst.max(kt / sv);
    }
    outcome(worst <= 1e-8, format!("max diag K̃ / σ² = {worst:.2e} (jitter 1e-10)"))
}

struct BlobRun {
    acc_adam: f64,
    secs_adam: f64,
    obj_adam: f64,
    obj_ca: f64,
    agreement: f64,
}

fn blob_runs() -> Vec<BlobRun> {
    (1..=5u64)
        .map(|seed| {
            let (tr, te) = blob_split(600, 3, 2, 6.0, seed);
            assert_eq!((tr.n_rows(), te.n_rows()), (300, 300));
            let init = ModelState::initialize(&tr.features, 3, 16, false, seed).unwrap();
            let adam = TrainConfig {
                epochs: 500,
                learning_rate: 5e-4,
                seed,
                ..TrainConfig::default()
            };
            let t = Instant::now();
            let (sa, ta) = train(init.clone(), &tr.features, &tr.labels, &adam).unwrap();
            let secs_adam = t.elapsed().as_secs_f64();
            let ca = TrainConfig {
                method: Method::CoordAscent,
                ..adam.clone()
            };
            let (sc, tc) = train(init, &tr.features, &tr.labels, &ca).unwrap();
            let pa = decide(&predict_dist(&sa, &te.features).unwrap());
            let pc = decide(&predict_dist(&sc, &te.features).unwrap());
            BlobRun {
                acc_adam: accuracy(&pa, &te.labels),
                secs_adam,
                obj_adam: ta.last_elbo().unwrap(),
                obj_ca: tc.last_elbo().unwrap(),
                agreement: accuracy(&pa, &pc),
            }
        })
        .collect()
}

/// Criterion 7: desk-scale accuracy, run time, and coordinate ascent reaching
/// the Adam objective.
fn desk_classification(runs: &[BlobRun]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        let reach = r.obj_ca >= r.obj_adam - 0.01 * r.obj_adam.abs();
        pass &= r.acc_adam >= 0.95 && r.secs_adam < 60.0 && reach;
        parts.push(format!(
            "seed {}: acc {:.3} in {:.1} s, O adam {:.4e} / coord {:.4e}",
            i + 1,
            r.acc_adam,
            r.secs_adam,
            r.obj_adam,
            r.obj_ca
        ));
    }
    outcome(pass, parts.join("; "))
}

/// Criterion 8: the two trainers agree on test decisions.
fn optimizer_agreement(runs: &[BlobRun]) -> Outcome {
    let min = runs.iter().map(|r| r.agreement).fold(1.0, f64::min);
    outcome(min >= 0.98, format!("min agreement {min:.4}"))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Criterion 9: variation-ratio querying against entropy querying.
fn active_learning_direction() -> Outcome {
    let start = Instant::now();
    let pool = mcbsvm::make_blobs(1000, 3, 2, 3.0, 101).unwrap().fit_standardize().unwrap();
    let raw_test = mcbsvm::make_blobs(600, 3, 2, 3.0, 202).unwrap();
    let test = Dataset {
        features: pool.scaling.apply(&raw_test.features).unwrap(),
        ..raw_test
    };
    let seeds: Vec<u64> = (1..=20).collect();
    let run = |policy| -> Vec<ActiveLearningTrace> {
        let cfg = ALConfig {
            policy,
            seeds: seeds.clone(),
            ..ALConfig::default()
        };
        assert_eq!((cfg.budget, cfg.inducing_points), (100, 4));
        run_active_learning(&pool, &test, &cfg).unwrap()
    };
    let vr = run(Policy::VariationRatio);
    let ent = run(Policy::MeanEntropy);
    let vr_final = mean(vr.iter().map(|t| t.final_error()));
    let vr_init = mean(vr.iter().map(|t| t.initial_error()));
    let ent_final = mean(ent.iter().map(|t| t.final_error()));
    let secs = start.elapsed().as_secs_f64();
    let steps_ok = vr.iter().chain(&ent).all(|t| t.steps.len() == 101);
    outcome(
        vr_final <= ent_final + 0.01 && vr_final <= 0.5 * vr_init && secs < 1800.0 && steps_ok,
        format!(
            "VR final {vr_final:.4} vs entropy final {ent_final:.4} (needs <= +0.01); VR initial {vr_init:.4}, \
             final/initial {:.3} (needs <= 0.5); {secs:.1} s",
            vr_final / vr_init
        ),
    )
}

/// Criterion 10: average ranks with ties.
fn rank_methodology() -> Outcome {
    let tie = average_ranks(&[1.0, 1.0, 0.8]);
    let mut ok = tie == vec![1.5, 1.5, 3.0];
    let acc = DMatrix::from_row_slice(
        4,
        5,
        &[
            0.9, 0.5, 0.7, 0.7, 1.0, //
            0.9, 0.6, 0.7, 0.2, 1.0, //
            0.8, 0.6, 0.7, 0.3, 1.0, //
            0.1, 0.4, 0.2, 0.7, 1.0,
        ],
    );
    let t = AccuracyTable::new(
        (0..4).map(|m| format!("m{m}")).collect(),
        (0..5).map(|d| format!("d{d}")).collect(),
        acc,
    )
    .unwrap();
    let ranks = t.dataset_ranks();
    for d in 0..5 {
        ok &= (ranks.column(d).sum() - 10.0).abs() < 1e-12;
    }
    let mr = mean_ranks(&t);
    ok &= (mr.values().sum::<f64>() - 10.0).abs() < 1e-12;
    outcome(ok, format!("tie example {tie:?}; per-dataset rank sums all K(K+1)/2 = 10"))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mcbsvm")
}

fn run_cli(dir: &Path, args: &[&str]) {
    let out = Command::new(bin()).current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn comparable(path: &Path) -> Vec<u8> {
    let bytes = std::fs::read(path).unwrap();
    if path.to_string_lossy().ends_with(".trace.csv") {
        // wall-clock column dropped
        let text = String::from_utf8(bytes).unwrap();
        return text
            .lines()
            .map(|l| l.rsplit_once(',').map(|(a, _)| a).unwrap_or(l).to_string() + "\n")
            .collect::<String>()
            .into_bytes();
    }
    bytes
}

fn output_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().contains("manifest") {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Criterion 11: every subcommand is byte-reproducible.
fn cli_determinism() -> Outcome {
    let script: Vec<Vec<&str>> = vec![
        vec!["synth", "--n", "120", "--seed", "5", "--out", "train.csv"],
        vec!["synth", "--n", "60", "--seed", "6", "--out", "test.csv"],
        vec!["train", "--data", "train.csv", "--out", "adam.json", "--inducing", "8", "--epochs", "30"],
        vec![
            "train", "--data", "train.csv", "--out", "ca.json", "--inducing", "8", "--epochs", "10", "--method",
            "coord_ascent",
        ],
        vec!["predict", "--model", "adam.json", "--data", "test.csv", "--out", "pred.csv", "--seed", "3"],
        vec![
            "active-learn", "--pool", "train.csv", "--test", "test.csv", "--budget", "5", "--epochs", "20", "--seed",
            "1", "--seed", "2", "--out-dir", "al",
        ],
        vec!["gradcheck", "--seed", "7", "--out", "gc.txt"],
        vec!["rank", "--table", "acc.csv", "--out", "ranks.csv"],
    ];
    let table = "dataset,method,accuracy\nd1,a,1.0\nd1,b,1.0\nd1,c,0.8\n";
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &dirs {
        std::fs::write(d.path().join("acc.csv"), table).unwrap();
        for args in &script {
            run_cli(d.path(), args);
        }
    }
    let files = output_files(dirs[0].path());
    assert_eq!(files, output_files(dirs[1].path()));
    let mut differing = Vec::new();
    for f in &files {
        if comparable(&dirs[0].path().join(f)) != comparable(&dirs[1].path().join(f)) {
            differing.push(f.display().to_string());
        }
    }
    outcome(
        differing.is_empty() && files.len() >= 10,
        format!("{} output files compared; differing: {differing:?}", files.len()),
    )
}

fn guarded<T>(f: impl FnOnce() -> T) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
        e.downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default()
    })
}

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, name: &str, secs: f64, res: Result<Outcome, String>) {
        let o = res.unwrap_or_else(|msg| outcome(false, format!("panicked: {msg}")));
        if !o.pass {
            self.failed += 1;
        }
        println!("criterion {name}: {} [{secs:.1} s] {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }

    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let res = guarded(f);
        self.line(name, t.elapsed().as_secs_f64(), res);
    }
}

fn main() {
    let mut r = Report { failed: 0 };
    r.run("1 gradient suite", gradient_suite);
    r.run("2 special-function oracles", special_functions);
    r.run("3 closed-form alpha stationarity", alpha_stationarity);
    r.run("4 natural-parameter fixed point", natural_fixed_point);
    r.run("5 dense-oracle equivalence", dense_oracle);
    r.run("6 sparse degeneracy", sparse_degeneracy);
    let t = Instant::now();
    let runs = guarded(blob_runs);
    let secs = t.elapsed().as_secs_f64();
    r.line("7 desk-scale classification", secs, runs.as_ref().map(|v| desk_classification(v)).map_err(Clone::clone));
    r.line("8 optimizer agreement", secs, runs.as_ref().map(|v| optimizer_agreement(v)).map_err(Clone::clone));
    r.run("9 active-learning direction", active_learning_direction);
    r.run("10 rank methodology", rank_methodology);
    r.run("11 CLI determinism", cli_determinism);
    if r.failed > 0 {
        println!("acceptance: {} criteria FAILED", r.failed);
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
