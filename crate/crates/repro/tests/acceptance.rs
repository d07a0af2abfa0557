//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits nonzero if any fails.
//!
//! The full-pipeline criteria (6-8) train the reference configuration
//! twice and take roughly a quarter of an hour on one core.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::oracles::{ap_max_error, iou_max_error};
use common::{gradient_suite, FD_TOL};
use dmuq::config::{RunConfig, Split};
use dmuq::detector::{
    decode_cells, detect, read_checkpoint, CollabMode, Detection, GridGeometry, HeadKind, RawOutputs,
};
use dmuq::distributions::{combine_covariance, estimate_sigma_e, BoxUncertainty, CornerGaussian, Variant};
use dmuq::doublem::{double_m_infer, read_uqstats, sample_bootstrap, BlockCollection, ResidualSet, UqMethod};
use dmuq::eval::{nll_score, MetricReport, ReportRow};
use dmuq::math::{CovMatrix, Tensor};
use dmuq::pipeline;
use dmuq::scenegen::{box_corners, GroundTruthBox, SceneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Verdict of one criterion.
struct Verdict {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: &'static str, pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { id, pass, detail: detail.into() }
}

fn print(v: &Verdict) {
    println!("{} {:<3} {}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.detail);
}

/// Runs a criterion; a panic counts as a failure of every id it covers.
fn guarded(ids: &[&'static str], f: impl FnOnce() -> Vec<Verdict>) -> Vec<Verdict> {
    let out = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        ids.iter().map(|id| verdict(id, false, format!("panicked: {msg}"))).collect()
    });
    out.iter().for_each(print);
    out
}

fn gradient_oracle() -> Vec<Verdict> {
    let t = Instant::now();
    let cases = gradient_suite(20);
    let secs = t.elapsed().as_secs_f64();
    let (worst_name, worst) =
        cases.iter().fold(("", 0.0), |(n, w), (name, e)| if *e > w { (name.as_str(), *e) } else { (n, w) });
    let pass = cases.iter().all(|(_, e)| *e < FD_TOL) && secs < 60.0;
    vec![verdict(
        "1",
        pass,
        format!(
            "gradient oracle: {} cases, max rel err {worst:.2e} ({worst_name}), tol {FD_TOL:.0e}, {secs:.1}s (< 60s)",
            cases.len()
        ),
    )]
}

fn analytic_nll() -> Vec<Verdict> {
    let gt = GroundTruthBox { object_id: 0, class: 1, corners: box_corners([10.0, 10.0], 4.0, 2.0, 0.4) };
    let corners = (0..4)
        .map(|i| CornerGaussian::new(gt.corners[i].to_vec(), CovMatrix::identity(2)))
        .collect::<dmuq::Result<Vec<_>>>()
        .unwrap();
    let det = Detection { score: 0.9, corners: gt.corners, uncertainty: Some(BoxUncertainty::Img(corners)), cell: 0 };
    let nll = nll_score(&[vec![det]], &[vec![gt]], 0.5).unwrap().nll;
    let want = (2.0 * std::f64::consts::PI).ln();
    vec![verdict(
        "2",
        (nll - want).abs() <= 1e-9,
        format!("analytic NLL {nll:.12} vs ln(2pi) {want:.12}, |diff| {:.1e} (<= 1e-9)", (nll - want).abs()),
    )]
}

fn bootstrap_combinatorics() -> Vec<Verdict> {
    let blocks = BlockCollection::from_scenes(&[0..100], 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut counts = vec![0u64; blocks.len()];
    let mut draws_ok = true;
    for _ in 0..10_000 {
        let r = sample_bootstrap(&blocks, &mut rng).unwrap();
        draws_ok &= r.draws.len() == 10;
        r.draws.iter().for_each(|&b| counts[b] += 1);
    }
    let expected = counts.iter().sum::<u64>() as f64 / counts.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(chi2);
    let pass = blocks.len() == 91 && blocks.draws_per_sample() == 10 && draws_ok && p > 0.01;
    vec![verdict(
        "3",
        pass,
        format!(
            "bootstrap: {} blocks (91), M = {} (10), chi-square {chi2:.1} on {} df, p = {p:.3} (> 0.01)",
            blocks.len(),
            blocks.draws_per_sample(),
            counts.len() - 1
        ),
    )]
}

fn random_raw(rng: &mut ChaCha8Rng, head: HeadKind, r: usize, w: usize) -> RawOutputs {
    let mut t = |c: usize| {
        let data = (0..c * r * w).map(|_| rng.random_range(-8.0..8.0)).collect();
        Tensor::new(vec![c, r, w], data).unwrap()
    };
    RawOutputs { cls: t(1), reg: t(8), cov: head.variant().map(|v| t(v.head_width())) }
}

fn random_spd(rng: &mut ChaCha8Rng, dim: usize) -> CovMatrix {
    let a: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            m[i * dim + j] = (0..dim).map(|k| a[i * dim + k] * a[j * dim + k]).sum();
        }
    }
    CovMatrix::new(dim, m).unwrap()
}

fn all_psd(d: &Detection) -> bool {
    d.uncertainty.as_ref().is_none_or(|u| u.validate().is_ok() && u.covariances().iter().all(CovMatrix::is_psd))
}

fn psd_suite(run: Option<&Run>) -> Vec<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let geom = GridGeometry::new(&SceneConfig::default()).unwrap();
    let (r, w) = (geom.out_rows(), geom.out_cols());
    let mut heads = 0;
    let mut bad_heads = 0;
    for v in Variant::ALL {
        let head = HeadKind::Gaussian(v);
        let mut n = 0;
        while n < 10_000 {
            for d in decode_cells(&random_raw(&mut rng, head, r, w), head, &geom).unwrap() {
                bad_heads += !all_psd(&d) as usize;
                n += 1;
            }
        }
        heads += n;
    }
    let mut bad_combine = 0;
    for k in 0..10_000 {
        let dim = if k % 2 == 0 { 2 } else { 8 };
        let (e, a, h) = (random_spd(&mut rng, dim), random_spd(&mut rng, dim), random_spd(&mut rng, dim));
        bad_combine += !combine_covariance(&e, &a, &h).unwrap().is_psd() as usize;
    }
    let (mut emitted, mut bad_emitted) = (0, 0);
    let emitted_ok = match run {
        Some(run) => {
            for mode in CollabMode::ALL {
                for m in [UqMethod::Dm, UqMethod::Mbb, UqMethod::DoubleM] {
                    for d in
                        pipeline::infer_split(&run.cfg, &run.artifacts(), m, mode, &run.test).unwrap().iter().flatten()
                    {
                        emitted += 1;
                        bad_emitted += !all_psd(d) as usize;
                    }
                }
            }
            bad_emitted == 0 && emitted > 0
        }
        None => false,
    };
    vec![verdict(
        "5",
        bad_heads == 0 && bad_combine == 0 && emitted_ok,
        format!(
            "PSD: {bad_heads}/{heads} random head outputs non-PSD, {bad_emitted}/{emitted} emitted test covariances \
             non-PSD, {bad_combine}/10000 combinations non-PSD"
        ),
    )]
}

/// One full reference pipeline run in `dir`.
struct Run {
    cfg: RunConfig,
    dir: PathBuf,
    report: MetricReport,
    test: dmuq::scenegen::Dataset,
    seconds: f64,
}

impl Run {
    fn artifacts(&self) -> PathBuf {
        self.dir.join("artifacts")
    }

    fn row(&self, mode: &str, method: &str) -> &ReportRow {
        self.report.row(mode, method).unwrap_or_else(|| panic!("no {method}-{mode} row"))
    }
}

fn reference_config() -> RunConfig {
    RunConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/seed42.toml")).unwrap()
}

fn full_run(cfg: &RunConfig, dir: &Path) -> Run {
    let t = Instant::now();
    let (data, art) = (dir.join("data"), dir.join("artifacts"));
    pipeline::write_splits(cfg, &data).unwrap();
    let train = pipeline::load_split(&data, Split::Train).unwrap();
    let val = pipeline::load_split(&data, Split::Val).unwrap();
    for mode in CollabMode::ALL {
        pipeline::train_methods(cfg, &UqMethod::ALL, mode, &train, &val, &art).unwrap();
    }
    let test = pipeline::load_split(&data, Split::Test).unwrap();
    let report = pipeline::evaluate(cfg, &art, &test).unwrap();
    pipeline::write_report(&dir.join("report.txt"), &report).unwrap();
    Run { cfg: cfg.clone(), dir: dir.to_path_buf(), report, test, seconds: t.elapsed().as_secs_f64() }
}

fn oracle_equivalence(run: Option<&Run>) -> Vec<Verdict> {
    let Some(run) = run else { return vec![verdict("4", false, "reference run unavailable")] };
    let (m, mode) = (UqMethod::DoubleM, CollabMode::Intermediate);
    let art = run.artifacts();
    let stats = read_uqstats(pipeline::uqstats_path(&art, m, mode)).unwrap();
    let log = ResidualSet::from_tsv(&fs::read_to_string(pipeline::residuals_path(&art, m, mode)).unwrap()).unwrap();
    let vecs: Vec<Vec<f64>> = log.residuals.iter().map(|r| r.e.to_vec()).collect();
    let brute = estimate_sigma_e(&vecs).unwrap();
    let se_err = stats.sigma_e.entries().iter().zip(brute.entries()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let params = read_checkpoint(pipeline::checkpoint_path(&art, m, mode)).unwrap();
    let geom = GridGeometry::new(&run.test.config).unwrap();
    let inf = run.cfg.infer_options();
    let mut bar_err = 0.0_f64;
    let mut n_bar = 0;
    for frame in &run.test.frames {
        let hat = detect(&params, &frame.grids, mode, inf.ego, &geom, inf.score_threshold, inf.nms_iou).unwrap();
        let bar = double_m_infer(&params, &stats, frame, &geom, mode, &inf).unwrap();
        for (h, b) in hat.iter().zip(&bar) {
            let (Some(h), Some(b)) = (&h.uncertainty, &b.uncertainty) else { panic!("missing covariance") };
            for (ch, cb) in h.covariances().iter().zip(b.covariances()) {
                let want = combine_covariance(&stats.sigma_e, &stats.sigma_a, ch).unwrap();
                for (x, y) in cb.entries().iter().zip(want.entries()) {
                    bar_err = bar_err.max((x - y).abs() / (1.0 + y.abs()));
                }
                n_bar += 1;
            }
        }
    }
    let ap_err = ap_max_error(31, 50);
    let iou_err = iou_max_error(21, 100);
    vec![
        verdict(
            "4a",
            se_err <= 1e-12,
            format!("sigma_e vs brute force over {} logged residuals: max |diff| {se_err:.1e} (<= 1e-12)", vecs.len()),
        ),
        verdict(
            "4b",
            bar_err <= 1e-15 && n_bar > 0,
            format!("combined covariance recomputed for {n_bar} test corners: max rel diff {bar_err:.1e} (<= 1e-15)"),
        ),
        verdict(
            "4c",
            ap_err <= 1e-12,
            format!("AP vs brute-force PR oracle, 50 instances: max |diff| {ap_err:.1e} (<= 1e-12)"),
        ),
        verdict(
            "4d",
            iou_err <= 2e-3,
            format!("quad IoU vs rasterisation (1e6 samples), 100 pairs: max |diff| {iou_err:.1e} (<= 2e-3)"),
        ),
    ]
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn directional(run: Option<&Run>) -> Vec<Verdict> {
    let Some(run) = run else { return vec![verdict("6", false, "reference run failed")] };
    let nll = |mode, m| run.row(mode, m).nll50;
    let ap = |mode, m| run.row(mode, m).ap50;
    let (dbl, dm, mbb) = (nll("inter", "doublem"), nll("inter", "dm"), nll("inter", "mbb"));
    let a = matches!((dbl, dm, mbb), (Some(x), Some(y), Some(z)) if x < y && x < z);
    let (ap_early, ap_lb) = (ap("early", "doublem"), ap("lb", "doublem"));
    let (nll_inter, nll_lb) = (nll("inter", "doublem"), nll("lb", "doublem"));
    let b = matches!((ap_early, ap_lb), (Some(x), Some(y)) if x > y)
        && matches!((nll_inter, nll_lb), (Some(x), Some(y)) if x < y);
    let bad: Vec<String> = run
        .report
        .rows
        .iter()
        .filter(|r| !matches!((r.ap50, r.ap70), (Some(h), Some(s)) if s <= h))
        .map(|r| format!("{}-{}", r.uq_method, r.mode))
        .collect();
    let budget = run.seconds <= 900.0;
    vec![
        verdict(
            "6a",
            a,
            format!("intermediate NLL@0.5: Double-M {} < DM {} and < MBB {}", fmt(dbl), fmt(dm), fmt(mbb)),
        ),
        verdict(
            "6b",
            b,
            format!(
                "Double-M AP@0.5 early {} > lb {}; NLL@0.5 inter {} < lb {}",
                fmt(ap_early),
                fmt(ap_lb),
                fmt(nll_inter),
                fmt(nll_lb)
            ),
        ),
        verdict(
            "6c",
            bad.is_empty() && run.report.rows.len() == 12,
            format!(
                "AP@0.7 <= AP@0.5 in {}/12 cells{}",
                12 - bad.len(),
                if bad.is_empty() { String::new() } else { format!(" (violations: {})", bad.join(", ")) }
            ),
        ),
        verdict("6d", budget, format!("reference run {:.0}s (<= 900s on one core)", run.seconds)),
    ]
}

fn ablation(base: &Path, run: Option<&Run>) -> Vec<Verdict> {
    let Some(run) = run else { return vec![verdict("7", false, "reference run unavailable")] };
    let data = run.dir.join("data");
    let train = pipeline::load_split(&data, Split::Train).unwrap();
    let val = pipeline::load_split(&data, Split::Val).unwrap();
    let methods = [UqMethod::Dm, UqMethod::DoubleM];
    let mut rows: Vec<(Variant, ReportRow)> =
        methods.iter().map(|m| (Variant::Img, run.row("inter", m.as_str()).clone())).collect();
    for v in [Variant::Isg, Variant::Dmg] {
        let mut cfg = run.cfg.clone();
        cfg.detector.variant = v;
        cfg.eval.modes = vec![CollabMode::Intermediate];
        cfg.eval.methods = methods.to_vec();
        let art = base.join(format!("ablation-{v}"));
        pipeline::train_methods(&cfg, &methods, CollabMode::Intermediate, &train, &val, &art).unwrap();
        let report = pipeline::evaluate(&cfg, &art, &run.test).unwrap();
        rows.extend(report.rows.into_iter().map(|r| (v, r)));
    }
    let mut table = String::from("variant  method   AP@0.5  AP@0.7  NLL@0.5  NLL@0.7\n");
    for (v, r) in &rows {
        table += &format!(
            "{:<8} {:<8} {:>6}  {:>6}  {:>7}  {:>7}\n",
            v.as_str(),
            r.uq_method,
            fmt(r.ap50),
            fmt(r.ap70),
            fmt(r.nll50),
            fmt(r.nll70)
        );
    }
    fs::write(base.join("ablation.txt"), &table).unwrap();
    print!("{table}");
    let complete =
        rows.len() == 6 && rows.iter().all(|(_, r)| r.ap50.is_some() && r.ap70.is_some() && r.nll50.is_some());
    vec![verdict(
        "7",
        complete,
        format!(
            "variant ablation (intermediate): {} rows, written to {}",
            rows.len(),
            base.join("ablation.txt").display()
        ),
    )]
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn determinism(base: &Path, run: Option<&Run>) -> Vec<Verdict> {
    let Some(first) = run else { return vec![verdict("8", false, "reference run unavailable")] };
    let second = full_run(&first.cfg, &base.join("run2"));
    let a = files_under(&first.dir);
    let rel = |p: &Path, root: &Path| p.strip_prefix(root).unwrap().to_path_buf();
    let names_a: Vec<_> = a.iter().map(|p| rel(p, &first.dir)).collect();
    let names_b: Vec<_> = files_under(&second.dir).iter().map(|p| rel(p, &second.dir)).collect();
    let differing: Vec<String> = names_a
        .iter()
        .filter(|n| fs::read(first.dir.join(n)).ok() != fs::read(second.dir.join(n)).ok())
        .map(|n| n.display().to_string())
        .collect();
    let kinds = |ext: &str| names_a.iter().filter(|n| n.to_string_lossy().ends_with(ext)).count();
    vec![verdict(
        "8",
        names_a == names_b && differing.is_empty() && kinds(".ckpt") == 12 && kinds(".uqstats") == 6,
        format!(
            "second seed-42 run: {}/{} files byte-identical ({} checkpoints, {} statistics, reports){}",
            names_a.len() - differing.len(),
            names_a.len(),
            kinds(".ckpt"),
            kinds(".uqstats"),
            if differing.is_empty() { String::new() } else { format!("; differ: {}", differing.join(", ")) }
        ),
    )]
}

fn main() {
    let base = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&base);
    fs::create_dir_all(&base).unwrap();
    println!("acceptance suite (outputs in {})", base.display());

    let mut all = Vec::new();
    all.extend(guarded(&["1"], gradient_oracle));
    all.extend(guarded(&["2"], analytic_nll));
    all.extend(guarded(&["3"], bootstrap_combinatorics));

    println!("training the reference configuration...");
    let run = panic::catch_unwind(|| full_run(&reference_config(), &base.join("run1"))).ok();
    if let Some(r) = &run {
        print!("{}", r.report.to_text());
    }
    all.extend(guarded(&["4a", "4b", "4c", "4d"], || oracle_equivalence(run.as_ref())));
    all.extend(guarded(&["5"], || psd_suite(run.as_ref())));
    all.extend(guarded(&["6a", "6b", "6c", "6d"], || directional(run.as_ref())));
    all.extend(guarded(&["7"], || ablation(&base, run.as_ref())));
    all.extend(guarded(&["8"], || determinism(&base, run.as_ref())));

    println!("\nsummary");
    all.iter().for_each(print);
    let failed = all.iter().filter(|v| !v.pass).count();
    println!("{} passed, {failed} failed", all.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
