//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! Runs under `cargo test` and exits 0 so the workspace test run reports the
//! outcome without aborting; set `DCN_ACCEPTANCE_STRICT=1` to turn any FAIL
//! into a nonzero exit. Raw-MNIST runs only when `DCN_MNIST_DIR` points at
//! the IDX files.

mod common;

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::gradcheck::{check, random_case};
use dcn::config::{preset, ExperimentConfig};
use dcn::data::{load_idx, Dataset};
use dcn::dcn::{collapse_indicator, embed, train, TrainMode};
use dcn::kmeans::{centroid_sgd_update, lloyd, ClusterState, CountOrder, Init, LloydConfig};
use dcn::metrics::{acc, ari, nmi, Scores};
use dcn::synth::{generate, GeneratorKind, GeneratorSpec};
use dcn::Matrix;

const GRAD_TOL: f64 = 1e-4;
const METRIC_TOL: f64 = 1e-10;
/// The ARI quotient is formed from different intermediate sums than 1.2/3.7.
const EXAMPLE_TOL: f64 = 1e-15;
/// Slack for a Lloyd step whose exact cost is unchanged but whose recomputed
/// sum rounds differently.
const LLOYD_REL_SLACK: f64 = 1e-12;
const RUNNING_MEAN_TOL: f64 = 1e-12;
const JOINT_MIN_ACC: f64 = 0.9;
const JOINT_MIN_NMI: f64 = 0.8;
const RECON_ACC_MARGIN: f64 = 0.15;
const MNIST_NMI_MARGIN: f64 = 0.10;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// Blob centers at (+-16, +-16) with within-cluster std 0.45 * 16: at this
/// geometry the sigmoid maps blur the raw-space clusters enough for K-means
/// on x to lose accuracy.
const CENTROID_SCALE: f64 = 16.0;
const NOISE_RATIO: f64 = 0.45;

#[derive(Clone, Copy, PartialEq)]
enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn report(&mut self, id: u32, name: &str, verdict: Verdict, detail: String, started: Instant) {
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                self.failures += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!(
            "{tag} [{id}] {name}: {detail} ({:.1}s)",
            started.elapsed().as_secs_f64()
        );
    }
}

fn verdict(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

fn gradients(suite: &mut Suite) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut worst = 0.0f64;
    let mut compared = 0;
    for i in 0..50 {
        let lambda = [0.0, 0.5, 5.0][i % 3];
        let case = random_case(&mut rng, 4, 16, lambda, 8);
        let r = check(&case.params, &case.x, &case.m, case.objective);
        worst = worst.max(r.worst);
        compared += r.compared;
    }
    suite.report(
        1,
        "gradient check on 50 random networks",
        verdict(worst < GRAD_TOL && t.elapsed().as_secs() < 60),
        format!("worst relative error {worst:.2e} over {compared} entries (tol {GRAD_TOL:e})"),
        t,
    );
}

// Brute-force metric references, written from the definitions.

fn brute_nmi(u: &[usize], v: &[usize]) -> f64 {
    let n = u.len() as f64;
    let mut cu: HashMap<usize, f64> = HashMap::new();
    let mut cv: HashMap<usize, f64> = HashMap::new();
    let mut cj: HashMap<(usize, usize), f64> = HashMap::new();
    for (&a, &b) in u.iter().zip(v) {
        *cu.entry(a).or_default() += 1.0;
        *cv.entry(b).or_default() += 1.0;
        *cj.entry((a, b)).or_default() += 1.0;
    }
    let entropy = |c: &HashMap<usize, f64>| -c.values().map(|&x| x / n * (x / n).ln()).sum::<f64>();
    let (hu, hv) = (entropy(&cu), entropy(&cv));
    if hu == 0.0 && hv == 0.0 {
        return 1.0;
    }
    if hu == 0.0 || hv == 0.0 {
        return 0.0;
    }
    let mi: f64 = cj
        .iter()
        .map(|(&(a, b), &x)| x / n * (x * n / (cu[&a] * cv[&b])).ln())
        .sum();
    mi / (hu * hv).sqrt()
}

fn brute_ari(u: &[usize], v: &[usize]) -> f64 {
    let n = u.len();
    let (mut both, mut same_u, mut same_v) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let a = u[i] == u[j];
            let b = v[i] == v[j];
            same_u += a as u8 as f64;
            same_v += b as u8 as f64;
            both += (a && b) as u8 as f64;
        }
    }
    let total = (n * (n - 1) / 2) as f64;
    let expected = same_u * same_v / total;
    let max = 0.5 * (same_u + same_v);
    if max == expected {
        return 1.0;
    }
    (both - expected) / (max - expected)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_acc(truth: &[usize], pred: &[usize], perms: &[Vec<usize>]) -> f64 {
    let best = perms
        .iter()
        .map(|p| truth.iter().zip(pred).filter(|(&t, &c)| p[c] == t).count())
        .max()
        .unwrap();
    best as f64 / truth.len() as f64
}

fn metrics(suite: &mut Suite) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let perms = permutations(6);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(2..=30);
        let (ku, kv) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let u: Vec<usize> = (0..n).map(|_| rng.random_range(0..ku)).collect();
        let v: Vec<usize> = (0..n).map(|_| rng.random_range(0..kv)).collect();
        worst = worst
            .max((nmi(&u, &v).unwrap() - brute_nmi(&u, &v)).abs())
            .max((ari(&u, &v).unwrap() - brute_ari(&u, &v)).abs())
            .max((acc(&u, &v).unwrap() - brute_acc(&u, &v, &perms)).abs());
    }
    let ari_example = ari(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 1, 1]).unwrap();
    let acc_example = acc(&[0, 0, 1, 1, 2, 2], &[1, 1, 1, 0, 0, 0]).unwrap();
    let ok = worst < METRIC_TOL && (ari_example - 1.2 / 3.7).abs() <= EXAMPLE_TOL && acc_example == 4.0 / 6.0;
    suite.report(
        5,
        "metric oracles on 500 random labelings",
        verdict(ok),
        format!("worst deviation {worst:.2e}; ARI example {ari_example} (1.2/3.7), ACC example {acc_example} (4/6)"),
        t,
    );
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn kmeans_invariants(suite: &mut Suite) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut increases = 0;
    let mut steps = 0;
    for i in 0..100u64 {
        let n = rng.random_range(5..200);
        let dim = rng.random_range(1..6);
        let k = rng.random_range(1..=n.min(8));
        let h = random_matrix(n, dim, &mut rng);
        let init = if i % 2 == 0 { Init::KmeansPlusPlus } else { Init::RandomRows };
        let r = lloyd(&h, &LloydConfig { init, ..LloydConfig::new(k, i) }).unwrap();
        for w in r.history.windows(2) {
            steps += 1;
            if w[1] > w[0] * (1.0 + LLOYD_REL_SLACK) {
                increases += 1;
            }
        }
    }

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (k, dim, n) = (rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..300));
        let m0 = random_matrix(k, dim, &mut rng);
        let c0: Vec<u64> = (0..k).map(|_| rng.random_range(1..20)).collect();
        let mut state = ClusterState::new(m0.clone(), vec![], c0.clone()).unwrap();
        let mut sums: Vec<Vec<f64>> = (0..k).map(|c| m0.row(c).iter().map(|v| v * c0[c] as f64).collect()).collect();
        let mut counts = c0.clone();
        for _ in 0..n {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c = rng.random_range(0..k);
            centroid_sgd_update(&mut state, &x, c, CountOrder::IncrementFirst).unwrap();
            sums[c].iter_mut().zip(&x).for_each(|(s, v)| *s += v);
            counts[c] += 1;
        }
        for c in 0..k {
            for (j, s) in sums[c].iter().enumerate() {
                worst = worst.max((state.centroids.get(c, j) - s / counts[c] as f64).abs());
            }
        }
    }
    suite.report(
        6,
        "K-means invariants",
        verdict(increases == 0 && worst < RUNNING_MEAN_TOL),
        format!("{increases} cost increases over {steps} Lloyd steps on 100 instances; running-mean deviation {worst:.2e}"),
        t,
    );
}

struct Run {
    scores: Scores,
    initial: Scores,
    collapse: f64,
}

fn run(ds: &Dataset, mode: TrainMode, seed: u64) -> Result<Run, String> {
    let cfg = ExperimentConfig {
        mode,
        seed,
        record_timing: false,
        ..preset("synth_sigsig").unwrap()
    };
    let out = train(ds, &cfg).map_err(|e| e.to_string())?;
    let h = embed(&out.params, ds).map_err(|e| e.to_string())?;
    Ok(Run {
        scores: out.final_scores.unwrap(),
        initial: out.reports[0].scores.unwrap(),
        collapse: collapse_indicator(&h, &out.state).map_err(|e| e.to_string())?,
    })
}

fn dataset(kind: GeneratorKind, seed: u64) -> Dataset {
    let spec = GeneratorSpec {
        centroid_scale: CENTROID_SCALE,
        noise_std: NOISE_RATIO * CENTROID_SCALE,
        ..GeneratorSpec::new(kind, seed)
    };
    generate(&spec).unwrap().dataset
}

fn raw_kmeans_acc(ds: &Dataset, seed: u64) -> f64 {
    let r = lloyd(&ds.features, &LloydConfig { restarts: 10, ..LloydConfig::new(4, seed) }).unwrap();
    acc(ds.labels.as_ref().unwrap(), &r.state.assignments).unwrap()
}

/// Per-seed results of one generator.
struct Sweep {
    raw: Vec<f64>,
    runs: Vec<Vec<Run>>,
}

fn sweep(kind: GeneratorKind, modes: &[TrainMode]) -> Result<Sweep, String> {
    let mut s = Sweep {
        raw: Vec::new(),
        runs: Vec::new(),
    };
    for &seed in &SEEDS {
        let ds = dataset(kind, seed);
        s.raw.push(raw_kmeans_acc(&ds, seed));
        let mut row = Vec::new();
        for &m in modes {
            row.push(run(&ds, m, seed).map_err(|e| format!("{kind} {m} seed {seed}: {e}"))?);
        }
        s.runs.push(row);
    }
    Ok(s)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Criterion-2 style comparison; modes are [joint, two_stage, ...].
fn separation(s: &Sweep) -> (bool, String) {
    let joint_acc = mean(s.runs.iter().map(|r| r[0].scores.acc));
    let joint_nmi = mean(s.runs.iter().map(|r| r[0].scores.nmi));
    let two_acc = mean(s.runs.iter().map(|r| r[1].scores.acc));
    let raw_acc = mean(s.raw.iter().copied());
    let ok = joint_acc >= JOINT_MIN_ACC
        && joint_nmi >= JOINT_MIN_NMI
        && two_acc < joint_acc
        && raw_acc < two_acc.min(joint_acc);
    let per_seed: Vec<String> = s
        .runs
        .iter()
        .zip(&s.raw)
        .map(|(r, raw)| format!("{:.3}/{:.3}/{:.3}", r[0].scores.acc, r[1].scores.acc, raw))
        .collect();
    (
        ok,
        format!(
            "mean ACC joint {joint_acc:.4} (NMI {joint_nmi:.4}), two-stage {two_acc:.4}, raw K-means {raw_acc:.4}; per seed joint/two-stage/raw {}",
            per_seed.join(" ")
        ),
    )
}

fn synthetic(suite: &mut Suite) {
    let t = Instant::now();
    let modes = [TrainMode::Joint, TrainMode::TwoStage, TrainMode::NoReconstruction];
    match sweep(GeneratorKind::SigSig, &modes) {
        Err(e) => {
            for (id, name) in [(2, "sigsig separation"), (3, "no-reconstruction pathology"), (7, "final >= initial")] {
                suite.report(id, name, Verdict::Fail, e.clone(), t);
            }
        }
        Ok(s) => {
            let (ok, detail) = separation(&s);
            suite.report(2, "sigsig: joint vs two-stage vs raw K-means", verdict(ok), detail, t);

            let tighter = s.runs.iter().all(|r| r[2].collapse < r[0].collapse);
            let gap = mean(s.runs.iter().map(|r| r[0].scores.acc - r[2].scores.acc));
            let cols: Vec<String> = s
                .runs
                .iter()
                .map(|r| format!("{:.3}<{:.3}", r[2].collapse, r[0].collapse))
                .collect();
            suite.report(
                3,
                "no-reconstruction collapses to an arbitrary tight partition",
                verdict(tighter && gap >= RECON_ACC_MARGIN),
                format!(
                    "collapse no-recon<joint per seed {}; mean ACC gap {gap:.4} (need >= {RECON_ACC_MARGIN})",
                    cols.join(" ")
                ),
                t,
            );

            let mut ok = true;
            let mut per_seed = Vec::new();
            for r in &s.runs {
                let (f, i) = (r[0].scores, r[0].initial);
                ok &= f.nmi >= i.nmi && f.ari >= i.ari && f.acc >= i.acc;
                per_seed.push(format!(
                    "nmi {:.3}->{:.3} ari {:.3}->{:.3} acc {:.3}->{:.3}",
                    i.nmi, f.nmi, i.ari, f.ari, i.acc, f.acc
                ));
            }
            suite.report(7, "joint final metrics >= post-initialization", verdict(ok), per_seed.join("; "), t);
        }
    }

    let t = Instant::now();
    let mut ok = true;
    let mut details = Vec::new();
    for kind in [GeneratorKind::SquaredSigmoid, GeneratorKind::TanhSigmoid] {
        match sweep(kind, &[TrainMode::Joint, TrainMode::TwoStage]) {
            Ok(s) => {
                let (k_ok, d) = separation(&s);
                ok &= k_ok;
                details.push(format!("{kind}: {d}"));
            }
            Err(e) => {
                ok = false;
                details.push(e);
            }
        }
    }
    suite.report(4, "alternative generators", verdict(ok), details.join(" || "), t);
}

fn mnist(suite: &mut Suite) {
    let t = Instant::now();
    let Some(dir) = std::env::var_os("DCN_MNIST_DIR").map(PathBuf::from) else {
        suite.report(8, "raw MNIST subset", Verdict::Skip, "DCN_MNIST_DIR not set".into(), t);
        return;
    };
    let (images, labels) = (dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"));
    let ds = match load_idx(&images, &labels).and_then(|d| d.balanced_subset(1000)) {
        Ok(d) => d,
        Err(e) => {
            suite.report(8, "raw MNIST subset", Verdict::Skip, format!("could not load MNIST: {e}"), t);
            return;
        }
    };
    let truth = ds.labels.clone().unwrap();
    let mut gaps = Vec::new();
    for seed in 1..=3u64 {
        let raw = lloyd(&ds.features, &LloydConfig { restarts: 10, ..LloydConfig::new(10, seed) }).unwrap();
        let raw_nmi = nmi(&truth, &raw.state.assignments).unwrap();
        let cfg = ExperimentConfig {
            seed,
            ..preset("mnist_raw").unwrap()
        };
        match train(&ds, &cfg) {
            Ok(out) => gaps.push(out.final_scores.unwrap().nmi - raw_nmi),
            Err(e) => {
                suite.report(8, "raw MNIST subset", Verdict::Fail, format!("seed {seed}: {e}"), t);
                return;
            }
        }
    }
    let gap = mean(gaps.iter().copied());
    suite.report(
        8,
        "raw MNIST subset: DCN NMI over raw K-means",
        verdict(gap >= MNIST_NMI_MARGIN),
        format!("mean NMI gain {gap:.4} (need >= {MNIST_NMI_MARGIN})"),
        t,
    );
}

fn main() {
    // `cargo test` passes harness flags; a filter-only listing request must
    // not start the long runs.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut suite = Suite { failures: 0 };
    gradients(&mut suite);
    metrics(&mut suite);
    kmeans_invariants(&mut suite);
    synthetic(&mut suite);
    mnist(&mut suite);
    println!("acceptance: {} failing criteria", suite.failures);
    let strict = std::env::var("DCN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && suite.failures > 0 {
        std::process::exit(1);
    }
}
