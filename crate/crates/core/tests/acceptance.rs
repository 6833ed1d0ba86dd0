//! Acceptance suite. Runs every criterion in sequence, prints one
//! PASS/FAIL line per criterion (details indented below it) and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use kqt_ewma::bench::{self, BenchConfig, DataFamily};
use kqt_ewma::calibration::sample_bin_probs;
use kqt_ewma::monitor::DetectorState;
use kqt_ewma::rng::{self, Rng};
use kqt_ewma::synthetic::{self, GaussianSpec};
use kqt_ewma::{
    build_histogram, calibrate_thresholds, fa_probability, BuildConfig, Dataset, Detector,
    ExpectedProbs, KernelKind, ThresholdTable,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

type Outcome = (bool, Vec<String>);
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, details: &mut Vec<String>, line: String) -> bool {
    details.push(format!("{} {line}", if ok { "ok  " } else { "FAIL" }));
    ok
}

fn arl0_config(
    kernel: KernelKind,
    data: DataFamily,
    n: usize,
    draws: usize,
    seed: u64,
) -> BenchConfig {
    BenchConfig {
        kernel,
        train_size: n,
        arl0: vec![500.0],
        streams: 2000,
        length: Some(3000),
        training_draws: Some(draws),
        calibration_streams: Some(20_000),
        data,
        seed,
        ..BenchConfig::default()
    }
}

fn arl0_control() -> Outcome {
    let mut d = Vec::new();
    let families = [
        ("gaussian", DataFamily::Gaussian),
        ("uniform", DataFamily::Uniform),
        ("exponential", DataFamily::Exponential),
    ];
    let kernels = [KernelKind::Mahalanobis, KernelKind::AxisAligned];
    let base = arl0_config(
        KernelKind::Mahalanobis,
        DataFamily::Gaussian,
        1024,
        200,
        101,
    );
    let table = calibrate_thresholds(&base.calibration_config(500.0)).expect("calibration");
    let mut all = true;
    for (name, fam) in &families {
        for k in kernels {
            let cfg = BenchConfig {
                kernel: k,
                data: fam.clone(),
                ..base.clone()
            };
            let est = bench::empirical_arl0(&cfg, &table).expect("arl0");
            all &= check(
                (450.0..=550.0).contains(&est.mean),
                &mut d,
                format!(
                    "{name}/{}: ARL0 {:.1} (95% CI {:.1}..{:.1}, censored {:.3}) target [450, 550]",
                    k.name(),
                    est.mean,
                    est.ci95.0,
                    est.ci95.1,
                    est.censored_frac()
                ),
            );
        }
    }
    (all, d)
}

fn fa_geometry() -> Outcome {
    let mut d = Vec::new();
    let mut all = true;
    for (arl0, quoted) in [(500.0, 0.45), (1000.0, 0.26)] {
        let expected = fa_probability(1.0 / arl0, 300);
        let cfg = BenchConfig {
            train_size: 4096,
            arl0: vec![arl0],
            streams: 2000,
            training_draws: Some(50),
            seed: 202,
            ..BenchConfig::default()
        };
        let table = calibrate_thresholds(&cfg.calibration_config(arl0)).expect("calibration");
        let rep = bench::detection_bench(&cfg, &table).expect("bench");
        let ok = (rep.fa_rate - expected).abs() <= 0.03 && (expected - quoted).abs() < 0.005;
        all &= check(
            ok,
            &mut d,
            format!(
                "ARL0 {arl0}: FA rate {:.4} vs 1-(1-a)^300 = {expected:.4} (+-0.03), published {quoted}",
                rep.fa_rate
            ),
        );
    }
    (all, d)
}

fn multimodal_advantage() -> Outcome {
    let mut d = Vec::new();
    let kqt = BenchConfig {
        kernel: KernelKind::Mahalanobis,
        train_size: 1024,
        streams: 1000,
        training_draws: Some(100),
        data: DataFamily::Mixture {
            modes: 3,
            spread: 3.0,
        },
        skl: 1.0,
        seed: 303,
        ..BenchConfig::default()
    };
    let qt = BenchConfig {
        detector: "qt-ewma".into(),
        kernel: KernelKind::AxisAligned,
        ..kqt.clone()
    };
    let table = calibrate_thresholds(&kqt.calibration_config(500.0)).expect("calibration");
    let a = bench::detection_bench(&kqt, &table).expect("kqt");
    let b = bench::detection_bench(&qt, &table).expect("qt");
    let p = bench::paired_delay(&b, &a).expect("paired");
    let (da, db) = (
        a.mean_delay.unwrap_or(f64::NAN),
        b.mean_delay.unwrap_or(f64::NAN),
    );
    let ok = da < db && p.z > 1.96;
    check(
        ok,
        &mut d,
        format!(
            "mean delay mahalanobis {da:.1} vs axis {db:.1}; paired diff {:.1} (se {:.2}, z {:.2}, {} pairs)",
            p.mean_diff, p.std_err, p.z, p.pairs
        ),
    );
    d.push(format!(
        "     FA rate mahalanobis {:.3}, axis {:.3}",
        a.fa_rate, b.fa_rate
    ));
    (ok, d)
}

fn delay_monotonicity() -> Outcome {
    let mut d = Vec::new();
    let base = BenchConfig {
        train_size: 1024,
        arl0: vec![1000.0],
        streams: 500,
        training_draws: Some(50),
        seed: 404,
        ..BenchConfig::default()
    };
    let table = calibrate_thresholds(&base.calibration_config(1000.0)).expect("calibration");
    let mut delays = Vec::new();
    for skl in [0.5, 1.0, 2.0, 3.0] {
        let rep = bench::detection_bench(
            &BenchConfig {
                skl,
                ..base.clone()
            },
            &table,
        )
        .expect("bench");
        let delay = rep.mean_delay.unwrap_or(f64::NAN);
        d.push(format!(
            "     sKL {skl}: mean delay {delay:.2} over {} detections",
            rep.detected
        ));
        delays.push(delay);
    }
    let ok = delays.windows(2).all(|w| w[1] < w[0]);
    check(ok, &mut d, "delays strictly decreasing in sKL".into());
    (ok, d)
}

fn small_n() -> Outcome {
    let mut d = Vec::new();
    let run = |n: usize, draws: usize| {
        let cfg = arl0_config(KernelKind::Mahalanobis, DataFamily::Gaussian, n, draws, 505);
        let table = calibrate_thresholds(&cfg.calibration_config(500.0)).expect("calibration");
        bench::empirical_arl0(&cfg, &table).expect("arl0")
    };
    let small = run(128, 200);
    let large = run(4096, 100);
    let dev = (small.mean - 500.0).abs() / 500.0;
    let a = check(
        dev > 0.10,
        &mut d,
        format!(
            "N=128: ARL0 {:.1}, deviation {:.1}% (> 10%)",
            small.mean,
            100.0 * dev
        ),
    );
    let b = check(
        (450.0..=550.0).contains(&large.mean),
        &mut d,
        format!(
            "N=4096: ARL0 {:.1} (95% CI {:.1}..{:.1}) target [450, 550]",
            large.mean, large.ci95.0, large.ci95.1
        ),
    );
    (a && b, d)
}

/// `Z_t = (1-l)^t Z_0 + l * sum_s (1-l)^(t-s) e_{j_s}`, evaluated directly.
fn ewma_closed_form(z0: &[f64], bins: &[usize], lambda: f64) -> Vec<f64> {
    let t = bins.len() as i32;
    let mut z: Vec<f64> = z0.iter().map(|v| v * (1.0 - lambda).powi(t)).collect();
    for (s, &j) in bins.iter().enumerate() {
        z[j] += lambda * (1.0 - lambda).powi(t - 1 - s as i32);
    }
    z
}

fn statistic_oracles() -> Outcome {
    let mut d = Vec::new();
    let pi = vec![1.0 / 32.0; 32];
    let expected = ExpectedProbs::new(&pi, 4096).unwrap();
    let mut state = DetectorState::new(&expected, 0.05).unwrap();
    let mut r = rng::from_seed(606);
    let mut bins = Vec::new();
    let mut worst = 0.0f64;
    for t in 1..=10_000 {
        let j = r.random_range(0..32);
        bins.push(j);
        state.ewma_step(j).unwrap();
        if t % 250 == 0 {
            let z = ewma_closed_form(expected.as_slice(), &bins, 0.05);
            for (a, b) in z.iter().zip(state.z()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let a = check(
        worst <= 1e-12,
        &mut d,
        format!("EWMA recursion vs closed form: max |diff| {worst:.2e} over 1e4 steps"),
    );

    let uniform = ExpectedProbs::new(&pi, 1 << 50).unwrap();
    let mut one = DetectorState::new(&uniform, 0.05).unwrap();
    let mut gap = 0.0f64;
    for t in 1..=1000 {
        let stat = one.ewma_step(7).unwrap();
        if t >= 400 {
            gap = gap.max((stat - 31.0).abs());
        }
    }
    let b = check(
        gap <= 1e-3,
        &mut d,
        format!("all-one-bin stream: max |T_t - 31| for t >= 400 is {gap:.2e}"),
    );

    let draws = 100_000;
    let mut mean = vec![0.0; 32];
    let mut dr = rng::from_seed(607);
    for _ in 0..draws {
        for (m, p) in mean
            .iter_mut()
            .zip(sample_bin_probs(&pi, 4096, &mut dr).unwrap())
        {
            *m += p / draws as f64;
        }
    }
    let e0 = (mean[0] - 128.0 / 4097.0).abs();
    let e31 = (mean[31] - 129.0 / 4097.0).abs();
    let worst_bounded = mean[..31]
        .iter()
        .map(|m| (m - 128.0 / 4097.0).abs())
        .fold(0.0, f64::max);
    let c = check(
        worst_bounded <= 1e-3 && e31 <= 1e-3,
        &mut d,
        format!("Dirichlet mean: bin 1 off by {e0:.2e}, worst bounded bin {worst_bounded:.2e}, residual {e31:.2e}"),
    );
    (a && b && c, d)
}

fn construction_exactness() -> Outcome {
    let mut d = Vec::new();
    let kernels = [
        KernelKind::Mahalanobis,
        KernelKind::WeightedMahalanobis { components: 4 },
        KernelKind::Lp { p: 2.0 },
        KernelKind::AxisAligned,
    ];
    let mut all = true;
    for kernel in kernels {
        let mut exact = 0;
        let mut failures = Vec::new();
        for i in 0..100u64 {
            let dim = [2, 4, 8][(i % 3) as usize];
            let n = [128, 1024][((i / 3) % 2) as usize];
            let mut r = rng::rng(707, "instance", i);
            let source = if i % 2 == 0 {
                synthetic::Source::Gaussian(GaussianSpec::random(dim, &mut r).unwrap())
            } else {
                synthetic::Source::Mixture(synthetic::random_mixture(dim, 3, 3.0, &mut r).unwrap())
            };
            let train = source.sample(n, &mut r);
            let cfg = BuildConfig {
                kernel,
                candidates: 25,
                seed: i,
                ..BuildConfig::default()
            };
            match build_histogram(&train, &cfg) {
                Ok(h) => {
                    let mut counts = vec![0usize; 32];
                    for x in train.rows() {
                        counts[h.assign_bin(x).unwrap()] += 1;
                    }
                    if counts.iter().all(|c| *c == n / 32) {
                        exact += 1;
                    } else {
                        failures.push(format!("instance {i}: counts {counts:?}"));
                    }
                }
                Err(e) => failures.push(format!("instance {i}: {e}")),
            }
        }
        all &= check(
            exact == 100,
            &mut d,
            format!(
                "{}: {exact}/100 instances reproduce L_j = N/32",
                kernel.name()
            ),
        );
        for f in failures.iter().take(3) {
            d.push(format!("       {f}"));
        }
    }
    (all, d)
}

fn log_density_1d(x: f64, mu: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mu) * (x - mu) / var)
}

fn log_density_2d(x: [f64; 2], mu: [f64; 2], s: [[f64; 2]; 2]) -> f64 {
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let (a, b) = (x[0] - mu[0], x[1] - mu[1]);
    let q = (s[1][1] * a * a - 2.0 * s[0][1] * a * b + s[0][0] * b * b) / det;
    -0.5 * ((2.0 * std::f64::consts::PI).powi(2) * det).ln() - 0.5 * q
}

/// `KL(p||q) + KL(q||p)` by Simpson quadrature on `[lo, hi]`.
fn numeric_skl_1d(m: [f64; 2], v: [f64; 2]) -> f64 {
    let sd = v[0].sqrt().max(v[1].sqrt());
    let (lo, hi) = (m[0].min(m[1]) - 14.0 * sd, m[0].max(m[1]) + 14.0 * sd);
    let n = 40_000;
    let h = (hi - lo) / n as f64;
    let mut total = 0.0;
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let (lp, lq) = (log_density_1d(x, m[0], v[0]), log_density_1d(x, m[1], v[1]));
        let f = (lp.exp() - lq.exp()) * (lp - lq);
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        total += w * f;
    }
    total * h / 3.0
}

fn numeric_skl_2d(ma: [f64; 2], sa: [[f64; 2]; 2], mb: [f64; 2], sb: [[f64; 2]; 2]) -> f64 {
    let sd = [sa[0][0].max(sb[0][0]).sqrt(), sa[1][1].max(sb[1][1]).sqrt()];
    let lo = [
        ma[0].min(mb[0]) - 12.0 * sd[0],
        ma[1].min(mb[1]) - 12.0 * sd[1],
    ];
    let hi = [
        ma[0].max(mb[0]) + 12.0 * sd[0],
        ma[1].max(mb[1]) + 12.0 * sd[1],
    ];
    let n = 1200;
    let h = [(hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let x = [
                lo[0] + (i as f64 + 0.5) * h[0],
                lo[1] + (j as f64 + 0.5) * h[1],
            ];
            let (lp, lq) = (log_density_2d(x, ma, sa), log_density_2d(x, mb, sb));
            total += (lp.exp() - lq.exp()) * (lp - lq);
        }
    }
    total * h[0] * h[1]
}

fn gaussian(mean: Vec<f64>, cov: DMatrix<f64>) -> GaussianSpec {
    GaussianSpec::new(DVector::from_vec(mean), cov).unwrap()
}

fn skl_oracle() -> Outcome {
    let mut d = Vec::new();
    let mut r: Rng = rng::from_seed(808);
    let mut worst = 0.0f64;
    for pair in 0..20 {
        let dim = if pair < 10 { 1 } else { 2 };
        let ca = synthetic::random_covariance(dim, &mut r);
        let cb = synthetic::random_covariance(dim, &mut r);
        let ma: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let mb: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let closed = synthetic::skl_gaussian(
            &gaussian(ma.clone(), ca.clone()),
            &gaussian(mb.clone(), cb.clone()),
        )
        .unwrap();
        let numeric = if dim == 1 {
            numeric_skl_1d([ma[0], mb[0]], [ca[(0, 0)], cb[(0, 0)]])
        } else {
            let m2 = |m: &DMatrix<f64>| [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]];
            numeric_skl_2d([ma[0], ma[1]], m2(&ca), [mb[0], mb[1]], m2(&cb))
        };
        worst = worst.max((closed - numeric).abs() / numeric);
    }
    let a = check(
        worst <= 0.02,
        &mut d,
        format!("closed form vs quadrature on 20 pairs: worst relative error {worst:.2e}"),
    );

    let g = GaussianSpec::random(4, &mut r).unwrap();
    let mut miss = 0.0f64;
    for target in [0.5, 1.0, 1.5, 2.0, 2.5, 3.0] {
        let c = synthetic::make_change(&g, target, &mut r).unwrap();
        let moved = c.apply_gaussian(&g).unwrap();
        miss = miss.max((synthetic::skl_gaussian(&g, &moved).unwrap() - target).abs());
    }
    let b = check(
        miss <= 1e-4,
        &mut d,
        format!("make_change on d=4 targets 0.5..3: worst |sKL - target| {miss:.2e}"),
    );
    (a && b, d)
}

fn per_sample_seconds(dim: usize) -> f64 {
    let mut r = rng::rng(909, "hot-path", dim as u64);
    let mixture = synthetic::random_mixture(dim, 4, 3.0, &mut r).unwrap();
    let train = synthetic::sample_mixture(&mixture, 4096, &mut r);
    let cfg = BuildConfig {
        kernel: KernelKind::WeightedMahalanobis { components: 4 },
        candidates: 2,
        seed: 1,
        ..BuildConfig::default()
    };
    let hist = build_histogram(&train, &cfg).unwrap();
    let table = ThresholdTable::new(
        0.002,
        0.05,
        hist.target_probs().to_vec(),
        hist.train_size(),
        vec![f64::INFINITY],
    )
    .unwrap();
    let n = (400_000 / (dim * dim)).clamp(2_000, 50_000);
    let stream: Dataset = synthetic::sample_mixture(&mixture, n, &mut r);
    let mut times = Vec::new();
    for _ in 0..7 {
        let mut det = Detector::new(&hist, &table).unwrap();
        let start = Instant::now();
        for x in stream.rows() {
            det.push(x).unwrap();
        }
        times.push(start.elapsed().as_secs_f64() / n as f64);
    }
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

fn hot_path() -> Outcome {
    let mut d = Vec::new();
    let dims = [4usize, 16, 64];
    let secs: Vec<f64> = dims.iter().map(|&k| per_sample_seconds(k)).collect();
    let xs: Vec<f64> = dims.iter().map(|&k| (k as f64).ln()).collect();
    let ys: Vec<f64> = secs.iter().map(|s| s.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
    for (k, s) in dims.iter().zip(&secs) {
        d.push(format!("     d={k}: {:.3} us/sample", s * 1e6));
    }
    let a = check(
        slope <= 2.0,
        &mut d,
        format!("log-log slope of median cost vs d: {slope:.2} (<= 2)"),
    );
    let rate = 1.0 / secs[0];
    let b = check(
        rate >= 1e5,
        &mut d,
        format!("throughput at d=4: {rate:.0} samples/s (>= 1e5)"),
    );
    (a && b, d)
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("ARL0 control across distributions", arl0_control),
        ("false-alarm rate geometry", fa_geometry),
        ("multimodal delay advantage", multimodal_advantage),
        ("delay decreases with change magnitude", delay_monotonicity),
        ("small training set loses ARL0 control", small_n),
        ("statistic oracles", statistic_oracles),
        ("construction exactness", construction_exactness),
        ("sKL oracle", skl_oracle),
        ("hot-path budget", hot_path),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (ok, details) = f();
        println!(
            "criterion {id} {name}: {} ({:.1}s)",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        for line in details {
            println!("    {line}");
        }
        if !ok {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
