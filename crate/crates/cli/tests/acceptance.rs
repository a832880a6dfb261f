//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! they run one after another in a single test so the timed ones get the
//! whole machine.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::*;
use frk_cli::commands::score_samples;
use frk_core::covpar::{
    ar1_precision, build_q_dist, build_q_leroux, build_q_spacetime, to_dense, CoefPrior, DistanceParams, LerouxParams,
    PriorParams, PriorVariant, DEFAULT_TAPER,
};
use frk_core::diagnostics::{brier, coverage, crps_empirical, interval_score};
use frk_core::estimate::{fit_default, FitOptions, StateSpec};
use frk_core::geometry::{build_bau_grid, build_incidence, map_supports, BauGrid, Rect, Support, SupportKind};
use frk_core::laplace::{gradient, complete_loglik, laplace_objective};
use frk_core::predict::{predict, sample_latent, summarize, Target};
use frk_core::simulate::{simulate, Scenario, SimOptions, Simulation};
use frk_core::{auto_basis, temporal_basis, tensor_basis, CsrMatrix, Family, Link, Model, ModelBasis};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SEEDS: std::ops::RangeInclusive<u64> = 1..=10;
const N_MC: usize = 400;
const BUDGET_S: f64 = 600.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// Gaussian data: Laplace value equals the exact marginal and MC moments match
// the closed-form posterior.
fn criterion_1() -> Outcome {
    let start = Instant::now();
    let n_mc = 2000;
    let mut worst_rel = 0.0f64;
    let mut worst_frac = 1.0f64;
    let variants = [PriorVariant::KTapered, PriorVariant::QLeroux, PriorVariant::QDist];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..20 {
        let nx = rng.random_range(3..=20);
        let ny = rng.random_range(3..=(200 / nx).min(20));
        let mut spec = InstanceSpec::new(Family::Gaussian, Link::Identity);
        spec.nx = nx;
        spec.ny = ny;
        spec.n_points = rng.random_range(5..40);
        spec.n_rects = rng.random_range(0..10);
        spec.variant = variants[i % 3];
        spec.normalise = rng.random_bool(0.5);
        let inst = random_instance(&spec, 7000 + i as u64);
        let lap = laplace_objective(&inst.model, &inst.state, None).unwrap();
        let exact = gaussian_marginal(&inst.model, &inst.state);
        worst_rel = worst_rel.max((lap.loglik - exact).abs() / exact.abs());
        let y = sample_latent(&inst.model, &inst.state, &lap, n_mc, i as u64).unwrap();
        let summ = summarize(&y, &[]).unwrap();
        let (mean, sd) = gaussian_y_posterior(&inst);
        let n = mean.len();
        let ok = (0..n).filter(|&b| (summ.mean[b] - mean[b]).abs() <= 4.0 * sd[b] / (n_mc as f64).sqrt()).count();
        worst_frac = worst_frac.min(ok as f64 / n as f64);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_rel < 1e-8 && worst_frac >= 0.99 && secs < 60.0,
        format!("20 instances: max rel loglik error {worst_rel:.2e}, min share of MC means within 4 se {worst_frac:.3}, {secs:.1} s"),
    )
}

// Analytic gradient of the complete log-likelihood against central differences.
fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    let pairs = supported_pairs();
    for (i, &(family, link)) in pairs.iter().enumerate() {
        let inst = random_instance(&InstanceSpec::new(family, link), 300 + i as u64);
        for rep in 0..10 {
            let u = random_u(&inst, 5000 * i as u64 + rep);
            let g = gradient(&inst.model, &inst.state, &u).unwrap();
            let mut fd = vec![0.0; u.len()];
            for c in 0..u.len() {
                let h = 1e-6 * u[c].abs().max(1.0);
                let mut up = u.clone();
                up[c] += h;
                let mut dn = u.clone();
                dn[c] -= h;
                let f_up = complete_loglik(&inst.model, &inst.state, &up).unwrap();
                let f_dn = complete_loglik(&inst.model, &inst.state, &dn).unwrap();
                fd[c] = (f_up - f_dn) / (2.0 * h);
            }
            let scale = g.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            worst = worst.max(max_abs_diff(&g, &fd) / scale);
        }
    }
    outcome(worst < 1e-5, format!("{} family/link pairs x 10 points: max rel error {worst:.2e}", pairs.len()))
}

struct Run {
    mu: DMatrix<f64>,
    converged: bool,
}

fn fit_and_predict(sim: &Simulation, n_res: usize, r_t: usize, fs_by_spatial_bau: bool, seed: u64) -> Run {
    let mut grid = sim.grid.clone();
    grid.use_linear_trend();
    let set = map_supports(&grid, sim.supports.clone(), SupportKind::Observation).unwrap();
    let spatial = auto_basis(grid.bbox(), n_res).unwrap();
    let basis = if grid.n_time() > 1 {
        ModelBasis::SpaceTime(tensor_basis(spatial, temporal_basis(grid.n_time(), r_t).unwrap()))
    } else {
        ModelBasis::Spatial(spatial)
    };
    let model = Model::new(grid, Some(basis), set, sim.z.clone(), sim.family, sim.link, true, true).unwrap();
    let spec = StateSpec {
        variant: PriorVariant::QLeroux,
        taper_multiplier: DEFAULT_TAPER,
        fs_by_spatial_bau,
        known_sigma2fs: None,
    };
    let res = fit_default(&model, &spec, &FitOptions::default()).unwrap();
    let pred = predict(&model, &res.state, &res.laplace, None, N_MC, seed).unwrap();
    Run { mu: pred.get(Target::Mean).unwrap().clone(), converged: res.report.converged }
}

fn rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    m.select_rows(idx)
}

fn unobserved(sim: &Simulation) -> Vec<usize> {
    (0..sim.grid.len()).filter(|&i| !sim.truth.observed[i]).collect()
}

// Resolution sweep on the Poisson point scenario.
fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut decreasing = 0;
    let mut cvg = [Vec::new(), Vec::new(), Vec::new()];
    for seed in SEEDS {
        let sim = simulate(Scenario::PoissonPoint, seed, &SimOptions::default()).unwrap();
        let idx = unobserved(&sim);
        let truth: Vec<f64> = idx.iter().map(|&i| sim.truth.mean[i]).collect();
        let mut rmspe = Vec::new();
        for n_res in 1..=3 {
            let run = fit_and_predict(&sim, n_res, 1, false, seed);
            let s = score_samples(&truth, &rows(&run.mu, &idx), false).unwrap();
            rmspe.push(s.rmspe);
            cvg[n_res - 1].push(s.cvg90);
        }
        if rmspe[0] > rmspe[1] && rmspe[1] > rmspe[2] {
            decreasing += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let means: Vec<f64> = cvg.iter().map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let all = cvg.iter().flatten().copied();
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let strict = cvg.iter().flatten().filter(|&&v| (0.85..=0.95).contains(&v)).count();
    outcome(
        decreasing >= 8 && means.iter().all(|m| (0.85..=0.95).contains(m)) && secs < BUDGET_S,
        format!(
            "RMSPE decreasing in {decreasing}/10 seeds; mean Cvg90 by n_res {:.3}/{:.3}/{:.3} \
             (replicates {lo:.3}..{hi:.3}, {strict}/30 inside [0.85, 0.95]); {secs:.0} s",
            means[0], means[1], means[2]
        ),
    )
}

// Areal negative-binomial data with partially observed blocks.
fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut cvg = Vec::new();
    for seed in SEEDS {
        let sim = simulate(Scenario::NegbinAreal, seed, &SimOptions::default()).unwrap();
        let idx = unobserved(&sim);
        let truth: Vec<f64> = idx.iter().map(|&i| sim.truth.mean[i]).collect();
        let run = fit_and_predict(&sim, 2, 1, false, seed);
        cvg.push(score_samples(&truth, &rows(&run.mu, &idx), false).unwrap().cvg90);
    }
    let secs = start.elapsed().as_secs_f64();
    let mean = cvg.iter().sum::<f64>() / cvg.len() as f64;
    outcome(
        (0.85..=0.97).contains(&mean) && secs < BUDGET_S,
        format!("mean Cvg90 over unobserved BAUs {mean:.3} across 10 seeds; {secs:.0} s"),
    )
}

fn brute_force_sets(grid: &BauGrid, supports: &[Support]) -> Vec<Vec<usize>> {
    let ns = grid.n_spatial();
    supports
        .iter()
        .map(|sup| {
            let fp = match &sup.footprint {
                frk_core::Footprint::Point { x, y } => Rect { xmin: *x, ymin: *y, xmax: *x, ymax: *y },
                frk_core::Footprint::Rect(r) => *r,
                frk_core::Footprint::Baus(_) => unreachable!(),
            };
            let mut set = Vec::new();
            for t in 0..grid.n_time() {
                if sup.time.is_some_and(|st| st != t) {
                    continue;
                }
                for s in 0..ns {
                    let c = grid.cell(s);
                    if c.xmin <= fp.xmax && fp.xmin <= c.xmax && c.ymin <= fp.ymax && fp.ymin <= c.ymax {
                        set.push(t * ns + s);
                    }
                }
            }
            set
        })
        .collect()
}

fn dense_incidence(grid: &BauGrid, sets: &[Vec<usize>], normalise: bool, unit: bool) -> DMatrix<f64> {
    let v = grid.rel_weights();
    let mut m = DMatrix::zeros(sets.len(), grid.len());
    for (j, set) in sets.iter().enumerate() {
        let mut total = 0.0;
        for &i in set {
            total += v[i];
        }
        for &i in set {
            m[(j, i)] = if unit {
                1.0
            } else if normalise {
                v[i] / total
            } else {
                v[i]
            };
        }
    }
    m
}

// Incidence matrices against a brute-force scan of every cell.
fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..100 {
        let (x0, y0) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let bbox = Rect::new(x0, y0, x0 + rng.random_range(0.5..10.0), y0 + rng.random_range(0.5..10.0)).unwrap();
        let (nx, ny) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let n_time = if rng.random_bool(0.3) { rng.random_range(2..=4) } else { 1 };
        let mut grid = build_bau_grid(bbox, nx, ny, n_time).unwrap();
        grid.set_rel_weights((0..grid.len()).map(|_| rng.random_range(0.1..3.0)).collect()).unwrap();
        let (cw, ch) = (bbox.width() / nx as f64, bbox.height() / ny as f64);
        let mut supports = Vec::new();
        while supports.len() < rng.random_range(1..=30) {
            let sup = match rng.random_range(0..3) {
                0 => Support::point(rng.random_range(bbox.xmin..bbox.xmax), rng.random_range(bbox.ymin..bbox.ymax)),
                // points on interior cell edges
                1 => Support::point(
                    bbox.xmin + rng.random_range(0..=nx) as f64 * cw,
                    bbox.ymin + rng.random_range(0..=ny) as f64 * ch,
                ),
                _ => {
                    let x = rng.random_range(bbox.xmin - 1.0..bbox.xmax);
                    let y = rng.random_range(bbox.ymin - 1.0..bbox.ymax);
                    Support::rect(Rect::new(x, y, x + rng.random_range(0.0..3.0), y + rng.random_range(0.0..3.0)).unwrap())
                }
            };
            let sup = if n_time > 1 && rng.random_bool(0.5) { sup.at_time(rng.random_range(0..n_time)) } else { sup };
            if !brute_force_sets(&grid, std::slice::from_ref(&sup))[0].is_empty() {
                supports.push(sup);
            }
        }
        let expected = brute_force_sets(&grid, &supports);
        let set = map_supports(&grid, supports, SupportKind::Observation).unwrap();
        if set.bau_index_sets != expected {
            mismatches += 1;
            continue;
        }
        for (normalise, unit) in [(true, false), (false, false), (true, true)] {
            let got = to_dense(&build_incidence(&grid, &set, normalise, unit).matrix);
            if got != dense_incidence(&grid, &expected, normalise, unit) {
                mismatches += 1;
            }
        }
    }
    let grid = build_bau_grid(Rect::new(0.0, 0.0, 3.0, 4.0).unwrap(), 3, 4, 1).unwrap();
    let example = vec![
        Support::rect(Rect::new(0.25, 2.25, 0.9, 3.25).unwrap()),
        Support::point(2.75, 2.75),
        Support::rect(Rect::new(0.15, 0.15, 1.85, 0.9).unwrap()),
    ];
    let sets = map_supports(&grid, example, SupportKind::Observation).unwrap().bau_index_sets;
    let example_ok = sets == vec![vec![0, 3], vec![5], vec![9, 10]];
    outcome(
        mismatches == 0 && example_ok,
        format!("100 random grids: {mismatches} mismatches; 3x4 worked example gives {sets:?}"),
    )
}

fn random_spd<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let mut m: DMatrix<f64> = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            if rng.random_bool(0.2) {
                let v = rng.random_range(-1.0..1.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
    }
    for i in 0..n {
        m[(i, i)] = m.row(i).iter().map(|v: &f64| v.abs()).sum::<f64>() + rng.random_range(0.1..1.0);
    }
    m
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    10f64.powf(rng.random_range(lo..hi))
}

// Space-time Kronecker precision, and positive-definiteness of the precision variants.
fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let r_t = rng.random_range(1..=20);
        let q_t = if rng.random_bool(0.5) {
            to_dense(&ar1_precision(r_t, rng.random_range(-0.95..0.95)).unwrap())
        } else {
            random_spd(r_t, &mut rng)
        };
        let q_s = random_spd(rng.random_range(1..=20), &mut rng);
        let got = to_dense(&build_q_spacetime(&CsrMatrix::from(&q_t), &CsrMatrix::from(&q_s)));
        let want = q_t.kronecker(&q_s);
        let scale = want.amax().max(1.0);
        worst = worst.max((got - want).amax() / scale);
    }
    let bases: Vec<_> = [(1, 1.0), (2, 1.0), (1, 2.5), (2, 0.4)]
        .iter()
        .map(|&(n_res, w)| auto_basis(Rect::new(0.0, 0.0, w, 1.0).unwrap(), n_res).unwrap())
        .collect();
    let mut failures = 0;
    for draw in 0..1000 {
        let basis = &bases[draw % bases.len()];
        let n_res = basis.n_res();
        let taper = rng.random_range(1.5..5.0);
        let rho = |rng: &mut ChaCha8Rng| if rng.random_bool(0.1) { 0.0 } else { log_uniform(rng, -3.0, 3.0) };
        let q = if draw % 2 == 0 {
            let params = (0..n_res).map(|_| LerouxParams { kappa: log_uniform(&mut rng, -3.0, 3.0), rho: rho(&mut rng) });
            let prior = CoefPrior { params: PriorParams::Leroux(params.collect()), taper_multiplier: taper, temporal_rho: None };
            build_q_leroux(basis, &prior).unwrap()
        } else {
            let params = (0..n_res).map(|_| DistanceParams {
                kappa: log_uniform(&mut rng, -3.0, 3.0),
                rho: rho(&mut rng),
                length: log_uniform(&mut rng, -2.0, 1.0),
            });
            let prior = CoefPrior { params: PriorParams::Distance(params.collect()), taper_multiplier: taper, temporal_rho: None };
            build_q_dist(basis, &prior).unwrap()
        };
        let d = to_dense(&q);
        if d != d.transpose() || d.cholesky().is_none() {
            failures += 1;
        }
    }
    outcome(
        worst < 1e-14 && failures == 0,
        format!("Kronecker max rel error {worst:.1e} over 50 pairs; {failures}/1000 precision draws not SPD"),
    )
}

fn gaussian_crps(mu: f64, sigma: f64, y: f64) -> f64 {
    use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};
    let z = (y - mu) / sigma;
    let n = StdNormal::new(0.0, 1.0).unwrap();
    sigma * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - 1.0 / std::f64::consts::PI.sqrt())
}

// Scoring rules against closed forms and hand-worked values.
fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 10_000;
    let cases = [(0.0, 1.0, 0.3), (2.0, 0.5, 1.0), (-1.0, 3.0, 4.0), (5.0, 2.0, 5.0), (0.0, 1.0, -2.5)];
    let mut worst = 0.0f64;
    for &(mu, sigma, y) in &cases {
        let dist = Normal::new(mu, sigma).unwrap();
        let samples = DMatrix::from_fn(1, n, |_, _| dist.sample(&mut rng));
        let got = crps_empirical(&[y], &samples).unwrap();
        worst = worst.max((got - gaussian_crps(mu, sigma, y)).abs() / gaussian_crps(mu, sigma, y));
    }
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let hand = [
        close(interval_score(&[2.0], &[0.0], &[1.0], 0.1).unwrap(), 21.0),
        close(interval_score(&[-1.0], &[0.0], &[1.0], 0.1).unwrap(), 21.0),
        close(interval_score(&[0.5, 1.0], &[0.0, 0.0], &[1.0, 3.0], 0.1).unwrap(), 2.0),
        close(coverage(&[0.5, 0.6], &[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0),
        close(coverage(&[2.0, -2.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0),
        close(coverage(&[0.5, 0.5, 0.5, 5.0], &[0.0; 4], &[1.0; 4]).unwrap(), 0.75),
        close(brier(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0),
        close(brier(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 0.25),
        close(brier(&[1.0, 0.0], &[0.8, 0.4]).unwrap(), 0.10),
        close(crps_empirical(&[0.0], &DMatrix::from_row_slice(1, 2, &[0.0, 1.0])).unwrap(), 0.25),
    ];
    let hand_ok = hand.iter().filter(|&&b| b).count();
    outcome(
        worst < 0.02 && hand_ok == hand.len(),
        format!("CRPS max rel error {:.2}% vs closed form; {hand_ok}/{} hand examples", 100.0 * worst, hand.len()),
    )
}

// Held-out time slice in the space-time scenario.
fn criterion_8() -> Outcome {
    let start = Instant::now();
    let mut good = 0;
    let mut converged = 0;
    let mut cvgs = Vec::new();
    for seed in SEEDS {
        let sim = simulate(Scenario::PoissonSpacetime, seed, &SimOptions::default()).unwrap();
        let t = sim.held_out_time.unwrap();
        let ns = sim.grid.n_spatial();
        let idx: Vec<usize> = (t * ns..(t + 1) * ns).collect();
        let truth: Vec<f64> = idx.iter().map(|&i| sim.truth.mean[i]).collect();
        let run = fit_and_predict(&sim, 1, 4, true, seed);
        let c = score_samples(&truth, &rows(&run.mu, &idx), false).unwrap().cvg90;
        converged += run.converged as usize;
        good += (c >= 0.8) as usize;
        cvgs.push(format!("{c:.2}"));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        converged == 10 && good >= 8 && secs < BUDGET_S,
        format!("{converged}/10 fits converged; Cvg90 >= 0.8 in {good}/10 held-out slices [{}]; {secs:.0} s", cvgs.join(" ")),
    )
}

fn pipeline(dir: &Path) -> Result<(), String> {
    let config = dir.join("run.toml");
    std::fs::write(
        &config,
        "seed = 2024\n[paths]\noutput_dir = \".\"\n[simulate]\nscenario = \"poisson_point\"\n\
         [model]\nfamily = \"poisson\"\nn_res = 2\n",
    )
    .unwrap();
    for cmd in ["simulate", "fit", "predict", "score"] {
        let out = Command::new(env!("CARGO_BIN_EXE_frk")).args([cmd, "--config"]).arg(&config).output().unwrap();
        if !out.status.success() {
            return Err(format!("{cmd}: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

// Two CLI runs with the same seed produce identical files.
fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        std::fs::create_dir(d).unwrap();
        if let Err(e) = pipeline(d) {
            return outcome(false, e);
        }
    }
    // the fit state and report carry wall-clock timings
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "fit_state.bin" && n != "fit_report.json")
        .collect();
    names.sort();
    let differing: Vec<&String> =
        names.iter().filter(|n| std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok()).collect();
    let needed = ["data.csv", "truth.csv", "predictions.csv", "scores.csv", "samples.bin"];
    let present = needed.iter().all(|n| names.iter().any(|m| m == n));
    outcome(
        present && differing.is_empty(),
        format!("{} files compared ({}); differing: {differing:?}", names.len(), names.join(", ")),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("Gaussian Laplace exactness and MC moments", criterion_1),
        ("gradient vs central differences", criterion_2),
        ("Poisson resolution sweep", criterion_3),
        ("negative-binomial areal coverage", criterion_4),
        ("incidence matrices vs brute force", criterion_5),
        ("space-time Kronecker and SPD precisions", criterion_6),
        ("scoring rules", criterion_7),
        ("space-time held-out slice", criterion_8),
        ("byte-identical CLI reruns", criterion_9),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        // written past the test harness's capture so the lines reach the log
        let mut out = std::io::stdout().lock();
        writeln!(out, "[{}] {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail).unwrap();
        out.flush().unwrap();
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
