//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::BTreeMap;
use std::time::Instant;

use influence_core::cascade::{Cascade, CascadeSet};
use influence_core::change::{self, ChangeKind};
use influence_core::citation::{self, FeatureRow, Model};
use influence_core::exec::Execution;
use influence_core::fixture::{self, FixtureConfig};
use influence_core::hawkes::{self, FitOptions, HawkesModel};
use influence_core::io::hash_file;
use influence_core::influence::{quantile_bins, z_normalize_by_year, Quantile};
use influence_core::pipeline::{self, Evaluation, PipelineConfig};
use influence_core::sense::{self, Sense};
use influence_core::stats::{chi2_sf, mean, median, pearson, variance};
use influence_core::store::{self, EmbeddedUsage, WordMoments};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn hawkes_recovery() -> Check {
    // Two documents per year; influence spans a wide range so the
    // fixed-effect bias from per-cascade base rates stays small.
    let years = (1990, 2019);
    let dpy = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let alpha: Vec<f64> = (0..30 * dpy).map(|_| rng.random_range(0.5..3.0)).collect();
    let base: Vec<f64> = (0..500).map(|_| rng.random_range(0.15..0.45)).collect();
    let set = hawkes::simulate(&alpha, &base, 1.0, dpy, years, 11).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let opts = FitOptions {
        exec: Execution::Sequential,
        ..FitOptions::default()
    };
    let fit = hawkes::fit(&set, 1.0, 0.0, 0, &opts).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    // Last-year documents have nothing after them to excite.
    let n = 29 * dpy;
    let est = &fit.model.alpha[..n];
    let truth = &alpha[..n];
    let r = pearson(est, truth);
    let rel: Vec<f64> = est.iter().zip(truth).map(|(e, t)| (e - t).abs() / t).collect();
    let med = median(&rel);
    verdict(
        r >= 0.9 && med <= 0.15 && secs <= 60.0,
        format!("pearson {r:.3}, median relative error {med:.3}, {secs:.1}s single-threaded"),
    )
}

fn naive_ll(model: &HawkesModel, set: &CascadeSet) -> f64 {
    let mut ll = 0.0;
    for (w, c) in set.cascades.iter().enumerate() {
        for t in set.year_range.0..=set.year_range.1 {
            let mut lambda = model.base[w];
            let mut n = 0.0;
            for &(y, p) in &c.events {
                if y < t {
                    lambda += model.alpha[p as usize] * (-model.gamma * f64::from(t - y)).exp();
                }
                if y == t {
                    n += 1.0;
                }
            }
            ll += n * lambda.ln() - lambda;
        }
    }
    ll
}

fn random_instance(rng: &mut ChaCha8Rng) -> (HawkesModel, CascadeSet) {
    let n_docs = rng.random_range(3..8);
    let years = (2000, 2000 + rng.random_range(3..9));
    let n_casc = rng.random_range(1..5);
    let cascades = (0..n_casc)
        .map(|w| {
            let events = (0..rng.random_range(1..15))
                .map(|_| (rng.random_range(years.0..=years.1), rng.random_range(0..n_docs as u32)))
                .collect();
            Cascade::new(format!("w{w}"), ChangeKind::Semantic, None, events)
        })
        .collect();
    let gammas = [0.1, 0.5, 1.0, 2.0];
    let model = HawkesModel {
        alpha: (0..n_docs).map(|_| rng.random_range(0.01..2.0)).collect(),
        base: (0..n_casc).map(|_| rng.random_range(0.05..3.0)).collect(),
        gamma: gammas[rng.random_range(0..gammas.len())],
    };
    let set = CascadeSet {
        year_range: years,
        doc_ids: (0..n_docs).map(|d| format!("d{d}")).collect(),
        cascades,
    };
    (model, set)
}

fn gradient_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-5;
    let (mut worst_grad, mut worst_ll) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (model, set) = random_instance(&mut rng);
        let ll = hawkes::log_likelihood(&model, &set, Execution::Sequential).map_err(|e| e.to_string())?;
        let oracle = naive_ll(&model, &set);
        worst_ll = worst_ll.max((ll - oracle).abs() / oracle.abs().max(1.0));
        let g = hawkes::gradient(&model, &set, Execution::Sequential).map_err(|e| e.to_string())?;
        let mut check = |analytic: f64, bump: &dyn Fn(&mut HawkesModel, f64)| {
            let (mut up, mut down) = (model.clone(), model.clone());
            bump(&mut up, h);
            bump(&mut down, -h);
            let fd = (naive_ll(&up, &set) - naive_ll(&down, &set)) / (2.0 * h);
            worst_grad = worst_grad.max((analytic - fd).abs() / fd.abs().max(1.0));
        };
        for p in 0..model.alpha.len() {
            check(g.alpha[p], &|m, d| m.alpha[p] += d);
        }
        for w in 0..model.base.len() {
            check(g.base[w], &|m, d| m.base[w] += d);
        }
    }
    verdict(
        worst_grad <= 1e-4 && worst_ll <= 1e-10,
        format!("max gradient deviation {worst_grad:.2e}, max LL deviation {worst_ll:.2e} over 50 instances"),
    )
}

fn bandwidth_selection() -> Check {
    let gamma: f64 = 10.0;
    let years = (2000, 2019);
    let dpy = 4;
    let mut picks = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        // Scale by e^gamma so a document raises next year's rate by 0.2-0.8.
        let alpha: Vec<f64> = (0..20 * dpy).map(|_| rng.random_range(0.2..0.8) * gamma.exp()).collect();
        let base: Vec<f64> = (0..200).map(|_| rng.random_range(0.5..1.5)).collect();
        let set = hawkes::simulate(&alpha, &base, gamma, dpy, years, seed).map_err(|e| e.to_string())?;
        let (chosen, _) = hawkes::select_bandwidth(&set, &hawkes::DEFAULT_GAMMA_GRID, 0.2, seed, &FitOptions::default())
            .map_err(|e| e.to_string())?;
        picks.push(chosen);
    }
    let hits = picks.iter().filter(|&&g| g == 10.0 || g == 100.0).count();
    verdict(hits >= 9, format!("{hits}/10 seeds chose 10 or 100: {picks:?}"))
}

/// Two-pass score from the raw usages, split explicitly at `t`.
fn brute_force_score(usages: &[(i32, Vec<f32>)], t: i32) -> Option<f64> {
    let dim = usages[0].1.len();
    let n = usages.len() as f64;
    let (pre, post): (Vec<_>, Vec<_>) = usages.iter().partition(|(y, _)| *y <= t);
    if pre.is_empty() || post.is_empty() {
        return None;
    }
    let mean_of = |xs: &[&(i32, Vec<f32>)], d: usize| xs.iter().map(|(_, v)| f64::from(v[d])).sum::<f64>() / xs.len() as f64;
    let mut dist = 0.0;
    for d in 0..dim {
        let mu = usages.iter().map(|(_, v)| f64::from(v[d])).sum::<f64>() / n;
        let s = usages.iter().map(|(_, v)| (f64::from(v[d]) - mu).powi(2)).sum::<f64>() / n;
        let delta = mean_of(&pre, d) - mean_of(&post, d);
        dist += delta * delta / s.max(change::VARIANCE_FLOOR);
    }
    Some(((pre.len() * post.len()) as f64).sqrt() * dist)
}

fn semantic_detection() -> Check {
    let years = (1990, 2019);
    let dim = 8;
    let n_stable = 500;
    let n_shift = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut usages = Vec::new();
    let mut per_word: Vec<Vec<(i32, Vec<f32>)>> = Vec::new();
    let mut planted = BTreeMap::new();
    for w in 0..(n_stable + n_shift) as u32 {
        let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let shift = if (w as usize) < n_shift {
            let t0 = rng.random_range(1995..2015);
            planted.insert(w, t0);
            Some((t0, (0..dim).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect::<Vec<f64>>()))
        } else {
            None
        };
        let mut mine = Vec::new();
        for y in years.0..=years.1 {
            for _ in 0..rng.random_range(5..15) {
                let moved = shift.as_ref().filter(|(t0, _)| y > *t0);
                let v: Vec<f32> = (0..dim)
                    .map(|d| (center[d] + moved.map_or(0.0, |(_, s)| s[d]) + noise.sample(&mut rng)) as f32)
                    .collect();
                usages.push(EmbeddedUsage {
                    word_id: w,
                    doc_id: 0,
                    year: y,
                    position: 0,
                    vector: v.clone(),
                });
                mine.push((y, v));
            }
        }
        per_word.push(mine);
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("usages.cemb");
    store::write_store(&usages, dim, &path).map_err(|e| e.to_string())?;
    let table = store::accumulate_moments(&path, per_word.len(), Some(years)).map_err(|e| e.to_string())?;
    let top = change::rank_semantic_changes(&table, per_word.len(), 30, Execution::default()).map_err(|e| e.to_string())?;
    let found: BTreeMap<u32, i32> = top.iter().map(|c| (c.word_id, c.t_star)).collect();
    let recovered = planted
        .iter()
        .filter(|(w, t0)| found.get(w).is_some_and(|t| (t - **t0).abs() <= 1))
        .count();

    let mut worst = 0.0f64;
    for (w, mine) in per_word.iter().enumerate().step_by(13) {
        for t in change::candidate_years(years) {
            let fast = change::semantic_change_score(&table.words[&(w as u32)], t).map_err(|e| e.to_string())?;
            let slow = brute_force_score(mine, t).ok_or("empty split")?;
            worst = worst.max((fast - slow).abs() / slow.abs().max(1e-300));
        }
    }
    verdict(
        recovered == n_shift && worst <= 1e-8,
        format!("{recovered}/{n_shift} planted words in top 30 with changepoint within 1 year; oracle deviation {worst:.2e}"),
    )
}

fn score_series(m: &WordMoments, years: &[i32]) -> Vec<f64> {
    years.iter().map(|&t| change::semantic_change_score(m, t).unwrap()).collect()
}

fn invariances() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let years: Vec<i32> = (2001..2010).collect();
    // Dyadic values keep translated vectors exactly representable.
    let data: Vec<(i32, Vec<f32>)> = (0..400)
        .map(|_| {
            let y = rng.random_range(2000..=2010);
            (y, (0..6).map(|_| rng.random_range(-64..64) as f32 / 16.0).collect())
        })
        .collect();
    let build = |f: &dyn Fn(f32) -> f32| {
        let mut m = WordMoments::new(6);
        for (y, v) in &data {
            m.push(*y, &v.iter().map(|&x| f(x)).collect::<Vec<_>>());
        }
        m
    };
    let plain = score_series(&build(&|x| x), &years);
    let shifted = score_series(&build(&|x| x + 32.0), &years);
    let scaled = score_series(&build(&|x| 2.0 * x), &years);
    let shift_ok = plain == shifted;
    let scale_ok = plain == scaled;

    let scores: BTreeMap<String, f64> = (0..137).map(|i| (format!("p{i:03}"), rng.random_range(-3.0..3.0))).collect();
    let bins = quantile_bins(&scores).map_err(|e| e.to_string())?;
    let transformed: BTreeMap<String, f64> = scores.iter().map(|(k, v)| (k.clone(), v.powi(3) + v.exp())).collect();
    let bins_ok = bins == quantile_bins(&transformed).map_err(|e| e.to_string())?;
    let sizes = [Quantile::Q1, Quantile::Q2, Quantile::Q3, Quantile::Q4].map(|q| bins.values().filter(|&&b| b == q).count());

    let doc_years: BTreeMap<String, i32> = scores.keys().map(|k| (k.clone(), 2000 + rng.random_range(0..5))).collect();
    let raw: BTreeMap<String, f64> = scores.keys().map(|k| (k.clone(), rng.random_range(0.0..50.0))).collect();
    let z = z_normalize_by_year(&raw, &doc_years).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for y in 2000..2005 {
        let zs: Vec<f64> = z.iter().filter(|(k, _)| doc_years[*k] == y).map(|(_, v)| *v).collect();
        worst = worst.max(mean(&zs).abs()).max((variance(&zs) - 1.0).abs());
    }
    verdict(
        shift_ok && scale_ok && bins_ok && worst <= 1e-10,
        format!(
            "shift exact {shift_ok}, k=2 exact {scale_ok}, monotone bins equal {bins_ok} (sizes {sizes:?}), z moment deviation {worst:.1e}"
        ),
    )
}

fn classifier_labeling() -> Check {
    // Per-dimension separation of four standard deviations. Before the
    // transition only the old sense occurs; afterwards both do.
    let dim = 8;
    let t_star = 2010;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut usages = Vec::new();
    let mut truth = Vec::new();
    for i in 0..1200u32 {
        let year = rng.random_range(2000..=2019);
        let new = year > t_star && rng.random_bool(0.75);
        let offset = if new { 4.0 } else { 0.0 };
        usages.push(EmbeddedUsage {
            word_id: 0,
            doc_id: i,
            year,
            position: 0,
            vector: (0..dim).map(|_| (offset + noise.sample(&mut rng)) as f32).collect(),
        });
        truth.push(new);
    }
    let labeling = sense::cv_label_usages(&usages, t_star, 1.0).map_err(|e| e.to_string())?;
    let agree = labeling
        .labels
        .iter()
        .zip(&truth)
        .filter(|(l, &t)| (l.label == Sense::New) == t)
        .count();
    let share = agree as f64 / truth.len() as f64;
    verdict(
        share >= 0.99 && !labeling.fallback,
        format!("{:.2}% agreement over {} usages", 100.0 * share, truth.len()),
    )
}

/// Normal equations solved by Gauss-Jordan elimination.
fn normal_equation_oracle(x: &DMatrix<f64>, y: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, p) = x.shape();
    let mut a = vec![vec![0.0; 2 * p + 1]; p];
    for i in 0..p {
        for j in 0..p {
            a[i][j] = (0..n).map(|r| x[(r, i)] * x[(r, j)]).sum();
        }
        a[i][p + i] = 1.0;
        a[i][2 * p] = (0..n).map(|r| x[(r, i)] * y[r]).sum();
    }
    for c in 0..p {
        let piv = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        let d = a[c][c];
        for v in a[c].iter_mut() {
            *v /= d;
        }
        for r in 0..p {
            if r != c {
                let f = a[r][c];
                let row = a[c].clone();
                for (v, rv) in a[r].iter_mut().zip(row) {
                    *v -= f * rv;
                }
            }
        }
    }
    let beta: Vec<f64> = (0..p).map(|i| a[i][2 * p]).collect();
    let rss: f64 = (0..n)
        .map(|r| (y[r] - (0..p).map(|j| x[(r, j)] * beta[j]).sum::<f64>()).powi(2))
        .sum();
    let se = (0..p).map(|i| (rss / n as f64 * a[i][p + i]).sqrt()).collect();
    (beta, se)
}

/// Simpson's rule on the chi-squared(3) density from 0 to `x`.
fn chi2_3_tail_oracle(x: f64) -> f64 {
    let pdf = |t: f64| (t.sqrt() * (-t / 2.0).exp()) / (2.0f64.powf(1.5) * std::f64::consts::PI.sqrt() / 2.0);
    let n = 200_000;
    let h = x / n as f64;
    let mut acc = pdf(0.0) + pdf(x);
    for i in 1..n {
        acc += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - acc * h / 3.0
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<FeatureRow> {
    let qs = [Quantile::Q1, Quantile::Q2, Quantile::Q3, Quantile::Q4];
    (0..n)
        .map(|i| {
            let t1: f64 = rng.random_range(0.1..1.0);
            FeatureRow {
                doc_id: format!("p{i}"),
                year: rng.random_range(1996..=2014),
                z_short: rng.random_range(-2.0..2.0),
                topics: Some(vec![t1 / 2.0, t1 / 2.0, 1.0 - t1]),
                lexical: qs[rng.random_range(0..4)],
                semantic: qs[rng.random_range(0..4)],
                lexical_by_gamma: vec![rng.random_range(-1.0..1.0)],
                semantic_by_gamma: vec![rng.random_range(-1.0..1.0)],
                target: rng.random_range(-2.0..2.0),
            }
        })
        .collect()
}

fn regression_stack() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let (n, p) = (300, 6);
    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { noise.sample(&mut rng) });
    let y = DVector::from_fn(n, |i, _| 0.5 * x[(i, 1)] - x[(i, 3)] + noise.sample(&mut rng));
    let labels: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
    let fit = citation::fit_ols(&x, &y, &labels).map_err(|e| e.to_string())?;
    let (beta, se) = normal_equation_oracle(&x, &y);
    let dev = fit
        .coefficients
        .iter()
        .zip(&beta)
        .chain(fit.std_errors.iter().zip(&se))
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max);

    let lrt = citation::likelihood_ratio_test(&fit, &fit, 3).map_err(|e| e.to_string())?;
    let p_tail = chi2_sf(7.815, 3.0);
    let oracle = chi2_3_tail_oracle(7.815);

    let rows = random_rows(&mut rng, 400);
    let report = citation::online_predict(&rows, &Model::ALL, (2001, 2014), Execution::default()).map_err(|e| e.to_string())?;
    let leak_free = report.years.iter().all(|y| y.max_train_year <= y.year - 3)
        && (2001..=2014).all(|t| citation::training_rows(&rows, t).iter().all(|r| r.year <= t - 3));
    verdict(
        dev <= 1e-8
            && lrt.statistic == 0.0
            && lrt.p_value == 1.0
            && (p_tail - 0.05).abs() <= 1e-4
            && (p_tail - oracle).abs() <= 1e-6
            && leak_free,
        format!(
            "OLS vs normal equations {dev:.1e}; identical LRT stat {} p {}; chi2(3) tail at 7.815 = {p_tail:.6} (quadrature {oracle:.6}); leakage-free {leak_free}",
            lrt.statistic, lrt.p_value
        ),
    )
}

/// Generate the fixture and run every stage; returns the hash of each
/// output file and the evaluation.
fn fixture_run(dir: &std::path::Path) -> Result<(BTreeMap<String, String>, Evaluation), String> {
    let (paths, _) = fixture::generate(dir, &FixtureConfig::default()).map_err(|e| e.to_string())?;
    let cfg = PipelineConfig::load(&paths.config).map_err(|e| e.to_string())?;
    pipeline::run_all(&cfg, false).map_err(|e| e.to_string())?;
    let mut hashes = BTreeMap::new();
    for entry in std::fs::read_dir(&cfg.paths.output).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        hashes.insert(name, hash_file(&path).map_err(|e| e.to_string())?);
    }
    let ev = Evaluation::read(&cfg.output(pipeline::EVALUATION_FILE)).map_err(|e| e.to_string())?;
    Ok((hashes, ev))
}

fn end_to_end_fixture() -> Check {
    let start = Instant::now();
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (first, ev) = fixture_run(a.path())?;
    let secs = start.elapsed().as_secs_f64();
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (second, _) = fixture_run(b.path())?;
    let online = ev.online.as_ref().ok_or("no online report")?;
    let mse = |m: Model| online.models.iter().position(|&x| x == m).map(|i| online.micro_mse[i]);
    let (m3, m4) = (mse(Model::M3).ok_or("M3 missing")?, mse(Model::M4).ok_or("M4 missing")?);
    verdict(
        first == second && secs < 60.0 && m4 < m3,
        format!(
            "{} documents, {} artifacts identical across runs: {}, one run {secs:.1}s, micro MSE M3 {m3:.3} vs M4 {m4:.3}",
            ev.n_rows,
            first.len(),
            first == second
        ),
    )
}

fn main() {
    let checks: [(&str, fn() -> Check); 8] = [
        ("hawkes recovery", hawkes_recovery),
        ("gradient correctness", gradient_correctness),
        ("bandwidth selection", bandwidth_selection),
        ("semantic change detection", semantic_detection),
        ("score invariances", invariances),
        ("classifier labeling", classifier_labeling),
        ("regression stack", regression_stack),
        ("end-to-end fixture", end_to_end_fixture),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
