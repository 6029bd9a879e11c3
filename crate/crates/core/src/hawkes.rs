//! Discrete-time Hawkes model with Poisson yearly counts.
//!
//! For cascade `w` and year `t` the intensity is
//!
//! ```text
//! lambda(t, w) = c_w + sum_{i: t_i < t} alpha_{p_i} * exp(-gamma * (t - t_i))
//! ```
//!
//! and `n(t, w) ~ Poisson(lambda(t, w))`. The per-document `alpha` values are
//! the influence scores. Same-year events never excite each other.
//!
//! Parameters are fit jointly over all cascades by maximizing the
//! log-likelihood in log-space (so `alpha, c >= 0`) with L-BFGS. Likelihood
//! and gradient are sums over cascades, computed per cascade (in parallel when
//! enabled) and reduced in cascade order so results do not depend on thread
//! scheduling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::cascade::{Cascade, CascadeSet};
use crate::change::ChangeKind;
use crate::corpus::Year;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::io::{csv_err, csv_reader, csv_writer, schema_banner, write_atomic, write_err};
use crate::optimize::Lbfgs;

/// Default bandwidth grid.
pub const DEFAULT_GAMMA_GRID: [f64; 6] = [0.001, 0.01, 0.1, 1.0, 10.0, 100.0];
/// Starting excitation one year after an adoption, `alpha * exp(-gamma)`.
pub const ALPHA_INIT: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct HawkesModel {
    /// Influence per document index.
    pub alpha: Vec<f64>,
    /// Base rate per cascade.
    pub base: Vec<f64>,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HawkesFit {
    pub model: HawkesModel,
    pub train_ll: f64,
    pub heldout_ll: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    /// Training log-likelihood after each accepted optimizer step.
    pub trace: Vec<f64>,
    /// Cascade indices used for training and for the heldout score.
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub alpha: Vec<f64>,
    pub base: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub rel_tol: f64,
    pub exec: Execution,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 1000,
            grad_tol: 1e-6,
            rel_tol: 1e-8,
            exec: Execution::default(),
        }
    }
}

/// A cascade bucketed by year offset within the shared span.
#[derive(Clone, Debug)]
struct Binned {
    counts: Vec<f64>,
    /// Marks of the events in each year.
    marks: Vec<Vec<u32>>,
}

fn bin(c: &Cascade, year_range: (Year, Year)) -> Binned {
    let len = (year_range.1 - year_range.0 + 1).max(0) as usize;
    let mut counts = vec![0.0; len];
    let mut marks = vec![Vec::new(); len];
    for &(y, d) in &c.events {
        if y < year_range.0 || y > year_range.1 {
            continue;
        }
        let t = (y - year_range.0) as usize;
        counts[t] += 1.0;
        marks[t].push(d);
    }
    Binned { counts, marks }
}

/// Per-year intensities for one cascade.
fn intensities(b: &Binned, alpha: &[f64], base: f64, decay: f64) -> Vec<f64> {
    let mut lambda = Vec::with_capacity(b.counts.len());
    let mut excitation = 0.0;
    for t in 0..b.counts.len() {
        if t > 0 {
            let added: f64 = b.marks[t - 1].iter().map(|&p| alpha[p as usize]).sum();
            excitation = decay * (excitation + added);
        }
        lambda.push(base + excitation);
    }
    lambda
}

fn cascade_ll(b: &Binned, lambda: &[f64]) -> f64 {
    let mut ll = 0.0;
    for (&n, &l) in b.counts.iter().zip(lambda) {
        if n > 0.0 {
            if l <= 0.0 {
                return f64::NEG_INFINITY;
            }
            ll += n * l.ln();
        }
        ll -= l;
    }
    ll
}

/// Log-likelihood plus the base-rate derivative and the per-event sparse
/// alpha derivative `(mark, d LL / d alpha_mark)`.
fn cascade_ll_grad(b: &Binned, alpha: &[f64], base: f64, decay: f64) -> (f64, f64, Vec<(u32, f64)>) {
    let lambda = intensities(b, alpha, base, decay);
    let ll = cascade_ll(b, &lambda);
    if !ll.is_finite() {
        return (ll, 0.0, Vec::new());
    }
    let g: Vec<f64> = b
        .counts
        .iter()
        .zip(&lambda)
        .map(|(&n, &l)| if n > 0.0 { n / l - 1.0 } else { -1.0 })
        .collect();
    let d_base = g.iter().sum();
    let len = g.len();
    // future[s] = sum_{t > s} g[t] * decay^(t - s)
    let mut future = vec![0.0; len];
    for s in (0..len.saturating_sub(1)).rev() {
        future[s] = decay * (g[s + 1] + future[s + 1]);
    }
    let mut d_alpha = Vec::new();
    for (s, marks) in b.marks.iter().enumerate() {
        for &p in marks {
            d_alpha.push((p, future[s]));
        }
    }
    (ll, d_base, d_alpha)
}

/// `lambda(t, w)` for one cascade at year `t`; only strictly earlier events count.
pub fn intensity(model: &HawkesModel, cascade_index: usize, cascade: &Cascade, t: Year) -> f64 {
    let mut lambda = model.base[cascade_index];
    for &(y, p) in &cascade.events {
        if y < t {
            lambda += model.alpha[p as usize] * (-model.gamma * f64::from(t - y)).exp();
        }
    }
    lambda
}

fn check_model(model: &HawkesModel, set: &CascadeSet) -> Result<()> {
    if model.base.len() != set.cascades.len() {
        return Err(Error::InvalidArgument(format!(
            "{} base rates for {} cascades",
            model.base.len(),
            set.cascades.len()
        )));
    }
    if model.alpha.len() < set.n_docs() {
        return Err(Error::InvalidArgument(format!(
            "{} influence values for {} documents",
            model.alpha.len(),
            set.n_docs()
        )));
    }
    Ok(())
}

/// `sum_w sum_t [n ln(lambda) - lambda]`, dropping `ln n!`.
pub fn log_likelihood(model: &HawkesModel, set: &CascadeSet, exec: Execution) -> Result<f64> {
    check_model(model, set)?;
    let decay = (-model.gamma).exp();
    let parts = exec::map_range(exec, set.cascades.len(), |w| {
        let b = bin(&set.cascades[w], set.year_range);
        cascade_ll(&b, &intensities(&b, &model.alpha, model.base[w], decay))
    });
    let ll: f64 = parts.iter().sum();
    if ll.is_finite() {
        Ok(ll)
    } else {
        Err(Error::Infeasible)
    }
}

pub fn gradient(model: &HawkesModel, set: &CascadeSet, exec: Execution) -> Result<Gradient> {
    check_model(model, set)?;
    let decay = (-model.gamma).exp();
    let parts = exec::map_range(exec, set.cascades.len(), |w| {
        let b = bin(&set.cascades[w], set.year_range);
        cascade_ll_grad(&b, &model.alpha, model.base[w], decay)
    });
    let mut grad = Gradient {
        alpha: vec![0.0; model.alpha.len()],
        base: vec![0.0; model.base.len()],
    };
    for (w, (ll, d_base, d_alpha)) in parts.into_iter().enumerate() {
        if !ll.is_finite() {
            return Err(Error::Infeasible);
        }
        grad.base[w] = d_base;
        for (p, v) in d_alpha {
            grad.alpha[p as usize] += v;
        }
    }
    Ok(grad)
}

/// Log-likelihood of homogeneous Poisson cascades at their MLE rates.
pub fn homogeneous_ll(set: &CascadeSet) -> f64 {
    set.cascades
        .iter()
        .map(|c| {
            let counts = c.counts(set.year_range);
            let rate = counts.iter().sum::<u64>() as f64 / counts.len() as f64;
            counts
                .iter()
                .map(|&n| if n > 0 { n as f64 * rate.ln() - rate } else { -rate })
                .sum::<f64>()
        })
        .sum()
}

/// Seeded split of cascade indices into (train, heldout).
pub fn split_cascades(n: usize, heldout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if heldout_fraction <= 0.0 || n < 2 {
        return (idx, Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let k = ((heldout_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut heldout = idx.split_off(n - k);
    idx.sort_unstable();
    heldout.sort_unstable();
    (idx, heldout)
}

/// Maximize the likelihood over `alpha` (documents with at least one event
/// that can excite a later year) and every `c_w`, in log-space.
fn fit_subset(set: &CascadeSet, gamma: f64, opts: &FitOptions) -> Result<(HawkesModel, crate::optimize::Minimum)> {
    let binned: Vec<Binned> = set.cascades.iter().map(|c| bin(c, set.year_range)).collect();
    let n_docs = set.n_docs();
    let mut active = vec![false; n_docs];
    for b in &binned {
        for marks in &b.marks[..b.marks.len().saturating_sub(1)] {
            for &p in marks {
                active[p as usize] = true;
            }
        }
    }
    let active_docs: Vec<u32> = (0..n_docs as u32).filter(|&p| active[p as usize]).collect();
    let n_alpha = active_docs.len();
    // Start every document at the same one-year excitation `alpha * exp(-gamma)`;
    // a fixed alpha would leave no gradient at large bandwidths.
    let mut x0: Vec<f64> = vec![ALPHA_INIT.ln() + gamma; n_alpha];
    for b in &binned {
        let mean = b.counts.iter().sum::<f64>() / b.counts.len().max(1) as f64;
        x0.push(mean.max(1e-12).ln());
    }
    let decay = (-gamma).exp();
    let exec = opts.exec;

    let objective = |theta: &[f64], grad: &mut [f64]| -> f64 {
        let mut alpha = vec![0.0; n_docs];
        for (k, &p) in active_docs.iter().enumerate() {
            alpha[p as usize] = theta[k].exp();
        }
        let parts = exec::map_range(exec, binned.len(), |w| {
            cascade_ll_grad(&binned[w], &alpha, theta[n_alpha + w].exp(), decay)
        });
        let mut d_alpha = vec![0.0; n_docs];
        let mut ll = 0.0;
        for (w, (l, d_base, da)) in parts.into_iter().enumerate() {
            ll += l;
            grad[n_alpha + w] = -d_base * theta[n_alpha + w].exp();
            for (p, v) in da {
                d_alpha[p as usize] += v;
            }
        }
        for (k, &p) in active_docs.iter().enumerate() {
            grad[k] = -d_alpha[p as usize] * alpha[p as usize];
        }
        if ll.is_finite() {
            -ll
        } else {
            f64::INFINITY
        }
    };
    let lbfgs = Lbfgs {
        max_iter: opts.max_iter,
        grad_tol: opts.grad_tol,
        rel_tol: opts.rel_tol,
        ..Lbfgs::default()
    };
    let res = lbfgs.minimize(objective, x0);
    if !res.value.is_finite() {
        return Err(Error::Numerical(format!("likelihood diverged at gamma = {gamma}")));
    }
    let mut alpha = vec![0.0; n_docs];
    for (k, &p) in active_docs.iter().enumerate() {
        alpha[p as usize] = res.x[k].exp();
    }
    let base = res.x[n_alpha..].iter().map(|v| v.exp()).collect();
    Ok((HawkesModel { alpha, base, gamma }, res))
}

/// Base rate maximizing one cascade's likelihood with `alpha` held fixed.
fn profile_base(b: &Binned, alpha: &[f64], decay: f64) -> f64 {
    let excitation = intensities(b, alpha, 0.0, decay);
    let total: f64 = b.counts.iter().sum();
    let years = b.counts.len() as f64;
    let slope = |c: f64| -> f64 {
        b.counts
            .iter()
            .zip(&excitation)
            .map(|(&n, &e)| if n > 0.0 { n / (c + e) } else { 0.0 })
            .sum::<f64>()
            - years
    };
    if total == 0.0 || slope(0.0) <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, total / years);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Heldout log-likelihood: each cascade's base rate is profiled out with the
/// trained `alpha` fixed.
pub fn heldout_log_likelihood(alpha: &[f64], gamma: f64, set: &CascadeSet, exec: Execution) -> f64 {
    let decay = (-gamma).exp();
    exec::map(exec, &set.cascades, |c| {
        let b = bin(c, set.year_range);
        let base = profile_base(&b, alpha, decay);
        cascade_ll(&b, &intensities(&b, alpha, base, decay))
    })
    .iter()
    .sum()
}

/// Fit on a seeded `1 - heldout_fraction` share of the cascades and score the rest.
pub fn fit(set: &CascadeSet, gamma: f64, heldout_fraction: f64, seed: u64, opts: &FitOptions) -> Result<HawkesFit> {
    if !(gamma > 0.0 && gamma <= 500.0) {
        return Err(Error::InvalidArgument(format!("gamma must be in (0, 500], got {gamma}")));
    }
    if !(0.0..1.0).contains(&heldout_fraction) {
        return Err(Error::InvalidArgument(format!("heldout fraction {heldout_fraction} outside [0, 1)")));
    }
    if set.cascades.iter().all(Cascade::is_empty) {
        return Err(Error::InvalidArgument("no non-empty cascades to fit".into()));
    }
    let (train, heldout) = split_cascades(set.cascades.len(), heldout_fraction, seed);
    let train_set = set.subset(&train);
    let (model, res) = fit_subset(&train_set, gamma, opts)?;
    if !res.converged {
        log::warn!(
            "hawkes fit at gamma = {gamma} stopped after {} iterations with gradient norm {:.3e}{}",
            res.iterations,
            res.grad_norm,
            if res.stalled { " (no further improvement)" } else { "" }
        );
    }
    let heldout_ll = (!heldout.is_empty())
        .then(|| heldout_log_likelihood(&model.alpha, gamma, &set.subset(&heldout), opts.exec));
    Ok(HawkesFit {
        train_ll: -res.value,
        heldout_ll,
        iterations: res.iterations,
        converged: res.converged,
        grad_norm: res.grad_norm,
        trace: res.trace.iter().map(|v| -v).collect(),
        model,
        train,
        heldout,
    })
}

/// Fit every bandwidth on the same split and keep the best heldout score.
/// Ties go to the earlier grid entry.
pub fn select_bandwidth(
    set: &CascadeSet,
    grid: &[f64],
    heldout_fraction: f64,
    seed: u64,
    opts: &FitOptions,
) -> Result<(f64, Vec<Result<HawkesFit>>)> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty bandwidth grid".into()));
    }
    if grid.len() > 1 && heldout_fraction <= 0.0 {
        return Err(Error::InvalidArgument("bandwidth selection needs a heldout fraction".into()));
    }
    let fits: Vec<Result<HawkesFit>> = grid
        .iter()
        .map(|&g| fit(set, g, heldout_fraction, seed, opts))
        .collect();
    let mut best: Option<(f64, f64)> = None;
    for (&g, f) in grid.iter().zip(&fits) {
        match f {
            Ok(f) => {
                let score = f.heldout_ll.unwrap_or(f.train_ll);
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((g, score));
                }
            }
            Err(e) => log::warn!("fit at gamma = {g} failed: {e}"),
        }
    }
    let (gamma, _) = best.ok_or_else(|| Error::Numerical("every bandwidth fit failed".into()))?;
    Ok((gamma, fits))
}

/// Simulate cascades year by year. Documents are laid out in year blocks of
/// `docs_per_year`; each event's mark is drawn uniformly from its year's block.
pub fn simulate(
    alpha_true: &[f64],
    base_true: &[f64],
    gamma: f64,
    docs_per_year: usize,
    year_range: (Year, Year),
    seed: u64,
) -> Result<CascadeSet> {
    let years = (year_range.1 - year_range.0 + 1) as usize;
    if alpha_true.len() != years * docs_per_year || docs_per_year == 0 {
        return Err(Error::InvalidArgument(format!(
            "expected {} influence values ({years} years x {docs_per_year} docs)",
            years * docs_per_year
        )));
    }
    if alpha_true.iter().chain(base_true).any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("parameters must be finite and nonnegative".into()));
    }
    let decay = (-gamma).exp();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cascades = base_true
        .iter()
        .enumerate()
        .map(|(w, &c)| {
            let mut events = Vec::new();
            let mut excitation = 0.0;
            let mut prev_added = 0.0;
            for t in 0..years {
                if t > 0 {
                    excitation = decay * (excitation + prev_added);
                }
                let lambda = c + excitation;
                let n = if lambda > 0.0 {
                    Poisson::new(lambda).map(|p| p.sample(&mut rng) as u64).unwrap_or(0)
                } else {
                    0
                };
                prev_added = 0.0;
                for _ in 0..n {
                    let doc = t * docs_per_year + rng.random_range(0..docs_per_year);
                    prev_added += alpha_true[doc];
                    events.push((year_range.0 + t as Year, doc as u32));
                }
            }
            Cascade::new(format!("w{w}"), ChangeKind::Semantic, None, events)
        })
        .collect();
    Ok(CascadeSet {
        year_range,
        doc_ids: (0..alpha_true.len()).map(|d| format!("d{d}")).collect(),
        cascades,
    })
}

/// One row of the raw influence CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRow {
    pub doc_id: String,
    pub alpha: f64,
    pub kind: ChangeKind,
    pub gamma: f64,
}

/// One row of the bandwidth summary written next to the raw influence CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandwidthRow {
    pub kind: ChangeKind,
    pub gamma: f64,
    pub train_ll: f64,
    pub heldout_ll: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub selected: bool,
}

fn write_rows<T: Serialize>(path: &Path, kind: &str, rows: &[T]) -> Result<()> {
    write_atomic(path, |out| {
        writeln!(out, "{}", schema_banner(kind)).map_err(write_err(path))?;
        let mut w = csv_writer(out, b',');
        for r in rows {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(write_err(path))
    })
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    csv_reader(path, b',')?
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_err(path, e))
}

/// Raw influence CSV: `doc_id, alpha, kind, gamma`.
pub fn write_influence_csv(path: &Path, rows: &[InfluenceRow]) -> Result<()> {
    write_rows(path, "influence", rows)
}

pub fn read_influence_csv(path: &Path) -> Result<Vec<InfluenceRow>> {
    read_rows(path)
}

pub fn write_bandwidth_csv(path: &Path, rows: &[BandwidthRow]) -> Result<()> {
    write_rows(path, "bandwidth", rows)
}

pub fn read_bandwidth_csv(path: &Path) -> Result<Vec<BandwidthRow>> {
    read_rows(path)
}
