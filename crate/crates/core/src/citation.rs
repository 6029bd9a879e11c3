//! Validation of influence scores against future citations: nested OLS
//! models with likelihood-ratio tests, and an online year-by-year
//! prediction protocol.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corpus::Year;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::influence::{z_normalize_by_year, FeatureTable, Quantile};
use crate::io::{csv_err, csv_reader};
use crate::stats::chi2_sf;

/// Years after publication counted as short-term citations (inclusive).
pub const SHORT_WINDOW: (Year, Year) = (0, 2);
/// Years after publication counted as future citations (inclusive).
pub const FUTURE_WINDOW: (Year, Year) = (3, 5);

#[derive(Clone, Debug, PartialEq)]
pub struct CitationRecord {
    pub doc_id: String,
    pub pub_year: Year,
    /// Citations received per calendar year.
    pub counts: BTreeMap<Year, u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CitationWindows {
    pub short_term: u64,
    pub future: u64,
}

impl CitationRecord {
    fn window(&self, w: (Year, Year)) -> u64 {
        self.counts
            .range(self.pub_year + w.0..=self.pub_year + w.1)
            .map(|(_, c)| c)
            .sum()
    }

    /// Short-term and future citation counts, or `None` when citations are
    /// only observed through `horizon < pub_year + 5`.
    pub fn windows(&self, horizon: Year) -> Option<CitationWindows> {
        (horizon >= self.pub_year + FUTURE_WINDOW.1).then(|| CitationWindows {
            short_term: self.window(SHORT_WINDOW),
            future: self.window(FUTURE_WINDOW),
        })
    }
}

#[derive(Deserialize)]
struct CitationLine {
    doc_id: String,
    year: Year,
    count: u64,
}

/// Long-form citations CSV: `doc_id, year, count`. Returns per-document
/// per-year counts and the last observed citation year.
pub fn read_citations(path: &Path) -> Result<(BTreeMap<String, BTreeMap<Year, u64>>, Option<Year>)> {
    let mut rdr = csv_reader(path, b',')?;
    let mut out: BTreeMap<String, BTreeMap<Year, u64>> = BTreeMap::new();
    let mut horizon = None;
    for rec in rdr.deserialize::<CitationLine>() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        *out.entry(rec.doc_id).or_default().entry(rec.year).or_insert(0) += rec.count;
        horizon = horizon.max(Some(rec.year));
    }
    Ok((out, horizon))
}

/// Topics CSV: `doc_id, p1..pK`, rows summing to one.
pub fn read_topics(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut rdr = csv_reader(path, b',')?;
    let width = rdr.headers().map_err(|e| csv_err(path, e))?.len();
    if width < 2 {
        return Err(Error::parse(path, 1, "topics need doc_id and at least one probability"));
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let probs: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(path, line, "bad topic probability"))?;
        let sum: f64 = probs.iter().sum();
        if probs.len() != width - 1 || probs.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::parse(path, line, format!("topic row must be a distribution (sum {sum})")));
        }
        out.insert(rec[0].to_string(), probs);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub doc_id: String,
    pub year: Year,
    pub z_short: f64,
    pub topics: Option<Vec<f64>>,
    pub lexical: Quantile,
    pub semantic: Quantile,
    pub lexical_by_gamma: Vec<f64>,
    pub semantic_by_gamma: Vec<f64>,
    /// Z-normalized `ln(1 + future citations)`.
    pub target: f64,
}

/// Join features, citations and topics over the analysis population:
/// documents published in `min_year` or later whose future window is observed.
/// The citation target and short-term covariate are `ln(1 + count)`,
/// Z-normalized within each publication year.
pub fn assemble_rows(
    features: &FeatureTable,
    citations: &BTreeMap<String, BTreeMap<Year, u64>>,
    topics: Option<&BTreeMap<String, Vec<f64>>>,
    min_year: Year,
    horizon: Year,
) -> Result<Vec<FeatureRow>> {
    let mut short = BTreeMap::new();
    let mut future = BTreeMap::new();
    let mut years = BTreeMap::new();
    let mut immature = 0usize;
    for r in features.rows.iter().filter(|r| r.year >= min_year) {
        let rec = CitationRecord {
            doc_id: r.doc_id.clone(),
            pub_year: r.year,
            counts: citations.get(&r.doc_id).cloned().unwrap_or_default(),
        };
        match rec.windows(horizon) {
            Some(w) => {
                short.insert(r.doc_id.clone(), (w.short_term as f64).ln_1p());
                future.insert(r.doc_id.clone(), (w.future as f64).ln_1p());
                years.insert(r.doc_id.clone(), r.year);
            }
            None => immature += 1,
        }
    }
    if immature > 0 {
        log::info!("{immature} papers excluded: citations not observed through year + 5");
    }
    let z_short = z_normalize_by_year(&short, &years)?;
    let target = z_normalize_by_year(&future, &years)?;
    Ok(features
        .rows
        .iter()
        .filter(|r| target.contains_key(&r.doc_id))
        .map(|r| FeatureRow {
            doc_id: r.doc_id.clone(),
            year: r.year,
            z_short: z_short[&r.doc_id],
            topics: topics.and_then(|t| t.get(&r.doc_id).cloned()),
            lexical: r.quantile_lexical,
            semantic: r.quantile_semantic,
            lexical_by_gamma: r.z_lexical_by_gamma.clone(),
            semantic_by_gamma: r.z_semantic_by_gamma.clone(),
            target: target[&r.doc_id],
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Model {
    M1,
    M2,
    M3,
    M4,
}

impl Model {
    pub const ALL: [Model; 4] = [Model::M1, Model::M2, Model::M3, Model::M4];

    pub fn as_str(self) -> &'static str {
        ["M1", "M2", "M3", "M4"][self as usize]
    }
}

impl std::str::FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "M1" => Ok(Model::M1),
            "M2" => Ok(Model::M2),
            "M3" => Ok(Model::M3),
            "M4" => Ok(Model::M4),
            _ => Err(Error::InvalidArgument(format!("unknown model {s:?}"))),
        }
    }
}

impl std::fmt::Display for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which feature set to build: the regression analysis uses quantile
/// dummies at the selected bandwidth; online prediction uses continuous
/// scores for every bandwidth in the grid instead.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSet {
    Regression,
    Prediction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub labels: Vec<String>,
}

/// Column labels; per-bandwidth scores are numbered by position in the
/// bandwidth grid.
pub fn column_labels(model: Model, n_topics: usize, n_gamma: usize, set: FeatureSet) -> Vec<String> {
    let mut labels = vec!["const".to_string(), "z_short".to_string()];
    if model >= Model::M2 {
        labels.extend((2..=n_topics).map(|k| format!("topic{k}")));
    }
    let influence = |labels: &mut Vec<String>, prefix: &str| {
        match set {
            FeatureSet::Regression => labels.extend(["q2", "q3", "q4"].iter().map(|q| format!("{prefix}_{q}"))),
            FeatureSet::Prediction => labels.extend((0..n_gamma).map(|k| format!("{prefix}_z{k}"))),
        }
    };
    if model >= Model::M3 {
        influence(&mut labels, "lex");
    }
    if model >= Model::M4 {
        influence(&mut labels, "sem");
    }
    labels
}

fn dummies(q: Quantile) -> [f64; 3] {
    let mut d = [0.0; 3];
    if q != Quantile::Q1 {
        d[q.index() - 1] = 1.0;
    }
    d
}

/// Columns: constant, short-term citations, topics 2..K (the first topic is
/// dropped because topic shares sum to one), then lexical and semantic
/// influence blocks.
pub fn build_design_matrix(model: Model, rows: &[FeatureRow], set: FeatureSet) -> Result<Design> {
    let n_topics = if model >= Model::M2 {
        let first = rows.first().and_then(|r| r.topics.as_ref()).map_or(0, Vec::len);
        for r in rows {
            match &r.topics {
                Some(t) if t.len() == first && first > 0 => {}
                _ => {
                    return Err(Error::MissingFeature {
                        doc_id: r.doc_id.clone(),
                        column: "topics".into(),
                    })
                }
            }
        }
        first
    } else {
        0
    };
    let n_gamma = rows.first().map_or(0, |r| r.semantic_by_gamma.len());
    let labels = column_labels(model, n_topics, n_gamma, set);
    let ncol = labels.len();
    let mut x = DMatrix::zeros(rows.len(), ncol);
    for (i, r) in rows.iter().enumerate() {
        let mut vals = vec![1.0, r.z_short];
        if model >= Model::M2 {
            vals.extend_from_slice(&r.topics.as_ref().unwrap()[1..]);
        }
        let block = |vals: &mut Vec<f64>, q: Quantile, cont: &[f64], name: &str| -> Result<()> {
            if set == FeatureSet::Regression {
                vals.extend(dummies(q));
            } else {
                if cont.len() != n_gamma {
                    return Err(Error::MissingFeature {
                        doc_id: r.doc_id.clone(),
                        column: format!("{name} per-bandwidth scores"),
                    });
                }
                vals.extend_from_slice(cont);
            }
            Ok(())
        };
        if model >= Model::M3 {
            block(&mut vals, r.lexical, &r.lexical_by_gamma, "lexical")?;
        }
        if model >= Model::M4 {
            block(&mut vals, r.semantic, &r.semantic_by_gamma, "semantic")?;
        }
        debug_assert_eq!(vals.len(), ncol);
        for (j, v) in vals.into_iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    Ok(Design { x, labels })
}

impl Design {
    /// Columns that are (numerically) linear combinations of earlier ones,
    /// found by modified Gram-Schmidt with a relative tolerance.
    pub fn dependent_columns(&self) -> Vec<usize> {
        dependent_columns(&self.x)
    }
}

pub fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    const TOL: f64 = 1e-9;
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm0 = col.norm();
        let mut v = col;
        // Two passes of projection keep the test stable for nearly parallel columns.
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= TOL * norm0 || basis.len() == x.nrows() {
            dependent.push(j);
        } else {
            basis.push(v / norm);
        }
    }
    dependent
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionFit {
    pub model: Option<Model>,
    pub labels: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Gaussian log-likelihood at the ML variance.
    pub log_likelihood: f64,
    /// `RSS / N`.
    pub sigma2: f64,
    pub n: usize,
}

impl RegressionFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        x * DVector::from_column_slice(&self.coefficients)
    }
}

/// Least squares via Householder QR. Standard errors use `RSS / N`, the
/// same variance that enters the log-likelihood.
pub fn fit_ols(x: &DMatrix<f64>, y: &DVector<f64>, labels: &[String]) -> Result<RegressionFit> {
    let (n, p) = x.shape();
    if y.len() != n || labels.len() != p {
        return Err(Error::InvalidArgument("design, target and labels disagree in size".into()));
    }
    if n < p {
        return Err(Error::InvalidArgument(format!("{n} rows for {p} columns")));
    }
    let dep = dependent_columns(x);
    if !dep.is_empty() {
        return Err(Error::RankDeficient(dep.iter().map(|&j| labels[j].clone()).collect()));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let qty = qr.q().transpose() * y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Numerical("singular triangular factor".into()))?;
    let resid = y - x * &beta;
    let rss = resid.norm_squared();
    let sigma2 = rss / n as f64;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::Numerical("singular triangular factor".into()))?;
    // (X'X)^-1 = R^-1 R^-T; its diagonal is the squared row norms of R^-1.
    let std_errors = (0..p)
        .map(|j| (sigma2 * r_inv.row(j).norm_squared()).sqrt())
        .collect();
    let log_likelihood = -0.5 * n as f64 * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
    Ok(RegressionFit {
        model: None,
        labels: labels.to_vec(),
        coefficients: beta.iter().copied().collect(),
        std_errors,
        log_likelihood,
        sigma2,
        n,
    })
}

pub fn fit_model(model: Model, rows: &[FeatureRow]) -> Result<RegressionFit> {
    let d = build_design_matrix(model, rows, FeatureSet::Regression)?;
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.target));
    let mut fit = fit_ols(&d.x, &y, &d.labels)?;
    fit.model = Some(model);
    Ok(fit)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// `2 (LL_full - LL_restricted)` against the chi-squared upper tail.
pub fn likelihood_ratio_test(restricted: &RegressionFit, full: &RegressionFit, df: usize) -> Result<LrTest> {
    if restricted.n != full.n {
        return Err(Error::InvalidArgument("LR test needs fits on identical rows".into()));
    }
    let diff = full.log_likelihood - restricted.log_likelihood;
    if diff < -1e-9 {
        return Err(Error::NotNested {
            full: full.log_likelihood,
            restricted: restricted.log_likelihood,
        });
    }
    let statistic = (2.0 * diff).max(0.0);
    let p_value = if df == 0 { 1.0 } else { chi2_sf(statistic, df as f64) };
    Ok(LrTest { statistic, df, p_value })
}

#[derive(Clone, Debug, PartialEq)]
pub struct YearResult {
    pub year: Year,
    pub n_train: usize,
    pub n_test: usize,
    /// Latest publication year among training rows.
    pub max_train_year: Year,
    /// Per model, in `EvalReport::models` order.
    pub mse: Vec<f64>,
    pub squared_error: Vec<f64>,
    /// Training columns dropped as linearly dependent, per model.
    pub dropped: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub models: Vec<Model>,
    pub years: Vec<YearResult>,
    /// Total squared error over total test examples, per model.
    pub micro_mse: Vec<f64>,
}

/// Training rows for test year `t`: publication year at most `t - 3`, so
/// their future windows close by `t + 2`.
pub fn training_rows(rows: &[FeatureRow], test_year: Year) -> Vec<&FeatureRow> {
    rows.iter().filter(|r| r.year <= test_year - 3).collect()
}

fn fit_and_score(model: Model, train: &[FeatureRow], test: &[FeatureRow]) -> Result<(f64, Vec<String>)> {
    let dtr = build_design_matrix(model, train, FeatureSet::Prediction)?;
    let dte = build_design_matrix(model, test, FeatureSet::Prediction)?;
    let dep = dtr.dependent_columns();
    let keep: Vec<usize> = (0..dtr.x.ncols()).filter(|j| !dep.contains(j)).collect();
    let xtr = dtr.x.select_columns(&keep);
    let xte = dte.x.select_columns(&keep);
    let labels: Vec<String> = keep.iter().map(|&j| dtr.labels[j].clone()).collect();
    let ytr = DVector::from_iterator(train.len(), train.iter().map(|r| r.target));
    let fit = fit_ols(&xtr, &ytr, &labels)?;
    let pred = fit.predict(&xte);
    let se = test.iter().zip(pred.iter()).map(|(r, p)| (r.target - p).powi(2)).sum();
    Ok((se, dep.iter().map(|&j| dtr.labels[j].clone()).collect()))
}

/// Online evaluation over the inclusive range of test years.
pub fn online_predict(rows: &[FeatureRow], models: &[Model], years: (Year, Year), exec: Execution) -> Result<EvalReport> {
    let test_years: Vec<Year> = (years.0..=years.1).collect();
    let per_year = exec::map(exec, &test_years, |&t| -> Result<Option<YearResult>> {
        let train: Vec<FeatureRow> = training_rows(rows, t).into_iter().cloned().collect();
        let test: Vec<FeatureRow> = rows.iter().filter(|r| r.year == t).cloned().collect();
        if train.is_empty() {
            log::warn!("no training rows for test year {t}; skipping");
            return Ok(None);
        }
        if test.is_empty() {
            return Ok(None);
        }
        let max_train_year = train.iter().map(|r| r.year).max().unwrap();
        assert!(max_train_year <= t - 3, "training row from {max_train_year} leaks into {t}");
        let mut squared_error = Vec::new();
        let mut dropped = Vec::new();
        for &m in models {
            let (se, dep) = fit_and_score(m, &train, &test)?;
            squared_error.push(se);
            dropped.push(dep);
        }
        Ok(Some(YearResult {
            year: t,
            n_train: train.len(),
            n_test: test.len(),
            max_train_year,
            mse: squared_error.iter().map(|se| se / test.len() as f64).collect(),
            squared_error,
            dropped,
        }))
    });
    let years: Vec<YearResult> = per_year.into_iter().filter_map(Result::transpose).collect::<Result<_>>()?;
    let total: usize = years.iter().map(|y| y.n_test).sum();
    let micro_mse = (0..models.len())
        .map(|k| years.iter().map(|y| y.squared_error[k]).sum::<f64>() / total.max(1) as f64)
        .collect();
    Ok(EvalReport {
        models: models.to_vec(),
        years,
        micro_mse,
    })
}

/// Human-facing label for a design column.
pub fn display_label(label: &str) -> String {
    let map: HashMap<&str, &str> = [
        ("const", "Constant"),
        ("z_short", "Initial Citations"),
        ("lex_q2", "Lex. Inf. Q2"),
        ("lex_q3", "Lex. Inf. Q3"),
        ("lex_q4", "Lex. Inf. Q4"),
        ("sem_q2", "Sem. Inf. Q2"),
        ("sem_q3", "Sem. Inf. Q3"),
        ("sem_q4", "Sem. Inf. Q4"),
    ]
    .into_iter()
    .collect();
    match map.get(label) {
        Some(s) => s.to_string(),
        None => label
            .strip_prefix("topic")
            .map_or_else(|| label.to_string(), |k| format!("Topic {k}")),
    }
}

/// Regression table: one row per predictor, `coef (se)` per model, then
/// log-likelihood and N.
pub fn write_regression_table(out: &mut dyn Write, fits: &[RegressionFit]) -> std::io::Result<()> {
    let mut labels: Vec<String> = Vec::new();
    for f in fits {
        for l in &f.labels {
            if !labels.contains(l) {
                labels.push(l.clone());
            }
        }
    }
    // Topics after the influence rows, as in the printed tables' appendix.
    labels.sort_by_key(|l| l.starts_with("topic"));
    let names: Vec<String> = fits
        .iter()
        .map(|f| f.model.map_or_else(|| "model".into(), |m| m.to_string()))
        .collect();
    writeln!(out, "Predictors\t{}", names.join("\t"))?;
    for l in &labels {
        let cells: Vec<String> = fits
            .iter()
            .map(|f| match f.labels.iter().position(|x| x == l) {
                Some(j) => format!("{:.3} ({:.3})", f.coefficients[j], f.std_errors[j]),
                None => String::new(),
            })
            .collect();
        writeln!(out, "{}\t{}", display_label(l), cells.join("\t"))?;
    }
    let ll: Vec<String> = fits.iter().map(|f| format!("{:.0}", f.log_likelihood)).collect();
    writeln!(out, "Log Lik.\t{}", ll.join("\t"))?;
    let n: Vec<String> = fits.iter().map(|f| f.n.to_string()).collect();
    writeln!(out, "N\t{}", n.join("\t"))
}

/// Per-year MSE table with a closing micro-averaged row.
pub fn write_online_table(out: &mut dyn Write, report: &EvalReport) -> std::io::Result<()> {
    let names: Vec<&str> = report.models.iter().map(|m| m.as_str()).collect();
    writeln!(out, "Publication Year\t{}", names.join("\t"))?;
    for y in &report.years {
        let cells: Vec<String> = y.mse.iter().map(|v| format!("{v:.3}")).collect();
        writeln!(out, "{}\t{}", y.year, cells.join("\t"))?;
    }
    let cells: Vec<String> = report.micro_mse.iter().map(|v| format!("{v:.3}")).collect();
    writeln!(out, "All Years\t{}", cells.join("\t"))
}
