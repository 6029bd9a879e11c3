//! Old/new usage labeling for semantic innovations: an L2-regularized
//! logistic regression per word, applied with 4-fold cross-validation so
//! every usage is labeled by a model that never saw it.

use serde::{Deserialize, Serialize};

use crate::corpus::Year;
use crate::error::{Error, Result};
use crate::optimize::Lbfgs;
use crate::store::EmbeddedUsage;

pub const FOLDS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Old,
    New,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub converged: bool,
    pub grad_norm: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Summed logistic loss plus `l2 / 2 * |w|^2`; the bias is not penalized.
pub fn logistic_loss(features: &[Vec<f64>], labels: &[bool], l2: f64, weights: &[f64], bias: f64) -> f64 {
    let data: f64 = features
        .iter()
        .zip(labels)
        .map(|(x, &y)| {
            let z = bias + x.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>();
            softplus(if y { -z } else { z })
        })
        .sum();
    data + 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>()
}

impl LogisticModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.bias + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.decision(x))
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.decision(x) > 0.0
    }
}

/// Fit from zero initialization until the gradient norm is at most 1e-6.
pub fn fit_logistic(features: &[Vec<f64>], labels: &[bool], l2: f64) -> Result<LogisticModel> {
    if features.len() != labels.len() {
        return Err(Error::InvalidArgument("features and labels differ in length".into()));
    }
    if !(labels.iter().any(|&y| y) && labels.iter().any(|&y| !y)) {
        return Err(Error::DegenerateLabels);
    }
    let dim = features[0].len();
    if features.iter().any(|x| x.len() != dim) {
        return Err(Error::InvalidArgument("ragged feature matrix".into()));
    }
    let objective = |theta: &[f64], grad: &mut [f64]| -> f64 {
        let (w, b) = theta.split_at(dim);
        let b = b[0];
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let z = b + x.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
            let target = if y { 1.0 } else { 0.0 };
            loss += softplus(if y { -z } else { z });
            let r = sigmoid(z) - target;
            for (g, xi) in grad[..dim].iter_mut().zip(x) {
                *g += r * xi;
            }
            grad[dim] += r;
        }
        for (g, wi) in grad[..dim].iter_mut().zip(w) {
            *g += l2 * wi;
        }
        loss + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
    };
    let opt = Lbfgs {
        max_iter: 2000,
        ..Lbfgs::default()
    };
    let res = opt.minimize(objective, vec![0.0; dim + 1]);
    if !res.converged {
        log::warn!(
            "logistic regression stopped after {} iterations with gradient norm {:.3e}",
            res.iterations,
            res.grad_norm
        );
    }
    let bias = res.x[dim];
    let mut weights = res.x;
    weights.truncate(dim);
    Ok(LogisticModel {
        weights,
        bias,
        converged: res.converged,
        grad_norm: res.grad_norm,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct UsageLabel {
    pub word_id: u32,
    pub doc_id: u32,
    pub year: Year,
    pub position: u32,
    pub label: Sense,
    pub fold: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Labeling {
    pub labels: Vec<UsageLabel>,
    /// True when too few usages forced the provisional labels to stand.
    pub fallback: bool,
}

/// Stratified fold assignment: usages of the provisional old class are dealt
/// round-robin in input order, then the new class continues the same count.
/// Per-class and overall fold sizes differ by at most one.
pub fn assign_folds(provisional: &[bool]) -> Vec<usize> {
    let mut folds = vec![0; provisional.len()];
    let mut next = 0;
    for class in [false, true] {
        for (i, _) in provisional.iter().enumerate().filter(|(_, &p)| p == class) {
            folds[i] = next % FOLDS;
            next += 1;
        }
    }
    folds
}

/// Provisional labels are `year <= t_star` (old) and `year > t_star` (new);
/// each usage then takes the prediction of a model fit on the other folds.
pub fn cv_label_usages(usages: &[EmbeddedUsage], t_star: Year, l2: f64) -> Result<Labeling> {
    let provisional: Vec<bool> = usages.iter().map(|u| u.year > t_star).collect();
    let folds = assign_folds(&provisional);
    let n_new = provisional.iter().filter(|&&p| p).count();
    let n_old = provisional.len() - n_new;
    let features: Vec<Vec<f64>> = usages
        .iter()
        .map(|u| u.vector.iter().map(|&x| f64::from(x)).collect())
        .collect();

    let make = |i: usize, new: bool| UsageLabel {
        word_id: usages[i].word_id,
        doc_id: usages[i].doc_id,
        year: usages[i].year,
        position: usages[i].position,
        label: if new { Sense::New } else { Sense::Old },
        fold: folds[i],
    };

    if n_new < FOLDS || n_old < FOLDS {
        log::warn!(
            "only {n_old} old / {n_new} new usages around {t_star}; keeping provisional labels"
        );
        return Ok(Labeling {
            labels: (0..usages.len()).map(|i| make(i, provisional[i])).collect(),
            fallback: true,
        });
    }

    let mut predicted = vec![false; usages.len()];
    for k in 0..FOLDS {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for i in (0..usages.len()).filter(|&i| folds[i] != k) {
            xs.push(features[i].clone());
            ys.push(provisional[i]);
        }
        let model = fit_logistic(&xs, &ys, l2)?;
        for i in (0..usages.len()).filter(|&i| folds[i] == k) {
            predicted[i] = model.predict(&features[i]);
        }
    }
    Ok(Labeling {
        labels: (0..usages.len()).map(|i| make(i, predicted[i])).collect(),
        fallback: false,
    })
}
