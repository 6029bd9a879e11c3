//! Analysis-ready influence features: per-publication-year Z-scores and
//! population quantile bins of the raw Hawkes influence estimates.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::change::ChangeKind;
use crate::corpus::{DocRow, Year};
use crate::error::{Error, Result};
use crate::hawkes::{BandwidthRow, InfluenceRow};
use crate::io::{csv_err, csv_reader, schema_banner, write_atomic, write_err};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Quantile {
    Q1,
    Q2,
    Q3,
    Q4,
}

impl Quantile {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        ["Q1", "Q2", "Q3", "Q4"][self.index()]
    }
}

impl std::str::FromStr for Quantile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Q1" => Ok(Quantile::Q1),
            "Q2" => Ok(Quantile::Q2),
            "Q3" => Ok(Quantile::Q3),
            "Q4" => Ok(Quantile::Q4),
            _ => Err(Error::InvalidArgument(format!("bad quantile {s:?}"))),
        }
    }
}

/// `(x - mean_year) / sd_year` with the population standard deviation;
/// a year with zero spread maps to all zeros.
pub fn z_normalize_by_year(
    values: &BTreeMap<String, f64>,
    years: &BTreeMap<String, Year>,
) -> Result<BTreeMap<String, f64>> {
    let mut groups: BTreeMap<Year, Vec<&str>> = BTreeMap::new();
    for doc in values.keys() {
        let y = years.get(doc).ok_or_else(|| Error::MissingFeature {
            doc_id: doc.clone(),
            column: "year".into(),
        })?;
        groups.entry(*y).or_default().push(doc);
    }
    let mut out = BTreeMap::new();
    for docs in groups.values() {
        let xs: Vec<f64> = docs.iter().map(|d| values[*d]).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        for (d, x) in docs.iter().zip(&xs) {
            let z = if sd > 0.0 { (x - mean) / sd } else { 0.0 };
            out.insert(d.to_string(), z);
        }
    }
    Ok(out)
}

/// Rank-based bins over the whole population: below the 50th percentile,
/// [50, 75), [75, 90) and the top decile. Ties order by doc id.
pub fn quantile_bins(scores: &BTreeMap<String, f64>) -> Result<BTreeMap<String, Quantile>> {
    let n = scores.len();
    if n < 4 {
        return Err(Error::InvalidArgument(format!("quantile bins need at least 4 documents, got {n}")));
    }
    let mut order: Vec<(&String, f64)> = scores.iter().map(|(d, &s)| (d, s)).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(r, (d, _))| {
            let q = if 100 * r < 50 * n {
                Quantile::Q1
            } else if 100 * r < 75 * n {
                Quantile::Q2
            } else if 100 * r < 90 * n {
                Quantile::Q3
            } else {
                Quantile::Q4
            };
            (d.clone(), q)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceScore {
    pub doc_id: String,
    pub year: Year,
    pub alpha_semantic: f64,
    pub alpha_lexical: f64,
    pub z_semantic: f64,
    pub z_lexical: f64,
    pub quantile_semantic: Quantile,
    pub quantile_lexical: Quantile,
    /// Z-scored influence at every fitted bandwidth, in `FeatureTable::gammas` order.
    pub z_semantic_by_gamma: Vec<f64>,
    pub z_lexical_by_gamma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub gammas: Vec<f64>,
    pub selected_semantic: Option<f64>,
    pub selected_lexical: Option<f64>,
    pub rows: Vec<InfluenceScore>,
}

fn selected_gamma(kind: ChangeKind, raw: &[InfluenceRow], bandwidth: &[BandwidthRow]) -> Result<Option<f64>> {
    if let Some(b) = bandwidth.iter().find(|b| b.kind == kind && b.selected) {
        return Ok(Some(b.gamma));
    }
    let mut gammas: Vec<f64> = raw.iter().filter(|r| r.kind == kind).map(|r| r.gamma).collect();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    match gammas.len() {
        0 => Ok(None),
        1 => Ok(Some(gammas[0])),
        _ => Err(Error::InvalidArgument(format!(
            "several {kind} bandwidths present and none marked selected"
        ))),
    }
}

fn alpha_map(raw: &[InfluenceRow], kind: ChangeKind, gamma: Option<f64>, docs: &[DocRow]) -> BTreeMap<String, f64> {
    let mut m: BTreeMap<String, f64> = docs.iter().map(|d| (d.doc_id.clone(), 0.0)).collect();
    if let Some(g) = gamma {
        for r in raw.iter().filter(|r| r.kind == kind && r.gamma == g) {
            if let Some(v) = m.get_mut(&r.doc_id) {
                *v = r.alpha;
            }
        }
    }
    m
}

/// Build features for every document in `docs`. Documents missing from the
/// raw estimates get zero influence.
pub fn featurize(raw: &[InfluenceRow], bandwidth: &[BandwidthRow], docs: &[DocRow]) -> Result<FeatureTable> {
    let years: BTreeMap<String, Year> = docs.iter().map(|d| (d.doc_id.clone(), d.year)).collect();
    let sel_s = selected_gamma(ChangeKind::Semantic, raw, bandwidth)?;
    let sel_l = selected_gamma(ChangeKind::Lexical, raw, bandwidth)?;

    let alpha_s = alpha_map(raw, ChangeKind::Semantic, sel_s, docs);
    let alpha_l = alpha_map(raw, ChangeKind::Lexical, sel_l, docs);
    let z_s = z_normalize_by_year(&alpha_s, &years)?;
    let z_l = z_normalize_by_year(&alpha_l, &years)?;
    let q_s = quantile_bins(&z_s)?;
    let q_l = quantile_bins(&z_l)?;

    let mut gammas: Vec<f64> = raw.iter().map(|r| r.gamma).collect();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    let per_gamma = |kind: ChangeKind| -> Result<Vec<BTreeMap<String, f64>>> {
        gammas
            .iter()
            .map(|&g| z_normalize_by_year(&alpha_map(raw, kind, Some(g), docs), &years))
            .collect()
    };
    let zg_s = per_gamma(ChangeKind::Semantic)?;
    let zg_l = per_gamma(ChangeKind::Lexical)?;

    let rows = docs
        .iter()
        .map(|d| {
            let id = &d.doc_id;
            InfluenceScore {
                doc_id: id.clone(),
                year: d.year,
                alpha_semantic: alpha_s[id],
                alpha_lexical: alpha_l[id],
                z_semantic: z_s[id],
                z_lexical: z_l[id],
                quantile_semantic: q_s[id],
                quantile_lexical: q_l[id],
                z_semantic_by_gamma: zg_s.iter().map(|m| m[id]).collect(),
                z_lexical_by_gamma: zg_l.iter().map(|m| m[id]).collect(),
            }
        })
        .collect();
    Ok(FeatureTable {
        gammas,
        selected_semantic: sel_s,
        selected_lexical: sel_l,
        rows,
    })
}

const FIXED_COLUMNS: [&str; 8] = [
    "doc_id",
    "year",
    "alpha_semantic",
    "alpha_lexical",
    "z_semantic",
    "z_lexical",
    "quantile_semantic",
    "quantile_lexical",
];

impl FeatureTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, |out| {
            writeln!(out, "{}", schema_banner("features")).map_err(write_err(path))?;
            let fmt_sel = |g: Option<f64>| g.map_or_else(|| "none".to_string(), |g| g.to_string());
            writeln!(
                out,
                "# selected semantic={} lexical={}",
                fmt_sel(self.selected_semantic),
                fmt_sel(self.selected_lexical)
            )
            .map_err(write_err(path))?;
            let mut w = crate::io::csv_writer(out, b',');
            let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
            for g in &self.gammas {
                header.push(format!("z_semantic_g{g}"));
            }
            for g in &self.gammas {
                header.push(format!("z_lexical_g{g}"));
            }
            w.write_record(&header).map_err(|e| csv_err(path, e))?;
            for r in &self.rows {
                let mut rec = vec![
                    r.doc_id.clone(),
                    r.year.to_string(),
                    r.alpha_semantic.to_string(),
                    r.alpha_lexical.to_string(),
                    r.z_semantic.to_string(),
                    r.z_lexical.to_string(),
                    r.quantile_semantic.as_str().to_string(),
                    r.quantile_lexical.as_str().to_string(),
                ];
                rec.extend(r.z_semantic_by_gamma.iter().map(f64::to_string));
                rec.extend(r.z_lexical_by_gamma.iter().map(f64::to_string));
                w.write_record(&rec).map_err(|e| csv_err(path, e))?;
            }
            w.flush().map_err(write_err(path))
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_sel = |s: &str| -> Option<f64> { s.parse().ok() };
        let (mut sel_s, mut sel_l) = (None, None);
        for line in text.lines().filter(|l| l.starts_with("# selected ")) {
            for part in line["# selected ".len()..].split_whitespace() {
                if let Some(v) = part.strip_prefix("semantic=") {
                    sel_s = parse_sel(v);
                } else if let Some(v) = part.strip_prefix("lexical=") {
                    sel_l = parse_sel(v);
                }
            }
        }
        let mut rdr = csv_reader(path, b',')?;
        let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
        if header.len() < FIXED_COLUMNS.len()
            || header.iter().zip(FIXED_COLUMNS).any(|(a, b)| a != b)
            || (header.len() - FIXED_COLUMNS.len()) % 2 != 0
        {
            return Err(Error::parse(path, 1, "unexpected feature header"));
        }
        let n_g = (header.len() - FIXED_COLUMNS.len()) / 2;
        let gammas: Vec<f64> = header
            .iter()
            .skip(FIXED_COLUMNS.len())
            .take(n_g)
            .map(|h| {
                h.trim_start_matches("z_semantic_g")
                    .parse()
                    .map_err(|_| Error::parse(path, 1, format!("bad column {h:?}")))
            })
            .collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let bad = |what: &str| Error::parse(path, line, format!("bad {what}"));
            let f = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| bad(&header[i])) };
            let nums = |from: usize| -> Result<Vec<f64>> { (from..from + n_g).map(f).collect() };
            rows.push(InfluenceScore {
                doc_id: rec[0].to_string(),
                year: rec[1].parse().map_err(|_| bad("year"))?,
                alpha_semantic: f(2)?,
                alpha_lexical: f(3)?,
                z_semantic: f(4)?,
                z_lexical: f(5)?,
                quantile_semantic: rec[6].parse()?,
                quantile_lexical: rec[7].parse()?,
                z_semantic_by_gamma: nums(8)?,
                z_lexical_by_gamma: nums(8 + n_g)?,
            });
        }
        Ok(FeatureTable {
            gammas,
            selected_semantic: sel_s,
            selected_lexical: sel_l,
            rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs_of(vals: &[f64], year: Year) -> (BTreeMap<String, f64>, BTreeMap<String, Year>) {
        let v = vals.iter().enumerate().map(|(i, &x)| (format!("d{i:03}"), x)).collect();
        let y = (0..vals.len()).map(|i| (format!("d{i:03}"), year)).collect();
        (v, y)
    }

    #[test]
    fn z_one_year_hand_values() {
        let (v, y) = docs_of(&[1.0, 2.0, 3.0], 2000);
        let z = z_normalize_by_year(&v, &y).unwrap();
        let want = 1.5f64.sqrt();
        assert!((z["d000"] + want).abs() < 1e-12);
        assert_eq!(z["d001"], 0.0);
        assert!((z["d002"] - want).abs() < 1e-12);
        assert!((want - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn constant_year_maps_to_zero() {
        let (v, y) = docs_of(&[4.0, 4.0, 4.0], 2000);
        assert!(z_normalize_by_year(&v, &y).unwrap().values().all(|&z| z == 0.0));
    }

    #[test]
    fn twenty_distinct_scores_bin_sizes() {
        let (v, _) = docs_of(&(0..20).map(f64::from).collect::<Vec<_>>(), 2000);
        let q = quantile_bins(&v).unwrap();
        let mut sizes = [0; 4];
        q.values().for_each(|q| sizes[q.index()] += 1);
        assert_eq!(sizes, [10, 5, 3, 2]);
        assert_eq!(q["d019"], Quantile::Q4);
        assert_eq!(q["d000"], Quantile::Q1);
    }

    #[test]
    fn ties_are_deterministic() {
        let (v, _) = docs_of(&[1.0; 20], 2000);
        let q = quantile_bins(&v).unwrap();
        let mut sizes = [0; 4];
        q.values().for_each(|q| sizes[q.index()] += 1);
        assert_eq!(sizes, [10, 5, 3, 2]);
        assert_eq!(q["d019"], Quantile::Q4);
        assert_eq!(q["d009"], Quantile::Q1);
    }

    #[test]
    fn too_few_docs_is_an_error() {
        let (v, _) = docs_of(&[1.0, 2.0, 3.0], 2000);
        assert!(quantile_bins(&v).is_err());
    }

    #[test]
    fn featurize_fills_missing_docs_with_zero() {
        let docs: Vec<DocRow> = (0..8)
            .map(|i| DocRow {
                doc_index: i,
                doc_id: format!("p{i}"),
                year: 2000 + (i as Year % 2),
                n_tokens: 10,
            })
            .collect();
        let raw = vec![
            InfluenceRow { doc_id: "p0".into(), alpha: 2.0, kind: ChangeKind::Semantic, gamma: 1.0 },
            InfluenceRow { doc_id: "p1".into(), alpha: 1.0, kind: ChangeKind::Semantic, gamma: 1.0 },
            InfluenceRow { doc_id: "p0".into(), alpha: 5.0, kind: ChangeKind::Semantic, gamma: 10.0 },
        ];
        let bw = vec![BandwidthRow {
            kind: ChangeKind::Semantic,
            gamma: 1.0,
            train_ll: 0.0,
            heldout_ll: Some(0.0),
            iterations: 1,
            converged: true,
            selected: true,
        }];
        let t = featurize(&raw, &bw, &docs).unwrap();
        assert_eq!(t.gammas, vec![1.0, 10.0]);
        assert_eq!(t.selected_semantic, Some(1.0));
        assert_eq!(t.selected_lexical, None);
        assert_eq!(t.rows[0].alpha_semantic, 2.0);
        assert_eq!(t.rows[2].alpha_semantic, 0.0);
        assert!(t.rows.iter().all(|r| r.z_lexical == 0.0));
        assert_eq!(t.rows[0].quantile_semantic, Quantile::Q3);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        t.write_csv(&p).unwrap();
        assert_eq!(FeatureTable::read_csv(&p).unwrap(), t);

        // Two bandwidths with none selected is ambiguous.
        assert!(featurize(&raw, &[], &docs).is_err());
    }
}
