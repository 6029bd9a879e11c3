//! Synthetic end-to-end fixture: a small corpus whose semantic and lexical
//! innovations spread by a known Hawkes process, contextual embeddings for
//! every vocabulary token, citations, topics and a pipeline config.
//!
//! A quarter of the documents are influential: their new-sense usages
//! strongly excite later usages, and they collect more citations three to
//! five years after publication. Lexical influence is drawn independently
//! and has no effect on citations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, LogNormal, Normal, Poisson};

use crate::corpus::{self, build_vocabulary, load_corpus, VocabConfig, Year};
use crate::error::{Error, Result};
use crate::io::{write_atomic, write_err};
use crate::store::{EmbeddedUsage, StoreWriter};

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureConfig {
    pub seed: u64,
    pub years: (Year, Year),
    pub docs_per_year: usize,
    /// Last year with observed citations.
    pub citation_horizon: Year,
    pub dim: usize,
    pub n_stable: usize,
    pub n_semantic: usize,
    pub n_lexical: usize,
    pub n_topics: usize,
    pub influential_share: f64,
    /// Citation rate multiplier three to five years out for influential
    /// papers; 1 removes the planted effect.
    pub influence_boost: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            seed: 7,
            years: (1995, 2014),
            docs_per_year: 5,
            citation_horizon: 2019,
            dim: 8,
            n_stable: 40,
            n_semantic: 120,
            n_lexical: 8,
            n_topics: 3,
            influential_share: 0.25,
            influence_boost: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixturePaths {
    pub dir: PathBuf,
    pub corpus: PathBuf,
    pub store: PathBuf,
    pub citations: PathBuf,
    pub topics: PathBuf,
    pub config: PathBuf,
    pub truth: PathBuf,
}

/// Ground truth kept alongside the generated files.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub doc_ids: Vec<String>,
    pub influential: Vec<bool>,
    pub semantic_words: BTreeMap<String, Year>,
    pub lexical_words: BTreeMap<String, Year>,
    /// Planted new-sense events per semantic word as (year, document index).
    pub semantic_events: BTreeMap<String, Vec<(Year, usize)>>,
}

const STABLE_RATE: f64 = 0.8;
const OLD_SENSE_RATE: f64 = 1.5;
const ALPHA_HIGH: f64 = 3.0;
const ALPHA_LOW: f64 = 0.05;
const SEMANTIC_BASE: f64 = 1.0;
const LEXICAL_BASE: f64 = 1.5;
const SENSE_SHIFT: f64 = 3.0;
const NOISE: f64 = 0.5;
/// Yearly citations of a typical paper in its first three years.
const CITATION_RATE: f64 = 3.0;

fn word_name(prefix: &str, mut i: usize) -> String {
    let mut suffix = Vec::new();
    loop {
        suffix.push(b'a' + (i % 26) as u8);
        i /= 26;
        if i == 0 {
            break;
        }
    }
    while suffix.len() < 2 {
        suffix.push(b'a');
    }
    suffix.reverse();
    format!("{prefix}{}", String::from_utf8(suffix).unwrap())
}

/// Yearly Hawkes cascade starting at `t0`: returns the marked documents of
/// every event, in year order.
fn cascade_events(
    rng: &mut ChaCha8Rng,
    alpha: &[f64],
    base: f64,
    t0: usize,
    years: usize,
    docs_per_year: usize,
) -> Vec<usize> {
    let decay = (-1.0f64).exp();
    let mut excitation = 0.0;
    let mut added = 0.0;
    let mut marks = Vec::new();
    for t in t0..years {
        excitation = decay * (excitation + added);
        added = 0.0;
        let lambda = base + excitation;
        let n = Poisson::new(lambda).map_or(0, |p| p.sample(rng) as usize);
        for _ in 0..n {
            let doc = t * docs_per_year + rng.random_range(0..docs_per_year);
            added += alpha[doc];
            marks.push(doc);
        }
    }
    marks
}

pub fn generate(dir: &Path, cfg: &FixtureConfig) -> Result<(FixturePaths, Truth)> {
    if cfg.docs_per_year == 0 || cfg.years.1 < cfg.years.0 + 8 || cfg.dim == 0 || cfg.n_topics < 2 {
        return Err(Error::InvalidArgument("fixture needs at least 9 years, documents, D > 0 and 2+ topics".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_years = (cfg.years.1 - cfg.years.0 + 1) as usize;
    let n_docs = n_years * cfg.docs_per_year;
    let doc_ids: Vec<String> = (0..n_docs).map(|i| format!("P{i:03}")).collect();
    let doc_year = |d: usize| cfg.years.0 + (d / cfg.docs_per_year) as Year;

    let mut order: Vec<usize> = (0..n_docs).collect();
    order.shuffle(&mut rng);
    let n_infl = (cfg.influential_share * n_docs as f64).round() as usize;
    let mut influential = vec![false; n_docs];
    for &d in &order[..n_infl] {
        influential[d] = true;
    }
    let alpha_sem: Vec<f64> = influential.iter().map(|&i| if i { ALPHA_HIGH } else { ALPHA_LOW }).collect();
    let alpha_lex: Vec<f64> = (0..n_docs)
        .map(|_| if rng.random_bool(cfg.influential_share) { ALPHA_HIGH } else { ALPHA_LOW })
        .collect();

    // Tokens per document, with the sense of each semantic-word usage.
    let mut tokens: Vec<Vec<(String, bool)>> = vec![Vec::new(); n_docs];
    let stable: Vec<String> = (0..cfg.n_stable).map(|i| word_name("core", i)).collect();
    let semantic: Vec<String> = (0..cfg.n_semantic).map(|i| word_name("sem", i)).collect();
    let lexical: Vec<String> = (0..cfg.n_lexical).map(|i| word_name("lex", i)).collect();
    let stable_pois = Poisson::new(STABLE_RATE).unwrap();
    let old_pois = Poisson::new(OLD_SENSE_RATE).unwrap();
    for doc in tokens.iter_mut() {
        for w in &stable {
            for _ in 0..stable_pois.sample(&mut rng) as usize {
                doc.push((w.clone(), false));
            }
        }
    }
    let mut semantic_words = BTreeMap::new();
    let mut semantic_events = BTreeMap::new();
    for w in &semantic {
        let t0 = rng.random_range(2..n_years / 3);
        semantic_words.insert(w.clone(), cfg.years.0 + t0 as Year);
        // The old sense gives way to the new one at the change year.
        for doc in &mut tokens[..t0 * cfg.docs_per_year] {
            for _ in 0..old_pois.sample(&mut rng) as usize {
                doc.push((w.clone(), false));
            }
        }
        let events = cascade_events(&mut rng, &alpha_sem, SEMANTIC_BASE, t0, n_years, cfg.docs_per_year);
        for &d in &events {
            tokens[d].push((w.clone(), true));
        }
        semantic_events.insert(w.clone(), events.iter().map(|&d| (doc_year(d), d)).collect());
    }
    let mut lexical_words = BTreeMap::new();
    for w in &lexical {
        let t0 = rng.random_range(3..n_years / 2);
        lexical_words.insert(w.clone(), cfg.years.0 + t0 as Year);
        for d in cascade_events(&mut rng, &alpha_lex, LEXICAL_BASE, t0, n_years, cfg.docs_per_year) {
            tokens[d].push((w.clone(), false));
        }
    }
    for doc in tokens.iter_mut() {
        doc.shuffle(&mut rng);
    }

    let paths = FixturePaths {
        dir: dir.to_path_buf(),
        corpus: dir.join("corpus.jsonl"),
        store: dir.join("embeddings.cemb"),
        citations: dir.join("citations.csv"),
        topics: dir.join("topics.csv"),
        config: dir.join("pipeline.toml"),
        truth: dir.join("truth.csv"),
    };
    write_atomic(&paths.corpus, |out| {
        for (d, doc) in tokens.iter().enumerate() {
            let text = doc.iter().map(|(w, _)| w.as_str()).collect::<Vec<_>>().join(" ");
            corpus::write_record(out, &doc_ids[d], doc_year(d), &text).map_err(write_err(&paths.corpus))?;
        }
        Ok(())
    })?;

    // Embeddings follow the ids the pipeline will assign.
    let loaded = load_corpus(&paths.corpus, cfg.years)?;
    let vocab = build_vocabulary(&loaded, &VocabConfig::default())?;
    // Rare draws can fall under the count threshold; the pipeline never sees those.
    semantic_words.retain(|w, _| vocab.id(w).is_some());
    semantic_events.retain(|w, _| vocab.id(w).is_some());
    let noise = Normal::new(0.0, NOISE).unwrap();
    let centers: Vec<Vec<f64>> = (0..vocab.len())
        .map(|_| (0..cfg.dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let shifts: Vec<Vec<f64>> = (0..vocab.len())
        .map(|_| (0..cfg.dim).map(|_| if rng.random_bool(0.5) { SENSE_SHIFT } else { -SENSE_SHIFT }).collect())
        .collect();
    let mut writer = StoreWriter::create(&paths.store, cfg.dim)?;
    for (d, doc) in tokens.iter().enumerate() {
        for (pos, (w, new_sense)) in doc.iter().enumerate() {
            let Some(id) = vocab.id(w) else { continue };
            let c = &centers[id as usize];
            let s = &shifts[id as usize];
            let vector = (0..cfg.dim)
                .map(|k| (c[k] + if *new_sense { s[k] } else { 0.0 } + noise.sample(&mut rng)) as f32)
                .collect();
            writer.push(&EmbeddedUsage {
                word_id: id,
                doc_id: d as u32,
                year: doc_year(d),
                position: pos as u32,
                vector,
            })?;
        }
    }
    writer.finish()?;

    // Citations: quality drives both windows; influence only the later one.
    let quality = LogNormal::new(0.0, 0.5).unwrap();
    let mut cites: Vec<(usize, Year, u64)> = Vec::new();
    for d in 0..n_docs {
        let q = quality.sample(&mut rng);
        let p = doc_year(d);
        for y in p..=cfg.citation_horizon {
            let k = y - p;
            let rate = CITATION_RATE
                * q
                * if k <= 2 {
                    1.0
                } else if k <= 5 {
                    0.8 * if influential[d] { cfg.influence_boost } else { 1.0 }
                } else {
                    0.5
                };
            let n = Poisson::new(rate).map_or(0, |p| p.sample(&mut rng) as u64);
            if n > 0 {
                cites.push((d, y, n));
            }
        }
    }
    write_atomic(&paths.citations, |out| {
        let e = write_err(&paths.citations);
        writeln!(out, "doc_id,year,count").map_err(&e)?;
        for (d, y, n) in &cites {
            writeln!(out, "{},{y},{n}", doc_ids[*d]).map_err(&e)?;
        }
        Ok(())
    })?;

    write_atomic(&paths.topics, |out| {
        let e = write_err(&paths.topics);
        let header: Vec<String> = (1..=cfg.n_topics).map(|k| format!("p{k}")).collect();
        writeln!(out, "doc_id,{}", header.join(",")).map_err(&e)?;
        for id in &doc_ids {
            // Normalized unit exponentials are a flat Dirichlet draw.
            let mut probs: Vec<f64> = (0..cfg.n_topics).map(|_| rng.sample(Exp1)).collect();
            let sum: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= sum);
            let cells: Vec<String> = probs.iter().map(|p| p.to_string()).collect();
            writeln!(out, "{id},{}", cells.join(",")).map_err(&e)?;
        }
        Ok(())
    })?;

    let config = format!(
        r#"# Fixture pipeline; paths are relative to this file.
seed = {seed}

[paths]
corpus = "corpus.jsonl"
store = "embeddings.cemb"
citations = "citations.csv"
topics = "topics.csv"
output = "out"

[corpus]
years = "{y0}:{y1}"

[changes]
k_semantic = {ks}
k_lexical = {kl}

[hawkes]
gamma_grid = [0.1, 1.0]
heldout = 0.2

[evaluate]
min_year = {y0}
online_years = "{o0}:{y1}"
"#,
        seed = cfg.seed,
        y0 = cfg.years.0,
        y1 = cfg.years.1,
        ks = cfg.n_semantic,
        kl = cfg.n_lexical,
        o0 = cfg.years.0 + 8,
    );
    write_atomic(&paths.config, |out| out.write_all(config.as_bytes()).map_err(write_err(&paths.config)))?;
    write_atomic(&paths.truth, |out| {
        let e = write_err(&paths.truth);
        writeln!(out, "doc_id,influential,alpha_semantic,alpha_lexical").map_err(&e)?;
        for d in 0..n_docs {
            writeln!(out, "{},{},{},{}", doc_ids[d], influential[d], alpha_sem[d], alpha_lex[d]).map_err(&e)?;
        }
        Ok(())
    })?;

    Ok((
        paths,
        Truth {
            doc_ids,
            influential,
            semantic_words,
            lexical_words,
            semantic_events,
        },
    ))
}
