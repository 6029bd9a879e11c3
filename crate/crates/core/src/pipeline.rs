//! Stage orchestration driven by one TOML config.
//!
//! Stages form a chain, each reading the artifacts of earlier stages from
//! the output directory. Every stage records its input and output hashes in
//! `manifest.json`; rerunning a stage whose inputs, parameters and outputs are
//! unchanged does nothing.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{build_lexical_cascades, build_semantic_cascade, CascadeSet};
use crate::change::{self, ChangeKind};
use crate::citation::{self, EvalReport, FeatureSet, Model, RegressionFit};
use crate::corpus::{self, build_vocabulary, load_corpus, read_doc_table, VocabConfig, VocabTable, Year};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::hawkes::{self, BandwidthRow, FitOptions, InfluenceRow};
use crate::influence::{self, FeatureTable};
use crate::io::{hash_file, parse_year_range, schema_banner, write_atomic, write_err, SCHEMA_VERSION};
use crate::sense;
use crate::store::{self, EmbeddedUsage, MomentTable, StoreReader};

pub const VOCAB_FILE: &str = "vocab.tsv";
pub const DOCS_FILE: &str = "docs.csv";
pub const MOMENTS_FILE: &str = "moments.bin";
pub const CHANGES_FILE: &str = "changes.tsv";
pub const CASCADES_FILE: &str = "cascades.jsonl";
pub const INFLUENCE_FILE: &str = "influence_raw.csv";
pub const BANDWIDTH_FILE: &str = "bandwidth.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    BuildCorpus,
    Moments,
    Changes,
    Cascades,
    Fit,
    Featurize,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::BuildCorpus,
        Stage::Moments,
        Stage::Changes,
        Stage::Cascades,
        Stage::Fit,
        Stage::Featurize,
        Stage::Evaluate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::BuildCorpus => "build-corpus",
            Stage::Moments => "moments",
            Stage::Changes => "changes",
            Stage::Cascades => "cascades",
            Stage::Fit => "fit",
            Stage::Featurize => "featurize",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Artifacts in the output directory this stage produces.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::BuildCorpus => &[VOCAB_FILE, DOCS_FILE],
            Stage::Moments => &[MOMENTS_FILE],
            Stage::Changes => &[CHANGES_FILE],
            Stage::Cascades => &[CASCADES_FILE],
            Stage::Fit => &[INFLUENCE_FILE, BANDWIDTH_FILE],
            Stage::Featurize => &[FEATURES_FILE],
            Stage::Evaluate => &[EVALUATION_FILE],
        }
    }

    /// Upstream artifacts this stage reads, with the stage producing each.
    fn requires(self) -> &'static [(Stage, &'static str)] {
        match self {
            Stage::BuildCorpus => &[],
            Stage::Moments => &[(Stage::BuildCorpus, VOCAB_FILE)],
            Stage::Changes => &[(Stage::BuildCorpus, VOCAB_FILE), (Stage::Moments, MOMENTS_FILE)],
            Stage::Cascades => &[
                (Stage::BuildCorpus, VOCAB_FILE),
                (Stage::BuildCorpus, DOCS_FILE),
                (Stage::Changes, CHANGES_FILE),
            ],
            Stage::Fit => &[(Stage::Cascades, CASCADES_FILE), (Stage::BuildCorpus, DOCS_FILE)],
            Stage::Featurize => &[
                (Stage::Fit, INFLUENCE_FILE),
                (Stage::Fit, BANDWIDTH_FILE),
                (Stage::BuildCorpus, DOCS_FILE),
            ],
            Stage::Evaluate => &[(Stage::Featurize, FEATURES_FILE)],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub store: PathBuf,
    #[serde(default)]
    pub citations: Option<PathBuf>,
    #[serde(default)]
    pub topics: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub years: String,
    #[serde(default = "default_min_count")]
    pub min_count: u64,
    #[serde(default = "default_max_df")]
    pub max_df: f64,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
}

fn default_min_count() -> u64 {
    VocabConfig::default().min_count
}
fn default_max_df() -> f64 {
    VocabConfig::default().max_df
}
fn default_min_len() -> usize {
    VocabConfig::default().min_len
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChangesSection {
    pub k_semantic: usize,
    pub k_lexical: usize,
}

impl Default for ChangesSection {
    fn default() -> Self {
        ChangesSection {
            k_semantic: 2910,
            k_lexical: 3000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SenseSection {
    pub l2: f64,
}

impl Default for SenseSection {
    fn default() -> Self {
        SenseSection { l2: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HawkesSection {
    pub gamma_grid: Vec<f64>,
    pub heldout: f64,
    pub max_iter: usize,
}

impl Default for HawkesSection {
    fn default() -> Self {
        HawkesSection {
            gamma_grid: hawkes::DEFAULT_GAMMA_GRID.to_vec(),
            heldout: 0.1,
            max_iter: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub models: Vec<String>,
    pub min_year: Year,
    pub online_years: String,
    /// Last year with complete citation counts; defaults to the latest year
    /// in the citations file.
    pub citation_horizon: Option<Year>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            models: Model::ALL.iter().map(|m| m.to_string()).collect(),
            min_year: 2000,
            online_years: "2001:2014".into(),
            citation_horizon: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub execution: Execution,
    pub paths: Paths,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub changes: ChangesSection,
    #[serde(default)]
    pub sense: SenseSection,
    #[serde(default)]
    pub hawkes: HawkesSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

impl PipelineConfig {
    /// Parse a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.paths.corpus);
        resolve(&mut cfg.paths.store);
        resolve(&mut cfg.paths.output);
        if let Some(p) = cfg.paths.citations.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.paths.topics.as_mut() {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.years().map_err(|e| Error::Config(e.to_string()))?;
        self.online_years().map_err(|e| Error::Config(e.to_string()))?;
        self.models()?;
        if !(self.corpus.max_df > 0.0 && self.corpus.max_df <= 1.0) {
            return bad(format!("max_df must be in (0, 1], got {}", self.corpus.max_df));
        }
        if self.changes.k_semantic == 0 || self.changes.k_lexical == 0 {
            return bad("K values must be positive".into());
        }
        if !(0.0..1.0).contains(&self.hawkes.heldout) {
            return bad(format!("heldout fraction must be in [0, 1), got {}", self.hawkes.heldout));
        }
        if self.hawkes.gamma_grid.is_empty() || self.hawkes.gamma_grid.iter().any(|&g| !(g > 0.0 && g <= 500.0)) {
            return bad("gamma grid must be non-empty with values in (0, 500]".into());
        }
        if self.hawkes.gamma_grid.len() > 1 && self.hawkes.heldout == 0.0 {
            return bad("selecting among several bandwidths needs heldout > 0".into());
        }
        if !(self.sense.l2 > 0.0) {
            return bad("l2 must be positive".into());
        }
        Ok(())
    }

    pub fn years(&self) -> Result<(Year, Year)> {
        parse_year_range(&self.corpus.years)
    }

    pub fn online_years(&self) -> Result<(Year, Year)> {
        parse_year_range(&self.evaluate.online_years)
    }

    pub fn models(&self) -> Result<Vec<Model>> {
        let mut models: Vec<Model> = self
            .evaluate
            .models
            .iter()
            .map(|m| m.parse().map_err(|_| Error::Config(format!("unknown model {m:?}"))))
            .collect::<Result<_>>()?;
        models.sort();
        models.dedup();
        if models.is_empty() {
            return Err(Error::Config("model list is empty".into()));
        }
        Ok(models)
    }

    pub fn vocab_config(&self) -> VocabConfig {
        VocabConfig {
            min_count: self.corpus.min_count,
            max_df: self.corpus.max_df,
            min_len: self.corpus.min_len,
        }
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.paths.output.join(name)
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions {
            max_iter: self.hawkes.max_iter,
            exec: self.execution,
            ..FitOptions::default()
        }
    }

    /// External inputs and the parameters that affect a stage's outputs.
    fn stage_inputs(&self, stage: Stage) -> (Vec<PathBuf>, String) {
        let years = &self.corpus.years;
        let (files, params) = match stage {
            Stage::BuildCorpus => (vec![self.paths.corpus.clone()], format!("{years}|{:?}", self.vocab_config())),
            Stage::Moments => (vec![self.paths.store.clone()], years.clone()),
            Stage::Changes => (
                vec![self.paths.corpus.clone()],
                format!("{years}|{:?}|{:?}", self.vocab_config(), self.changes),
            ),
            Stage::Cascades => (
                vec![self.paths.store.clone(), self.paths.corpus.clone()],
                format!("{years}|{:?}", self.sense),
            ),
            Stage::Fit => (Vec::new(), format!("{}|{:?}", self.seed, self.hawkes)),
            Stage::Featurize => (Vec::new(), String::new()),
            Stage::Evaluate => (
                self.paths.citations.iter().chain(&self.paths.topics).cloned().collect(),
                format!("{:?}", self.evaluate),
            ),
        };
        (files, params)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub params: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub version: u32,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            schema: "manifest".into(),
            version: SCHEMA_VERSION,
            stages: BTreeMap::new(),
        }
    }
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.line(), e.to_string()))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Numerical(e.to_string()))?;
        write_atomic(&path, |out| writeln!(out, "{text}").map_err(write_err(&path)))
    }
}

fn params_hash(params: &str) -> String {
    hex::encode(Sha256::digest(params.as_bytes()))
}

/// Key for an external input: its file name, so that manifests do not depend
/// on where the run happens.
fn input_key(p: &Path) -> String {
    format!("input:{}", p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

/// Run one stage, skipping it when the manifest shows nothing changed.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage, force: bool) -> Result<StageStatus> {
    let out_dir = &cfg.paths.output;
    for &(producer, name) in stage.requires() {
        let artifact = out_dir.join(name);
        if !artifact.exists() {
            return Err(Error::MissingUpstream {
                stage: stage.as_str().into(),
                requires: producer.as_str().into(),
                artifact,
            });
        }
    }
    let (external, params) = cfg.stage_inputs(stage);
    for p in &external {
        if !p.exists() {
            return Err(Error::Config(format!("{stage}: input {} does not exist", p.display())));
        }
    }
    let mut inputs = BTreeMap::new();
    for p in &external {
        inputs.insert(input_key(p), hash_file(p)?);
    }
    for &(_, name) in stage.requires() {
        inputs.insert(name.to_string(), hash_file(&out_dir.join(name))?);
    }
    let params = params_hash(&params);

    let mut manifest = Manifest::load(out_dir)?;
    if !force {
        if let Some(rec) = manifest.stages.get(stage.as_str()) {
            let outputs_match = stage.outputs().iter().all(|name| {
                let p = out_dir.join(name);
                p.exists() && rec.outputs.get(*name).is_some_and(|h| hash_file(&p).ok().as_ref() == Some(h))
            });
            if rec.params == params && rec.inputs == inputs && outputs_match {
                log::info!("{stage}: up to date");
                return Ok(StageStatus::UpToDate);
            }
        }
    }

    log::info!("{stage}: running");
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    match stage {
        Stage::BuildCorpus => stage_build_corpus(cfg)?,
        Stage::Moments => stage_moments(cfg)?,
        Stage::Changes => stage_changes(cfg)?,
        Stage::Cascades => stage_cascades(cfg)?,
        Stage::Fit => stage_fit(cfg)?,
        Stage::Featurize => stage_featurize(cfg)?,
        Stage::Evaluate => stage_evaluate(cfg)?,
    }
    let mut outputs = BTreeMap::new();
    for name in stage.outputs() {
        outputs.insert(name.to_string(), hash_file(&out_dir.join(name))?);
    }
    // Downstream records are stale once this stage reruns.
    manifest.stages.retain(|k, _| k.parse::<Stage>().is_ok_and(|s| s <= stage));
    manifest.stages.insert(stage.as_str().into(), StageRecord { params, inputs, outputs });
    manifest.save(out_dir)?;
    Ok(StageStatus::Ran)
}

/// Run every stage in order, then write the report.
pub fn run_all(cfg: &PipelineConfig, force: bool) -> Result<Vec<(Stage, StageStatus)>> {
    let mut done = Vec::new();
    for stage in Stage::ALL {
        done.push((stage, run_stage(cfg, stage, force)?));
    }
    report(&cfg.paths.output)?;
    Ok(done)
}

fn stage_build_corpus(cfg: &PipelineConfig) -> Result<()> {
    build_corpus(
        &cfg.paths.corpus,
        cfg.years()?,
        &cfg.vocab_config(),
        &cfg.output(VOCAB_FILE),
        &cfg.output(DOCS_FILE),
    )
    .map(|_| ())
}

/// Load the corpus, write the vocabulary TSV and the document table.
pub fn build_corpus(
    corpus_path: &Path,
    years: (Year, Year),
    vocab_cfg: &VocabConfig,
    vocab_out: &Path,
    docs_out: &Path,
) -> Result<corpus::Vocabulary> {
    let corpus = load_corpus(corpus_path, years)?;
    let vocab = build_vocabulary(&corpus, vocab_cfg)?;
    log::info!("{} documents, {} vocabulary words", corpus.len(), vocab.len());
    vocab.write_tsv(vocab_out)?;
    corpus::write_doc_table(docs_out, &corpus::doc_rows(&corpus))?;
    Ok(vocab)
}

fn stage_moments(cfg: &PipelineConfig) -> Result<()> {
    compute_moments(&cfg.paths.store, &cfg.output(VOCAB_FILE), Some(cfg.years()?), &cfg.output(MOMENTS_FILE))
        .map(|_| ())
}

pub fn compute_moments(
    store_path: &Path,
    vocab_tsv: &Path,
    years: Option<(Year, Year)>,
    out: &Path,
) -> Result<MomentTable> {
    let vocab = VocabTable::read(vocab_tsv)?;
    let years = years.or(vocab.year_range);
    let table = store::accumulate_moments(store_path, vocab.len(), years)?;
    table.write(out)?;
    Ok(table)
}

fn stage_changes(cfg: &PipelineConfig) -> Result<()> {
    let vocab = VocabTable::read(&cfg.output(VOCAB_FILE))?;
    let moments = MomentTable::read(&cfg.output(MOMENTS_FILE))?;
    let mut changes = change::rank_semantic_changes(&moments, vocab.len(), cfg.changes.k_semantic, cfg.execution)?;
    let (lexical, lex_words) = lexical_changes(&cfg.paths.corpus, cfg.years()?, &cfg.vocab_config(), cfg.changes.k_lexical, cfg.execution)?;
    if lex_words != vocab.words {
        return Err(Error::Config("corpus changed since build-corpus; rerun it".into()));
    }
    changes.extend(lexical);
    change::write_changes(&cfg.output(CHANGES_FILE), &vocab.words, &changes)
}

/// Rank lexical innovations straight from the corpus.
pub fn lexical_changes(
    corpus_path: &Path,
    years: (Year, Year),
    vocab_cfg: &VocabConfig,
    k: usize,
    exec: Execution,
) -> Result<(Vec<change::ChangeCandidate>, Vec<String>)> {
    let corpus = load_corpus(corpus_path, years)?;
    let vocab = build_vocabulary(&corpus, vocab_cfg)?;
    let ranked = change::rank_lexical_changes(&vocab, &corpus.total_tokens_per_year, k, exec)?;
    Ok((ranked, vocab.words().to_vec()))
}

fn stage_cascades(cfg: &PipelineConfig) -> Result<()> {
    let set = build_cascades(
        &change::read_changes(&cfg.output(CHANGES_FILE))?,
        &cfg.paths.store,
        &cfg.output(VOCAB_FILE),
        &cfg.output(DOCS_FILE),
        Some((&cfg.paths.corpus, cfg.years()?)),
        cfg.sense.l2,
        cfg.execution,
    )?;
    set.write_jsonl(&cfg.output(CASCADES_FILE))
}

/// Semantic cascades from cross-validated sense labels of the store's
/// usages; lexical cascades from every corpus usage of the word.
pub fn build_cascades(
    changes: &[change::ChangeRow],
    store_path: &Path,
    vocab_tsv: &Path,
    docs_csv: &Path,
    corpus: Option<(&Path, (Year, Year))>,
    l2: f64,
    exec: Execution,
) -> Result<CascadeSet> {
    let vocab = VocabTable::read(vocab_tsv)?;
    let docs = read_doc_table(docs_csv)?;
    let ids: HashMap<&str, u32> = vocab.words.iter().enumerate().map(|(i, w)| (w.as_str(), i as u32)).collect();

    let semantic: Vec<(u32, &change::ChangeRow)> = changes
        .iter()
        .filter(|c| c.kind == ChangeKind::Semantic)
        .map(|c| {
            ids.get(c.word.as_str())
                .map(|&id| (id, c))
                .ok_or_else(|| Error::UnknownWord(c.word.clone()))
        })
        .collect::<Result<_>>()?;
    let mut usages: BTreeMap<u32, Vec<EmbeddedUsage>> = semantic.iter().map(|(id, _)| (*id, Vec::new())).collect();
    for rec in StoreReader::open(store_path)? {
        let rec = rec?;
        if rec.doc_id as usize >= docs.len() {
            return Err(Error::InvalidStore(format!("document index {} outside the document table", rec.doc_id)));
        }
        if let Some(v) = usages.get_mut(&rec.word_id) {
            v.push(rec);
        }
    }
    let labeled = exec::map(exec, &semantic, |(id, c)| {
        sense::cv_label_usages(&usages[id], c.t_star, l2).and_then(|l| build_semantic_cascade(&c.word, c.t_star, &l.labels))
    });
    let mut cascades = Vec::new();
    for r in labeled {
        match r {
            Ok(c) => cascades.push(c),
            Err(Error::EmptyCascade(w)) => log::warn!("no new-sense usages for {w:?}; dropped"),
            Err(e) => return Err(e),
        }
    }

    let years = corpus
        .map(|(_, y)| y)
        .or(vocab.year_range)
        .ok_or_else(|| Error::InvalidArgument("year range unknown: vocabulary has no years line".into()))?;
    let lexical: Vec<(String, Option<Year>)> = changes
        .iter()
        .filter(|c| c.kind == ChangeKind::Lexical)
        .map(|c| (c.word.clone(), Some(c.t_star)))
        .collect();
    if !lexical.is_empty() {
        let (corpus_path, _) =
            corpus.ok_or_else(|| Error::InvalidArgument("lexical cascades need the corpus".into()))?;
        let corpus = load_corpus(corpus_path, years)?;
        if corpus.len() != docs.len() || corpus.documents.iter().zip(&docs).any(|(d, r)| d.doc_id != r.doc_id) {
            return Err(Error::Config("corpus does not match the document table; rerun build-corpus".into()));
        }
        cascades.extend(build_lexical_cascades(&corpus, &lexical).into_iter().filter(|c| !c.is_empty()));
    }
    Ok(CascadeSet {
        year_range: years,
        doc_ids: docs.into_iter().map(|d| d.doc_id).collect(),
        cascades,
    })
}

fn stage_fit(cfg: &PipelineConfig) -> Result<()> {
    let docs = read_doc_table(&cfg.output(DOCS_FILE))?;
    let ids: Vec<String> = docs.into_iter().map(|d| d.doc_id).collect();
    let set = CascadeSet::read_jsonl(&cfg.output(CASCADES_FILE), Some(&ids))?;
    let (raw, bandwidth) = fit_influence(&set, &cfg.hawkes.gamma_grid, cfg.hawkes.heldout, cfg.seed, &cfg.fit_options())?;
    hawkes::write_influence_csv(&cfg.output(INFLUENCE_FILE), &raw)?;
    hawkes::write_bandwidth_csv(&cfg.output(BANDWIDTH_FILE), &bandwidth)
}

/// Select the bandwidth per kind on a heldout split, then refit every grid
/// bandwidth on all cascades of that kind for the reported influence values.
pub fn fit_influence(
    set: &CascadeSet,
    grid: &[f64],
    heldout: f64,
    seed: u64,
    opts: &FitOptions,
) -> Result<(Vec<InfluenceRow>, Vec<BandwidthRow>)> {
    let mut raw = Vec::new();
    let mut summary = Vec::new();
    for kind in [ChangeKind::Semantic, ChangeKind::Lexical] {
        let sub = set.of_kind(kind);
        if sub.cascades.iter().all(|c| c.is_empty()) {
            log::warn!("no {kind} cascades; {kind} influence is zero for every document");
            continue;
        }
        let (selected, fits) = if grid.len() > 1 {
            hawkes::select_bandwidth(&sub, grid, heldout, seed, opts)?
        } else {
            (grid[0], vec![hawkes::fit(&sub, grid[0], heldout, seed, opts)])
        };
        for (&gamma, f) in grid.iter().zip(&fits) {
            let Ok(f) = f else { continue };
            summary.push(BandwidthRow {
                kind,
                gamma,
                train_ll: f.train_ll,
                heldout_ll: f.heldout_ll,
                iterations: f.iterations,
                converged: f.converged,
                selected: gamma == selected,
            });
            let full = hawkes::fit(&sub, gamma, 0.0, seed, opts)?;
            raw.extend(sub.doc_ids.iter().zip(&full.model.alpha).map(|(d, &alpha)| InfluenceRow {
                doc_id: d.clone(),
                alpha,
                kind,
                gamma,
            }));
        }
        log::info!("{kind}: selected gamma = {selected}");
    }
    Ok((raw, summary))
}

fn stage_featurize(cfg: &PipelineConfig) -> Result<()> {
    let raw = hawkes::read_influence_csv(&cfg.output(INFLUENCE_FILE))?;
    let bandwidth = hawkes::read_bandwidth_csv(&cfg.output(BANDWIDTH_FILE))?;
    let docs = read_doc_table(&cfg.output(DOCS_FILE))?;
    influence::featurize(&raw, &bandwidth, &docs)?.write_csv(&cfg.output(FEATURES_FILE))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub model: Model,
    pub labels: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub log_likelihood: f64,
    pub n: usize,
}

impl From<&RegressionFit> for FitRecord {
    fn from(f: &RegressionFit) -> Self {
        FitRecord {
            model: f.model.expect("model fits carry their model"),
            labels: f.labels.clone(),
            coefficients: f.coefficients.clone(),
            std_errors: f.std_errors.clone(),
            log_likelihood: f.log_likelihood,
            n: f.n,
        }
    }
}

impl FitRecord {
    fn to_fit(&self) -> RegressionFit {
        RegressionFit {
            model: Some(self.model),
            labels: self.labels.clone(),
            coefficients: self.coefficients.clone(),
            std_errors: self.std_errors.clone(),
            log_likelihood: self.log_likelihood,
            sigma2: f64::NAN,
            n: self.n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrtRecord {
    pub restricted: Model,
    pub full: Model,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineYear {
    pub year: Year,
    pub n_train: usize,
    pub n_test: usize,
    pub max_train_year: Year,
    pub mse: Vec<f64>,
    pub dropped: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineRecord {
    pub models: Vec<Model>,
    pub years: Vec<OnlineYear>,
    pub micro_mse: Vec<f64>,
}

impl From<&EvalReport> for OnlineRecord {
    fn from(r: &EvalReport) -> Self {
        OnlineRecord {
            models: r.models.clone(),
            years: r
                .years
                .iter()
                .map(|y| OnlineYear {
                    year: y.year,
                    n_train: y.n_train,
                    n_test: y.n_test,
                    max_train_year: y.max_train_year,
                    mse: y.mse.clone(),
                    dropped: y.dropped.clone(),
                })
                .collect(),
            micro_mse: r.micro_mse.clone(),
        }
    }
}

impl OnlineRecord {
    fn to_report(&self) -> EvalReport {
        EvalReport {
            models: self.models.clone(),
            years: self
                .years
                .iter()
                .map(|y| citation::YearResult {
                    year: y.year,
                    n_train: y.n_train,
                    n_test: y.n_test,
                    max_train_year: y.max_train_year,
                    mse: y.mse.clone(),
                    squared_error: y.mse.iter().map(|m| m * y.n_test as f64).collect(),
                    dropped: y.dropped.clone(),
                })
                .collect(),
            micro_mse: self.micro_mse.clone(),
        }
    }
}

/// Everything the evaluate stage computes, as one JSON artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub schema: String,
    pub version: u32,
    pub n_rows: usize,
    pub fits: Vec<FitRecord>,
    pub lrt: Vec<LrtRecord>,
    pub online: Option<OnlineRecord>,
}

impl Evaluation {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ev: Evaluation = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        if ev.schema != "evaluation" || ev.version != SCHEMA_VERSION {
            return Err(Error::parse(path, 1, "unsupported evaluation schema"));
        }
        Ok(ev)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Numerical(e.to_string()))?;
        write_atomic(path, |out| writeln!(out, "{text}").map_err(write_err(path)))
    }
}

/// Inputs to the evaluation: features joined with citations and topics.
pub fn load_rows(
    features: &Path,
    citations: &Path,
    topics: Option<&Path>,
    min_year: Year,
    horizon: Option<Year>,
) -> Result<(Vec<citation::FeatureRow>, FeatureTable)> {
    let table = FeatureTable::read_csv(features)?;
    let (cites, observed) = citation::read_citations(citations)?;
    let horizon = horizon
        .or(observed)
        .ok_or_else(|| Error::InvalidArgument("citations file is empty and no horizon is configured".into()))?;
    let topics = topics.map(citation::read_topics).transpose()?;
    let rows = citation::assemble_rows(&table, &cites, topics.as_ref(), min_year, horizon)?;
    Ok((rows, table))
}

/// Nested fits for each model, likelihood-ratio tests between consecutive
/// models, and the online prediction report.
pub fn evaluate(
    rows: &[citation::FeatureRow],
    models: &[Model],
    online_years: Option<(Year, Year)>,
    exec: Execution,
) -> Result<Evaluation> {
    let fits: Vec<RegressionFit> = models.iter().map(|&m| citation::fit_model(m, rows)).collect::<Result<_>>()?;
    let mut lrt = Vec::new();
    for pair in fits.windows(2) {
        let df = pair[1].labels.len() - pair[0].labels.len();
        let t = citation::likelihood_ratio_test(&pair[0], &pair[1], df)?;
        lrt.push(LrtRecord {
            restricted: pair[0].model.unwrap(),
            full: pair[1].model.unwrap(),
            statistic: t.statistic,
            df,
            p_value: t.p_value,
        });
    }
    let online = online_years
        .map(|ys| citation::online_predict(rows, models, ys, exec))
        .transpose()?;
    Ok(Evaluation {
        schema: "evaluation".into(),
        version: SCHEMA_VERSION,
        n_rows: rows.len(),
        fits: fits.iter().map(FitRecord::from).collect(),
        lrt,
        online: online.as_ref().map(OnlineRecord::from),
    })
}

fn stage_evaluate(cfg: &PipelineConfig) -> Result<()> {
    let citations = cfg
        .paths
        .citations
        .as_ref()
        .ok_or_else(|| Error::Config("evaluate needs paths.citations".into()))?;
    let models = cfg.models()?;
    if models.iter().any(|&m| m >= Model::M2) && cfg.paths.topics.is_none() {
        return Err(Error::Config("models M2-M4 need paths.topics".into()));
    }
    let (rows, _) = load_rows(
        &cfg.output(FEATURES_FILE),
        citations,
        cfg.paths.topics.as_deref(),
        cfg.evaluate.min_year,
        cfg.evaluate.citation_horizon,
    )?;
    log::info!("{} papers in the analysis population", rows.len());
    evaluate(&rows, &models, Some(cfg.online_years()?), cfg.execution)?.write(&cfg.output(EVALUATION_FILE))
}

pub const REGRESSION_TABLE: &str = "regression.tsv";
pub const COEFFICIENTS_FILE: &str = "coefficients.csv";
pub const LRT_TABLE: &str = "lrt.tsv";
pub const ONLINE_TABLE: &str = "online.tsv";
pub const QUANTILE_EFFECTS_FILE: &str = "quantile_effects.csv";

/// Render the evaluation into tables and return a short text summary. A pure
/// function of `evaluation.json`.
pub fn report(out_dir: &Path) -> Result<String> {
    let path = out_dir.join(EVALUATION_FILE);
    if !path.exists() {
        return Err(Error::MissingUpstream {
            stage: "report".into(),
            requires: Stage::Evaluate.as_str().into(),
            artifact: path,
        });
    }
    let ev = Evaluation::read(&path)?;
    let fits: Vec<RegressionFit> = ev.fits.iter().map(FitRecord::to_fit).collect();

    let table = out_dir.join(REGRESSION_TABLE);
    write_atomic(&table, |out| {
        writeln!(out, "{}", schema_banner("regression")).map_err(write_err(&table))?;
        citation::write_regression_table(out, &fits).map_err(write_err(&table))
    })?;

    let coef = out_dir.join(COEFFICIENTS_FILE);
    write_atomic(&coef, |out| {
        let e = write_err(&coef);
        writeln!(out, "{}", schema_banner("coefficients")).map_err(&e)?;
        writeln!(out, "model,predictor,coef,se").map_err(&e)?;
        for f in &ev.fits {
            for ((l, c), s) in f.labels.iter().zip(&f.coefficients).zip(&f.std_errors) {
                writeln!(out, "{},{l},{c},{s}", f.model).map_err(&e)?;
            }
        }
        Ok(())
    })?;

    let effects = out_dir.join(QUANTILE_EFFECTS_FILE);
    write_atomic(&effects, |out| {
        let e = write_err(&effects);
        writeln!(out, "{}", schema_banner("quantile-effects")).map_err(&e)?;
        writeln!(out, "model,kind,quantile,coef,se").map_err(&e)?;
        for f in &ev.fits {
            for (prefix, kind) in [("lex", "lexical"), ("sem", "semantic")] {
                if !f.labels.iter().any(|l| l.starts_with(prefix)) {
                    continue;
                }
                writeln!(out, "{},{kind},Q1,0,0", f.model).map_err(&e)?;
                for q in 2..=4 {
                    if let Some(j) = f.labels.iter().position(|l| *l == format!("{prefix}_q{q}")) {
                        writeln!(out, "{},{kind},Q{q},{},{}", f.model, f.coefficients[j], f.std_errors[j]).map_err(&e)?;
                    }
                }
            }
        }
        Ok(())
    })?;

    let lrt = out_dir.join(LRT_TABLE);
    write_atomic(&lrt, |out| {
        let e = write_err(&lrt);
        writeln!(out, "{}", schema_banner("lrt")).map_err(&e)?;
        writeln!(out, "restricted\tfull\tstatistic\tdf\tp_value").map_err(&e)?;
        for t in &ev.lrt {
            writeln!(out, "{}\t{}\t{:.3}\t{}\t{:.3e}", t.restricted, t.full, t.statistic, t.df, t.p_value).map_err(&e)?;
        }
        Ok(())
    })?;

    let mut summary = String::new();
    let table_text = table_body(&table)?;
    summary.push_str(&format!("Regression on {} papers\n{table_text}", ev.n_rows));
    for t in &ev.lrt {
        summary.push_str(&format!(
            "LR test {} vs {}: chi2({}) = {:.2}, p = {:.3e}\n",
            t.full, t.restricted, t.df, t.statistic, t.p_value
        ));
    }
    if let Some(online) = &ev.online {
        let path = out_dir.join(ONLINE_TABLE);
        let report = online.to_report();
        write_atomic(&path, |out| {
            writeln!(out, "{}", schema_banner("online")).map_err(write_err(&path))?;
            citation::write_online_table(out, &report).map_err(write_err(&path))
        })?;
        let text = table_body(&path)?;
        summary.push_str(&format!("Online prediction MSE\n{text}"));
    }
    Ok(summary)
}

/// A written table without its schema banner.
fn table_body(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect())
}

/// Regression fits without the online protocol, for the `eval regress` command.
pub fn regress(rows: &[citation::FeatureRow], models: &[Model]) -> Result<Evaluation> {
    evaluate(rows, models, None, Execution::Sequential)
}

/// Design matrix width for a model, used in command summaries.
pub fn design_width(model: Model, rows: &[citation::FeatureRow]) -> Result<usize> {
    Ok(citation::build_design_matrix(model, rows, FeatureSet::Regression)?.x.ncols())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, extra: &str) -> PathBuf {
        let p = dir.join("pipeline.toml");
        fs::write(
            &p,
            format!(
                "[paths]\ncorpus = \"c.jsonl\"\nstore = \"e.cemb\"\noutput = \"out\"\n\n[corpus]\nyears = \"2000:2010\"\n{extra}"
            ),
        )
        .unwrap();
        p
    }

    #[test]
    fn defaults_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::load(&write_config(dir.path(), "")).unwrap();
        assert_eq!(cfg.paths.corpus, dir.path().join("c.jsonl"));
        assert_eq!(cfg.changes.k_semantic, 2910);
        assert_eq!(cfg.changes.k_lexical, 3000);
        assert_eq!(cfg.hawkes.gamma_grid, hawkes::DEFAULT_GAMMA_GRID.to_vec());
        assert_eq!(cfg.hawkes.heldout, 0.1);
        assert_eq!(cfg.models().unwrap(), Model::ALL.to_vec());
        assert_eq!(cfg.corpus.min_count, 30);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        for extra in [
            "[hawkes]\nheldout = 1.5\n",
            "[changes]\nk_semantic = 0\n",
            "[evaluate]\nmodels = [\"M9\"]\n",
            "unknown = 3\n",
            "[hawkes]\ngamma_grid = []\n",
        ] {
            let err = PipelineConfig::load(&write_config(dir.path(), extra)).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{extra}: {err}");
        }
    }

    #[test]
    fn fit_before_cascades_names_the_missing_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::load(&write_config(dir.path(), "")).unwrap();
        match run_stage(&cfg, Stage::Fit, false) {
            Err(Error::MissingUpstream { requires, .. }) => assert_eq!(requires, "cascades"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert!("train".parse::<Stage>().is_err());
    }
}
