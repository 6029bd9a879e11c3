//! Year-stamped document collection, tokenization and the filtered
//! vocabulary with per-year frequency tables.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{schema_banner, write_atomic, write_err};

/// Maximum number of tokens in one chunk.
pub const CHUNK_LEN: usize = 200;

pub type Year = i32;

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub year: Year,
    pub chunks: Vec<Vec<String>>,
    /// Whitespace token count before filtering.
    pub raw_tokens: usize,
}

impl Document {
    /// Number of tokens kept by [`tokenize`].
    pub fn len(&self) -> usize {
        self.chunks.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.chunks.iter().flatten().map(String::as_str)
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub year_range: (Year, Year),
    pub total_tokens_per_year: BTreeMap<Year, u64>,
}

#[derive(Deserialize)]
struct RawRecord {
    doc_id: String,
    year: Year,
    text: String,
}

#[derive(Serialize)]
struct RawRecordRef<'a> {
    doc_id: &'a str,
    year: Year,
    text: &'a str,
}

/// Append one corpus record as a JSON line.
pub fn write_record(out: &mut dyn Write, doc_id: &str, year: Year, text: &str) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, &RawRecordRef { doc_id, year, text })?;
    out.write_all(b"\n")
}

/// Load a line-delimited JSON corpus, keeping documents inside `year_range`.
pub fn load_corpus(path: &Path, year_range: (Year, Year)) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut documents = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, i + 1, format!("malformed record: {e}")))?;
        if !seen.insert(rec.doc_id.clone()) {
            return Err(Error::DuplicateDoc(rec.doc_id));
        }
        if rec.year < year_range.0 || rec.year > year_range.1 {
            continue;
        }
        documents.push(Document {
            raw_tokens: rec.text.split_whitespace().count(),
            chunks: tokenize(&rec.text),
            doc_id: rec.doc_id,
            year: rec.year,
        });
    }
    Corpus::new(documents, year_range)
}

impl Corpus {
    pub fn new(documents: Vec<Document>, year_range: (Year, Year)) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        for d in &documents {
            if !seen.insert(d.doc_id.as_str()) {
                return Err(Error::DuplicateDoc(d.doc_id.clone()));
            }
        }
        let mut total_tokens_per_year: BTreeMap<Year, u64> =
            (year_range.0..=year_range.1).map(|y| (y, 0)).collect();
        for d in &documents {
            *total_tokens_per_year.entry(d.year).or_default() += d.len() as u64;
        }
        Ok(Corpus {
            documents,
            year_range,
            total_tokens_per_year,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn years(&self) -> impl Iterator<Item = Year> {
        self.year_range.0..=self.year_range.1
    }
}

fn normalize_token(raw: &str) -> Option<String> {
    let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
    if trimmed.is_empty() || !trimmed.chars().all(char::is_alphabetic) {
        return None;
    }
    let lower = trimmed.to_lowercase();
    (lower.chars().count() > 2).then_some(lower)
}

/// Whitespace-split, lowercase, keep purely alphabetic tokens longer than
/// two characters, and cut into consecutive chunks of at most 200 tokens.
///
/// Surrounding punctuation is stripped before the alphabetic check, so
/// `"model,"` becomes `"model"` while `"bert-2"` is dropped.
pub fn tokenize(text: &str) -> Vec<Vec<String>> {
    let tokens: Vec<String> = text.split_whitespace().filter_map(normalize_token).collect();
    tokens.chunks(CHUNK_LEN).map(<[String]>::to_vec).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub min_count: u64,
    pub max_df: f64,
    pub min_len: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_count: 30,
            max_df: 0.9,
            min_len: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
    pub corpus_count: Vec<u64>,
    pub doc_freq: Vec<u32>,
    yearly: Vec<BTreeMap<Year, u64>>,
    pub year_range: (Year, Year),
}

/// Keep words passing every filter; ids are assigned in lexicographic order.
pub fn build_vocabulary(corpus: &Corpus, config: &VocabConfig) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut count: HashMap<&str, u64> = HashMap::new();
    let mut df: HashMap<&str, u32> = HashMap::new();
    for doc in &corpus.documents {
        let mut in_doc = HashSet::new();
        for tok in doc.tokens() {
            *count.entry(tok).or_default() += 1;
            if in_doc.insert(tok) {
                *df.entry(tok).or_default() += 1;
            }
        }
    }
    let n_docs = corpus.len() as f64;
    let mut words: Vec<&str> = count
        .iter()
        .filter(|(w, &c)| {
            w.chars().count() >= config.min_len
                && w.chars().all(char::is_alphabetic)
                && c >= config.min_count
                && f64::from(df[*w]) <= config.max_df * n_docs
        })
        .map(|(w, _)| *w)
        .collect();
    words.sort_unstable();

    let index: HashMap<String, u32> = words
        .iter()
        .enumerate()
        .map(|(i, w)| (w.to_string(), i as u32))
        .collect();
    let mut yearly = vec![BTreeMap::new(); words.len()];
    for doc in &corpus.documents {
        for tok in doc.tokens() {
            if let Some(&id) = index.get(tok) {
                *yearly[id as usize].entry(doc.year).or_insert(0) += 1;
            }
        }
    }
    Ok(Vocabulary {
        corpus_count: words.iter().map(|w| count[w]).collect(),
        doc_freq: words.iter().map(|w| df[w]).collect(),
        words: words.into_iter().map(str::to_string).collect(),
        index,
        yearly,
        year_range: corpus.year_range,
    })
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Per-year counts over the full year range; absent years report zero.
    pub fn yearly_counts(&self, word: &str) -> Result<BTreeMap<Year, u64>> {
        let id = self
            .id(word)
            .ok_or_else(|| Error::UnknownWord(word.to_string()))?;
        Ok(self.yearly_counts_by_id(id))
    }

    pub fn yearly_counts_by_id(&self, id: u32) -> BTreeMap<Year, u64> {
        let sparse = &self.yearly[id as usize];
        (self.year_range.0..=self.year_range.1)
            .map(|y| (y, sparse.get(&y).copied().unwrap_or(0)))
            .collect()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        write_atomic(path, |out| {
            let err = write_err(path);
            writeln!(out, "{}", schema_banner("vocab")).map_err(&err)?;
            writeln!(out, "# years {}:{}", self.year_range.0, self.year_range.1).map_err(&err)?;
            writeln!(out, "word\tid\tcorpus_count\tdoc_freq").map_err(&err)?;
            for (i, w) in self.words.iter().enumerate() {
                writeln!(out, "{w}\t{i}\t{}\t{}", self.corpus_count[i], self.doc_freq[i])
                    .map_err(&err)?;
            }
            Ok(())
        })
    }
}

/// Rows of a vocabulary TSV: word ids plus the corpus year range.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabTable {
    pub words: Vec<String>,
    pub corpus_count: Vec<u64>,
    pub doc_freq: Vec<u32>,
    pub year_range: Option<(Year, Year)>,
}

impl VocabTable {
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = VocabTable {
            words: Vec::new(),
            corpus_count: Vec::new(),
            doc_freq: Vec::new(),
            year_range: None,
        };
        let mut saw_header = false;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if let Some(rest) = line.strip_prefix("# years ") {
                table.year_range = Some(crate::io::parse_year_range(rest.trim())?);
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            if !saw_header {
                saw_header = true;
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::parse(path, i + 1, "expected word, id, corpus_count, doc_freq");
            if cols.len() != 4 {
                return Err(bad());
            }
            let id: usize = cols[1].parse().map_err(|_| bad())?;
            if id != table.words.len() {
                return Err(Error::parse(path, i + 1, "word ids must be dense and ordered"));
            }
            table.words.push(cols[0].to_string());
            table.corpus_count.push(cols[2].parse().map_err(|_| bad())?);
            table.doc_freq.push(cols[3].parse().map_err(|_| bad())?);
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// One row of the document table linking dense store indices to ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocRow {
    pub doc_index: u32,
    pub doc_id: String,
    pub year: Year,
    pub n_tokens: u64,
}

pub fn doc_rows(corpus: &Corpus) -> Vec<DocRow> {
    corpus
        .documents
        .iter()
        .enumerate()
        .map(|(i, d)| DocRow {
            doc_index: i as u32,
            doc_id: d.doc_id.clone(),
            year: d.year,
            n_tokens: d.len() as u64,
        })
        .collect()
}

pub fn write_doc_table(path: &Path, rows: &[DocRow]) -> Result<()> {
    write_atomic(path, |out| {
        writeln!(out, "{}", schema_banner("docs")).map_err(write_err(path))?;
        let mut w = crate::io::csv_writer(out, b',');
        for r in rows {
            w.serialize(r).map_err(|e| crate::io::csv_err(path, e))?;
        }
        w.flush().map_err(write_err(path))
    })
}

pub fn read_doc_table(path: &Path) -> Result<Vec<DocRow>> {
    let mut rdr = crate::io::csv_reader(path, b',')?;
    let rows: Vec<DocRow> = rdr
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| crate::io::csv_err(path, e))?;
    for (i, r) in rows.iter().enumerate() {
        if r.doc_index as usize != i {
            return Err(Error::parse(path, i + 2, "doc_index must be dense and ordered"));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, year: Year, text: &str) -> Document {
        Document {
            doc_id: id.into(),
            year,
            chunks: tokenize(text),
            raw_tokens: text.split_whitespace().count(),
        }
    }

    #[test]
    fn tokenize_filters() {
        assert_eq!(tokenize("The BERT-2 model, yes!"), vec![vec!["the", "model", "yes"]]);
        assert!(tokenize("a bc 12").is_empty());
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn tokenize_chunks() {
        let text = vec!["word"; 450].join(" ");
        let sizes: Vec<usize> = tokenize(&text).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![200, 200, 50]);
    }

    #[test]
    fn load_filters_years_and_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(
            &p,
            r#"{"doc_id":"a","year":1985,"text":"old paper"}
{"doc_id":"b","year":1990,"text":"first paper"}
{"doc_id":"c","year":2019,"text":"last paper"}
"#,
        )
        .unwrap();
        let c = load_corpus(&p, (1990, 2019)).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.total_tokens_per_year[&1990], 2);

        std::fs::write(
            &p,
            r#"{"doc_id":"a","year":1995,"text":"x"}
{"doc_id":"a","year":1996,"text":"y"}
"#,
        )
        .unwrap();
        assert!(matches!(load_corpus(&p, (1990, 2019)), Err(Error::DuplicateDoc(_))));

        std::fs::write(&p, "{\"doc_id\":\"a\",\"year\":1995,\"text\":\"x\"}\n{oops}\n").unwrap();
        match load_corpus(&p, (1990, 2019)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(&p, "{\"doc_id\":\"a\",\"year\":1980,\"text\":\"x\"}\n").unwrap();
        assert!(matches!(load_corpus(&p, (1990, 2019)), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn count_threshold_boundary() {
        // "alpha" 30 times, "beta" 29 times, spread so neither hits the df cap.
        let mut docs = Vec::new();
        for i in 0..30 {
            let mut text = String::from("alpha filler");
            if i < 29 {
                text.push_str(" beta");
            }
            if i % 2 == 0 {
                text.push_str(" other");
            }
            docs.push(doc(&format!("d{i}"), 2000, &text));
        }
        for i in 30..40 {
            docs.push(doc(&format!("d{i}"), 2001, "unrelated words here"));
        }
        let corpus = Corpus::new(docs, (2000, 2001)).unwrap();
        let vocab = build_vocabulary(&corpus, &VocabConfig::default()).unwrap();
        assert!(vocab.id("alpha").is_some());
        assert!(vocab.id("beta").is_none());
    }

    #[test]
    fn df_cap_excludes_ubiquitous_words() {
        let docs: Vec<Document> = (0..100)
            .map(|i| {
                let text = if i < 95 { "common common" } else { "rare rare rare rare rare rare" };
                doc(&format!("d{i}"), 2000, text)
            })
            .collect();
        let corpus = Corpus::new(docs, (2000, 2000)).unwrap();
        let vocab = build_vocabulary(&corpus, &VocabConfig::default()).unwrap();
        assert!(vocab.id("common").is_none());
        assert!(vocab.id("rare").is_some());
    }

    #[test]
    fn yearly_counts_manual_tally() {
        let docs = vec![
            doc("a", 1990, "cat cat dog"),
            doc("b", 1991, "cat"),
            doc("c", 1991, "dog dog"),
            doc("d", 1993, "cat dog"),
            doc("e", 1994, "cat"),
        ];
        let corpus = Corpus::new(docs, (1990, 1994)).unwrap();
        let cfg = VocabConfig {
            min_count: 1,
            max_df: 1.0,
            min_len: 3,
        };
        let vocab = build_vocabulary(&corpus, &cfg).unwrap();
        let cat = vocab.yearly_counts("cat").unwrap();
        let want: BTreeMap<Year, u64> =
            [(1990, 2), (1991, 1), (1992, 0), (1993, 1), (1994, 1)].into_iter().collect();
        assert_eq!(cat, want);
        assert_eq!(cat[&1992], 0);
        let dog = vocab.yearly_counts("dog").unwrap();
        assert_eq!(dog.values().sum::<u64>(), vocab.corpus_count[vocab.id("dog").unwrap() as usize]);
        assert!(matches!(vocab.yearly_counts("cow"), Err(Error::UnknownWord(_))));
    }

    #[test]
    fn vocab_tsv_round_trip() {
        let docs = vec![doc("a", 1990, "cat cat dog"), doc("b", 1991, "dog fish")];
        let corpus = Corpus::new(docs, (1990, 1991)).unwrap();
        let cfg = VocabConfig {
            min_count: 1,
            max_df: 1.0,
            min_len: 3,
        };
        let vocab = build_vocabulary(&corpus, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.tsv");
        vocab.write_tsv(&p).unwrap();
        let t = VocabTable::read(&p).unwrap();
        assert_eq!(t.words, vocab.words());
        assert_eq!(t.corpus_count, vocab.corpus_count);
        assert_eq!(t.year_range, Some((1990, 1991)));

        let rows = doc_rows(&corpus);
        let dp = dir.path().join("docs.csv");
        write_doc_table(&dp, &rows).unwrap();
        assert_eq!(read_doc_table(&dp).unwrap(), rows);
    }
}
