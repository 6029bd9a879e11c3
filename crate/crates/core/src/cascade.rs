//! Event cascades: per-innovation lists of `(year, document)` events.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::change::ChangeKind;
use crate::corpus::{Corpus, Year};
use crate::error::{Error, Result};
use crate::io::{write_atomic, write_err, SCHEMA_VERSION};
use crate::sense::{Sense, UsageLabel};

#[derive(Clone, Debug, PartialEq)]
pub struct Cascade {
    pub word: String,
    pub kind: ChangeKind,
    pub t_star: Option<Year>,
    /// `(year, doc index)`, sorted.
    pub events: Vec<(Year, u32)>,
}

impl Cascade {
    pub fn new(word: String, kind: ChangeKind, t_star: Option<Year>, mut events: Vec<(Year, u32)>) -> Self {
        events.sort_unstable();
        Cascade {
            word,
            kind,
            t_star,
            events,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// `n(t, w)` for every year in `year_range`.
    pub fn counts(&self, year_range: (Year, Year)) -> Vec<u64> {
        let mut n = vec![0u64; (year_range.1 - year_range.0 + 1).max(0) as usize];
        for &(y, _) in &self.events {
            if y >= year_range.0 && y <= year_range.1 {
                n[(y - year_range.0) as usize] += 1;
            }
        }
        n
    }

    pub fn count_map(&self) -> BTreeMap<Year, u64> {
        let mut m = BTreeMap::new();
        for &(y, _) in &self.events {
            *m.entry(y).or_insert(0) += 1;
        }
        m
    }
}

/// Cascade made of the usages labeled as the new sense.
pub fn build_semantic_cascade(word: &str, t_star: Year, labels: &[UsageLabel]) -> Result<Cascade> {
    let events: Vec<(Year, u32)> = labels
        .iter()
        .filter(|l| l.label == Sense::New)
        .map(|l| (l.year, l.doc_id))
        .collect();
    if events.is_empty() {
        return Err(Error::EmptyCascade(word.to_string()));
    }
    Ok(Cascade::new(word.to_string(), ChangeKind::Semantic, Some(t_star), events))
}

/// Every usage of each listed word becomes an event; one pass over the corpus.
/// `words` pairs the surface form with its transition year.
pub fn build_lexical_cascades(corpus: &Corpus, words: &[(String, Option<Year>)]) -> Vec<Cascade> {
    let slot: HashMap<&str, usize> = words.iter().enumerate().map(|(i, (w, _))| (w.as_str(), i)).collect();
    let mut events: Vec<Vec<(Year, u32)>> = vec![Vec::new(); words.len()];
    for (d, doc) in corpus.documents.iter().enumerate() {
        for tok in doc.tokens() {
            if let Some(&i) = slot.get(tok) {
                events[i].push((doc.year, d as u32));
            }
        }
    }
    words
        .iter()
        .zip(events)
        .map(|((w, t), ev)| Cascade::new(w.clone(), ChangeKind::Lexical, *t, ev))
        .collect()
}

/// Cascades sharing one year span and one document id table.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeSet {
    pub year_range: (Year, Year),
    /// Document id for each mark index.
    pub doc_ids: Vec<String>,
    pub cascades: Vec<Cascade>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
    years: (Year, Year),
}

#[derive(Serialize, Deserialize)]
struct Record {
    word: String,
    kind: ChangeKind,
    t_star: Option<Year>,
    events: Vec<(Year, String)>,
}

impl CascadeSet {
    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn of_kind(&self, kind: ChangeKind) -> CascadeSet {
        CascadeSet {
            year_range: self.year_range,
            doc_ids: self.doc_ids.clone(),
            cascades: self.cascades.iter().filter(|c| c.kind == kind).cloned().collect(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> CascadeSet {
        CascadeSet {
            year_range: self.year_range,
            doc_ids: self.doc_ids.clone(),
            cascades: idx.iter().map(|&i| self.cascades[i].clone()).collect(),
        }
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_atomic(path, |out| {
            let err = write_err(path);
            let json = |e: serde_json::Error| Error::Numerical(e.to_string());
            let header = Header {
                schema: "cascades".into(),
                version: SCHEMA_VERSION,
                years: self.year_range,
            };
            writeln!(out, "{}", serde_json::to_string(&header).map_err(json)?).map_err(&err)?;
            for c in &self.cascades {
                let rec = Record {
                    word: c.word.clone(),
                    kind: c.kind,
                    t_star: c.t_star,
                    events: c
                        .events
                        .iter()
                        .map(|&(y, d)| (y, self.doc_ids[d as usize].clone()))
                        .collect(),
                };
                writeln!(out, "{}", serde_json::to_string(&rec).map_err(json)?).map_err(&err)?;
            }
            Ok(())
        })
    }

    /// Read cascades; document ids are interned in order of first appearance
    /// unless `doc_ids` seeds the table.
    pub fn read_jsonl(path: &Path, doc_ids: Option<&[String]>) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let header: Header = loop {
            let Some((i, line)) = lines.next() else {
                return Err(Error::parse(path, 1, "missing cascades header"));
            };
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            break serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, i + 1, format!("bad header: {e}")))?;
        };
        if header.schema != "cascades" || header.version != SCHEMA_VERSION {
            return Err(Error::parse(path, 1, "unsupported cascades schema"));
        }
        let mut ids: Vec<String> = doc_ids.map(<[String]>::to_vec).unwrap_or_default();
        let mut index: HashMap<String, u32> =
            ids.iter().enumerate().map(|(i, d)| (d.clone(), i as u32)).collect();
        let mut cascades = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, i + 1, format!("bad cascade record: {e}")))?;
            let events = rec
                .events
                .into_iter()
                .map(|(y, d)| {
                    let next = index.len() as u32;
                    let id = *index.entry(d.clone()).or_insert_with(|| {
                        ids.push(d);
                        next
                    });
                    (y, id)
                })
                .collect();
            cascades.push(Cascade::new(rec.word, rec.kind, rec.t_star, events));
        }
        Ok(CascadeSet {
            year_range: header.years,
            doc_ids: ids,
            cascades,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Document};

    fn label(doc: u32, year: Year, s: Sense) -> UsageLabel {
        UsageLabel {
            word_id: 0,
            doc_id: doc,
            year,
            position: 0,
            label: s,
            fold: 0,
        }
    }

    #[test]
    fn semantic_cascade_keeps_new_usages() {
        let labels = vec![
            label(0, 2000, Sense::Old),
            label(1, 2003, Sense::New),
            label(2, 2001, Sense::New),
        ];
        let c = build_semantic_cascade("w", 2000, &labels).unwrap();
        assert_eq!(c.events, vec![(2001, 2), (2003, 1)]);
        let all_old = vec![label(0, 2000, Sense::Old)];
        assert!(matches!(build_semantic_cascade("w", 2000, &all_old), Err(Error::EmptyCascade(_))));
    }

    #[test]
    fn lexical_cascade_counts() {
        let mk = |id: &str, year, text: &str| Document {
            doc_id: id.into(),
            year,
            chunks: tokenize(text),
            raw_tokens: 0,
        };
        let corpus = Corpus::new(
            vec![
                mk("a", 2010, "bert bert other"),
                mk("b", 2010, "bert"),
                mk("c", 2012, "bert lstm"),
            ],
            (2010, 2012),
        )
        .unwrap();
        let cs = build_lexical_cascades(&corpus, &[("bert".into(), Some(2010))]);
        assert_eq!(cs[0].len(), 4);
        assert_eq!(cs[0].counts((2010, 2012)), vec![3, 0, 1]);
        assert_eq!(cs[0].events, vec![(2010, 0), (2010, 0), (2010, 1), (2012, 2)]);
    }

    #[test]
    fn jsonl_round_trip() {
        let set = CascadeSet {
            year_range: (2000, 2005),
            doc_ids: vec!["p1".into(), "p2".into(), "p3".into()],
            cascades: vec![
                Cascade::new("attention".into(), ChangeKind::Semantic, Some(2002), vec![(2003, 2), (2003, 0)]),
                Cascade::new("bert".into(), ChangeKind::Lexical, None, vec![(2001, 1)]),
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        set.write_jsonl(&p).unwrap();
        let back = CascadeSet::read_jsonl(&p, Some(&set.doc_ids)).unwrap();
        assert_eq!(back, set);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().nth(1).unwrap().contains(r#""events":[[2003,"p1"],[2003,"p3"]]"#));
        // Without a seed table ids are interned by appearance.
        let fresh = CascadeSet::read_jsonl(&p, None).unwrap();
        assert_eq!(fresh.doc_ids, vec!["p1", "p3", "p2"]);
    }
}
