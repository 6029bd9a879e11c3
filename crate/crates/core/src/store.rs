//! Binary store of per-token contextual embeddings (`CEMB`) and the
//! streaming per-word, per-year moment statistics built from it.
//!
//! Store layout, all little-endian:
//!
//! ```text
//! header: b"CEMB" | u32 version | u32 dim | u64 count
//! record: u32 word_id | u32 doc_id | u16 year | u32 position | dim x f32
//! ```
//!
//! Moments layout (`CMOM`):
//!
//! ```text
//! header: b"CMOM" | u32 version | u32 dim | i32 first_year | i32 last_year | u64 n_words
//! word:   u32 word_id | u64 total | dim x f64 mean | dim x f64 m2 | u32 n_years
//!         then n_years x (i32 year | u64 count | dim x f64 sum)
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::corpus::Year;
use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"CEMB";
pub const STORE_VERSION: u32 = 1;
const STORE_HEADER_LEN: u64 = 4 + 4 + 4 + 8;

pub const MOMENTS_MAGIC: &[u8; 4] = b"CMOM";
pub const MOMENTS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedUsage {
    pub word_id: u32,
    pub doc_id: u32,
    pub year: Year,
    pub position: u32,
    pub vector: Vec<f32>,
}

/// Streaming writer; the record count in the header is patched on `finish`.
pub struct StoreWriter {
    out: BufWriter<File>,
    tmp: PathBuf,
    path: PathBuf,
    dim: usize,
    count: u64,
}

impl StoreWriter {
    pub fn create(path: &Path, dim: usize) -> Result<Self> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::InvalidArgument(format!("bad embedding dimension {dim}")));
        }
        let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(format!(".tmp-{}", std::process::id()));
        let tmp = path.with_file_name(name);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut out = BufWriter::new(file);
        let mut header = Vec::with_capacity(STORE_HEADER_LEN as usize);
        header.extend_from_slice(STORE_MAGIC);
        header.extend_from_slice(&STORE_VERSION.to_le_bytes());
        header.extend_from_slice(&(dim as u32).to_le_bytes());
        header.extend_from_slice(&0u64.to_le_bytes());
        out.write_all(&header).map_err(|e| Error::io(&tmp, e))?;
        Ok(StoreWriter {
            out,
            tmp,
            path: path.to_path_buf(),
            dim,
            count: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push(&mut self, usage: &EmbeddedUsage) -> Result<()> {
        if usage.vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: usage.vector.len(),
            });
        }
        if usage.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite embedding component for word {} in doc {}",
                usage.word_id, usage.doc_id
            )));
        }
        let year = u16::try_from(usage.year)
            .map_err(|_| Error::InvalidArgument(format!("year {} does not fit u16", usage.year)))?;
        let mut buf = Vec::with_capacity(14 + 4 * self.dim);
        buf.extend_from_slice(&usage.word_id.to_le_bytes());
        buf.extend_from_slice(&usage.doc_id.to_le_bytes());
        buf.extend_from_slice(&year.to_le_bytes());
        buf.extend_from_slice(&usage.position.to_le_bytes());
        for x in &usage.vector {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        self.out.write_all(&buf).map_err(|e| Error::io(&self.tmp, e))?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64> {
        let tmp = self.tmp.clone();
        let ioe = |e| Error::io(&tmp, e);
        self.out.flush().map_err(ioe)?;
        let mut file = self.out.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
        file.seek(SeekFrom::Start(12)).map_err(ioe)?;
        file.write_all(&self.count.to_le_bytes()).map_err(ioe)?;
        file.sync_all().map_err(ioe)?;
        drop(file);
        fs::rename(&self.tmp, &self.path).map_err(|e| Error::io(&self.path, e))?;
        Ok(self.count)
    }
}

/// Write every usage to a new store. All vectors must share one dimension;
/// `dim` is only consulted when the stream is empty.
pub fn write_store<'a, I>(usages: I, dim: usize, path: &Path) -> Result<u64>
where
    I: IntoIterator<Item = &'a EmbeddedUsage>,
{
    let mut iter = usages.into_iter().peekable();
    let dim = iter.peek().map_or(dim, |u| u.vector.len());
    let mut w = StoreWriter::create(path, dim)?;
    for u in iter {
        if let Err(e) = w.push(u) {
            let _ = fs::remove_file(&w.tmp);
            return Err(e);
        }
    }
    w.finish()
}

pub struct StoreReader {
    input: BufReader<File>,
    path: PathBuf,
    dim: usize,
    count: u64,
    read: u64,
}

impl StoreReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut input = BufReader::new(file);
        let mut header = [0u8; STORE_HEADER_LEN as usize];
        input
            .read_exact(&mut header)
            .map_err(|_| Error::InvalidStore(format!("{}: truncated header", path.display())))?;
        if &header[0..4] != STORE_MAGIC {
            return Err(Error::InvalidStore(format!("{}: bad magic", path.display())));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != STORE_VERSION {
            return Err(Error::InvalidStore(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(header[12..20].try_into().unwrap());
        Ok(StoreReader {
            input,
            path: path.to_path_buf(),
            dim,
            count,
            read: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    fn read_record(&mut self) -> Result<EmbeddedUsage> {
        let mut buf = vec![0u8; 14 + 4 * self.dim];
        self.input.read_exact(&mut buf).map_err(|_| {
            Error::InvalidStore(format!(
                "{}: truncated at record {} of {}",
                self.path.display(),
                self.read,
                self.count
            ))
        })?;
        let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
        let vector = buf[14..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(EmbeddedUsage {
            word_id: u32_at(0),
            doc_id: u32_at(4),
            year: Year::from(u16::from_le_bytes(buf[8..10].try_into().unwrap())),
            position: u32_at(10),
            vector,
        })
    }
}

impl Iterator for StoreReader {
    type Item = Result<EmbeddedUsage>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.read >= self.count {
            return None;
        }
        let rec = self.read_record();
        self.read += 1;
        if rec.is_err() {
            self.read = self.count;
        }
        Some(rec)
    }
}

pub fn read_store(path: &Path) -> Result<(usize, Vec<EmbeddedUsage>)> {
    let reader = StoreReader::open(path)?;
    let dim = reader.dim();
    let usages = reader.collect::<Result<Vec<_>>>()?;
    Ok((dim, usages))
}

#[derive(Clone, Debug, PartialEq)]
pub struct YearSum {
    pub count: u64,
    pub sum: Vec<f64>,
}

/// Sufficient statistics for one word: per-year sums and counts, plus the
/// global per-component mean and centered second moment (Welford).
///
/// Everything is accumulated relative to `pivot`, the first vector seen, so
/// translating all of a word's vectors leaves the stored offsets unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct WordMoments {
    pub dim: usize,
    pub pivot: Vec<f64>,
    /// Per-year counts and sums of `x - pivot`.
    pub years: BTreeMap<Year, YearSum>,
    pub total: u64,
    /// Mean of `x - pivot`.
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitStats {
    pub v_minus: Vec<f64>,
    pub v_plus: Vec<f64>,
    pub m_minus: u64,
    pub m_plus: u64,
}

impl WordMoments {
    pub fn new(dim: usize) -> Self {
        WordMoments {
            dim,
            pivot: vec![0.0; dim],
            years: BTreeMap::new(),
            total: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, year: Year, vector: &[f32]) {
        debug_assert_eq!(vector.len(), self.dim);
        if self.total == 0 {
            self.pivot = vector.iter().map(|&x| f64::from(x)).collect();
        }
        let slot = self.years.entry(year).or_insert_with(|| YearSum {
            count: 0,
            sum: vec![0.0; self.dim],
        });
        slot.count += 1;
        self.total += 1;
        let n = self.total as f64;
        for (d, &x) in vector.iter().enumerate() {
            let x = f64::from(x) - self.pivot[d];
            slot.sum[d] += x;
            let delta = x - self.mean[d];
            self.mean[d] += delta / n;
            self.m2[d] += delta * (x - self.mean[d]);
        }
    }

    /// Combine two disjoint accumulations (Chan et al. pairwise update).
    pub fn merge(&mut self, other: &WordMoments) {
        assert_eq!(self.dim, other.dim, "merging moments of different dimension");
        if other.total == 0 {
            return;
        }
        if self.total == 0 {
            *self = other.clone();
            return;
        }
        let shift: Vec<f64> = other.pivot.iter().zip(&self.pivot).map(|(a, b)| a - b).collect();
        for (&y, s) in &other.years {
            let slot = self.years.entry(y).or_insert_with(|| YearSum {
                count: 0,
                sum: vec![0.0; other.dim],
            });
            slot.count += s.count;
            for ((a, b), d) in slot.sum.iter_mut().zip(&s.sum).zip(&shift) {
                *a += b + s.count as f64 * d;
            }
        }
        let (na, nb) = (self.total as f64, other.total as f64);
        let n = na + nb;
        for d in 0..self.dim {
            let delta = other.mean[d] + shift[d] - self.mean[d];
            self.mean[d] += delta * nb / n;
            self.m2[d] += other.m2[d] + delta * delta * na * nb / n;
        }
        self.total += other.total;
    }

    pub fn global_mean(&self) -> Vec<f64> {
        self.pivot.iter().zip(&self.mean).map(|(p, m)| p + m).collect()
    }

    /// Population variance of each component.
    pub fn variance(&self) -> Vec<f64> {
        let n = self.total.max(1) as f64;
        self.m2.iter().map(|m| (m / n).max(0.0)).collect()
    }

    pub fn global_sum(&self) -> Vec<f64> {
        let n = self.total as f64;
        let mut acc: Vec<f64> = self.pivot.iter().map(|p| p * n).collect();
        for s in self.years.values() {
            for (a, b) in acc.iter_mut().zip(&s.sum) {
                *a += b;
            }
        }
        acc
    }

    /// Count of usages in years `<= t`.
    pub fn count_through(&self, t: Year) -> u64 {
        self.years.range(..=t).map(|(_, s)| s.count).sum()
    }

    /// Mean embeddings up to and including `t`, and strictly after `t`.
    pub fn split_means(&self, t: Year) -> Result<SplitStats> {
        let mut split = self.split_offsets(t)?;
        for (d, p) in self.pivot.iter().enumerate() {
            split.v_minus[d] += p;
            split.v_plus[d] += p;
        }
        Ok(split)
    }

    /// Like `split_means`, but relative to the pivot.
    pub fn split_offsets(&self, t: Year) -> Result<SplitStats> {
        let mut sum_minus = vec![0.0; self.dim];
        let mut sum_plus = vec![0.0; self.dim];
        let (mut m_minus, mut m_plus) = (0u64, 0u64);
        for (&y, s) in &self.years {
            let (acc, m) = if y <= t {
                (&mut sum_minus, &mut m_minus)
            } else {
                (&mut sum_plus, &mut m_plus)
            };
            *m += s.count;
            for (a, b) in acc.iter_mut().zip(&s.sum) {
                *a += b;
            }
        }
        if m_minus == 0 || m_plus == 0 {
            return Err(Error::DegenerateSplit(t));
        }
        let scale = |v: Vec<f64>, m: u64| v.into_iter().map(|x| x / m as f64).collect();
        Ok(SplitStats {
            v_minus: scale(sum_minus, m_minus),
            v_plus: scale(sum_plus, m_plus),
            m_minus,
            m_plus,
        })
    }
}

/// Result of one pass over a store.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentTable {
    pub dim: usize,
    pub year_range: (Year, Year),
    pub words: BTreeMap<u32, WordMoments>,
    /// Records whose word id is outside the vocabulary.
    pub skipped: u64,
}

/// Single pass over the store accumulating moments for every word id below
/// `vocab_len`. Unknown ids are counted in `skipped`.
pub fn accumulate_moments(
    store: &Path,
    vocab_len: usize,
    year_range: Option<(Year, Year)>,
) -> Result<MomentTable> {
    let reader = StoreReader::open(store)?;
    let dim = reader.dim();
    let mut words: BTreeMap<u32, WordMoments> = BTreeMap::new();
    let mut skipped = 0u64;
    let (mut lo, mut hi) = (Year::MAX, Year::MIN);
    for rec in reader {
        let rec = rec?;
        if rec.word_id as usize >= vocab_len {
            skipped += 1;
            continue;
        }
        lo = lo.min(rec.year);
        hi = hi.max(rec.year);
        words
            .entry(rec.word_id)
            .or_insert_with(|| WordMoments::new(dim))
            .push(rec.year, &rec.vector);
    }
    if skipped > 0 {
        log::warn!("{skipped} store records reference word ids outside the vocabulary");
    }
    let year_range = year_range.unwrap_or(if lo <= hi { (lo, hi) } else { (0, 0) });
    Ok(MomentTable {
        dim,
        year_range,
        words,
        skipped,
    })
}

impl MomentTable {
    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, |out| {
            let mut buf: Vec<u8> = Vec::new();
            buf.extend_from_slice(MOMENTS_MAGIC);
            buf.extend_from_slice(&MOMENTS_VERSION.to_le_bytes());
            buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
            buf.extend_from_slice(&self.year_range.0.to_le_bytes());
            buf.extend_from_slice(&self.year_range.1.to_le_bytes());
            buf.extend_from_slice(&(self.words.len() as u64).to_le_bytes());
            for (&id, m) in &self.words {
                buf.extend_from_slice(&id.to_le_bytes());
                buf.extend_from_slice(&m.total.to_le_bytes());
                for x in m.pivot.iter().chain(&m.mean).chain(&m.m2) {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                buf.extend_from_slice(&(m.years.len() as u32).to_le_bytes());
                for (&y, s) in &m.years {
                    buf.extend_from_slice(&y.to_le_bytes());
                    buf.extend_from_slice(&s.count.to_le_bytes());
                    for x in &s.sum {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
            out.write_all(&buf).map_err(crate::io::write_err(path))
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if cur.take(4)? != MOMENTS_MAGIC {
            return Err(Error::InvalidStore(format!("{}: bad moments magic", path.display())));
        }
        let version = cur.u32()?;
        if version != MOMENTS_VERSION {
            return Err(Error::InvalidStore(format!(
                "{}: unsupported moments version {version}",
                path.display()
            )));
        }
        let dim = cur.u32()? as usize;
        let year_range = (cur.i32()?, cur.i32()?);
        let n_words = cur.u64()?;
        let mut words = BTreeMap::new();
        for _ in 0..n_words {
            let id = cur.u32()?;
            let total = cur.u64()?;
            let pivot = cur.f64s(dim)?;
            let mean = cur.f64s(dim)?;
            let m2 = cur.f64s(dim)?;
            let n_years = cur.u32()?;
            let mut years = BTreeMap::new();
            for _ in 0..n_years {
                let y = cur.i32()?;
                let count = cur.u64()?;
                let sum = cur.f64s(dim)?;
                years.insert(y, YearSum { count, sum });
            }
            words.insert(
                id,
                WordMoments {
                    dim,
                    pivot,
                    years,
                    total,
                    mean,
                    m2,
                },
            );
        }
        Ok(MomentTable {
            dim,
            year_range,
            words,
            skipped: 0,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::InvalidStore(format!("{}: truncated", self.path.display())));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_usages(n: usize, dim: usize, words: u32, seed: u64) -> Vec<EmbeddedUsage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| EmbeddedUsage {
                word_id: rng.random_range(0..words),
                doc_id: rng.random_range(0..50),
                year: rng.random_range(1990..=2019),
                position: i as u32,
                vector: (0..dim).map(|_| rng.random_range(-2.0f32..3.0)).collect(),
            })
            .collect()
    }

    #[test]
    fn round_trip_and_empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.cemb");
        let usages = random_usages(1000, 8, 20, 1);
        assert_eq!(write_store(&usages, 8, &p).unwrap(), 1000);
        let (dim, back) = read_store(&p).unwrap();
        assert_eq!(dim, 8);
        assert_eq!(back, usages);

        let e = dir.path().join("e.cemb");
        write_store(std::iter::empty(), 16, &e).unwrap();
        let r = StoreReader::open(&e).unwrap();
        assert_eq!((r.dim(), r.count()), (16, 0));
        assert_eq!(std::fs::metadata(&e).unwrap().len(), STORE_HEADER_LEN);
    }

    #[test]
    fn mixed_dimension_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.cemb");
        let mut usages = random_usages(3, 8, 2, 2);
        usages[2].vector = vec![0.0; 16];
        assert!(matches!(
            write_store(&usages, 8, &p),
            Err(Error::DimensionMismatch { expected: 8, found: 16 })
        ));
        assert!(!p.exists());
    }

    #[test]
    fn truncated_store_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.cemb");
        write_store(&random_usages(10, 4, 2, 3), 4, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(read_store(&p).is_err());
    }

    #[test]
    fn single_and_symmetric_samples() {
        let mut m = WordMoments::new(3);
        m.push(2000, &[1.0, -2.0, 0.5]);
        assert_eq!(m.global_mean(), vec![1.0, -2.0, 0.5]);
        assert_eq!(m.variance(), vec![0.0; 3]);

        let mut m = WordMoments::new(2);
        m.push(2000, &[3.0, -0.5]);
        m.push(2001, &[-3.0, 0.5]);
        assert_eq!(m.global_mean(), vec![0.0, 0.0]);
        assert_eq!(m.variance(), vec![9.0, 0.25]);
    }

    #[test]
    fn translated_vectors_store_identical_offsets() {
        let mut a = WordMoments::new(2);
        let mut b = WordMoments::new(2);
        for (y, v) in [(1, [0.25f32, -1.5]), (2, [1.75, 0.5]), (2, [-0.125, 2.0]), (3, [3.0, 1.0])] {
            a.push(y, &v);
            b.push(y, &[v[0] + 64.0, v[1] - 8.0]);
        }
        assert_eq!(a.years, b.years);
        assert_eq!((&a.mean, &a.m2), (&b.mean, &b.m2));
        assert_eq!(b.global_mean()[0], a.global_mean()[0] + 64.0);
    }

    #[test]
    fn split_means_direct_construction() {
        let mut m = WordMoments::new(2);
        m.push(1, &[1.0, 0.0]);
        m.push(3, &[0.0, 1.0]);
        let s = m.split_means(2).unwrap();
        assert_eq!(s.v_minus, vec![1.0, 0.0]);
        assert_eq!(s.v_plus, vec![0.0, 1.0]);
        assert_eq!((s.m_minus, s.m_plus), (1, 1));
        assert!(matches!(m.split_means(3), Err(Error::DegenerateSplit(3))));
        assert!(matches!(m.split_means(0), Err(Error::DegenerateSplit(0))));
    }

    #[test]
    fn merge_matches_single_pass() {
        let usages = random_usages(400, 5, 1, 9);
        let mut whole = WordMoments::new(5);
        let mut a = WordMoments::new(5);
        let mut b = WordMoments::new(5);
        for (i, u) in usages.iter().enumerate() {
            whole.push(u.year, &u.vector);
            if i % 3 == 0 { &mut a } else { &mut b }.push(u.year, &u.vector);
        }
        a.merge(&b);
        assert_eq!(a.total, whole.total);
        assert_eq!(a.years.keys().collect::<Vec<_>>(), whole.years.keys().collect::<Vec<_>>());
        for d in 0..5 {
            assert!((a.mean[d] - whole.mean[d]).abs() < 1e-12);
            assert!((a.variance()[d] - whole.variance()[d]).abs() < 1e-10);
        }
    }

    #[test]
    fn moments_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.cemb");
        write_store(&random_usages(300, 4, 12, 4), 4, &p).unwrap();
        let table = accumulate_moments(&p, 10, Some((1990, 2019))).unwrap();
        assert!(table.skipped > 0);
        assert!(table.words.keys().all(|&w| w < 10));
        let mp = dir.path().join("m.bin");
        table.write(&mp).unwrap();
        let mut back = MomentTable::read(&mp).unwrap();
        back.skipped = table.skipped;
        assert_eq!(back, table);
    }
}
