//! Embedding datasets: validation, JSONL ingestion, the binary store format
//! and seeded splits.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic "XITE" | version u16 | d u32 | classes u32 | count u64
//! name_len u32 | name bytes | role u8
//! per record:
//!   id_len u32 | id bytes | lang_len u32 | lang bytes
//!   has_label u8 | label i32 | d x f32
//! ```
//!
//! Label names, when present, live in a JSON sidecar next to the store
//! (`<path>.labels.json`).

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"XITE";
pub const STORE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u32>,
    pub vec: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, lang: impl Into<String>, label: Option<u32>, vec: Vec<f32>) -> Self {
        EmbeddingRecord {
            id: id.into(),
            lang: lang.into(),
            label,
            vec,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Source,
    Target,
    BasisCorpus,
    MappingView,
}

impl Role {
    fn to_byte(self) -> u8 {
        match self {
            Role::Source => 0,
            Role::Target => 1,
            Role::BasisCorpus => 2,
            Role::MappingView => 3,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => Role::Source,
            1 => Role::Target,
            2 => Role::BasisCorpus,
            3 => Role::MappingView,
            other => return Err(Error::Format(format!("unknown role tag {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub d: usize,
    pub classes: usize,
    pub role: Role,
    pub records: Vec<EmbeddingRecord>,
    pub label_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(
        name: impl Into<String>,
        d: usize,
        classes: usize,
        role: Role,
        records: Vec<EmbeddingRecord>,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            d,
            classes,
            role,
            records,
            label_names: Vec::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Invalid("dimension must be positive".into()));
        }
        if !self.label_names.is_empty() && self.label_names.len() != self.classes {
            return Err(Error::Invalid(format!(
                "{} label names for {} classes",
                self.label_names.len(),
                self.classes
            )));
        }
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            check_record(r, self.d, self.classes)?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            if self.role == Role::Source && r.label.is_none() {
                return Err(Error::MissingLabel(r.id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.records.iter().all(|r| r.label.is_some())
    }

    /// Map from record id to its position.
    pub fn id_index(&self) -> HashMap<&str, usize> {
        self.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Languages in order of first appearance.
    pub fn languages(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.lang) {
                out.push(r.lang.clone());
            }
        }
        out
    }

    /// Vectors converted to the working scalar type.
    pub fn vectors<T: crate::Scalar>(&self) -> Vec<Vec<T>> {
        self.records
            .iter()
            .map(|r| r.vec.iter().map(|&x| T::of_f32(x)).collect())
            .collect()
    }

    /// Returns a copy restricted to the given record positions, in that order.
    pub fn subset(&self, name: impl Into<String>, positions: &[usize]) -> Dataset {
        Dataset {
            name: name.into(),
            d: self.d,
            classes: self.classes,
            role: self.role,
            records: positions.iter().map(|&i| self.records[i].clone()).collect(),
            label_names: self.label_names.clone(),
        }
    }

    /// Removes all labels; the dataset becomes a target-role set.
    pub fn without_labels(mut self) -> Dataset {
        for r in &mut self.records {
            r.label = None;
        }
        if self.role == Role::Source {
            self.role = Role::Target;
        }
        self
    }

    /// Concatenates datasets sharing `d`, keeping the first one's metadata.
    pub fn concat(name: impl Into<String>, role: Role, parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("nothing to concatenate".into()))?;
        let classes = parts.iter().map(|p| p.classes).max().unwrap_or(0);
        let mut records = Vec::new();
        for p in parts {
            if p.d != first.d {
                return Err(Error::dim(first.d, p.d, format!("dataset `{}`", p.name)));
            }
            records.extend(p.records.iter().cloned());
        }
        Dataset::new(name, first.d, classes, role, records)
    }
}

fn check_record(r: &EmbeddingRecord, d: usize, classes: usize) -> Result<()> {
    if r.vec.len() != d {
        return Err(Error::dim(d, r.vec.len(), format!("record `{}`", r.id)));
    }
    if r.vec.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(r.id.clone()));
    }
    if let Some(label) = r.label {
        if label as usize >= classes {
            return Err(Error::LabelOutOfRange {
                id: r.id.clone(),
                label: label as i64,
                classes,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct JsonlLine {
    id: String,
    lang: String,
    #[serde(default)]
    label: Option<i64>,
    vec: Vec<f64>,
    // Pass-through text is accepted but not stored.
    #[serde(default)]
    #[allow(dead_code)]
    text: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub expected_d: Option<usize>,
    /// Declared class count; inferred as `max label + 1` when absent.
    pub classes: Option<usize>,
    /// Defaults to `Source` when every record is labeled, else `Target`.
    pub role: Option<Role>,
    pub name: Option<String>,
}

/// Reads a JSONL embedding file, inferring `d` from the first record when
/// `expected_d` is absent.
pub fn ingest_jsonl(path: impl AsRef<Path>, expected_d: Option<usize>) -> Result<Dataset> {
    ingest_jsonl_with(
        path,
        &IngestOptions {
            expected_d,
            ..Default::default()
        },
    )
}

pub fn ingest_jsonl_with(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut d = opts.expected_d;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut max_label: Option<u32> = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonlLine =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let dim = *d.get_or_insert(parsed.vec.len());
        if parsed.vec.len() != dim {
            return Err(parse_err(
                lineno,
                format!("vector length {} does not match d = {dim}", parsed.vec.len()),
            ));
        }
        let vec: Vec<f32> = parsed.vec.iter().map(|&x| x as f32).collect();
        if vec.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(lineno, format!("non-finite value in `{}`", parsed.id)));
        }
        let label = match parsed.label {
            None => None,
            Some(l) if l < 0 || l > i32::MAX as i64 => {
                return Err(parse_err(lineno, format!("invalid label {l}")))
            }
            Some(l) => Some(l as u32),
        };
        if let (Some(l), Some(c)) = (label, opts.classes) {
            if l as usize >= c {
                return Err(parse_err(lineno, format!("label {l} out of range for {c} classes")));
            }
        }
        if !seen.insert(parsed.id.clone()) {
            return Err(parse_err(lineno, format!("duplicate id `{}`", parsed.id)));
        }
        max_label = max_label.max(label);
        records.push(EmbeddingRecord {
            id: parsed.id,
            lang: parsed.lang,
            label,
            vec,
        });
    }

    let d = d.ok_or_else(|| parse_err(0, "empty file and no expected dimension".into()))?;
    let classes = opts
        .classes
        .unwrap_or_else(|| max_label.map_or(0, |l| l as usize + 1));
    let role = opts.role.unwrap_or(if !records.is_empty() && records.iter().all(|r| r.label.is_some()) {
        Role::Source
    } else {
        Role::Target
    });
    let name = opts.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    Dataset::new(name, d, classes, role, records)
}

/// Writes a dataset as JSONL in the ingestion schema.
pub fn write_jsonl(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in &ds.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels.json");
    PathBuf::from(s)
}

pub fn persist_store(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_store(ds)?)?;
    w.flush()?;
    let sidecar = sidecar_path(path);
    if ds.label_names.is_empty() {
        if sidecar.exists() {
            std::fs::remove_file(&sidecar)?;
        }
    } else {
        std::fs::write(&sidecar, serde_json::to_vec_pretty(&ds.label_names)?)?;
    }
    Ok(())
}

pub fn load_store(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut ds = decode_store(&bytes)?;
    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        ds.label_names = serde_json::from_slice(&std::fs::read(sidecar)?)?;
    }
    ds.validate()?;
    Ok(ds)
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| Error::Invalid("string too long".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Serializes a dataset into the binary store layout.
pub fn encode_store(ds: &Dataset) -> Result<Vec<u8>> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Invalid(format!("{what} exceeds u32")))
    };
    let mut out = Vec::with_capacity(32 + ds.records.len() * (ds.d * 4 + 32));
    out.extend_from_slice(STORE_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(ds.d, "d")?.to_le_bytes());
    out.extend_from_slice(&to_u32(ds.classes, "class count")?.to_le_bytes());
    out.extend_from_slice(&(ds.records.len() as u64).to_le_bytes());
    put_str(&mut out, &ds.name)?;
    out.push(ds.role.to_byte());
    for r in &ds.records {
        put_str(&mut out, &r.id)?;
        put_str(&mut out, &r.lang)?;
        match r.label {
            Some(l) => {
                out.push(1);
                out.extend_from_slice(&(l as i32).to_le_bytes());
            }
            None => {
                out.push(0);
                out.extend_from_slice(&(-1i32).to_le_bytes());
            }
        }
        for x in &r.vec {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Cursor over a byte buffer that reports truncation as a format error.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode_store(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != STORE_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u16()?;
    if version != STORE_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let d = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let count = r.u64()?;
    let name = r.string()?;
    let role = Role::from_byte(r.u8()?)?;
    // Each record needs at least 13 header bytes plus the vector.
    let min_record = 13u64 + 4 * d as u64;
    if count.saturating_mul(min_record) > (bytes.len() - r.pos) as u64 {
        return Err(Error::Format(format!("truncated: header declares {count} records")));
    }
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id = r.string()?;
        let lang = r.string()?;
        let has_label = r.u8()?;
        let raw = r.i32()?;
        let label = match has_label {
            0 => None,
            1 if raw >= 0 => Some(raw as u32),
            1 => return Err(Error::Format(format!("negative label for `{id}`"))),
            f => return Err(Error::Format(format!("bad label flag {f}"))),
        };
        let vec = (0..d).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        records.push(EmbeddingRecord { id, lang, label, vec });
    }
    r.finish()?;
    let ds = Dataset {
        name,
        d,
        classes,
        role,
        records,
        label_names: Vec::new(),
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSizes {
    Counts { train: usize, dev: usize, test: usize },
    Ratios { train: f64, dev: f64, test: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub sizes: SplitSizes,
    pub seed: u64,
    /// Strip labels from the train split, leaving it as unlabeled target text.
    #[serde(default)]
    pub hide_train_labels: bool,
}

impl SplitSpec {
    pub fn counts(train: usize, dev: usize, test: usize, seed: u64) -> Self {
        SplitSpec {
            sizes: SplitSizes::Counts { train, dev, test },
            seed,
            hide_train_labels: false,
        }
    }

    pub fn resolve(&self, n: usize) -> Result<(usize, usize, usize)> {
        let (a, b, c) = match self.sizes {
            SplitSizes::Counts { train, dev, test } => (train, dev, test),
            SplitSizes::Ratios { train, dev, test } => {
                if [train, dev, test].iter().any(|r| !(0.0..=1.0).contains(r))
                    || train + dev + test > 1.0 + 1e-12
                {
                    return Err(Error::Invalid("split ratios must be in [0, 1] and sum to at most 1".into()));
                }
                let f = |r: f64| (r * n as f64).floor() as usize;
                (f(train), f(dev), f(test))
            }
        };
        if a + b + c > n {
            return Err(Error::Invalid(format!(
                "split {a}/{b}/{c} needs {} records, dataset has {n}",
                a + b + c
            )));
        }
        Ok((a, b, c))
    }
}

/// Seeded, disjoint train/dev/test partition. Records keep their original
/// relative order inside each split.
pub fn make_splits(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let (n_train, n_dev, n_test) = spec.resolve(ds.len())?;
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let take = |range: std::ops::Range<usize>| {
        let mut idx = perm[range].to_vec();
        idx.sort_unstable();
        idx
    };
    let train_idx = take(0..n_train);
    let dev_idx = take(n_train..n_train + n_dev);
    let test_idx = take(n_train + n_dev..n_train + n_dev + n_test);
    let mut train = ds.subset(format!("{}.train", ds.name), &train_idx);
    if spec.hide_train_labels {
        train = train.without_labels();
    }
    Ok((
        train,
        ds.subset(format!("{}.dev", ds.name), &dev_idx),
        ds.subset(format!("{}.test", ds.name), &test_idx),
    ))
}
