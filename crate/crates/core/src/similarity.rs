//! Exact cosine retrieval over a labeled source corpus, target-to-source
//! mapping tables and label projection.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::scalar::Scalar;
use crate::store::{Dataset, Role};

/// Default neighbor count.
pub const DEFAULT_M: usize = 5;

/// Unit-normalized copy of a labeled source corpus.
#[derive(Debug, Clone)]
pub struct Index<T> {
    ids: Vec<String>,
    labels: Vec<u32>,
    rows: Matrix<T>,
}

impl<T: Scalar> Index<T> {
    pub fn build(source: &Dataset) -> Result<Self> {
        let mut rows = Matrix::zeros(source.len(), source.d);
        let mut labels = Vec::with_capacity(source.len());
        for (i, r) in source.records.iter().enumerate() {
            let label = r.label.ok_or_else(|| Error::MissingLabel(r.id.clone()))?;
            labels.push(label);
            let row = rows.row_mut(i);
            for (dst, &x) in row.iter_mut().zip(&r.vec) {
                *dst = T::of_f32(x);
            }
            let n = norm(row);
            if n == T::zero() {
                return Err(Error::ZeroVector(r.id.clone()));
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(Index {
            ids: source.records.iter().map(|r| r.id.clone()).collect(),
            labels,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    /// Stored unit vector for position `i`.
    pub fn row(&self, i: usize) -> &[T] {
        self.rows.row(i)
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    fn unit_query(&self, query: &[T]) -> Result<Vec<T>> {
        if query.len() != self.dim() {
            return Err(Error::dim(self.dim(), query.len(), "query"));
        }
        let n = norm(query);
        if n == T::zero() || !n.is_finite() {
            return Err(Error::ZeroVector("query".into()));
        }
        Ok(query.iter().map(|&x| x / n).collect())
    }

    fn cos_at(&self, unit_query: &[T], i: usize) -> T {
        dot(self.rows.row(i), unit_query).max(-T::one()).min(T::one())
    }

    fn neighbor(&self, i: usize, cosine: T) -> Neighbor {
        Neighbor {
            source_id: self.ids[i].clone(),
            cosine: cosine.as_f64(),
            label: self.labels[i],
        }
    }

    /// Exact top-`m` neighbors by cosine, descending, ties by ascending id.
    pub fn retrieve_top_m(&self, query: &[T], m: usize) -> Result<Vec<Neighbor>> {
        if m > self.len() {
            return Err(Error::Invalid(format!(
                "m = {m} exceeds source size {}",
                self.len()
            )));
        }
        let q = self.unit_query(query)?;
        let scores: Vec<T> = (0..self.len()).map(|i| self.cos_at(&q, i)).collect();
        let cmp = |&a: &usize, &b: &usize| -> Ordering {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.ids[a].cmp(&self.ids[b]))
        };
        let mut order: Vec<usize> = (0..self.len()).collect();
        if m == 0 {
            return Ok(Vec::new());
        }
        if m < order.len() {
            order.select_nth_unstable_by(m - 1, cmp);
            order.truncate(m);
        }
        order.sort_by(cmp);
        Ok(order.into_iter().map(|i| self.neighbor(i, scores[i])).collect())
    }

    /// `m` distinct uniformly drawn neighbors in draw order. Sorting them by
    /// cosine would make rank 1 informative again.
    fn random_m(&self, query: &[T], m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Neighbor>> {
        if m > self.len() {
            return Err(Error::Invalid(format!(
                "m = {m} exceeds source size {}",
                self.len()
            )));
        }
        let q = self.unit_query(query)?;
        Ok(sample(rng, self.len(), m)
            .into_iter()
            .map(|i| self.neighbor(i, self.cos_at(&q, i)))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub source_id: String,
    pub cosine: f64,
    /// Projected label: the gold label of the source record.
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub target_id: String,
    pub neighbors: Vec<Neighbor>,
}

impl MappingEntry {
    pub fn projected_labels(&self) -> Vec<u32> {
        self.neighbors.iter().map(|n| n.label).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingMode {
    Similarity,
    Random,
}

impl std::str::FromStr for MappingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similarity" => Ok(MappingMode::Similarity),
            "random" => Ok(MappingMode::Random),
            _ => Err(Error::Invalid(format!("unknown mapping mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingTable {
    pub entries: Vec<MappingEntry>,
    pub m: usize,
    pub mapping_embedding_name: String,
    pub mode: MappingMode,
    pub seed: u64,
}

/// Maps every target to `m` source records and projects their labels.
///
/// `targets` and `source` must be in the same embedding space; pass
/// [`mapping_view`] results to map with a different embedding than the one
/// used for training.
pub fn build_mapping<T: Scalar>(
    targets: &Dataset,
    source: &Dataset,
    m: usize,
    mode: MappingMode,
    seed: u64,
) -> Result<MappingTable> {
    if targets.d != source.d {
        return Err(Error::dim(source.d, targets.d, "targets vs source"));
    }
    let index = Index::<T>::build(source)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(targets.len());
    for r in &targets.records {
        let q: Vec<T> = r.vec.iter().map(|&x| T::of_f32(x)).collect();
        let neighbors = match mode {
            MappingMode::Similarity => index.retrieve_top_m(&q, m),
            MappingMode::Random => index.random_m(&q, m, &mut rng),
        }
        .map_err(|e| match e {
            Error::ZeroVector(_) => Error::ZeroVector(r.id.clone()),
            e => e,
        })?;
        entries.push(MappingEntry {
            target_id: r.id.clone(),
            neighbors,
        });
    }
    Ok(MappingTable {
        entries,
        m,
        mapping_embedding_name: source.name.clone(),
        mode,
        seed,
    })
}

/// Replaces each record's vector with the vector of the same id in `view`,
/// keeping ids, languages and labels. Used to map with one embedding and
/// train with another.
pub fn mapping_view(ds: &Dataset, view: &Dataset) -> Result<Dataset> {
    let index = view.id_index();
    let mut missing = Vec::new();
    let mut records = Vec::with_capacity(ds.len());
    for r in &ds.records {
        match index.get(r.id.as_str()) {
            Some(&i) => {
                let mut rec = r.clone();
                rec.vec = view.records[i].vec.clone();
                records.push(rec);
            }
            None => missing.push(r.id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::UnresolvedIds(missing));
    }
    let mut out = Dataset::new(view.name.clone(), view.d, ds.classes, Role::MappingView, records)?;
    out.label_names = ds.label_names.clone();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairPolicy {
    #[serde(rename = "top1")]
    Top1,
    #[serde(rename = "all_m")]
    AllM,
}

impl std::str::FromStr for PairPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(PairPolicy::Top1),
            "all_m" | "all-m" => Ok(PairPolicy::AllM),
            _ => Err(Error::Invalid(format!("unknown pair policy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub target_id: String,
    pub source_id: String,
    pub label: u32,
    pub rank: usize,
}

/// Flattens a mapping table into training pairs in (target, rank) order.
pub fn expand_pairs(table: &MappingTable, policy: PairPolicy) -> Vec<Pair> {
    let take = match policy {
        PairPolicy::Top1 => 1,
        PairPolicy::AllM => usize::MAX,
    };
    table
        .entries
        .iter()
        .flat_map(|e| {
            e.neighbors.iter().take(take).enumerate().map(move |(rank, n)| Pair {
                target_id: e.target_id.clone(),
                source_id: n.source_id.clone(),
                label: n.label,
                rank,
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct MappingMeta {
    m: usize,
    mapping_embedding: String,
    mode: MappingMode,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaLine {
    meta: MappingMeta,
}

/// Writes a mapping table as JSONL: one metadata line, then one line per
/// target `{target_id, neighbors: [{source_id, cosine, label}]}`.
pub fn write_mapping(table: &MappingTable, path: impl AsRef<Path>, config_digest: Option<&str>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(
        &mut w,
        &MetaLine {
            meta: MappingMeta {
                m: table.m,
                mapping_embedding: table.mapping_embedding_name.clone(),
                mode: table.mode,
                seed: table.seed,
                config_digest: config_digest.map(str::to_string),
            },
        },
    )?;
    w.write_all(b"\n")?;
    for e in &table.entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mapping(path: impl AsRef<Path>) -> Result<MappingTable> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut meta: Option<MappingMeta> = None;
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |e: serde_json::Error| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        };
        if meta.is_none() && entries.is_empty() && line.contains("\"meta\"") {
            meta = Some(serde_json::from_str::<MetaLine>(&line).map_err(err)?.meta);
            continue;
        }
        entries.push(serde_json::from_str::<MappingEntry>(&line).map_err(err)?);
    }
    let m = meta
        .as_ref()
        .map(|m| m.m)
        .or_else(|| entries.first().map(|e| e.neighbors.len()))
        .unwrap_or(0);
    if let Some(bad) = entries.iter().find(|e| e.neighbors.len() != m) {
        return Err(Error::Invalid(format!(
            "entry `{}` has {} neighbors, table m = {m}",
            bad.target_id,
            bad.neighbors.len()
        )));
    }
    let (name, mode, seed) = meta.map_or((String::new(), MappingMode::Similarity, 0), |m| {
        (m.mapping_embedding, m.mode, m.seed)
    });
    Ok(MappingTable {
        entries,
        m,
        mapping_embedding_name: name,
        mode,
        seed,
    })
}
