//! Training-set assembly: source/target mixing and the baseline variants.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lda::LanguageBasis;
use crate::linalg::normalize;
use crate::scalar::Scalar;
use crate::similarity::{expand_pairs, MappingTable, PairPolicy};
use crate::store::{Dataset, EmbeddingRecord, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixMode {
    /// `e_src + e_tgt`
    RegReg,
    /// `e_src + VVᵀ e_tgt`
    RegLda,
    /// Raw target vector with the projected label.
    TargetOnly,
    /// Raw source vector with its gold label.
    SourceOnly,
}

impl MixMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MixMode::RegReg => "reg-reg",
            MixMode::RegLda => "reg-lda",
            MixMode::TargetOnly => "target-only",
            MixMode::SourceOnly => "source-only",
        }
    }
}

impl std::str::FromStr for MixMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reg-reg" => Ok(MixMode::RegReg),
            "reg-lda" => Ok(MixMode::RegLda),
            "target-only" => Ok(MixMode::TargetOnly),
            "source-only" => Ok(MixMode::SourceOnly),
            _ => Err(Error::Invalid(format!("unknown mix mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolatedExample<T> {
    pub vec: Vec<T>,
    pub label: u32,
    pub target_id: String,
    pub source_id: String,
    pub mode: MixMode,
}

pub fn mix_reg_reg<T: Scalar>(e_src: &[T], e_tgt: &[T]) -> Result<Vec<T>> {
    if e_src.len() != e_tgt.len() {
        return Err(Error::dim(e_src.len(), e_tgt.len(), "target embedding"));
    }
    Ok(e_src.iter().zip(e_tgt).map(|(&a, &b)| a + b).collect())
}

pub fn mix_reg_lda<T: Scalar>(e_src: &[T], e_tgt: &[T], basis: &LanguageBasis<T>) -> Result<Vec<T>> {
    if e_src.len() != basis.d() {
        return Err(Error::dim(basis.d(), e_src.len(), "source embedding"));
    }
    let projected = basis.project(e_tgt)?;
    mix_reg_reg(e_src, &projected)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AssembleOptions {
    /// Use the target's own gold label instead of the projected one.
    pub gold_target_labels: bool,
    /// Rescale each mixed vector to unit length. Off by default; ablation only.
    pub renormalize: bool,
}

/// Builds one training example per expanded pair, in (target order × rank)
/// order.
///
/// With `gold_target_labels`, each target contributes once with its own
/// label (the skyline system) and the mapping is only used for its ids.
pub fn assemble_training_set<T: Scalar>(
    table: &MappingTable,
    source: &Dataset,
    targets: &Dataset,
    mode: MixMode,
    basis: Option<&LanguageBasis<T>>,
    policy: PairPolicy,
    opts: AssembleOptions,
) -> Result<Vec<InterpolatedExample<T>>> {
    if mode == MixMode::RegLda && basis.is_none() {
        return Err(Error::Invalid("reg-lda mode needs a basis".into()));
    }
    if source.d != targets.d {
        return Err(Error::dim(source.d, targets.d, "targets vs source"));
    }
    let src_index = source.id_index();
    let tgt_index = targets.id_index();
    let policy = if opts.gold_target_labels { PairPolicy::Top1 } else { policy };
    let pairs = expand_pairs(table, policy);

    let mut missing: Vec<String> = Vec::new();
    for p in &pairs {
        if !tgt_index.contains_key(p.target_id.as_str()) && !missing.contains(&p.target_id) {
            missing.push(p.target_id.clone());
        }
        if !src_index.contains_key(p.source_id.as_str()) && !missing.contains(&p.source_id) {
            missing.push(p.source_id.clone());
        }
    }
    if !missing.is_empty() {
        return Err(Error::UnresolvedIds(missing));
    }

    let cast = |r: &EmbeddingRecord| -> Vec<T> { r.vec.iter().map(|&x| T::of_f32(x)).collect() };
    // Projection of each target is shared by its m pairs.
    let mut projected: HashMap<&str, Vec<T>> = HashMap::new();
    let mut out = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let src = &source.records[src_index[p.source_id.as_str()]];
        let tgt = &targets.records[tgt_index[p.target_id.as_str()]];
        let label = if opts.gold_target_labels {
            tgt.label.ok_or_else(|| Error::MissingLabel(tgt.id.clone()))?
        } else if mode == MixMode::SourceOnly {
            src.label.ok_or_else(|| Error::MissingLabel(src.id.clone()))?
        } else {
            p.label
        };
        let mut vec = match mode {
            MixMode::RegReg => mix_reg_reg(&cast(src), &cast(tgt))?,
            MixMode::RegLda => {
                let basis = basis.expect("checked above");
                let proj = match projected.get(tgt.id.as_str()) {
                    Some(v) => v.clone(),
                    None => {
                        let v = basis.project(&cast(tgt))?;
                        projected.insert(tgt.id.as_str(), v.clone());
                        v
                    }
                };
                mix_reg_reg(&cast(src), &proj)?
            }
            MixMode::TargetOnly => cast(tgt),
            MixMode::SourceOnly => cast(src),
        };
        if opts.renormalize {
            normalize(&mut vec);
        }
        if vec.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{}+{}", p.source_id, p.target_id)));
        }
        out.push(InterpolatedExample {
            vec,
            label,
            target_id: p.target_id.clone(),
            source_id: p.source_id.clone(),
            mode,
        });
    }
    Ok(out)
}

/// Packs assembled examples into a storable dataset. Record ids encode the
/// originating pair as `target_id|source_id|rank`.
pub fn examples_to_dataset<T: Scalar>(
    name: &str,
    examples: &[InterpolatedExample<T>],
    d: usize,
    classes: usize,
) -> Result<Dataset> {
    let mut per_target: HashMap<&str, usize> = HashMap::new();
    let records = examples
        .iter()
        .map(|e| {
            let rank = per_target.entry(e.target_id.as_str()).or_insert(0);
            let id = format!("{}|{}|{}", e.target_id, e.source_id, rank);
            *rank += 1;
            EmbeddingRecord {
                id,
                lang: e.mode.as_str().to_string(),
                label: Some(e.label),
                vec: e.vec.iter().map(|x| x.as_f32()).collect(),
            }
        })
        .collect();
    Dataset::new(name, d, classes, Role::Source, records)
}
