//! Language-separability bases from iterated two-class LDA with deflation.
//!
//! Each round fits one discriminant axis between the two languages,
//! removes that direction from every sample (`X - X V Vᵀ`) and refits on
//! what is left. The axes come out orthonormal and ordered by how well they
//! separate the languages.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, normalize, orthogonalize, spd_solve, Matrix};
use crate::scalar::Scalar;
use crate::store::{Dataset, Reader};

pub const DEFAULT_SHRINKAGE: f64 = 1e-4;
pub const BASIS_MAGIC: &[u8; 4] = b"XITB";
pub const BASIS_VERSION: u16 = 1;

/// Early-stop threshold on residual norms during deflation.
const RESIDUAL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterStats<T> {
    pub mean_source: Vec<T>,
    pub mean_target: Vec<T>,
    /// Summed within-class scatter of both languages around their own means.
    pub within: Matrix<T>,
    pub counts: (usize, usize),
}

impl<T: Scalar> ScatterStats<T> {
    /// `μ_target − μ_source`
    pub fn between_direction(&self) -> Vec<T> {
        self.mean_target
            .iter()
            .zip(&self.mean_source)
            .map(|(&a, &b)| a - b)
            .collect()
    }

    /// Rows of `x` are samples; `is_target[i]` gives the language of row `i`.
    pub fn compute(x: &Matrix<T>, is_target: &[bool]) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if is_target.len() != n {
            return Err(Error::dim(n, is_target.len(), "language labels"));
        }
        let n1 = is_target.iter().filter(|&&t| t).count();
        let n0 = n - n1;
        if n0 == 0 || n1 == 0 {
            return Err(Error::Degenerate("both languages must be present".into()));
        }
        let mut means = [vec![T::zero(); d], vec![T::zero(); d]];
        for (i, &t) in is_target.iter().enumerate() {
            axpy(T::one(), x.row(i), &mut means[t as usize]);
        }
        means[0].iter_mut().for_each(|m| *m /= T::of(n0 as f64));
        means[1].iter_mut().for_each(|m| *m /= T::of(n1 as f64));

        let mut within = Matrix::zeros(d, d);
        let mut centered = vec![T::zero(); d];
        for (i, &t) in is_target.iter().enumerate() {
            for (c, (&xi, &mi)) in centered.iter_mut().zip(x.row(i).iter().zip(&means[t as usize])) {
                *c = xi - mi;
            }
            for a in 0..d {
                let ca = centered[a];
                if ca == T::zero() {
                    continue;
                }
                // Upper triangle only; mirrored below.
                let row = &mut within.row_mut(a)[a..];
                axpy(ca, &centered[a..], row);
            }
        }
        for a in 0..d {
            for b in 0..a {
                within[(a, b)] = within[(b, a)];
            }
        }
        let [mean_source, mean_target] = means;
        Ok(ScatterStats {
            mean_source,
            mean_target,
            within,
            counts: (n0, n1),
        })
    }
}

fn check_two_class(is_target: &[bool]) -> Result<()> {
    let n1 = is_target.iter().filter(|&&t| t).count();
    let n0 = is_target.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::Degenerate("both languages must be present".into()));
    }
    if n0 < 2 || n1 < 2 || is_target.len() <= 2 {
        return Err(Error::Degenerate(format!(
            "need at least two samples per language, got {n0} and {n1}"
        )));
    }
    Ok(())
}

/// Solves `(S_w + εI) v = Δμ` with `ε = shrinkage · trace(S_w) / d` and
/// normalizes; the sign is chosen so that `v · Δμ ≥ 0`.
pub fn axis_from_stats<T: Scalar>(stats: &ScatterStats<T>, shrinkage: f64) -> Result<Vec<T>> {
    let d = stats.within.rows();
    let delta = stats.between_direction();
    let scale = stats.mean_source.iter().chain(&stats.mean_target).fold(T::zero(), |m, x| m.max(x.abs()))
        + (stats.within.trace() / T::of((stats.counts.0 + stats.counts.1) as f64)).sqrt();
    if norm(&delta) <= T::of(1e-12) * (T::one() + scale) {
        return Err(Error::Degenerate("language means coincide".into()));
    }
    let trace = stats.within.trace();
    let mut eps = T::of(shrinkage) * trace / T::of(d as f64);
    if !(eps > T::zero()) {
        // Point-mass classes: any positive ridge gives the mean difference.
        eps = T::of(shrinkage.max(f64::MIN_POSITIVE)).max(T::min_positive_value());
    }
    let mut reg = stats.within.clone();
    for i in 0..d {
        reg[(i, i)] += eps;
    }
    let mut v = spd_solve(&reg, &delta)?;
    if v.iter().any(|x| !x.is_finite()) || normalize(&mut v) == T::zero() {
        return Err(Error::Numerical("LDA axis is not finite".into()));
    }
    if dot(&v, &delta) < T::zero() {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(v)
}

/// Single two-class LDA axis. Rows of `x` are samples.
pub fn lda_axis<T: Scalar>(x: &Matrix<T>, is_target: &[bool], shrinkage: f64) -> Result<Vec<T>> {
    if is_target.len() != x.rows() {
        return Err(Error::dim(x.rows(), is_target.len(), "language labels"));
    }
    check_two_class(is_target)?;
    axis_from_stats(&ScatterStats::compute(x, is_target)?, shrinkage)
}

/// Fisher ratio of the two languages along `direction`:
/// `(m1 - m0)² / (var0 + var1 + 1e-12)` over the projected samples.
pub fn fisher_ratio<T: Scalar>(x: &Matrix<T>, is_target: &[bool], direction: &[T]) -> Result<f64> {
    if is_target.len() != x.rows() {
        return Err(Error::dim(x.rows(), is_target.len(), "language labels"));
    }
    if direction.len() != x.cols() {
        return Err(Error::dim(x.cols(), direction.len(), "direction"));
    }
    let proj: Vec<f64> = (0..x.rows()).map(|i| dot(x.row(i), direction).as_f64()).collect();
    fisher_ratio_1d(&proj, is_target)
}

/// Fisher ratio of already-projected scalar samples.
pub fn fisher_ratio_1d(values: &[f64], is_target: &[bool]) -> Result<f64> {
    let mut sum = [0.0f64; 2];
    let mut cnt = [0usize; 2];
    for (&v, &t) in values.iter().zip(is_target) {
        sum[t as usize] += v;
        cnt[t as usize] += 1;
    }
    if cnt[0] == 0 || cnt[1] == 0 {
        return Err(Error::Degenerate("both languages must be present".into()));
    }
    let mean = [sum[0] / cnt[0] as f64, sum[1] / cnt[1] as f64];
    let mut var = [0.0f64; 2];
    for (&v, &t) in values.iter().zip(is_target) {
        let c = t as usize;
        var[c] += (v - mean[c]).powi(2);
    }
    let within = var[0] / cnt[0] as f64 + var[1] / cnt[1] as f64;
    Ok((mean[1] - mean[0]).powi(2) / (within + 1e-12))
}

/// Largest Fisher ratio over a set of candidate directions.
pub fn best_axis_fisher<T: Scalar, R: AsRef<[T]>>(
    x: &Matrix<T>,
    is_target: &[bool],
    axes: &[R],
) -> Result<f64> {
    let mut best = 0.0f64;
    for a in axes {
        best = best.max(fisher_ratio(x, is_target, a.as_ref())?);
    }
    Ok(best)
}

/// Provenance stored alongside a basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisMeta {
    pub source_lang: String,
    pub target_lang: String,
    pub n_used: usize,
    pub shrinkage: f64,
    pub requested_k: usize,
    pub axis_fisher: Vec<f64>,
    /// Location handling before LDA; class means absorb location.
    pub centering: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

/// Orthonormal `d × k` matrix of language-separability axes.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageBasis<T> {
    /// Axes as rows (`k × d`), i.e. `Vᵀ`.
    axes: Matrix<T>,
    pub meta: BasisMeta,
}

impl<T: Scalar> LanguageBasis<T> {
    pub fn from_axes(axes: Matrix<T>, meta: BasisMeta) -> Self {
        LanguageBasis { axes, meta }
    }

    pub fn d(&self) -> usize {
        self.axes.cols()
    }

    pub fn k(&self) -> usize {
        self.axes.rows()
    }

    pub fn axis(&self, i: usize) -> &[T] {
        self.axes.row(i)
    }

    pub fn axes(&self) -> impl Iterator<Item = &[T]> {
        (0..self.k()).map(move |i| self.axes.row(i))
    }

    /// `V` as a `d × k` matrix.
    pub fn matrix(&self) -> Matrix<T> {
        self.axes.transpose()
    }

    /// `VVᵀx`: projection onto the basis span, expressed in the original
    /// `d` coordinates.
    pub fn project(&self, x: &[T]) -> Result<Vec<T>> {
        let coords = self.axes.matvec(x).map_err(|_| Error::dim(self.d(), x.len(), "projection input"))?;
        self.axes.tmatvec(&coords)
    }

    /// Coordinates `Vᵀx` in the basis.
    pub fn coordinates(&self, x: &[T]) -> Result<Vec<T>> {
        self.axes.matvec(x).map_err(|_| Error::dim(self.d(), x.len(), "projection input"))
    }

    /// `‖VᵀV − I‖_max`
    pub fn orthonormality_error(&self) -> T {
        let gram = self.axes.matmul(&self.axes.transpose()).expect("square gram");
        gram.max_abs_diff(&Matrix::identity(self.k()))
    }

    /// `P = VVᵀ` as a dense `d × d` matrix.
    pub fn projector(&self) -> Matrix<T> {
        self.axes.transpose().matmul(&self.axes).expect("consistent shapes")
    }

    /// Basis made of the last `count` axes. When the basis was derived to
    /// `k = d`, these are the least language-separable directions.
    pub fn trailing(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.k() {
            return Err(Error::Invalid(format!("cannot take {count} of {} axes", self.k())));
        }
        let start = self.k() - count;
        let rows: Vec<&[T]> = (start..self.k()).map(|i| self.axes.row(i)).collect();
        let mut meta = self.meta.clone();
        meta.axis_fisher = meta.axis_fisher.get(start..).map(|s| s.to_vec()).unwrap_or_default();
        Ok(LanguageBasis {
            axes: Matrix::from_rows(&rows)?,
            meta,
        })
    }

    pub fn cast<U: Scalar>(&self) -> LanguageBasis<U> {
        LanguageBasis {
            axes: self.axes.cast(),
            meta: self.meta.clone(),
        }
    }
}

/// Derives up to `k` axes. Rows of `x` are samples.
///
/// Stops early (and records the smaller `k`) once the deflated data or the
/// freshly orthogonalized axis has vanished.
pub fn derive_basis<T: Scalar>(
    x: &Matrix<T>,
    is_target: &[bool],
    k: usize,
    shrinkage: f64,
) -> Result<LanguageBasis<T>> {
    let d = x.cols();
    if k == 0 || k > d {
        return Err(Error::Invalid(format!("k = {k} must be in 1..={d}")));
    }
    if is_target.len() != x.rows() {
        return Err(Error::dim(x.rows(), is_target.len(), "language labels"));
    }
    check_two_class(is_target)?;

    let data_norm = norm(x.as_slice());
    let mut work = x.clone();
    let mut axes: Vec<Vec<T>> = Vec::with_capacity(k);
    let mut axis_fisher = Vec::with_capacity(k);
    while axes.len() < k {
        if !axes.is_empty() {
            let residual = norm(work.as_slice());
            if residual <= T::of(RESIDUAL_EPS) * data_norm {
                break;
            }
        }
        let stats = ScatterStats::compute(&work, is_target)?;
        let mut v = match axis_from_stats(&stats, shrinkage) {
            Ok(v) => v,
            // Nothing language-specific left to extract.
            Err(Error::Degenerate(_)) if !axes.is_empty() => break,
            Err(e) => return Err(e),
        };
        orthogonalize(&mut v, &axes);
        if normalize(&mut v) <= T::of(RESIDUAL_EPS) {
            break;
        }
        if dot(&v, &stats.between_direction()) < T::zero() {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        axis_fisher.push(fisher_ratio(&work, is_target, &v)?);
        // X ← X − (X v) vᵀ; v is orthogonal to earlier axes, so this keeps
        // work = X − X V Vᵀ.
        for i in 0..work.rows() {
            let row = work.row_mut(i);
            let c = dot(row, &v);
            axpy(-c, &v, row);
        }
        axes.push(v);
    }

    let n1 = is_target.iter().filter(|&&t| t).count();
    let meta = BasisMeta {
        source_lang: String::new(),
        target_lang: String::new(),
        n_used: n1.min(is_target.len() - n1),
        shrinkage,
        requested_k: k,
        axis_fisher,
        centering: "class-means".into(),
        config_digest: None,
    };
    Ok(LanguageBasis {
        axes: Matrix::from_rows(&axes)?,
        meta,
    })
}

/// Splits a bilingual corpus into the sample matrix and language flags.
/// `target_lang` marks class 1; every other record must be `source_lang`.
/// At most `n_per_lang` records of each language are used, in file order.
pub fn bilingual_matrix<T: Scalar>(
    corpus: &Dataset,
    source_lang: &str,
    target_lang: &str,
    n_per_lang: Option<usize>,
) -> Result<(Matrix<T>, Vec<bool>)> {
    let cap = n_per_lang.unwrap_or(usize::MAX);
    let (mut n0, mut n1) = (0, 0);
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    for r in &corpus.records {
        let is_target = if r.lang == target_lang {
            true
        } else if r.lang == source_lang {
            false
        } else {
            return Err(Error::Invalid(format!(
                "record `{}` has language `{}`, expected `{source_lang}` or `{target_lang}`",
                r.id, r.lang
            )));
        };
        let counter = if is_target { &mut n1 } else { &mut n0 };
        if *counter >= cap {
            continue;
        }
        *counter += 1;
        rows.push(r.vec.iter().map(|&v| T::of_f32(v)).collect::<Vec<T>>());
        flags.push(is_target);
    }
    if rows.is_empty() {
        return Err(Error::Degenerate("empty bilingual corpus".into()));
    }
    Ok((Matrix::from_rows(&rows)?, flags))
}

/// Picks (source, target) language tags: explicit ones win, otherwise the
/// corpus must contain exactly two languages, taken in order of appearance.
pub fn corpus_languages(corpus: &Dataset, source: Option<&str>, target: Option<&str>) -> Result<(String, String)> {
    let langs = corpus.languages();
    match (source, target) {
        (Some(s), Some(t)) => Ok((s.to_string(), t.to_string())),
        _ if langs.len() != 2 => Err(Error::Degenerate(format!(
            "bilingual corpus needs exactly two languages, found {}",
            langs.len()
        ))),
        (Some(s), None) => {
            let t = langs.iter().find(|l| *l != s).cloned().unwrap_or_default();
            Ok((s.to_string(), t))
        }
        (None, Some(t)) => {
            let s = langs.iter().find(|l| *l != t).cloned().unwrap_or_default();
            Ok((s, t.to_string()))
        }
        (None, None) => Ok((langs[0].clone(), langs[1].clone())),
    }
}

/// Derives a basis directly from a bilingual dataset.
pub fn derive_basis_from_corpus<T: Scalar>(
    corpus: &Dataset,
    source_lang: &str,
    target_lang: &str,
    k: usize,
    shrinkage: f64,
    n_per_lang: Option<usize>,
) -> Result<LanguageBasis<T>> {
    let (x, flags) = bilingual_matrix::<T>(corpus, source_lang, target_lang, n_per_lang)?;
    let mut basis = derive_basis(&x, &flags, k.min(corpus.d), shrinkage)?;
    basis.meta.source_lang = source_lang.to_string();
    basis.meta.target_lang = target_lang.to_string();
    basis.meta.requested_k = k;
    Ok(basis)
}

/// Binary layout: magic "XITB" | version u16 | d u32 | k u32 |
/// meta_len u32 | meta JSON | `V` row-major (`d × k`) as f64 LE.
pub fn encode_basis<T: Scalar>(basis: &LanguageBasis<T>) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&basis.meta)?;
    let (d, k) = (basis.d(), basis.k());
    let mut out = Vec::with_capacity(18 + meta.len() + d * k * 8);
    out.extend_from_slice(BASIS_MAGIC);
    out.extend_from_slice(&BASIS_VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for row in 0..d {
        for col in 0..k {
            out.extend_from_slice(&basis.axes[(col, row)].as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_basis<T: Scalar>(bytes: &[u8]) -> Result<LanguageBasis<T>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != BASIS_MAGIC {
        return Err(Error::Format("bad basis magic".into()));
    }
    let version = r.u16()?;
    if version != BASIS_VERSION {
        return Err(Error::Format(format!("unsupported basis version {version}")));
    }
    let d = r.u32()? as usize;
    let k = r.u32()? as usize;
    let meta_len = r.u32()? as usize;
    let meta: BasisMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let mut axes = Matrix::zeros(k, d);
    for row in 0..d {
        for col in 0..k {
            axes[(col, row)] = T::of(r.f64()?);
        }
    }
    r.finish()?;
    Ok(LanguageBasis { axes, meta })
}

pub fn persist_basis<T: Scalar>(basis: &LanguageBasis<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_basis(basis)?)?;
    w.flush()?;
    Ok(())
}

pub fn load_basis<T: Scalar>(path: impl AsRef<Path>) -> Result<LanguageBasis<T>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_basis(&bytes)
}
