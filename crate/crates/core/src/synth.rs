//! Synthetic bilingual corpora: Gaussian class clusters shared by both
//! languages, with the target language shifted inside a low-rank subspace.
//!
//! Source sample of class `c`: `μ_c + σ·ε`.
//! Target sample of class `c`: `μ_c + U(γ·a + diag(τ)·z) + σ·ε`, where `U`
//! spans the language subspace, `a` is a fixed unit direction in it and
//! `τ_j = jitter · γ · (j + 1) / r` spreads the per-sample offsets unevenly
//! across the subspace axes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{m_sweep, Experiment, MetricsReport, RunSettings, System};
use crate::lda::BASIS_MAGIC;
use crate::linalg::{normalize, orthogonalize, Matrix};
use crate::store::{Dataset, EmbeddingRecord, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub d: usize,
    pub classes: usize,
    /// Pairwise distance between class means.
    pub delta: f64,
    /// Rank of the language-offset subspace.
    pub rank: usize,
    /// Norm of the mean language offset.
    pub gamma: f64,
    pub sigma: f64,
    pub n_src: usize,
    pub n_tgt: usize,
    /// Size of each held-out split (source dev/test, target dev/test).
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    /// Relative spread of per-sample offsets inside the subspace.
    #[serde(default = "default_jitter")]
    pub offset_jitter: f64,
    /// Coordinate axes spanning the offset subspace. When absent a random
    /// subspace orthogonal to the class means is drawn from the seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_axes: Option<Vec<usize>>,
    #[serde(default = "default_source_lang")]
    pub source_lang: String,
    #[serde(default = "default_target_lang")]
    pub target_lang: String,
    pub seed: u64,
}

fn default_n_eval() -> usize {
    500
}

fn default_jitter() -> f64 {
    1.0
}

fn default_source_lang() -> String {
    "en".into()
}

fn default_target_lang() -> String {
    "xx".into()
}

impl Default for SynthConfig {
    /// The reference benchmark configuration.
    fn default() -> Self {
        SynthConfig {
            d: 64,
            classes: 3,
            delta: 2.0,
            rank: 4,
            gamma: 3.0,
            sigma: 0.5,
            n_src: 3000,
            n_tgt: 600,
            n_eval: default_n_eval(),
            offset_jitter: default_jitter(),
            offset_axes: None,
            source_lang: default_source_lang(),
            target_lang: default_target_lang(),
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("synthetic config: {m}")));
        if self.d == 0 || self.classes < 2 {
            return bad("need d > 0 and at least two classes");
        }
        if self.rank == 0 || self.rank > self.d {
            return bad("rank must be in 1..=d");
        }
        if [self.delta, self.gamma, self.sigma, self.offset_jitter]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return bad("delta, gamma, sigma and jitter must be finite and non-negative");
        }
        if self.classes > self.d {
            return bad("class count exceeds dimension");
        }
        if let Some(axes) = &self.offset_axes {
            if axes.len() != self.rank {
                return bad("offset_axes length must equal rank");
            }
            let mut sorted = axes.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != axes.len() || sorted.last().is_some_and(|&a| a >= self.d) {
                return bad("offset_axes must be distinct coordinates below d");
            }
        } else if self.classes + self.rank > self.d {
            return bad("classes + rank must not exceed d");
        }
        if self.source_lang == self.target_lang {
            return bad("languages must differ");
        }
        Ok(())
    }
}

/// Fixed generative structure derived from a config.
struct World {
    means: Vec<Vec<f64>>,
    /// Offset subspace basis, `r` unit vectors.
    subspace: Vec<Vec<f64>>,
    /// Mean offset coordinates in the subspace.
    direction: Vec<f64>,
    jitter: Vec<f64>,
}

impl World {
    fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, r) = (cfg.d, cfg.rank);
        let scale = cfg.delta / std::f64::consts::SQRT_2;
        // Class means on coordinates not used by explicit offset axes, when
        // there are enough of them; a full-rank offset has to overlap.
        let reserved = cfg.offset_axes.clone().unwrap_or_default();
        let mut free: Vec<usize> = (0..d).filter(|j| !reserved.contains(j)).collect();
        if free.len() < cfg.classes {
            free = (0..d).collect();
        }
        let means: Vec<Vec<f64>> = (0..cfg.classes)
            .map(|c| {
                let mut m = vec![0.0; d];
                m[free[c]] = scale;
                m
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ u32::from_le_bytes(*BASIS_MAGIC) as u64);
        let subspace = match &cfg.offset_axes {
            Some(axes) => axes
                .iter()
                .map(|&j| {
                    let mut e = vec![0.0; d];
                    e[j] = 1.0;
                    e
                })
                .collect(),
            None => {
                let mut fixed: Vec<Vec<f64>> = means
                    .iter()
                    .map(|m| {
                        let mut u = m.clone();
                        normalize(&mut u);
                        u
                    })
                    .collect();
                let mut out = Vec::with_capacity(r);
                while out.len() < r {
                    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    orthogonalize(&mut v, &fixed);
                    if normalize(&mut v) > 1e-6 {
                        fixed.push(v.clone());
                        out.push(v);
                    }
                }
                out
            }
        };
        let direction = vec![1.0 / (r as f64).sqrt(); r];
        let jitter = (0..r)
            .map(|j| cfg.offset_jitter * cfg.gamma * (j + 1) as f64 / r as f64)
            .collect();
        Ok(World {
            means,
            subspace,
            direction,
            jitter,
        })
    }

    fn sample(
        &self,
        cfg: &SynthConfig,
        target: bool,
        n: usize,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Vec<EmbeddingRecord> {
        let lang = if target { &cfg.target_lang } else { &cfg.source_lang };
        (0..n)
            .map(|i| {
                let class = i % cfg.classes;
                let mut v = self.means[class].clone();
                for x in &mut v {
                    let e: f64 = rng.sample(StandardNormal);
                    *x += cfg.sigma * e;
                }
                if target {
                    for (j, u) in self.subspace.iter().enumerate() {
                        let z: f64 = rng.sample(StandardNormal);
                        let coef = cfg.gamma * self.direction[j] + self.jitter[j] * z;
                        for (x, &uj) in v.iter_mut().zip(u) {
                            *x += coef * uj;
                        }
                    }
                }
                EmbeddingRecord {
                    id: format!("{prefix}{i:06}"),
                    lang: lang.clone(),
                    label: Some(class as u32),
                    vec: v.into_iter().map(|x| x as f32).collect(),
                }
            })
            .collect()
    }
}

fn dataset(cfg: &SynthConfig, name: &str, role: Role, records: Vec<EmbeddingRecord>) -> Result<Dataset> {
    Dataset::new(name, cfg.d, cfg.classes, role, records)
}

/// Labeled source and target pools. Target gold labels are attached for
/// evaluation; training code only sees them through the skyline path.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    let world = World::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let src = world.sample(cfg, false, cfg.n_src, "s", &mut rng);
    let tgt = world.sample(cfg, true, cfg.n_tgt, "t", &mut rng);
    Ok((
        dataset(cfg, "synth-source", Role::Source, src)?,
        dataset(cfg, "synth-target", Role::Target, tgt)?,
    ))
}

/// Pools from [`generate_synthetic`] plus held-out source and target
/// dev/test splits of `n_eval` records each.
pub fn generate_experiment(cfg: &SynthConfig) -> Result<Experiment> {
    let (source_train, target_train) = generate_synthetic(cfg)?;
    let world = World::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut split = |target: bool, prefix: &str, name: &str| {
        let recs = world.sample(cfg, target, cfg.n_eval, prefix, &mut rng);
        dataset(cfg, name, if target { Role::Target } else { Role::Source }, recs)
    };
    Ok(Experiment {
        source_dev: split(false, "sd", "synth-source.dev")?,
        source_test: split(false, "st", "synth-source.test")?,
        target_dev: split(true, "td", "synth-target.dev")?,
        target_test: split(true, "tt", "synth-target.test")?,
        source_train,
        target_train,
        mapping_views: None,
    })
}

/// The exact offset subspace used by the generator, as a `d × r` matrix
/// with orthonormal columns.
pub fn analytic_language_axis(cfg: &SynthConfig) -> Result<Matrix<f64>> {
    Matrix::from_columns(&World::new(cfg)?.subspace)
}

/// Benchmark file: a synthetic config with optional run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    #[serde(flatten)]
    pub synth: SynthConfig,
    #[serde(default = "bench_settings")]
    pub run: RunSettings,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            synth: SynthConfig::default(),
            run: bench_settings(),
        }
    }
}

/// Desk-scale run settings for synthetic benchmarks. The basis keeps as
/// many axes as the reference config has offset dimensions.
pub fn bench_settings() -> RunSettings {
    let mut s = RunSettings::default();
    s.basis.k = 4;
    s.basis.n_per_lang = Some(2000);
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub system: System,
    pub runs: usize,
    pub target_test_mean: f64,
    pub target_test_std: f64,
    pub source_test_mean: f64,
    pub source_test_std: f64,
    pub proj_allm_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<MetricsReport>,
    pub summary: Vec<SystemSummary>,
}

impl BenchReport {
    pub fn summary_for(&self, system: System) -> Option<&SystemSummary> {
        self.summary.iter().find(|s| s.system == system)
    }

    pub fn rows_for(&self, system: System) -> impl Iterator<Item = &MetricsReport> {
        self.rows.iter().filter(move |r| r.system == system)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn summarize(rows: &[MetricsReport], systems: &[System]) -> Vec<SystemSummary> {
    systems
        .iter()
        .map(|&system| {
            let mine: Vec<&MetricsReport> = rows.iter().filter(|r| r.system == system).collect();
            let tt: Vec<f64> = mine.iter().map(|r| r.target_test).collect();
            let st: Vec<f64> = mine.iter().map(|r| r.source_test).collect();
            let pa: Vec<f64> = mine.iter().filter_map(|r| r.proj_allm).collect();
            let (target_test_mean, target_test_std) = mean_std(&tt);
            let (source_test_mean, source_test_std) = mean_std(&st);
            SystemSummary {
                system,
                runs: mine.len(),
                target_test_mean,
                target_test_std,
                source_test_mean,
                source_test_std,
                proj_allm_mean: (!pa.is_empty()).then(|| mean_std(&pa).0),
            }
        })
        .collect()
}

/// Seeds used for a benchmark of `count` runs starting at `base`.
pub fn bench_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Regenerates the corpus for every seed and runs each system on it.
pub fn run_benchmark(cfg: &BenchConfig, systems: &[System], seeds: &[u64]) -> Result<BenchReport> {
    if seeds.is_empty() || systems.is_empty() {
        return Err(Error::Invalid("benchmark needs at least one seed and one system".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let synth = SynthConfig {
            seed,
            ..cfg.synth.clone()
        };
        let exp = generate_experiment(&synth)?;
        rows.extend(m_sweep(&exp, &[cfg.run.m], systems, &[seed], &cfg.run)?);
    }
    let summary = summarize(&rows, systems);
    Ok(BenchReport { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            d: 8,
            classes: 3,
            rank: 1,
            n_src: 30,
            n_tgt: 12,
            n_eval: 6,
            ..Default::default()
        }
    }

    #[test]
    fn no_misalignment_means_identical_samples() {
        let cfg = SynthConfig {
            gamma: 0.0,
            sigma: 0.0,
            n_src: 9,
            n_tgt: 9,
            ..small()
        };
        let (s, t) = generate_synthetic(&cfg).unwrap();
        for (a, b) in s.records.iter().zip(&t.records) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.vec, b.vec);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_synthetic(&small()).unwrap(), generate_synthetic(&small()).unwrap());
    }

    #[test]
    fn explicit_axis_is_returned() {
        let cfg = SynthConfig {
            offset_axes: Some(vec![3]),
            ..small()
        };
        let u = analytic_language_axis(&cfg).unwrap();
        let mut e3 = vec![0.0; 8];
        e3[3] = 1.0;
        assert_eq!(u.column(0), e3);
    }

    #[test]
    fn full_rank_subspace_is_identity_span() {
        let cfg = SynthConfig {
            d: 4,
            classes: 2,
            rank: 4,
            offset_axes: Some(vec![0, 1, 2, 3]),
            ..small()
        };
        let u = analytic_language_axis(&cfg).unwrap();
        let p = u.matmul(&u.transpose()).unwrap();
        assert!(p.max_abs_diff(&Matrix::identity(4)) < 1e-12);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate_synthetic(&SynthConfig { rank: 0, ..small() }).is_err());
        assert!(generate_synthetic(&SynthConfig { sigma: -1.0, ..small() }).is_err());
        assert!(generate_synthetic(&SynthConfig {
            offset_axes: Some(vec![9]),
            ..small()
        })
        .is_err());
    }

    #[test]
    fn bench_config_accepts_bare_synth_json() {
        let json = serde_json::to_string(&SynthConfig::default()).unwrap();
        let cfg: BenchConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg.synth, SynthConfig::default());
        assert_eq!(cfg.run, bench_settings());
    }
}
