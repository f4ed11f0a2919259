//! Config-driven end-to-end runs and plot-ready 2D exports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest::{digest_bytes, digest_file, digest_json, TOOL_VERSION};
use crate::error::{Error, Result};
use crate::eval::{reports_csv, run_system, Experiment, MetricsReport, RunSettings, System};
use crate::lda::{best_axis_fisher, encode_basis, fisher_ratio, load_basis, LanguageBasis};
use crate::linalg::{dot, symmetric_eigen, Matrix};
use crate::similarity::{mapping_view, read_mapping, write_mapping, MappingTable};
use crate::store::{load_store, Dataset};
use crate::trainer::{encode_checkpoint, history_csv};

/// Input files of one pipeline run, all in the binary store format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub source_train: PathBuf,
    pub source_dev: PathBuf,
    pub source_test: PathBuf,
    /// Unlabeled (or label-quarantined) target pool.
    pub target_train: PathBuf,
    pub target_dev: PathBuf,
    pub target_test: PathBuf,
    /// Alternate embeddings of the source and target pools used only for
    /// retrieval. Both or neither.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_source: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_target: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataPaths,
    pub system: System,
    /// Precomputed basis. Without it, reg-lda needs `derive_basis`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<PathBuf>,
    /// Derive the basis from the source and target training pools.
    #[serde(default)]
    pub derive_basis: bool,
    /// Precomputed mapping table; built from the data when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mapping: Option<PathBuf>,
    #[serde(default)]
    pub settings: RunSettings,
    pub out_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Digest of everything that affects results; `out_dir` is excluded.
    pub fn digest(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(map) = value.as_object_mut() {
            map.remove("out_dir");
        }
        digest_json(&value)
    }

    fn inputs(&self) -> Vec<(&'static str, &Path)> {
        let d = &self.data;
        let mut v: Vec<(&'static str, &Path)> = vec![
            ("source_train", &d.source_train),
            ("source_dev", &d.source_dev),
            ("source_test", &d.source_test),
            ("target_train", &d.target_train),
            ("target_dev", &d.target_dev),
            ("target_test", &d.target_test),
        ];
        if let Some(p) = &d.map_source {
            v.push(("map_source", p));
        }
        if let Some(p) = &d.map_target {
            v.push(("map_target", p));
        }
        if let Some(p) = &self.basis {
            v.push(("basis", p));
        }
        if let Some(p) = &self.mapping {
            v.push(("mapping", p));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let missing: Vec<String> = self
            .inputs()
            .into_iter()
            .filter(|(_, p)| !p.is_file())
            .map(|(name, p)| format!("{name} ({})", p.display()))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Invalid(format!("missing input files: {}", missing.join(", "))));
        }
        if self.data.map_source.is_some() != self.data.map_target.is_some() {
            return Err(Error::Invalid("map_source and map_target must be given together".into()));
        }
        if self.basis.is_some() && self.derive_basis {
            return Err(Error::Invalid("give either a basis file or derive_basis, not both".into()));
        }
        self.settings.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Written last on success and on failure; `complete == false` marks every
/// listed output as partial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config_digest: String,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub inputs: BTreeMap<String, FileDigest>,
    /// Output file name (relative to the output directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: MetricsReport,
    pub manifest: Manifest,
}

struct Outputs<'a> {
    dir: &'a Path,
    written: BTreeMap<String, String>,
}

impl Outputs<'_> {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.written.insert(name.to_string(), digest_bytes(bytes));
        Ok(())
    }

    fn record(&mut self, name: &str) -> Result<()> {
        let digest = digest_file(self.dir.join(name))?;
        self.written.insert(name.to_string(), digest);
        Ok(())
    }
}

fn load(name: &str, path: &Path) -> Result<Dataset> {
    load_store(path).map_err(|e| match e {
        Error::Io(io) => Error::Invalid(format!("{name} ({}): {io}", path.display())),
        other => other,
    })
}

/// Loads every dataset named by the config.
pub fn load_experiment(cfg: &PipelineConfig) -> Result<Experiment> {
    let d = &cfg.data;
    let source_train = load("source_train", &d.source_train)?;
    let target_train = load("target_train", &d.target_train)?;
    let mapping_views = match (&d.map_source, &d.map_target) {
        (Some(s), Some(t)) => Some((
            mapping_view(&source_train, &load("map_source", s)?)?,
            mapping_view(&target_train, &load("map_target", t)?)?,
        )),
        _ => None,
    };
    Ok(Experiment {
        source_train,
        source_dev: load("source_dev", &d.source_dev)?,
        source_test: load("source_test", &d.source_test)?,
        target_train,
        target_dev: load("target_dev", &d.target_dev)?,
        target_test: load("target_test", &d.target_test)?,
        mapping_views,
    })
}

/// Runs map, basis, augment, train and eval for one system and writes
/// `mapping.jsonl`, `basis.xb` (when derived), `model.xm`, `history.csv`,
/// `report.csv`, `report.json` and `manifest.json` into `out_dir`.
///
/// Every failure is tagged with its stage. The manifest is still written,
/// with `complete: false`, so partial outputs are never mistaken for a
/// finished run.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let config_digest = cfg.digest()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut inputs = BTreeMap::new();
    for (name, path) in cfg.inputs() {
        inputs.insert(
            name.to_string(),
            FileDigest {
                path: path.display().to_string(),
                sha256: digest_file(path)?,
            },
        );
    }
    let mut out = Outputs {
        dir: &cfg.out_dir,
        written: BTreeMap::new(),
    };
    let result = stages(cfg, &config_digest, &mut out);
    let (failed_stage, error) = match &result {
        Ok(_) => (None, None),
        Err(Error::Stage { stage, source }) => (Some(stage.clone()), Some(source.to_string())),
        Err(e) => (None, Some(e.to_string())),
    };
    let manifest = Manifest {
        tool_version: TOOL_VERSION.to_string(),
        config_digest,
        complete: result.is_ok(),
        failed_stage,
        error,
        inputs,
        outputs: out.written,
    };
    fs::write(cfg.out_dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    result.map(|report| PipelineOutcome { report, manifest })
}

fn stages(cfg: &PipelineConfig, config_digest: &str, out: &mut Outputs) -> Result<MetricsReport> {
    let exp = load_experiment(cfg).map_err(|e| e.in_stage("load"))?;
    let settings = &cfg.settings;

    let mapping: MappingTable = match &cfg.mapping {
        Some(p) => read_mapping(p),
        None => exp.mapping(settings),
    }
    .map_err(|e| e.in_stage("map"))?;
    write_mapping(&mapping, out.dir.join("mapping.jsonl"), Some(config_digest)).map_err(|e| e.in_stage("map"))?;
    out.record("mapping.jsonl")?;

    let basis: Option<LanguageBasis<f64>> = if let Some(p) = &cfg.basis {
        Some(load_basis(p).map_err(|e| e.in_stage("basis"))?)
    } else if cfg.derive_basis {
        let mut b = exp.basis(&settings.basis).map_err(|e| e.in_stage("basis"))?;
        b.meta.config_digest = Some(config_digest.to_string());
        out.put("basis.xb", &encode_basis(&b)?)?;
        Some(b)
    } else {
        None
    };

    let run = run_system(&exp, cfg.system, settings, Some(&mapping), basis.as_ref())?;
    let mut report = run.report;
    report.config_digest = config_digest.to_string();
    out.put("model.xm", &encode_checkpoint(&run.checkpoint, Some(config_digest))?)?;
    out.put("history.csv", history_csv(&run.history).as_bytes())?;
    out.put("report.csv", reports_csv(std::slice::from_ref(&report)).as_bytes())?;
    out.put("report.json", &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// One plotted point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectionRow {
    pub view: String,
    pub id: String,
    pub lang: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewSummary {
    pub view: String,
    /// Best single-axis two-language Fisher ratio of the view's data.
    pub fisher: f64,
    /// Variance along the two principal axes.
    pub variance: [f64; 2],
}

/// Top-2 principal-component scores of the rows of `x`, plus the variances.
fn principal_scores(x: &Matrix<f64>) -> Result<(Vec<[f64; 2]>, [f64; 2])> {
    let (n, d) = (x.rows(), x.cols());
    let mut c = x.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| c[(i, j)]).sum::<f64>() / n as f64;
        for i in 0..n {
            c.row_mut(i)[j] -= mean;
        }
    }
    // Eigen-decompose whichever of XᵀX and XXᵀ is smaller.
    let (values, scores) = if d <= n {
        let gram = c.transpose().matmul(&c)?;
        let (vals, vecs) = symmetric_eigen(&gram)?;
        let axes = [vecs.column(0), vecs.column(1.min(d - 1))];
        let scores: Vec<[f64; 2]> = (0..n)
            .map(|i| [dot(c.row(i), &axes[0]), if d > 1 { dot(c.row(i), &axes[1]) } else { 0.0 }])
            .collect();
        (vals, scores)
    } else {
        let gram = c.matmul(&c.transpose())?;
        let (vals, vecs) = symmetric_eigen(&gram)?;
        let scale = [vals[0].max(0.0).sqrt(), vals[1].max(0.0).sqrt()];
        let scores = (0..n).map(|i| [vecs[(i, 0)] * scale[0], vecs[(i, 1)] * scale[1]]).collect();
        (vals, scores)
    };
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    if !(values[0] > 1e-12 * (1.0 + total)) {
        return Err(Error::Degenerate("covariance of the view vanishes".into()));
    }
    let second = if values.len() > 1 { values[1].max(0.0) } else { 0.0 };
    // Fix the eigenvector sign so the output is stable across platforms.
    let mut scores = scores;
    for k in 0..2 {
        let pivot = scores.iter().map(|s| s[k]).fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            scores.iter_mut().for_each(|s| s[k] = -s[k]);
        }
    }
    Ok((scores, [values[0] / n as f64, second / n as f64]))
}

/// Best single-axis Fisher ratio of a view: coordinate axes for the raw
/// view, basis axes for the projected one.
fn view_fisher(x: &Matrix<f64>, is_target: &[bool], basis: Option<&LanguageBasis<f64>>) -> Result<f64> {
    match basis {
        Some(b) => best_axis_fisher(x, is_target, &b.axes().collect::<Vec<_>>()),
        None => {
            let mut best = 0.0f64;
            let mut e = vec![0.0; x.cols()];
            for j in 0..x.cols() {
                e[j] = 1.0;
                best = best.max(fisher_ratio(x, is_target, &e)?);
                e[j] = 0.0;
            }
            Ok(best)
        }
    }
}

/// Principal-axis 2D projections of a bilingual sample: the raw view and,
/// with a basis, the view after projecting onto it.
pub fn projection_2d(
    datasets: &[&Dataset],
    basis: Option<&LanguageBasis<f64>>,
) -> Result<(Vec<ProjectionRow>, Vec<ViewSummary>)> {
    let records: Vec<_> = datasets.iter().flat_map(|ds| ds.records.iter()).collect();
    let d = datasets.first().map(|ds| ds.d).unwrap_or(0);
    if let Some(ds) = datasets.iter().find(|ds| ds.d != d) {
        return Err(Error::dim(d, ds.d, format!("dataset `{}`", ds.name)));
    }
    let mut langs: Vec<&str> = Vec::new();
    for r in &records {
        if !langs.contains(&r.lang.as_str()) {
            langs.push(&r.lang);
        }
    }
    if langs.len() != 2 {
        return Err(Error::Degenerate(format!(
            "need exactly two languages, found {}",
            langs.len()
        )));
    }
    let is_target: Vec<bool> = records.iter().map(|r| r.lang == langs[1]).collect();
    let n1 = is_target.iter().filter(|&&t| t).count();
    if n1 < 2 || records.len() - n1 < 2 {
        return Err(Error::Degenerate("need at least two records per language".into()));
    }
    if let Some(b) = basis {
        if b.d() != d {
            return Err(Error::dim(d, b.d(), "basis"));
        }
    }

    let raw: Vec<Vec<f64>> = records.iter().map(|r| r.vec.iter().map(|&v| v as f64).collect()).collect();
    let mut views = vec![("raw", Matrix::from_rows(&raw)?, None)];
    if let Some(b) = basis {
        let projected = raw.iter().map(|x| b.project(x)).collect::<Result<Vec<_>>>()?;
        views.push(("basis", Matrix::from_rows(&projected)?, Some(b)));
    }

    let mut rows = Vec::with_capacity(records.len() * views.len());
    let mut summaries = Vec::with_capacity(views.len());
    for (name, x, view_basis) in &views {
        let (scores, variance) = principal_scores(x)?;
        summaries.push(ViewSummary {
            view: name.to_string(),
            fisher: view_fisher(x, &is_target, *view_basis)?,
            variance,
        });
        rows.extend(records.iter().zip(&scores).map(|(r, s)| ProjectionRow {
            view: name.to_string(),
            id: r.id.clone(),
            lang: r.lang.clone(),
            x: s[0],
            y: s[1],
        }));
    }
    Ok((rows, summaries))
}

/// Path of the per-view Fisher ratio file written next to `out`.
pub fn ratios_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".ratios.csv");
    PathBuf::from(s)
}

/// Writes `view,id,lang,x,y` rows to `out` and `view,fisher,var1,var2` to
/// [`ratios_path`]`(out)`.
pub fn emit_projection_2d(
    datasets: &[&Dataset],
    basis: Option<&LanguageBasis<f64>>,
    out: impl AsRef<Path>,
) -> Result<Vec<ViewSummary>> {
    let out = out.as_ref();
    let (rows, summaries) = projection_2d(datasets, basis)?;
    let mut csv = String::from("view,id,lang,x,y\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{}\n", r.view, r.id, r.lang, r.x, r.y));
    }
    fs::write(out, csv)?;
    let mut ratios = String::from("view,fisher,var1,var2\n");
    for s in &summaries {
        ratios.push_str(&format!("{},{},{},{}\n", s.view, s.fisher, s.variance[0], s.variance[1]));
    }
    fs::write(ratios_path(out), ratios)?;
    Ok(summaries)
}
