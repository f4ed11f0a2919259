//! Accuracy, label-projection accuracy, forgetting and the per-system
//! experiment runner used by sweeps and benchmarks.

use serde::{Deserialize, Serialize};

use crate::digest::digest_json;
use crate::error::{Error, Result};
use crate::interpolate::{assemble_training_set, AssembleOptions, MixMode};
use crate::lda::{corpus_languages, derive_basis_from_corpus, LanguageBasis, DEFAULT_SHRINKAGE};
use crate::scalar::Scalar;
use crate::similarity::{build_mapping, MappingMode, MappingTable, PairPolicy, DEFAULT_M};
use crate::store::{Dataset, Role};
use crate::trainer::{accuracy_on, labeled_vectors, train, Checkpoint, EpochRecord, HeadModel, TrainConfig, TARGET_DEV};

/// Attached to every report.
pub const FROZEN_CAVEAT: &str = "frozen embeddings: interpolation feeds a trained classifier head only; \
encoder weights are never updated, so numbers are not comparable to fine-tuned encoder results";

/// Fraction of argmax-correct predictions on a labeled split.
pub fn accuracy<T: Scalar>(model: &HeadModel<T>, split: &Dataset) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Invalid(format!("split `{}` is empty", split.name)));
    }
    accuracy_on(model, &labeled_vectors::<T>(split)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionAccuracy {
    /// Rank-0 projected label equals gold.
    pub top1: f64,
    /// Pair-level: every (target, neighbor) pair is one judgment.
    pub all_m: f64,
    /// Some neighbor among the m carries the gold label.
    pub any_of_m: f64,
}

pub fn label_projection_accuracy(table: &MappingTable, gold: &Dataset) -> Result<ProjectionAccuracy> {
    if table.entries.is_empty() {
        return Err(Error::Invalid("empty mapping table".into()));
    }
    let index = gold.id_index();
    let (mut top1, mut pairs, mut pair_hits, mut any) = (0usize, 0usize, 0usize, 0usize);
    for e in &table.entries {
        let gold_label = index
            .get(e.target_id.as_str())
            .and_then(|&i| gold.records[i].label)
            .ok_or_else(|| Error::MissingLabel(e.target_id.clone()))?;
        let hits = e.neighbors.iter().filter(|n| n.label == gold_label).count();
        if e.neighbors.first().is_some_and(|n| n.label == gold_label) {
            top1 += 1;
        }
        if hits > 0 {
            any += 1;
        }
        pairs += e.neighbors.len();
        pair_hits += hits;
    }
    let n = table.entries.len() as f64;
    Ok(ProjectionAccuracy {
        top1: top1 as f64 / n,
        all_m: if pairs == 0 { 0.0 } else { pair_hits as f64 / pairs as f64 },
        any_of_m: any as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub epoch: usize,
    pub source_dev: f64,
    pub source_test: f64,
}

/// Source-language accuracy of a checkpoint that was selected on the
/// target dev split. Any other provenance is refused.
pub fn forgetting_report<T: Scalar>(
    ckpt: &Checkpoint<T>,
    source_dev: &Dataset,
    source_test: &Dataset,
) -> Result<ForgettingReport> {
    if ckpt.provenance != TARGET_DEV {
        return Err(Error::Provenance(ckpt.provenance.clone()));
    }
    Ok(ForgettingReport {
        epoch: ckpt.epoch,
        source_dev: accuracy(&ckpt.model, source_dev)?,
        source_test: accuracy(&ckpt.model, source_test)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    Skyline,
    BaselinePs,
    XiteRegReg,
    XiteRegLda,
    SourceOnly,
}

impl System {
    pub const MAIN: [System; 4] = [System::Skyline, System::BaselinePs, System::XiteRegReg, System::XiteRegLda];

    pub fn as_str(self) -> &'static str {
        match self {
            System::Skyline => "skyline",
            System::BaselinePs => "baseline-ps",
            System::XiteRegReg => "xite-reg-reg",
            System::XiteRegLda => "xite-reg-lda",
            System::SourceOnly => "source-only",
        }
    }

    pub fn mix_mode(self) -> MixMode {
        match self {
            System::Skyline | System::BaselinePs => MixMode::TargetOnly,
            System::XiteRegReg => MixMode::RegReg,
            System::XiteRegLda => MixMode::RegLda,
            System::SourceOnly => MixMode::SourceOnly,
        }
    }

    /// Parses a comma-separated list; `all` selects the four main systems.
    pub fn parse_list(s: &str) -> Result<Vec<System>> {
        if s.trim() == "all" {
            return Ok(Self::MAIN.to_vec());
        }
        s.split(',').map(|p| p.trim().parse()).collect()
    }
}

impl std::str::FromStr for System {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "skyline" => System::Skyline,
            "baseline-ps" => System::BaselinePs,
            "xite-reg-reg" | "reg-reg" => System::XiteRegReg,
            "xite-reg-lda" | "reg-lda" => System::XiteRegLda,
            "source-only" => System::SourceOnly,
            _ => return Err(Error::Invalid(format!("unknown system `{s}`"))),
        })
    }
}

impl std::fmt::Display for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisSettings {
    pub k: usize,
    pub shrinkage: f64,
    /// Sentences per language used to derive the basis.
    pub n_per_lang: Option<usize>,
}

impl Default for BasisSettings {
    fn default() -> Self {
        BasisSettings {
            k: 400,
            shrinkage: DEFAULT_SHRINKAGE,
            n_per_lang: Some(2000),
        }
    }
}

/// Everything that determines one experiment cell besides system and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSettings {
    pub m: usize,
    pub mapping_mode: MappingMode,
    pub pair_policy: PairPolicy,
    pub basis: BasisSettings,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            m: DEFAULT_M,
            mapping_mode: MappingMode::Similarity,
            pair_policy: PairPolicy::AllM,
            basis: BasisSettings::default(),
            train: TrainConfig::default(),
            seed: 42,
        }
    }
}

/// Datasets for one experiment. `target_train` is the unlabeled target pool;
/// its gold labels, when present, are read only for the skyline and for
/// label-projection accuracy.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub source_train: Dataset,
    pub source_dev: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_dev: Dataset,
    pub target_test: Dataset,
    /// Alternate embeddings of `(source_train, target_train)` used only for
    /// mapping.
    pub mapping_views: Option<(Dataset, Dataset)>,
}

impl Experiment {
    pub fn classes(&self) -> usize {
        self.source_train.classes.max(self.target_dev.classes)
    }

    pub fn mapping(&self, settings: &RunSettings) -> Result<MappingTable> {
        let (src, tgt) = match &self.mapping_views {
            Some((s, t)) => (s, t),
            None => (&self.source_train, &self.target_train),
        };
        build_mapping::<f64>(tgt, src, settings.m, settings.mapping_mode, settings.seed)
    }

    /// Derives the language basis from the source and target training pools.
    pub fn basis(&self, settings: &BasisSettings) -> Result<LanguageBasis<f64>> {
        let corpus = Dataset::concat(
            "basis-corpus",
            Role::BasisCorpus,
            &[&self.source_train.clone().without_labels(), &self.target_train.clone().without_labels()],
        )?;
        let src_lang = self.source_train.languages();
        let tgt_lang = self.target_train.languages();
        let (s, t) = corpus_languages(
            &corpus,
            src_lang.first().map(String::as_str),
            tgt_lang.first().map(String::as_str),
        )?;
        derive_basis_from_corpus(&corpus, &s, &t, settings.k, settings.shrinkage, settings.n_per_lang)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub system: System,
    pub m: usize,
    pub seed: u64,
    pub target_dev: f64,
    pub target_test: f64,
    pub source_dev: f64,
    pub source_test: f64,
    pub proj_top1: Option<f64>,
    pub proj_allm: Option<f64>,
    pub proj_anym: Option<f64>,
    pub selected_epoch: usize,
    pub config_digest: String,
    pub caveat: String,
}

pub const REPORT_CSV_HEADER: &str =
    "system,m,seed,target_dev,target_test,source_dev,source_test,proj_top1,proj_allm,selected_epoch,proj_anym";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.system,
            self.m,
            self.seed,
            self.target_dev,
            self.target_test,
            self.source_dev,
            self.source_test,
            opt(self.proj_top1),
            opt(self.proj_allm),
            self.selected_epoch,
            opt(self.proj_anym),
        )
    }
}

pub fn reports_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::from(REPORT_CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Full output of one system run.
#[derive(Debug, Clone)]
pub struct SystemRun {
    pub report: MetricsReport,
    pub checkpoint: Checkpoint<f64>,
    pub history: Vec<EpochRecord>,
    pub mapping: MappingTable,
}

#[derive(Serialize)]
struct CellKey<'a> {
    system: System,
    settings: &'a RunSettings,
    data: [&'a str; 6],
    sizes: [usize; 6],
}

/// Trains and evaluates one system. `basis` is required for reg-lda; pass
/// the result of [`Experiment::basis`] to share it across cells.
pub fn run_system(
    exp: &Experiment,
    system: System,
    settings: &RunSettings,
    mapping: Option<&MappingTable>,
    basis: Option<&LanguageBasis<f64>>,
) -> Result<SystemRun> {
    let owned;
    let mapping = match mapping {
        Some(m) => m,
        None => {
            owned = exp.mapping(settings).map_err(|e| e.in_stage("map"))?;
            &owned
        }
    };
    let examples = assemble_training_set(
        mapping,
        &exp.source_train,
        &exp.target_train,
        system.mix_mode(),
        basis,
        settings.pair_policy,
        AssembleOptions {
            gold_target_labels: system == System::Skyline,
            renormalize: false,
        },
    )
    .map_err(|e| e.in_stage("augment"))?;
    let trainset: Vec<(Vec<f64>, u32)> = examples.into_iter().map(|e| (e.vec, e.label)).collect();
    let dev = labeled_vectors::<f64>(&exp.target_dev)?;
    let mut cfg = settings.train.clone();
    cfg.seed = settings.seed;
    cfg.selection = TARGET_DEV.to_string();
    let (ckpt, history) = train(&trainset, &dev, exp.classes(), &cfg).map_err(|e| e.in_stage("train"))?;

    let forgetting = forgetting_report(&ckpt, &exp.source_dev, &exp.source_test).map_err(|e| e.in_stage("eval"))?;
    let target_test = accuracy(&ckpt.model, &exp.target_test).map_err(|e| e.in_stage("eval"))?;
    let proj = if exp.target_train.is_labeled() && !mapping.entries.is_empty() {
        Some(label_projection_accuracy(mapping, &exp.target_train)?)
    } else {
        None
    };
    let key = CellKey {
        system,
        settings,
        data: [
            &exp.source_train.name,
            &exp.source_dev.name,
            &exp.source_test.name,
            &exp.target_train.name,
            &exp.target_dev.name,
            &exp.target_test.name,
        ],
        sizes: [
            exp.source_train.len(),
            exp.source_dev.len(),
            exp.source_test.len(),
            exp.target_train.len(),
            exp.target_dev.len(),
            exp.target_test.len(),
        ],
    };
    let report = MetricsReport {
        system,
        m: settings.m,
        seed: settings.seed,
        target_dev: ckpt.dev_accuracy,
        target_test,
        source_dev: forgetting.source_dev,
        source_test: forgetting.source_test,
        proj_top1: proj.map(|p| p.top1),
        proj_allm: proj.map(|p| p.all_m),
        proj_anym: proj.map(|p| p.any_of_m),
        selected_epoch: ckpt.epoch,
        config_digest: digest_json(&key)?,
        caveat: FROZEN_CAVEAT.to_string(),
    };
    Ok(SystemRun {
        report,
        checkpoint: ckpt,
        history,
        mapping: mapping.clone(),
    })
}

/// One run per (seed, m, system), in that nesting order.
///
/// The basis depends on neither m nor the mapping, so it is derived once per
/// experiment and shared by every reg-lda cell.
pub fn m_sweep(
    exp: &Experiment,
    m_list: &[usize],
    systems: &[System],
    seeds: &[u64],
    base: &RunSettings,
) -> Result<Vec<MetricsReport>> {
    if let Some(&m) = m_list.iter().find(|&&m| m > exp.source_train.len()) {
        return Err(Error::Invalid(format!(
            "m = {m} exceeds source size {}",
            exp.source_train.len()
        )));
    }
    let basis = if systems.contains(&System::XiteRegLda) {
        Some(exp.basis(&base.basis).map_err(|e| e.in_stage("basis"))?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(m_list.len() * systems.len() * seeds.len());
    for &seed in seeds {
        for &m in m_list {
            let settings = RunSettings {
                m,
                seed,
                ..base.clone()
            };
            let mapping = exp.mapping(&settings).map_err(|e| e.in_stage("map"))?;
            for &system in systems {
                out.push(run_system(exp, system, &settings, Some(&mapping), basis.as_ref())?.report);
            }
        }
    }
    Ok(out)
}

/// The `m` with the highest mean target-test accuracy for `system`.
pub fn best_m(reports: &[MetricsReport], system: System) -> Option<(usize, f64)> {
    let mut ms: Vec<usize> = reports.iter().filter(|r| r.system == system).map(|r| r.m).collect();
    ms.sort_unstable();
    ms.dedup();
    ms.into_iter()
        .map(|m| {
            let vals: Vec<f64> = reports
                .iter()
                .filter(|r| r.system == system && r.m == m)
                .map(|r| r.target_test)
                .collect();
            (m, vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .fold(None, |best: Option<(usize, f64)>, cur| match best {
            Some(b) if b.1 >= cur.1 => Some(b),
            _ => Some(cur),
        })
}
