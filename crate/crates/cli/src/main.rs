use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xite::eval::{best_m, label_projection_accuracy, m_sweep, reports_csv, System};
use xite::interpolate::{assemble_training_set, examples_to_dataset, AssembleOptions, MixMode};
use xite::lda::{
    best_axis_fisher, bilingual_matrix, corpus_languages, derive_basis_from_corpus, fisher_ratio, load_basis,
    persist_basis, LanguageBasis, DEFAULT_SHRINKAGE,
};
use xite::pipeline::{emit_projection_2d, load_experiment, run_pipeline, PipelineConfig};
use xite::similarity::{build_mapping, mapping_view, read_mapping, write_mapping, MappingMode, PairPolicy, DEFAULT_M};
use xite::store::{ingest_jsonl_with, load_store, make_splits, persist_store, Dataset, IngestOptions, Role, SplitSizes, SplitSpec};
use xite::synth::{bench_seeds, generate_experiment, generate_synthetic, run_benchmark, BenchConfig, SynthConfig};
use xite::trainer::{history_csv, labeled_vectors, load_checkpoint, persist_checkpoint, train, TrainConfig};
use xite::{Error, Result};

#[derive(Parser)]
#[command(name = "xite", version, about = "Cross-lingual embedding interpolation for classifier heads")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert a JSONL embedding file into the binary store.
    Ingest(IngestArgs),
    /// Seeded train/dev/test split of a store.
    Split(SplitArgs),
    /// Map targets to their top-m source neighbors.
    Map(MapArgs),
    /// Derive a language-separability basis from a bilingual corpus.
    Basis(BasisArgs),
    /// Per-axis Fisher ratios of a basis on held-out bilingual data.
    BasisStats(BasisStatsArgs),
    /// Build an interpolated training set from a mapping.
    Augment(AugmentArgs),
    /// Train a classifier head.
    Train(TrainArgs),
    /// Evaluate a model, a mapping, or a whole pipeline config.
    Eval(EvalArgs),
    /// Run systems over several m values and seeds.
    Sweep(SweepArgs),
    /// Generate a synthetic bilingual corpus.
    Synth(SynthArgs),
    /// Run the synthetic benchmark.
    Bench(BenchArgs),
    /// Export 2D principal-axis projections for plotting.
    Viz(VizArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Expected vector dimension.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, value_parser = parse_role)]
    role: Option<Role>,
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    train: usize,
    #[arg(long)]
    dev: usize,
    #[arg(long)]
    test: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    hide_train_labels: bool,
    /// Outputs go to `<prefix>.{train,dev,test}.xite`; defaults to the input
    /// path without its extension.
    #[arg(long)]
    out_prefix: Option<PathBuf>,
}

#[derive(Args)]
struct MapArgs {
    #[arg(long)]
    targets: PathBuf,
    #[arg(long)]
    source: PathBuf,
    /// Alternate embeddings (for both source and target ids) used only for
    /// retrieval.
    #[arg(long)]
    map_emb: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_M)]
    m: usize,
    #[arg(long, default_value = "similarity", value_parser = parse_from_str::<MappingMode>)]
    mode: MappingMode,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BasisArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 400)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_SHRINKAGE)]
    shrinkage: f64,
    /// Sentences per language.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    source_lang: Option<String>,
    #[arg(long)]
    target_lang: Option<String>,
    /// Experimental: derive all d axes and keep the last N, the least
    /// language-separable directions.
    #[arg(long, value_name = "N")]
    neutral: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BasisStatsArgs {
    #[arg(long)]
    basis: PathBuf,
    /// Held-out bilingual store.
    #[arg(long)]
    eval: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    targets: PathBuf,
    #[arg(long, value_parser = parse_from_str::<MixMode>)]
    mode: MixMode,
    #[arg(long)]
    basis: Option<PathBuf>,
    #[arg(long, default_value = "all_m", value_parser = parse_from_str::<PairPolicy>)]
    pairs: PairPolicy,
    /// Use the targets' gold labels (skyline).
    #[arg(long)]
    gold_labels: bool,
    #[arg(long)]
    renormalize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    trainset: PathBuf,
    /// Target-language dev split used for checkpoint selection.
    #[arg(long)]
    dev: PathBuf,
    /// JSON training config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run a full pipeline from this config instead.
    #[arg(long, conflicts_with_all = ["model", "mapping"])]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Labeled splits to score the model on.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Mapping whose projected labels are scored against `--gold`.
    #[arg(long, requires = "gold")]
    mapping: Option<PathBuf>,
    #[arg(long)]
    gold: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Pipeline config naming the datasets and base settings.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 3, 5, 7, 10, 15])]
    m: Vec<usize>,
    #[arg(long, default_value = "all")]
    systems: String,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_src: Option<PathBuf>,
    #[arg(long)]
    out_tgt: Option<PathBuf>,
    /// Also write pools and held-out splits (`source_train.xite`, ...) here.
    #[arg(long)]
    splits_dir: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Synthetic config, optionally with a `run` settings object.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    systems: String,
    /// Number of seeds.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long, default_value_t = 42)]
    seed_base: u64,
    #[arg(long, value_parser = parse_from_str::<MappingMode>)]
    mapping_mode: Option<MappingMode>,
    /// Per-run CSV report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Summary JSON.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    /// Bilingual store(s); records from all files are pooled.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    basis: Option<PathBuf>,
    /// Keep at most this many records per language, in file order.
    #[arg(long)]
    per_lang: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_role(s: &str) -> std::result::Result<Role, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown role `{s}` (source, target, basis-corpus, mapping-view)"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn ingest(a: IngestArgs) -> Result<()> {
    let ds = ingest_jsonl_with(
        &a.input,
        &IngestOptions {
            expected_d: a.d,
            classes: a.classes,
            role: a.role,
            name: a.name,
        },
    )?;
    persist_store(&ds, &a.out)?;
    eprintln!("{} records, d = {}, {} classes -> {}", ds.len(), ds.d, ds.classes, a.out.display());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let ds = load_store(&a.input)?;
    let spec = SplitSpec {
        sizes: SplitSizes::Counts {
            train: a.train,
            dev: a.dev,
            test: a.test,
        },
        seed: a.seed,
        hide_train_labels: a.hide_train_labels,
    };
    let (train, dev, test) = make_splits(&ds, &spec)?;
    let prefix = a.out_prefix.unwrap_or_else(|| a.input.with_extension(""));
    for (part, data) in [("train", &train), ("dev", &dev), ("test", &test)] {
        let mut p = prefix.clone().into_os_string();
        p.push(format!(".{part}.xite"));
        persist_store(data, &p)?;
        eprintln!("{part}: {} records -> {}", data.len(), PathBuf::from(p).display());
    }
    Ok(())
}

fn map(a: MapArgs) -> Result<()> {
    let mut targets = load_store(&a.targets)?;
    let mut source = load_store(&a.source)?;
    if let Some(p) = &a.map_emb {
        let view = load_store(p)?;
        targets = mapping_view(&targets, &view)?;
        source = mapping_view(&source, &view)?;
    }
    let table = build_mapping::<f64>(&targets, &source, a.m, a.mode, a.seed)?;
    write_mapping(&table, &a.out, None)?;
    eprintln!("{} targets mapped (m = {}) -> {}", table.entries.len(), a.m, a.out.display());
    Ok(())
}

fn basis(a: BasisArgs) -> Result<()> {
    let corpus = load_store(&a.corpus)?;
    let (s, t) = corpus_languages(&corpus, a.source_lang.as_deref(), a.target_lang.as_deref())?;
    let b: LanguageBasis<f64> = match a.neutral {
        Some(count) => {
            let full = derive_basis_from_corpus::<f64>(&corpus, &s, &t, corpus.d, a.shrinkage, a.n)?;
            if full.k() < corpus.d {
                eprintln!("warning: deflation stopped after {} of {} axes", full.k(), corpus.d);
            }
            full.trailing(count)?
        }
        None => derive_basis_from_corpus(&corpus, &s, &t, a.k, a.shrinkage, a.n)?,
    };
    persist_basis(&b, &a.out)?;
    eprintln!("{} axes ({s} vs {t}) -> {}", b.k(), a.out.display());
    Ok(())
}

fn basis_stats(a: BasisStatsArgs) -> Result<()> {
    let b: LanguageBasis<f64> = load_basis(&a.basis)?;
    let held = load_store(&a.eval)?;
    let (x, flags) = bilingual_matrix::<f64>(&held, &b.meta.source_lang, &b.meta.target_lang, None)?;
    let mut csv = String::from("axis,fisher\n");
    for i in 0..b.k() {
        csv.push_str(&format!("{},{}\n", i, fisher_ratio(&x, &flags, b.axis(i))?));
    }
    write_or_print(a.out.as_deref(), &csv)?;
    let axes: Vec<&[f64]> = b.axes().collect();
    eprintln!("best axis fisher: {}", best_axis_fisher(&x, &flags, &axes)?);
    Ok(())
}

fn augment(a: AugmentArgs) -> Result<()> {
    let table = read_mapping(&a.map)?;
    let source = load_store(&a.source)?;
    let targets = load_store(&a.targets)?;
    let b: Option<LanguageBasis<f64>> = a.basis.as_ref().map(load_basis).transpose()?;
    let examples = assemble_training_set(
        &table,
        &source,
        &targets,
        a.mode,
        b.as_ref(),
        a.pairs,
        AssembleOptions {
            gold_target_labels: a.gold_labels,
            renormalize: a.renormalize,
        },
    )?;
    let classes = source.classes.max(targets.classes);
    let name = format!("trainset-{}", a.mode.as_str());
    let ds = examples_to_dataset(&name, &examples, source.d, classes)?;
    persist_store(&ds, &a.out)?;
    eprintln!("{} examples -> {}", ds.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    let trainset = load_store(&a.trainset)?;
    let dev = load_store(&a.dev)?;
    let classes = trainset.classes.max(dev.classes);
    let (ckpt, history) = train(
        &labeled_vectors::<f64>(&trainset)?,
        &labeled_vectors::<f64>(&dev)?,
        classes,
        &cfg,
    )?;
    persist_checkpoint(&ckpt, &a.out, None)?;
    if let Some(h) = &a.history {
        fs::write(h, history_csv(&history))?;
    }
    eprintln!(
        "selected epoch {} ({} = {:.4}) -> {}",
        ckpt.epoch,
        ckpt.provenance,
        ckpt.dev_accuracy,
        a.out.display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    if let Some(p) = &a.config {
        let cfg = PipelineConfig::from_file(p).map_err(|e| e.in_stage("config"))?;
        let outcome = run_pipeline(&cfg)?;
        print!("{}", reports_csv(&[outcome.report]));
        return Ok(());
    }
    if a.model.is_none() && a.mapping.is_none() {
        return Err(Error::Invalid("give --config, --model with --data, or --mapping with --gold".into()));
    }
    if let Some(m) = &a.model {
        if a.data.is_empty() {
            return Err(Error::Invalid("--model needs at least one --data split".into()));
        }
        let ckpt = load_checkpoint::<f64>(m)?;
        println!("split,accuracy");
        for p in &a.data {
            let ds = load_store(p)?;
            println!("{},{}", p.display(), xite::eval::accuracy(&ckpt.model, &ds)?);
        }
    }
    if let (Some(m), Some(g)) = (&a.mapping, &a.gold) {
        let acc = label_projection_accuracy(&read_mapping(m)?, &load_store(g)?)?;
        println!("proj_top1,proj_allm,proj_anym");
        println!("{},{},{}", acc.top1, acc.all_m, acc.any_of_m);
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = PipelineConfig::from_file(&a.config)?;
    cfg.validate()?;
    let exp = load_experiment(&cfg)?;
    let systems = System::parse_list(&a.systems)?;
    let seeds = if a.seeds.is_empty() {
        vec![cfg.settings.seed]
    } else {
        a.seeds.clone()
    };
    let reports = m_sweep(&exp, &a.m, &systems, &seeds, &cfg.settings)?;
    write_or_print(a.out.as_deref(), &reports_csv(&reports))?;
    for s in systems {
        if let Some((m, acc)) = best_m(&reports, s) {
            eprintln!("{s}: best m = {m} (mean target test {acc:.4})");
        }
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg: SynthConfig = match &a.config {
        Some(p) => read_json::<BenchConfig>(p)?.synth,
        None => SynthConfig::default(),
    };
    if a.out_src.is_none() && a.out_tgt.is_none() && a.splits_dir.is_none() {
        return Err(Error::Invalid("nothing to write: give --out-src/--out-tgt or --splits-dir".into()));
    }
    let (src, tgt) = generate_synthetic(&cfg)?;
    if let Some(p) = &a.out_src {
        persist_store(&src, p)?;
    }
    if let Some(p) = &a.out_tgt {
        persist_store(&tgt, p)?;
    }
    if let Some(dir) = &a.splits_dir {
        fs::create_dir_all(dir)?;
        let exp = generate_experiment(&cfg)?;
        let parts: [(&str, &Dataset); 6] = [
            ("source_train", &exp.source_train),
            ("source_dev", &exp.source_dev),
            ("source_test", &exp.source_test),
            ("target_train", &exp.target_train),
            ("target_dev", &exp.target_dev),
            ("target_test", &exp.target_test),
        ];
        for (name, ds) in parts {
            persist_store(ds, dir.join(format!("{name}.xite")))?;
        }
    }
    eprintln!("{} source and {} target records", src.len(), tgt.len());
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut cfg: BenchConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => BenchConfig::default(),
    };
    if let Some(mode) = a.mapping_mode {
        cfg.run.mapping_mode = mode;
    }
    let systems = System::parse_list(&a.systems)?;
    if a.seeds == 0 {
        return Err(Error::Invalid("--seeds must be positive".into()));
    }
    let report = run_benchmark(&cfg, &systems, &bench_seeds(a.seed_base, a.seeds))?;
    if let Some(p) = &a.out {
        fs::write(p, reports_csv(&report.rows))?;
    }
    if let Some(p) = &a.summary {
        fs::write(p, serde_json::to_vec_pretty(&report.summary)?)?;
    }
    println!("system,runs,target_test_mean,target_test_std,source_test_mean,source_test_std,proj_allm_mean");
    for s in &report.summary {
        println!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{}",
            s.system,
            s.runs,
            s.target_test_mean,
            s.target_test_std,
            s.source_test_mean,
            s.source_test_std,
            s.proj_allm_mean.map(|v| format!("{v:.4}")).unwrap_or_default()
        );
    }
    Ok(())
}

fn viz(a: VizArgs) -> Result<()> {
    let mut sets = a.data.iter().map(load_store).collect::<Result<Vec<Dataset>>>()?;
    if let Some(cap) = a.per_lang {
        for ds in &mut sets {
            let mut seen: Vec<(String, usize)> = Vec::new();
            ds.records.retain(|r| {
                let slot = match seen.iter_mut().find(|(l, _)| *l == r.lang) {
                    Some(s) => s,
                    None => {
                        seen.push((r.lang.clone(), 0));
                        seen.last_mut().expect("just pushed")
                    }
                };
                slot.1 += 1;
                slot.1 <= cap
            });
        }
    }
    let b: Option<LanguageBasis<f64>> = a.basis.as_ref().map(load_basis).transpose()?;
    let refs: Vec<&Dataset> = sets.iter().collect();
    let summaries = emit_projection_2d(&refs, b.as_ref(), &a.out)?;
    println!("view,fisher");
    for s in summaries {
        println!("{},{}", s.view, s.fisher);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Ingest(a) => ingest(a),
        Cmd::Split(a) => split(a),
        Cmd::Map(a) => map(a),
        Cmd::Basis(a) => basis(a),
        Cmd::BasisStats(a) => basis_stats(a),
        Cmd::Augment(a) => augment(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Synth(a) => synth(a),
        Cmd::Bench(a) => bench(a),
        Cmd::Viz(a) => viz(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
