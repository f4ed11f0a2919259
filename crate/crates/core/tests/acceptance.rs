//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Exits non-zero on any failure only when `XITE_ACCEPTANCE_STRICT=1`, so
//! the workspace test run reports results without aborting. Set
//! `XITE_BILINGUAL_FILE` to a bilingual `.xite` or `.jsonl` file to include
//! it in the separability check.

mod common;

use std::time::Instant;

use common::*;
use rand::Rng;
use xite::digest::digest_json;
use xite::eval::{RunSettings, System};
use xite::interpolate::{assemble_training_set, mix_reg_lda, mix_reg_reg, AssembleOptions};
use xite::lda::{best_axis_fisher, corpus_languages, derive_basis, derive_basis_from_corpus, fisher_ratio, LanguageBasis};
use xite::linalg::Matrix;
use xite::pipeline::{emit_projection_2d, ratios_path, run_pipeline, DataPaths, PipelineConfig};
use xite::similarity::{build_mapping, Index, MappingMode, PairPolicy};
use xite::store::{ingest_jsonl, load_store, persist_store, Dataset, Role};
use xite::synth::{
    analytic_language_axis, bench_seeds, generate_experiment, generate_synthetic, run_benchmark, BenchConfig,
    BenchReport, SynthConfig,
};
use xite::trainer::{accuracy_on, encode_checkpoint, loss_and_grad, train, HeadModel, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let strict = std::env::var("XITE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let start = Instant::now();
    let bench = BenchConfig::default();
    let seeds = bench_seeds(42, 5);
    let mut similarity: Option<BenchReport> = None;

    let mut results = Vec::new();
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let line = format!(
            "criterion {n} {name}: {} ({:.1}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
        println!("{line}");
        results.push(o.pass);
    };

    run(1, "basis correctness", &mut basis_correctness);
    run(2, "retrieval exactness", &mut retrieval_exactness);
    run(3, "trainer correctness", &mut trainer_correctness);
    run(4, "interpolation identities", &mut interpolation_identities);
    run(5, "synthetic ordering", &mut || {
        let report = run_benchmark(&bench, &System::MAIN, &seeds).expect("benchmark");
        let o = ordering(&report);
        similarity = Some(report);
        o
    });
    let similarity = similarity.expect("criterion 5 ran");
    run(6, "random-mapping ablation", &mut || random_mapping(&bench, &seeds, &similarity));
    run(7, "forgetting direction", &mut || forgetting(&similarity));
    run(8, "separability amplification", &mut separability);
    run(9, "pipeline reproducibility", &mut || reproducibility(&bench, &seeds, &similarity));

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} passed in {:.1}s", results.len(), start.elapsed().as_secs_f64());
    if strict && passed != results.len() {
        std::process::exit(1);
    }
}

fn mean_target(report: &BenchReport, system: System) -> f64 {
    report.summary_for(system).expect("system summary").target_test_mean
}

fn mean_source(report: &BenchReport, system: System) -> f64 {
    report.summary_for(system).expect("system summary").source_test_mean
}

/// Bilingual sample with a random offset and random per-coordinate scales.
fn random_bilingual(r: &mut rand_chacha::ChaCha8Rng) -> (Matrix<f64>, Vec<bool>, usize) {
    let d = r.random_range(2..=24);
    let n = r.random_range(5..=60);
    let shift = r.random_range(0.05..5.0);
    let scales: Vec<f64> = (0..d).map(|_| r.random_range(0.1..3.0)).collect();
    let offset = gaussian(r, d);
    let mut rows = Vec::with_capacity(2 * n);
    let mut flags = Vec::with_capacity(2 * n);
    for i in 0..2 * n {
        let t = i >= n;
        let mut x: Vec<f64> = gaussian(r, d).iter().zip(&scales).map(|(e, s)| e * s).collect();
        if t {
            x.iter_mut().zip(&offset).for_each(|(a, o)| *a += shift * o);
        }
        rows.push(x);
        flags.push(t);
    }
    let k = r.random_range(1..=d);
    (Matrix::from_rows(&rows).unwrap(), flags, k)
}

fn basis_correctness() -> Outcome {
    let mut r = rng(1001);
    let (mut ortho, mut idem, mut kill) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let (x, flags, k) = random_bilingual(&mut r);
        let b = derive_basis(&x, &flags, k, 1e-4).unwrap();
        let v = b.matrix();
        ortho = ortho.max(v.transpose().matmul(&v).unwrap().max_abs_diff(&Matrix::identity(b.k())));
        let p = b.projector();
        idem = idem.max(p.matmul(&p).unwrap().max_abs_diff(&p));
        // Removing the first i+1 axes leaves no separation along axis i.
        let mut deflated = x.clone();
        for axis in b.axes() {
            for row in 0..deflated.rows() {
                let c = dot(deflated.row(row), axis);
                deflated.row_mut(row).iter_mut().zip(axis).for_each(|(a, u)| *a -= c * u);
            }
            kill = kill.max(fisher_ratio(&deflated, &flags, axis).unwrap());
        }
    }

    // Subspace recovery at σ = 0.1γ for every offset rank the benchmark uses.
    let mut worst_angle = 0.0f64;
    let mut monotone = true;
    let mut angles = Vec::new();
    for rank in 1..=4 {
        let cfg = SynthConfig {
            d: 8,
            rank,
            gamma: 3.0,
            sigma: 0.3,
            offset_jitter: 0.15,
            n_src: 3_000_000,
            n_tgt: 3_000_000,
            seed: 500 + rank as u64,
            ..Default::default()
        };
        let (s, t) = generate_synthetic(&cfg).unwrap();
        let flags: Vec<bool> = (0..s.len() + t.len()).map(|i| i >= s.len()).collect();
        let flat: Vec<f64> = s.records.iter().chain(&t.records).flat_map(|r| r.vec.iter().map(|&v| v as f64)).collect();
        drop((s, t));
        let x = Matrix::from_vec(flags.len(), cfg.d, flat).unwrap();
        let b = derive_basis(&x, &flags, rank, 1e-4).unwrap();
        let u = analytic_language_axis(&cfg).unwrap();
        let truth: Vec<Vec<f64>> = (0..rank).map(|j| u.column(j)).collect();
        let found: Vec<Vec<f64>> = b.axes().map(|a| a.to_vec()).collect();
        let angle = max_principal_angle_deg(&truth, &found);
        angles.push(format!("r{rank}={angle:.2}"));
        worst_angle = worst_angle.max(angle);
        monotone &= b.meta.axis_fisher.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9));
    }
    let pass = ortho <= 1e-5 && idem <= 1e-6 && kill <= 1e-6 && worst_angle <= 5.0 && monotone;
    outcome(
        pass,
        format!(
            "orthonormality {ortho:.1e}, idempotence {idem:.1e}, deflation {kill:.1e}, angles deg [{}], fisher non-increasing {monotone}",
            angles.join(" ")
        ),
    )
}

fn retrieval_exactness() -> Outcome {
    let mut r = rng(2002);
    let grid = [1usize, 3, 5, 7, 10, 15];
    let mut mismatches = 0;
    let mut checks = 0;
    for corpus in 0..100 {
        let n = r.random_range(15..=1000);
        let d = r.random_range(1..=128);
        let source = labeled("src", &format!("c{corpus}-"), n, d, 3, &mut r);
        let index = Index::<f64>::build(&source).unwrap();
        for _ in 0..3 {
            let q = gaussian_f32(&mut r, d);
            let q64: Vec<f64> = q.iter().map(|&v| v as f64).collect();
            for &m in &grid {
                checks += 1;
                let got: Vec<String> = index.retrieve_top_m(&q64, m).unwrap().into_iter().map(|nb| nb.source_id).collect();
                let want: Vec<String> = brute_force_top_m(&q, &source, m).into_iter().map(|(id, _)| id).collect();
                if got != want {
                    mismatches += 1;
                }
            }
        }
    }
    outcome(mismatches == 0, format!("{checks} queries over 100 corpora, {mismatches} mismatches"))
}

fn trainer_correctness() -> Outcome {
    let (d, classes, h) = (6, 3, 1e-5);
    let mut r = rng(3003);
    let mut worst_fd = 0.0f64;
    for draw in 0..100u64 {
        let data: Vec<(Vec<f64>, u32)> = (0..8).map(|_| (gaussian(&mut r, d), r.random_range(0..classes as u32))).collect();
        let batch: Vec<(&[f64], u32)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        let mut model = HeadModel::<f64>::init(classes, d, draw);
        let (_, grad) = loss_and_grad(&model, &batch).unwrap();
        let loss = |m: &HeadModel<f64>| loss_and_grad(m, &batch).unwrap().0;
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for c in 0..classes {
            for j in 0..=d {
                let read = |m: &HeadModel<f64>| if j < d { m.weights[(c, j)] } else { m.bias[c] };
                let write = |m: &mut HeadModel<f64>, v: f64| if j < d { m.weights.row_mut(c)[j] = v } else { m.bias[c] = v };
                let w0 = read(&model);
                write(&mut model, w0 + h);
                let up = loss(&model);
                write(&mut model, w0 - h);
                let down = loss(&model);
                write(&mut model, w0);
                analytic.push(if j < d { grad.weights[(c, j)] } else { grad.bias[c] });
                numeric.push((up - down) / (2.0 * h));
            }
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = dot(&analytic, &analytic).sqrt().max(dot(&numeric, &numeric).sqrt()).max(1e-12);
        worst_fd = worst_fd.max(diff / scale);
    }

    let data: Vec<(Vec<f64>, u32)> = (0..60).map(|_| (gaussian(&mut r, 5), r.random_range(0..4u32))).collect();
    let batch: Vec<(&[f64], u32)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let uniform = loss_and_grad(&HeadModel::<f64>::zeros(4, 5), &batch).unwrap().0;
    let ln_err = (uniform - 4f64.ln()).abs();

    let centers: Vec<Vec<f64>> = (0..4).map(|_| gaussian(&mut r, 10).iter().map(|c| 6.0 * c).collect()).collect();
    let blobs: Vec<(Vec<f64>, u32)> = (0..800)
        .map(|i| {
            let c = i % 4;
            (gaussian(&mut r, 10).iter().zip(&centers[c]).map(|(e, m)| m + 0.3 * e).collect(), c as u32)
        })
        .collect();
    let cfg = TrainConfig::default();
    let (a, ha) = train(&blobs, &blobs[..200], 4, &cfg).unwrap();
    let (b, hb) = train(&blobs, &blobs[..200], 4, &cfg).unwrap();
    let fit = accuracy_on(&a.model, &blobs).unwrap();
    let bitwise = encode_checkpoint(&a, None).unwrap() == encode_checkpoint(&b, None).unwrap() && ha == hb;

    let pass = worst_fd <= 1e-4 && ln_err <= 1e-9 && fit >= 0.99 && bitwise;
    outcome(
        pass,
        format!("fd rel err {worst_fd:.1e}, |loss - ln C| {ln_err:.1e}, blob fit {fit:.3}, bitwise deterministic {bitwise}"),
    )
}

fn interpolation_identities() -> Outcome {
    let mut r = rng(4004);
    let (mut full, mut null) = (0.0f64, 0.0f64);
    for case in 0..100u64 {
        let d = r.random_range(2..=64);
        let (s, t) = (gaussian(&mut r, d), gaussian(&mut r, d));
        let frame = random_frame(case, d, d);
        let basis = LanguageBasis::from_axes(Matrix::from_rows(&frame).unwrap(), meta(d));
        let lda = mix_reg_lda(&s, &t, &basis).unwrap();
        let reg = mix_reg_reg(&s, &t).unwrap();
        full = full.max(lda.iter().zip(&reg).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max));

        // A derived basis of lower rank, and a target in its null space.
        let n = 20 * d;
        let rows: Vec<Vec<f64>> = (0..2 * n).map(|_| gaussian(&mut r, d)).collect();
        let mut x = Matrix::from_rows(&rows).unwrap();
        let flags: Vec<bool> = (0..2 * n).map(|i| i >= n).collect();
        let offset = gaussian(&mut r, d);
        for i in n..2 * n {
            x.row_mut(i).iter_mut().zip(&offset).for_each(|(a, o)| *a += o);
        }
        let k = r.random_range(1..d);
        let part = derive_basis(&x, &flags, k, 1e-4).unwrap();
        let mut tn = gaussian(&mut r, d);
        for axis in part.axes() {
            let c = dot(&tn, axis);
            tn.iter_mut().zip(axis).for_each(|(a, u)| *a -= c * u);
        }
        let out = mix_reg_lda(&s, &tn, &part).unwrap();
        null = null.max(out.iter().zip(&s).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max));
    }

    // Every assembled training set joins back to its mapping pairs.
    let exp = generate_experiment(&SynthConfig { n_src: 600, n_tgt: 200, n_eval: 50, ..Default::default() }).unwrap();
    let basis = exp.basis(&BenchConfig::default().run.basis).unwrap();
    let mut join_failures = 0;
    let mut sets = 0;
    for mode in [MappingMode::Similarity, MappingMode::Random] {
        let table = build_mapping::<f64>(&exp.target_train, &exp.source_train, 5, mode, 7).unwrap();
        for system in [System::Skyline, System::BaselinePs, System::XiteRegReg, System::XiteRegLda, System::SourceOnly] {
            for policy in [PairPolicy::Top1, PairPolicy::AllM] {
                sets += 1;
                let opts = AssembleOptions { gold_target_labels: system == System::Skyline, renormalize: false };
                let examples = assemble_training_set(&table, &exp.source_train, &exp.target_train, system.mix_mode(), Some(&basis), policy, opts).unwrap();
                let ok = examples.iter().all(|e| {
                    let Some(entry) = table.entries.iter().find(|x| x.target_id == e.target_id) else { return false };
                    let Some(nb) = entry.neighbors.iter().find(|n| n.source_id == e.source_id) else { return false };
                    let want = if system == System::Skyline {
                        exp.target_train.get(&e.target_id).and_then(|t| t.label)
                    } else {
                        exp.source_train.get(&nb.source_id).and_then(|s| s.label)
                    };
                    want == Some(e.label)
                });
                if !ok {
                    join_failures += 1;
                }
            }
        }
    }
    let pass = full <= 1e-4 && null <= 1e-6 && join_failures == 0;
    outcome(
        pass,
        format!("k=d max diff {full:.1e}, null-space max diff {null:.1e}, provenance join failures {join_failures}/{sets}"),
    )
}

fn meta(k: usize) -> xite::lda::BasisMeta {
    xite::lda::BasisMeta {
        source_lang: "en".into(),
        target_lang: "xx".into(),
        n_used: 0,
        shrinkage: 0.0,
        requested_k: k,
        axis_fisher: vec![0.0; k],
        centering: "none".into(),
        config_digest: None,
    }
}

fn ordering(report: &BenchReport) -> Outcome {
    let [sky, ps, rr, rl] = System::MAIN.map(|s| mean_target(report, s));
    let gap = rr - ps;
    let pass = rl >= rr && rr > ps && gap >= 0.03 && sky >= ps.max(rr).max(rl);
    outcome(
        pass,
        format!("target test: skyline {sky:.4}, baseline-ps {ps:.4}, reg-reg {rr:.4}, reg-lda {rl:.4}, reg-reg gap {:.2} pts (need >= 3)", 100.0 * gap),
    )
}

fn random_mapping(bench: &BenchConfig, seeds: &[u64], similarity: &BenchReport) -> Outcome {
    let mut cfg = bench.clone();
    cfg.run.mapping_mode = MappingMode::Random;
    let random = run_benchmark(&cfg, &[System::BaselinePs, System::XiteRegReg], seeds).unwrap();
    let drops = |system: System| {
        seeds
            .iter()
            .filter(|&&seed| {
                let pick = |rep: &BenchReport| rep.rows_for(system).find(|r| r.seed == seed).unwrap().target_test;
                pick(&random) < pick(similarity)
            })
            .count()
    };
    let (ps, rr) = (drops(System::BaselinePs), drops(System::XiteRegReg));
    let proj: Vec<f64> = random.rows_for(System::BaselinePs).filter_map(|r| r.proj_allm).collect();
    let chance = 1.0 / bench.synth.classes as f64;
    let in_band = proj.iter().all(|p| (p - chance).abs() <= 0.06);
    let pass = ps >= 4 && rr >= 4 && in_band;
    outcome(
        pass,
        format!(
            "seeds with a drop: baseline-ps {ps}/5 ({:.4} -> {:.4}), reg-reg {rr}/5 ({:.4} -> {:.4}); projection accuracy {:?} vs 1/C = {chance:.3}",
            mean_target(similarity, System::BaselinePs),
            mean_target(&random, System::BaselinePs),
            mean_target(similarity, System::XiteRegReg),
            mean_target(&random, System::XiteRegReg),
            proj.iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

fn forgetting(report: &BenchReport) -> Outcome {
    let ps = mean_source(report, System::BaselinePs);
    let rr = mean_source(report, System::XiteRegReg);
    let rl = mean_source(report, System::XiteRegLda);
    let pass = rr - ps >= 0.02 && rl - ps >= 0.02;
    outcome(
        pass,
        format!(
            "source test: baseline-ps {ps:.4}, reg-reg {rr:.4} ({:+.2} pts), reg-lda {rl:.4} ({:+.2} pts), need >= +2",
            100.0 * (rr - ps),
            100.0 * (rl - ps)
        ),
    )
}

/// Best basis axis on held-out projected data against the best raw
/// coordinate axis.
fn amplification(held: &Dataset, basis: &LanguageBasis<f64>, src: &str, tgt: &str) -> (f64, f64) {
    let (x, flags) = xite::lda::bilingual_matrix::<f64>(held, src, tgt, None).unwrap();
    let projected = Matrix::from_rows(&(0..x.rows()).map(|i| basis.project(x.row(i)).unwrap()).collect::<Vec<_>>()).unwrap();
    let axes: Vec<&[f64]> = basis.axes().collect();
    let basis_best = best_axis_fisher(&projected, &flags, &axes).unwrap();
    let coords: Vec<Vec<f64>> = (0..x.cols()).map(|j| (0..x.cols()).map(|i| (i == j) as u8 as f64).collect()).collect();
    let raw_best = best_axis_fisher(&x, &flags, &coords).unwrap();
    (basis_best, raw_best)
}

fn split_halves(ds: &Dataset) -> (Dataset, Dataset) {
    let even: Vec<usize> = (0..ds.len()).step_by(2).collect();
    let odd: Vec<usize> = (1..ds.len()).step_by(2).collect();
    (ds.subset("fit", &even), ds.subset("held", &odd))
}

fn separability() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    let settings = BenchConfig::default().run.basis;
    for seed in 42..47u64 {
        let exp = generate_experiment(&SynthConfig { seed, ..Default::default() }).unwrap();
        let basis = exp.basis(&settings).unwrap();
        let held = Dataset::concat("held", Role::BasisCorpus, &[&exp.source_dev.clone().without_labels(), &exp.target_dev.clone().without_labels()]).unwrap();
        let (b, r) = amplification(&held, &basis, "en", "xx");
        pass &= b >= r;
        details.push(format!("{b:.2}/{r:.2}"));
    }
    let mut detail = format!("synthetic basis/raw fisher [{}]", details.join(" "));

    // The viz export writes both views and their ratios.
    let dir = tempfile::tempdir().unwrap();
    let exp = generate_experiment(&SynthConfig { n_eval: 100, ..Default::default() }).unwrap();
    let basis = exp.basis(&settings).unwrap();
    let out = dir.path().join("viz.csv");
    let views = emit_projection_2d(&[&exp.source_dev, &exp.target_dev], Some(&basis), &out).unwrap();
    let rows = std::fs::read_to_string(&out).unwrap().lines().count() - 1;
    let ratio_lines = std::fs::read_to_string(ratios_path(&out)).unwrap().lines().count() - 1;
    let viz_ok = views.len() == 2 && rows == 400 && ratio_lines == 2 && views[1].fisher >= views[0].fisher;
    pass &= viz_ok;
    detail.push_str(&format!("; viz views {} rows {rows} ratios {ratio_lines} ok {viz_ok}", views.len()));

    match std::env::var("XITE_BILINGUAL_FILE") {
        Ok(path) => {
            let loaded = if path.ends_with(".jsonl") { ingest_jsonl(&path, None) } else { load_store(&path) };
            match loaded.and_then(|ds| corpus_languages(&ds, None, None).map(|l| (ds, l))) {
                Ok((ds, (src, tgt))) => {
                    let (fit, held) = split_halves(&ds);
                    let k = settings.k.min(ds.d);
                    match derive_basis_from_corpus::<f64>(&fit, &src, &tgt, k, settings.shrinkage, None) {
                        Ok(basis) => {
                            let (b, r) = amplification(&held, &basis, &src, &tgt);
                            pass &= b >= r;
                            detail.push_str(&format!("; {path}: basis {b:.3} raw {r:.3}"));
                        }
                        Err(e) => {
                            pass = false;
                            detail.push_str(&format!("; {path}: {e}"));
                        }
                    }
                }
                Err(e) => {
                    pass = false;
                    detail.push_str(&format!("; {path}: {e}"));
                }
            }
        }
        Err(_) => detail.push_str("; no user file (set XITE_BILINGUAL_FILE)"),
    }
    outcome(pass, detail)
}

fn reproducibility(bench: &BenchConfig, seeds: &[u64], first: &BenchReport) -> Outcome {
    let second = run_benchmark(bench, &System::MAIN, seeds).unwrap();
    let (a, b) = (digest_json(&first.rows).unwrap(), digest_json(&second.rows).unwrap());

    // The same holds for file-based pipeline runs into separate directories.
    let dir = tempfile::tempdir().unwrap();
    let exp = generate_experiment(&SynthConfig { seed: seeds[0], ..bench.synth.clone() }).unwrap();
    let put = |name: &str, ds: &Dataset| {
        let p = dir.path().join(format!("{name}.xite"));
        persist_store(ds, &p).unwrap();
        p
    };
    let data = DataPaths {
        source_train: put("source_train", &exp.source_train),
        source_dev: put("source_dev", &exp.source_dev),
        source_test: put("source_test", &exp.source_test),
        target_train: put("target_train", &exp.target_train),
        target_dev: put("target_dev", &exp.target_dev),
        target_test: put("target_test", &exp.target_test),
        map_source: None,
        map_target: None,
    };
    let mut cfg = PipelineConfig {
        data,
        system: System::XiteRegLda,
        basis: None,
        derive_basis: true,
        mapping: None,
        settings: RunSettings { seed: seeds[0], ..bench.run.clone() },
        out_dir: dir.path().join("run1"),
    };
    let m1 = run_pipeline(&cfg).unwrap().manifest;
    cfg.out_dir = dir.path().join("run2");
    let m2 = run_pipeline(&cfg).unwrap().manifest;
    let pipeline_same = m1.outputs == m2.outputs && m1.config_digest == m2.config_digest;
    outcome(
        a == b && pipeline_same,
        format!("benchmark digests {}..{} vs {}..{}, pipeline outputs identical {pipeline_same}", &a[..12], &a[a.len() - 4..], &b[..12], &b[b.len() - 4..]),
    )
}
