// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use featrace_core::annotate::{self, AnnotationRequest, EndpointConfig};
use featrace_core::attribution::{self, AblationMode, MetricHead, Variant};
use featrace_core::crosscoder::{forward, load_checkpoint, EvalAccumulator};
use featrace_core::evolution::{self, NormMode, ProjectionMode};
use featrace_core::ngram::{self, NgramReport};
use featrace_core::probe::{self, ProbeConfig};
use featrace_core::report::{self, RunMetadata, Table};
use featrace_core::rules::{self, TopActivationIndex, Vocabulary};
use featrace_core::store::read_activation_batches;
use featrace_core::synth::{self, GroundTruth, SynthConfig, TaskConfig};
use featrace_core::train::{TrainConfig, Trainer};
use featrace_core::{CrosscoderModel, Error, Result, SnapshotManifest};
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::{
    AnnotateArgs, AttrArgs, Command, DimsArgs, EvalArgs, EvolveArgs, NgramArgs, ProbeArgs, ReportArgs, RulesArgs,
    SynthArgs, TrainArgs,
};

const METADATA_FILE: &str = "metadata.json";

pub fn run(command: Command, args: Vec<String>) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, args),
        Command::Train(a) => train(a, args),
        Command::Eval(a) => eval(a, args),
        Command::Evolve(a) => evolve(a, args),
        Command::Dims(a) => dims(a, args),
        Command::Attr(a) => attr(a, args),
        Command::Probe(a) => probe(a, args),
        Command::Ngram(a) => ngram(a, args),
        Command::Rules(a) => rules(a, args),
        Command::Annotate(a) => annotate(a, args),
        Command::Report(a) => report(a, args),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Directory holding a file output, created if needed.
fn parent_dir(file: &Path) -> Result<PathBuf> {
    let dir = match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    create_dir(&dir)?;
    Ok(dir)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn load_manifest(path: &Path) -> Result<SnapshotManifest> {
    let m = SnapshotManifest::load(path)?;
    m.validate_static()?;
    Ok(m)
}

/// Record the manifest and every shard it lists.
fn add_manifest_inputs(meta: &mut RunMetadata, path: &Path, m: &SnapshotManifest) -> Result<()> {
    meta.add_input(path)?;
    for t in 0..m.n_snapshots() {
        for p in m.activation_paths(t) {
            meta.add_input(p)?;
        }
    }
    for p in m.token_paths() {
        meta.add_input(p)?;
    }
    Ok(())
}

fn check_compatible(model: &CrosscoderModel<f32>, m: &SnapshotManifest) -> Result<()> {
    if model.n_snapshots() != m.n_snapshots() || model.d_model() != m.d_model {
        return Err(Error::Shape(format!(
            "checkpoint has {} snapshots of width {}, manifest has {} of width {}",
            model.n_snapshots(),
            model.d_model(),
            m.n_snapshots(),
            m.d_model
        )));
    }
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn write_charts(name: &str, table: &Table, table_path: &Path, out: &Path) -> Result<()> {
    let charts = out.join("charts");
    for (file, chart) in report::chart_for(name, table, table_path)? {
        create_dir(&charts)?;
        let p = charts.join(file);
        fs::write(&p, chart.render_svg()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn synth(a: SynthArgs, args: Vec<String>) -> Result<()> {
    let mut meta = RunMetadata::new("synth", args);
    let cfg: SynthConfig = match (&a.config, a.dense_to_sparse) {
        (Some(p), _) => {
            meta.add_input(p)?;
            read_json(p)?
        }
        (None, true) => SynthConfig::dense_to_sparse(),
        (None, false) => SynthConfig::default(),
    };
    let task_cfg: Option<TaskConfig> = match (&a.task_config, a.no_task) {
        (Some(p), _) => {
            meta.add_input(p)?;
            Some(read_json(p)?)
        }
        (None, true) => None,
        (None, false) => Some(TaskConfig::default()),
    };
    create_dir(&a.out)?;
    let out = synth::generate_snapshots(&cfg, a.seed, &a.out)?;
    println!("wrote {}", out.manifest_path.display());
    if let Some(task) = &task_cfg {
        let t = synth::generate_task(&cfg, &out.ground_truth, task, a.seed, a.out.join("task"))?;
        println!("wrote task {} (causal features {:?})", t.task_path.display(), t.truth.causal);
    }
    meta.seed = Some(a.seed);
    meta.config = json!({"synth": cfg, "task": task_cfg});
    meta.save(a.out.join(METADATA_FILE))
}

fn train(a: TrainArgs, args: Vec<String>) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let mut meta = RunMetadata::new("train", args);
    add_manifest_inputs(&mut meta, &a.manifest, &manifest)?;
    create_dir(&a.out)?;
    let trainer = if a.resume {
        meta.add_input(a.out.join(featrace_core::train::CHECKPOINT_FILE))?;
        Trainer::resume(&manifest, &a.out)?
    } else {
        let mut cfg: TrainConfig = match &a.config {
            Some(p) => {
                meta.add_input(p)?;
                read_json(p)?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = a.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = a.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = a.lambda {
            cfg.lambda_sparsity = v;
        }
        if let Some(v) = a.omega0 {
            cfg.omega0 = v;
        }
        if let Some(v) = a.tokens {
            cfg.total_tokens = v;
        }
        if let Some(v) = a.workers {
            cfg.n_workers = v;
        }
        if let Some(v) = a.seed {
            cfg.seed = v;
        }
        if let Some(v) = a.eval_interval {
            cfg.eval_interval = v;
        }
        if let Some(v) = a.checkpoint_interval {
            cfg.checkpoint_interval = v;
        }
        let n = a
            .features
            .ok_or_else(|| Error::InvalidInput("--features is required unless --resume is given".into()))?;
        Trainer::new(&manifest, cfg, n)?
    };
    meta.seed = Some(trainer.config().seed);
    meta.config = json!({"train": trainer.config(), "n_features": trainer.model().n_features()});
    let report = trainer.run(&a.out)?;

    let window = (report.losses.len() / 50).clamp(1, 100);
    let mut t = Table::new(["step", "smoothed_loss"]);
    for (i, v) in report.smoothed_loss(window).iter().enumerate() {
        t.push([(i + window).to_string(), fmt(*v)]);
    }
    let p = a.out.join(report::TRAINING_TABLE);
    report::write_csv(&p, &t)?;
    write_charts(report::TRAINING_TABLE, &t, &p, &a.out)?;
    if let Some(e) = report.last_evaluation() {
        println!("step {}: explained variance {:?}, L0 {:?}", e.step, e.explained_variance, e.l0);
    }
    meta.save(a.out.join(METADATA_FILE))
}

fn eval(a: EvalArgs, args: Vec<String>) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    check_compatible(&model, &manifest)?;
    let mut meta = RunMetadata::new("eval", args);
    meta.add_input(&a.checkpoint)?;
    add_manifest_inputs(&mut meta, &a.manifest, &manifest)?;
    create_dir(&a.out)?;

    let all: Vec<usize> = (0..manifest.n_snapshots()).collect();
    let stream = read_activation_batches(&manifest, &all, 4096)?;
    let total = a.rows.map_or(stream.total_rows(), |r| (r as u64).min(stream.total_rows()));
    let mut acc = EvalAccumulator::new(model.n_snapshots(), model.d_model());
    let mut start = 0;
    while start < total {
        let count = (total - start).min(4096) as usize;
        let batch = stream.read_range(start, count)?;
        let views = batch.views();
        acc.add(&forward(&model, &views)?, &views);
        start += count as u64;
    }
    let summary = acc.finish()?;
    let mut t = Table::new(["snapshot", "step", "explained_variance", "l0"]);
    for (k, step) in model.steps.iter().enumerate() {
        t.push([k.to_string(), step.to_string(), fmt(summary.explained_variance[k]), fmt(summary.l0[k])]);
    }
    report::write_csv(a.out.join("eval.csv"), &t)?;
    let mut out = json!({"evaluation": summary});

    if let Some(gt_path) = &a.ground_truth {
        meta.add_input(gt_path)?;
        let gt = GroundTruth::load(gt_path)?;
        let m = synth::match_features(&model, &gt)?;
        let mut t = Table::new(["true_feature", "feature", "peak_snapshot", "cosine", "pearson"]);
        for x in &m.matches {
            t.push([
                x.true_feature.to_string(),
                x.feature.to_string(),
                x.peak_snapshot.to_string(),
                fmt(x.cosine),
                opt(x.pearson),
            ]);
        }
        report::write_csv(a.out.join("matches.csv"), &t)?;
        out["recovery"] = json!({
            "fraction_matched_cos_0.8": m.fraction_matched(0.8),
            "median_pearson_cos_0.8": m.median_pearson(0.8),
        });
    }
    write_json(&a.out.join("eval.json"), &out)?;
    println!("{}", serde_json::to_string_pretty(&out)?);
    meta.save(a.out.join(METADATA_FILE))
}

/// Up to `n` live features spread evenly over the id range.
fn sample_features(trajs: &[evolution::FeatureTrajectory], n: usize) -> Vec<usize> {
    let live: Vec<usize> = trajs.iter().filter(|t| t.peak_norm() > 0.0).map(|t| t.feature).collect();
    if live.len() <= n {
        return live;
    }
    (0..n).map(|i| live[i * live.len() / n]).collect()
}

fn dimensionality_table(model: &CrosscoderModel<f32>) -> Result<(Table, Vec<Vec<f64>>)> {
    let mut total = Table::new(["step", "total_ratio"]);
    let mut per_feature = Vec::with_capacity(model.n_snapshots());
    for (k, step) in model.steps.iter().enumerate() {
        let d = evolution::feature_dimensionality(model, k)?;
        total.push([step.to_string(), fmt(d.total_ratio)]);
        per_feature.push(d.per_feature);
    }
    Ok((total, per_feature))
}

fn evolve(a: EvolveArgs, args: Vec<String>) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let mut meta = RunMetadata::new("evolve", args);
    meta.add_input(&a.checkpoint)?;
    meta.config = json!({"threshold": a.threshold, "raw_norms": a.raw_norms, "sample": a.sample});
    create_dir(&a.out)?;
    let mode = if a.raw_norms { NormMode::Raw } else { NormMode::Rescaled };
    let trajs = evolution::trajectories(&model);

    let mut headers = vec!["feature".to_string()];
    headers.extend(model.steps.iter().map(|s| format!("norm_{s}")));
    headers.extend(["class", "peak_step", "onset_step", "steepness", "lifetime"].map(String::from));
    let mut features = Table::new(headers);
    for tr in &trajs {
        let s = evolution::evolution_stats(tr, &model.steps, a.threshold, mode);
        let mut row = vec![s.feature.to_string()];
        row.extend(s.norms.iter().map(|&n| fmt(n)));
        let class = serde_json::to_value(s.class)?.as_str().unwrap_or_default().to_string();
        row.extend([
            class,
            s.peak_step.to_string(),
            opt(s.emergence_onset_step),
            opt(s.steepness),
            s.lifetime.to_string(),
        ]);
        features.push(row);
    }
    report::write_csv(a.out.join("features.csv"), &features)?;

    let mut traj_table = Table::new(["feature", "step", "norm"]);
    for f in sample_features(&trajs, a.sample) {
        for (step, n) in model.steps.iter().zip(&trajs[f].norms) {
            traj_table.push([f.to_string(), step.to_string(), fmt(*n)]);
        }
    }
    let p = a.out.join(report::TRAJECTORY_TABLE);
    report::write_csv(&p, &traj_table)?;
    write_charts(report::TRAJECTORY_TABLE, &traj_table, &p, &a.out)?;

    let proj = evolution::projection_matrix(&trajs, ProjectionMode::Mean)?;
    let mut headers = vec!["step".to_string()];
    headers.extend(model.steps.iter().map(|s| s.to_string()));
    let mut pt = Table::new(headers);
    for (j, row) in proj.rows().into_iter().enumerate() {
        let mut r = vec![model.steps[j].to_string()];
        r.extend(row.iter().map(|&v| fmt(v)));
        pt.push(r);
    }
    report::write_csv(a.out.join("projection.csv"), &pt)?;

    let (dims, _) = dimensionality_table(&model)?;
    let p = a.out.join(report::DIMENSIONALITY_TABLE);
    report::write_csv(&p, &dims)?;
    write_charts(report::DIMENSIONALITY_TABLE, &dims, &p, &a.out)?;
    println!("{} features, {} snapshots -> {}", model.n_features(), model.n_snapshots(), a.out.display());
    meta.save(a.out.join(METADATA_FILE))
}

fn dims(a: DimsArgs, args: Vec<String>) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let mut meta = RunMetadata::new("dims", args);
    meta.add_input(&a.checkpoint)?;
    create_dir(&a.out)?;
    let (total, per_feature) = dimensionality_table(&model)?;
    let p = a.out.join(report::DIMENSIONALITY_TABLE);
    report::write_csv(&p, &total)?;
    write_charts(report::DIMENSIONALITY_TABLE, &total, &p, &a.out)?;
    let mut headers = vec!["feature".to_string()];
    headers.extend(model.steps.iter().map(|s| format!("dim_{s}")));
    let mut t = Table::new(headers);
    for f in 0..model.n_features() {
        let mut row = vec![f.to_string()];
        row.extend(per_feature.iter().map(|d| fmt(d[f])));
        t.push(row);
    }
    report::write_csv(a.out.join("dimensionality_features.csv"), &t)?;
    for r in &total.rows {
        println!("step {}: sum D_i / d = {}", r[0], r[1]);
    }
    meta.save(a.out.join(METADATA_FILE))
}

fn attr(a: AttrArgs, args: Vec<String>) -> Result<()> {
    let variant: Variant = a.variant.parse()?;
    let model32 = load_checkpoint(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    check_compatible(&model32, &manifest)?;
    let head = MetricHead::load(&a.head)?;
    let records = attribution::read_task_file(&a.task)?;
    let mut meta = RunMetadata::new("attr", args);
    for p in [&a.checkpoint, &a.head, &a.task] {
        meta.add_input(p)?;
    }
    add_manifest_inputs(&mut meta, &a.manifest, &manifest)?;
    meta.config = json!({"variant": variant, "n_steps": a.n_steps, "topk_grid": a.topk_grid, "snapshot": a.snapshot});
    create_dir(&a.out)?;

    let model = model32.cast::<f64>();
    let snapshot = a.snapshot.unwrap_or(model.n_snapshots() - 1);
    if snapshot >= model.n_snapshots() {
        return Err(Error::InvalidInput(format!("snapshot {snapshot} out of range")));
    }
    let samples = attribution::load_task(&manifest, &records)?;
    if samples.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no task records", a.task.display())));
    }
    let mut scores = vec![0.0; model.n_features()];
    for s in &samples {
        let v = attribution::attribution_scores(&model, snapshot, &head, s, variant, a.n_steps)?;
        scores.iter_mut().zip(v.iter()).for_each(|(acc, x)| *acc += x / samples.len() as f64);
    }
    let pairs: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    let ranked = attribution::rank_by_score(&pairs);
    let mut t = Table::new(["rank", "feature", "score"]);
    for (r, &f) in ranked.iter().enumerate() {
        t.push([r.to_string(), f.to_string(), fmt(scores[f])]);
    }
    report::write_csv(a.out.join("attribution.csv"), &t)?;

    let mut abl = Table::new(["mode", "k", "recovery", "skipped"]);
    for mode in [AblationMode::KeepTop, AblationMode::AblateTop] {
        let name = serde_json::to_value(mode)?.as_str().unwrap_or_default().to_string();
        for &k in &a.topk_grid {
            let r = attribution::ablation_experiment(&model, snapshot, &head, &samples, &ranked, k, mode)?;
            println!("{name} k={k}: recovery {:.4}", r.recovery);
            abl.push([name.clone(), k.to_string(), fmt(r.recovery), r.skipped.to_string()]);
        }
    }
    let p = a.out.join(report::ABLATION_TABLE);
    report::write_csv(&p, &abl)?;
    write_charts(report::ABLATION_TABLE, &abl, &p, &a.out)?;
    meta.save(a.out.join(METADATA_FILE))
}

fn probe(a: ProbeArgs, args: Vec<String>) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    check_compatible(&model, &manifest)?;
    let mut cfg = ProbeConfig {
        seed: a.seed,
        ..ProbeConfig::default()
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let mut meta = RunMetadata::new("probe", args);
    meta.add_input(&a.checkpoint)?;
    add_manifest_inputs(&mut meta, &a.manifest, &manifest)?;
    meta.seed = Some(a.seed);
    meta.config = json!({"probe": cfg, "features": a.features, "tokens": a.tokens});
    create_dir(&a.out)?;

    let rows = probe::probe_features(&model, &manifest, &a.features, a.tokens, &cfg)?;
    let mut t = Table::new([
        "feature",
        "snapshot",
        "step",
        "bce_train",
        "bce_heldout",
        "decoder_norm",
        "degenerate",
        "n_positive",
    ]);
    for r in &rows {
        t.push([
            r.feature.to_string(),
            r.snapshot.to_string(),
            r.step.to_string(),
            fmt(r.bce_train),
            fmt(r.bce_heldout),
            fmt(r.decoder_norm),
            r.degenerate.to_string(),
            r.n_positive.to_string(),
        ]);
    }
    report::write_csv(a.out.join("probe.csv"), &t)?;
    let corr = probe::feature_correlations(&rows);
    let mut t = Table::new(["feature", "pearson", "n_snapshots"]);
    for c in &corr {
        t.push([c.feature.to_string(), opt(c.pearson), c.n_snapshots.to_string()]);
    }
    report::write_csv(a.out.join("correlations.csv"), &t)?;
    let rs: Vec<f64> = corr.iter().filter_map(|c| c.pearson).collect();
    let median = featrace_core::stats::median(&rs);
    println!("median Pearson(held-out BCE, decoder norm) over {} features: {}", rs.len(), opt(median));
    write_json(&a.out.join("summary.json"), &json!({"median_pearson": median, "n_features": rs.len()}))?;
    meta.save(a.out.join(METADATA_FILE))
}

/// Expand directories into their `.toks` files, sorted.
fn token_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut v: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| q.extension().is_some_and(|x| x == "toks"))
                .collect();
            v.sort();
            if v.is_empty() {
                return Err(Error::InvalidInput(format!("{}: no .toks files", p.display())));
            }
            out.extend(v);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn ngram(a: NgramArgs, args: Vec<String>) -> Result<()> {
    let vocab_size = match a.vocab.parse::<usize>() {
        Ok(n) => n,
        Err(_) => Vocabulary::load(&a.vocab)?.tokens.len(),
    };
    if let Some(steps) = &a.steps {
        if steps.len() != a.p_tokens.len() {
            return Err(Error::InvalidInput(format!(
                "--steps has {} entries but --p-tokens has {}",
                steps.len(),
                a.p_tokens.len()
            )));
        }
    }
    let mut meta = RunMetadata::new("ngram", args);
    let q_files = token_files(&a.q_tokens)?;
    for p in &q_files {
        meta.add_input(p)?;
    }
    meta.config = json!({"vocab_size": vocab_size, "smoothing": a.smoothing, "steps": a.steps});
    let q = ngram::count_ngram_files(&q_files, vocab_size)?;
    // Each --p-tokens entry is its own corpus, even when it is a directory.
    let mut reports: Vec<NgramReport> = Vec::new();
    for p in &a.p_tokens {
        let files = token_files(std::slice::from_ref(p))?;
        for f in &files {
            meta.add_input(f)?;
        }
        let table = ngram::count_ngram_files(&files, vocab_size)?;
        reports.push(ngram::ngram_report(&table, &q, a.smoothing)?);
    }
    let dir = parent_dir(&a.out)?;
    if reports.len() == 1 && a.steps.is_none() {
        write_json(&a.out, &reports[0])?;
    } else {
        write_json(&a.out, &reports)?;
    }
    if let Some(steps) = &a.steps {
        let mut t = Table::new(["step", "unigram_kl", "bigram_kl"]);
        for (s, r) in steps.iter().zip(&reports) {
            t.push([s.to_string(), fmt(r.unigram_kl), fmt(r.bigram_kl)]);
        }
        let p = dir.join(report::KL_TABLE);
        report::write_csv(&p, &t)?;
        write_charts(report::KL_TABLE, &t, &p, &dir)?;
    }
    for r in &reports {
        println!("unigram KL {:.6}  bigram KL {:.6}", r.unigram_kl, r.bigram_kl);
    }
    meta.save(dir.join(METADATA_FILE))
}

fn rules(a: RulesArgs, args: Vec<String>) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    check_compatible(&model, &manifest)?;
    let vocab_path = a.vocab.clone().unwrap_or_else(|| manifest.base_dir().join(synth::VOCAB_FILE));
    let vocab = Vocabulary::load(&vocab_path)?;
    let mut meta = RunMetadata::new("rules", args);
    meta.add_input(&a.checkpoint)?;
    meta.add_input(&vocab_path)?;
    add_manifest_inputs(&mut meta, &a.manifest, &manifest)?;
    meta.config = json!({"snapshot": a.snapshot, "k": a.k});
    let dir = parent_dir(&a.out)?;

    let index = rules::build_top_index(&model, &manifest, a.snapshot, a.k)?;
    index.save(dir.join("index.jsonl"))?;
    let verdicts = rules::classify_index(&index, &vocab);
    let mut t = Table::new([
        "feature",
        "class",
        "prev_consistency",
        "self_consistency",
        "induction_instances",
        "in_sample_activations",
        "total_activations",
        "context_cap",
    ]);
    for v in &verdicts {
        t.push([
            v.feature.to_string(),
            v.class.name().to_string(),
            fmt(v.previous_token.prev_consistency),
            fmt(v.previous_token.self_consistency),
            v.induction.instances.to_string(),
            v.context.in_sample.to_string(),
            v.context.total.to_string(),
            fmt(v.context.cap),
        ]);
    }
    report::write_csv(&a.out, &t)?;
    for class in [
        rules::RuleClass::PreviousToken,
        rules::RuleClass::Induction,
        rules::RuleClass::ContextSensitive,
        rules::RuleClass::None,
    ] {
        println!("{}: {}", class.name(), verdicts.iter().filter(|v| v.class == class).count());
    }
    meta.save(dir.join(METADATA_FILE))
}

fn annotate(a: AnnotateArgs, args: Vec<String>) -> Result<()> {
    let index = TopActivationIndex::load(&a.index)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let cfg = EndpointConfig {
        base_url: a.endpoint.clone(),
        model_name: a.model.clone(),
        auth_token_env_var: a.auth_env.clone(),
        timeout_seconds: a.timeout,
        max_retries: a.retries,
        max_concurrency: a.concurrency.max(1),
        ..EndpointConfig::default()
    };
    let mut meta = RunMetadata::new("annotate", args);
    meta.add_input(&a.index)?;
    meta.add_input(&a.vocab)?;
    meta.config = json!({"endpoint": cfg, "features": a.features});

    let wanted = |f: usize| a.features.as_ref().is_none_or(|v| v.contains(&f));
    let requests: Vec<AnnotationRequest> = index
        .features
        .iter()
        .filter(|e| wanted(e.feature) && !e.samples.is_empty())
        .map(|e| {
            Ok(AnnotationRequest {
                feature: e.feature,
                prompt: annotate::render_prompt(e, &vocab)?,
            })
        })
        .collect::<Result<_>>()?;
    if requests.is_empty() {
        return Err(Error::InvalidInput("no features with samples to annotate".into()));
    }
    let results = annotate::annotate_many(&cfg, &requests);

    let dir = parent_dir(&a.out)?;
    let file = fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(&a.out, e);
    let mut ok = Vec::new();
    for (feature, r) in &results {
        let line = match r {
            Ok(res) => {
                ok.push(res.clone());
                serde_json::to_value(res)?
            }
            Err(e) => {
                log::warn!("feature {feature}: {e}");
                json!({"feature": feature, "error": e.to_string()})
            }
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)?;
    println!("annotated {}/{} features", ok.len(), results.len());

    if let Some(ck) = &a.checkpoint {
        meta.add_input(ck)?;
        let model = load_checkpoint(ck)?;
        let trajs = evolution::trajectories(&model);
        let pairs: Vec<(f64, f64)> = ok
            .iter()
            .filter(|r| r.feature < trajs.len())
            .map(|r| {
                let p = evolution::classify_and_peak(&trajs[r.feature]);
                ((model.steps[p.peak_index] as f64).max(1.0).log10(), r.complexity)
            })
            .collect();
        let c = annotate::complexity_vs_peak(&pairs)?;
        println!("Pearson(log10 peak step, complexity) = {:.4} (p = {:.3e}, n = {})", c.r, c.p_value, c.n);
        write_json(&dir.join("complexity_correlation.json"), &c)?;
    }
    meta.save(dir.join(METADATA_FILE))?;
    if ok.is_empty() {
        return Err(Error::Http(format!("all {} annotation requests failed", results.len())));
    }
    Ok(())
}

fn report(a: ReportArgs, args: Vec<String>) -> Result<()> {
    let meta = RunMetadata::new("report", args);
    let bundle = report::emit_report(&a.inputs, &a.out, meta)?;
    println!(
        "{} tables, {} charts -> {}",
        bundle.tables.len(),
        bundle.charts.len(),
        bundle.out_dir.display()
    );
    Ok(())
}
