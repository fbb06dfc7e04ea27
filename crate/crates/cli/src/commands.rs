//! Subcommand implementations. Each command reads its inputs, runs the
//! corresponding core routine, and writes deterministic artifacts.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde_json::json;

use tail_core::adapters::{
    build_freeze_mask, count_trainable, init_adapter, load_bundle, save_bundle, AdapterSpec,
    MaskStrategy, Method, ParamCounts,
};
use tail_core::bench::SuiteKind;
use tail_core::checkpoint::{self, CheckpointError, Group, ParamStore};
use tail_core::config::{ExperimentConfig, SeedConfig};
use tail_core::driver::{build_suite, perception_map, run_curriculum, run_stage};
use tail_core::harness::{
    eval_suite, load_ledger, pretrain as pretrain_suite, save_ledger, ContinualState, EvalConfig,
    RunLedger, StrategyKind, StrategySpec, TrainConfig,
};
use tail_core::policy::{PolicySpec, PolicyWeights};
use tail_core::rng::derive_seed;

use crate::error::{io_err, CliError};

type Result<T> = std::result::Result<T, CliError>;

// ── shared plumbing ──────────────────────────────────────────────────

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(root) = seed {
        cfg.seeds = SeedConfig::from_root(root);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn eval_cfg(cfg: &ExperimentConfig) -> EvalConfig {
    EvalConfig {
        episodes: cfg.eval.episodes,
        seed: cfg.seeds.eval,
    }
}

/// Maps a `--strategy` name onto a strategy spec. The four adapter names
/// select that integration method on top of the config's adapter settings.
fn parse_strategy(name: &str, base: &AdapterSpec) -> Result<StrategySpec> {
    if let Some(kind) = StrategyKind::parse(name) {
        let adapter = (kind == StrategyKind::Tail).then(|| base.clone());
        return Ok(StrategySpec { kind, adapter });
    }
    if let Some(m) = Method::parse(name) {
        let mut spec = base.clone();
        spec.methods = [m].into_iter().collect();
        return Ok(StrategySpec {
            kind: StrategyKind::Tail,
            adapter: Some(spec),
        });
    }
    Err(CliError::Config(format!(
        "unknown strategy {name:?}; expected one of lora, bottleneck, prefix, roboadapter, \
         fft, fpf, er, ewc"
    )))
}

fn save_base(prefix: &Path, weights: &PolicyWeights, epochs_done: usize) -> Result<()> {
    let meta = json!({
        "spec": weights.spec,
        "digest": weights.digest(),
        "epochs_done": epochs_done,
    });
    checkpoint::save(prefix, "base", &weights.store, &weights.frozen_groups, meta)?;
    Ok(())
}

fn load_base(prefix: &Path) -> Result<(PolicyWeights, usize)> {
    let (store, manifest) = checkpoint::load(prefix)?;
    if manifest.kind != "base" {
        return Err(CliError::Data(format!(
            "{} is a {:?} file, expected a base checkpoint",
            prefix.display(),
            manifest.kind
        )));
    }
    let spec: PolicySpec = serde_json::from_value(manifest.meta["spec"].clone())
        .map_err(|e| CliError::Data(format!("checkpoint metadata: {e}")))?;
    let recorded = manifest.meta["digest"].as_str().unwrap_or_default().to_string();
    let epochs_done = manifest.meta["epochs_done"].as_u64().unwrap_or(0) as usize;
    let frozen_groups: BTreeSet<Group> = manifest
        .entries
        .iter()
        .filter(|e| e.frozen)
        .map(|e| e.group)
        .collect();
    let weights = PolicyWeights {
        spec,
        store,
        frozen_groups,
    };
    if weights.digest() != recorded {
        return Err(CheckpointError::DigestMismatch {
            expected: recorded,
            found: weights.digest(),
        }
        .into());
    }
    Ok((weights, epochs_done))
}

/// Accepts either a run directory holding `base.json`/`base.bin` or a
/// checkpoint prefix directly.
fn base_prefix(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("base")
    } else {
        path.to_path_buf()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err("create", dir, e))
}

fn pretrain_train_cfg(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(cfg.seeds.train, "stage", &[0]),
        ..cfg.train.clone()
    }
}

// ── gen-data ─────────────────────────────────────────────────────────

pub fn gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    create_dir(out)?;
    let pmap = perception_map(&cfg);
    let mut files = Vec::new();

    let mut write_suite =
        |file: String, kind: SuiteKind, n_tasks: usize, stage: usize| -> Result<()> {
            let suite = build_suite(&cfg, kind, n_tasks, &pmap, stage as u64)?;
            let path = out.join(&file);
            let json = serde_json::to_vec_pretty(&suite)
                .map_err(|e| CliError::Data(format!("serialize suite: {e}")))?;
            std::fs::write(&path, json).map_err(|e| io_err("write", &path, e))?;
            println!(
                "{file}: {} tasks x {} demos",
                suite.tasks.len(),
                cfg.curriculum.demos_per_task
            );
            files.push(json!({
                "file": file,
                "suite": kind,
                "n_tasks": n_tasks,
                "stage": stage,
            }));
            Ok(())
        };

    write_suite(
        "pretrain.json".into(),
        SuiteKind::Pretrain,
        cfg.curriculum.pretrain_tasks,
        0,
    )?;
    for (i, st) in cfg.curriculum.stages.iter().enumerate() {
        let k = i + 1;
        write_suite(
            format!("stage{k}-{}.json", st.suite.as_str()),
            st.suite,
            st.n_tasks,
            k,
        )?;
    }

    let manifest = json!({
        "format_version": checkpoint::FORMAT_VERSION,
        "seeds": cfg.seeds,
        "suites": files,
    });
    let path = out.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest).unwrap())
        .map_err(|e| io_err("write", &path, e))?;
    Ok(())
}

// ── pretrain ─────────────────────────────────────────────────────────

pub fn pretrain(config: &Path, out: &Path, seed: Option<u64>, resume: bool) -> Result<()> {
    let cfg = load_config(config, seed)?;
    create_dir(out)?;
    let prefix = out.join("base");

    let resumed = if resume && prefix.with_extension("json").exists() {
        let (weights, epochs_done) = load_base(&prefix)?;
        if epochs_done >= cfg.train.epochs {
            println!(
                "base checkpoint already trained for {epochs_done} epochs; nothing to do"
            );
            return Ok(());
        }
        Some((weights, epochs_done))
    } else {
        None
    };

    let pmap = perception_map(&cfg);
    let suite = build_suite(
        &cfg,
        SuiteKind::Pretrain,
        cfg.curriculum.pretrain_tasks,
        &pmap,
        0,
    )?;
    let mut train_cfg = pretrain_train_cfg(&cfg);
    let weights = match &resumed {
        Some((weights, epochs_done)) => {
            // fresh optimizer state on resume: skip the warmup ramp
            train_cfg.epochs = cfg.train.epochs - epochs_done;
            train_cfg.warmup_steps = 0;
            weights.clone()
        }
        None => PolicyWeights::init(&cfg.policy, derive_seed(cfg.seeds.train, "init", &[]))?,
    };
    let mut state = ContinualState::new(weights, pmap);
    state.ledger.config_echo =
        serde_json::to_value(&cfg).map_err(|e| CliError::Data(format!("echo config: {e}")))?;
    pretrain_suite(&mut state, &suite, &train_cfg, &eval_cfg(&cfg))?;

    save_base(&prefix, &state.weights, cfg.train.epochs)?;
    save_ledger(out, &state.ledger)?;
    let mean = state.ledger.pretrain_success.iter().sum::<f64>()
        / state.ledger.pretrain_success.len() as f64;
    println!(
        "pretrain: success {:?} (mean {mean:.2}), digest {}",
        state.ledger.pretrain_success,
        &state.ledger.pretrain_digest[..12]
    );
    Ok(())
}

// ── adapt ────────────────────────────────────────────────────────────

fn check_echo(cfg: &ExperimentConfig, ledger: &RunLedger) -> Result<()> {
    let echo = &ledger.config_echo;
    if echo.is_null() {
        return Ok(());
    }
    let ours = serde_json::to_value(cfg).expect("config serializes");
    for key in ["policy", "bench", "seeds", "curriculum"] {
        if echo[key] != ours[key] {
            return Err(CliError::Config(format!(
                "config section {key:?} differs from the one echoed in the base ledger; \
                 pretrain and adapt must share a config and seed"
            )));
        }
    }
    Ok(())
}

pub fn adapt(
    config: &Path,
    base: &Path,
    strategy: &str,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let strat = parse_strategy(strategy, &cfg.adapter)?;
    if let Some(spec) = &strat.adapter {
        spec.validate(&cfg.policy)?;
    }
    let (weights, _) = load_base(&base_prefix(base))?;
    let ledger = load_ledger(base)?;
    if ledger.pretrain_digest != weights.digest() {
        return Err(CheckpointError::DigestMismatch {
            expected: ledger.pretrain_digest,
            found: weights.digest(),
        }
        .into());
    }
    check_echo(&cfg, &ledger)?;
    create_dir(out)?;

    let pmap = perception_map(&cfg);
    let mut state = ContinualState::new(weights, pmap);
    state.ledger = ledger;

    for k in 1..=cfg.curriculum.stages.len() {
        run_stage(&mut state, &cfg, &strat, k)?;
        let rec = state.ledger.stages.last().unwrap();
        match strat.kind {
            StrategyKind::Tail => {
                let bundle = state.bundles.last().unwrap();
                save_bundle(bundle, &out.join(format!("bundle-stage{k}")))?;
            }
            _ => save_base(&out.join(format!("checkpoint-stage{k}")), &state.weights, 0)?,
        }
        println!(
            "stage {k} ({}): fwt {:.2}{}",
            rec.suite_id,
            rec.fwt,
            match rec.bwt {
                Some(b) => format!(", bwt {b:.2}"),
                None => String::new(),
            }
        );
    }
    save_ledger(out, &state.ledger)?;
    println!(
        "base digest {} {}",
        &state.ledger.pretrain_digest[..12],
        if state.weights.digest() == state.ledger.pretrain_digest {
            "unchanged"
        } else {
            "updated by strategy"
        }
    );
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

pub fn eval(
    config: &Path,
    base: &Path,
    bundle: Option<&Path>,
    stage: usize,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let (weights, _) = load_base(&base_prefix(base))?;
    let bundle = bundle
        .map(|p| load_bundle(p, &weights.digest()))
        .transpose()?;
    let (kind, n_tasks) = if stage == 0 {
        (SuiteKind::Pretrain, cfg.curriculum.pretrain_tasks)
    } else {
        let st = cfg.curriculum.stages.get(stage - 1).ok_or_else(|| {
            CliError::Config(format!(
                "stage {stage} out of range; curriculum has {} stages",
                cfg.curriculum.stages.len()
            ))
        })?;
        (st.suite, st.n_tasks)
    };
    let pmap = perception_map(&cfg);
    let suite = build_suite(&cfg, kind, n_tasks, &pmap, stage as u64)?;
    let successes = eval_suite(
        &weights,
        bundle.as_ref(),
        &suite.tasks,
        &pmap,
        &eval_cfg(&cfg),
    );
    for (task, s) in successes.iter().enumerate() {
        println!("task {task}: success {s:.2}");
    }
    let mean = successes.iter().sum::<f64>() / successes.len() as f64;
    println!("mean: {mean:.4}");
    Ok(())
}

// ── metrics ──────────────────────────────────────────────────────────

struct AggRow {
    strategy: String,
    stage: String,
    suite: String,
    metric: String,
    mean: f64,
    std: f64,
    n: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn aggregate(ledgers: &[(String, RunLedger)]) -> Result<Vec<AggRow>> {
    // ledgers are comparable only when built on the same benchmark data
    let reference = &ledgers[0].1.config_echo;
    for (name, ledger) in ledgers {
        for key in ["bench", "seeds"] {
            let ours = &ledger.config_echo[key];
            let theirs = &reference[key];
            if key == "seeds" {
                // only the data seed must match: train/eval seeds are the
                // per-seed replicates being averaged
                if ours["data"] == theirs["data"] {
                    continue;
                }
            } else if ours == theirs {
                continue;
            }
            return Err(CliError::Config(format!(
                "ledger {name} was produced under a different {key} section; \
                 refusing to aggregate"
            )));
        }
    }

    // group by strategy, then by stage index
    let mut strategies: Vec<String> = Vec::new();
    for (_, l) in ledgers {
        for st in &l.stages {
            if !strategies.contains(&st.strategy) {
                strategies.push(st.strategy.clone());
            }
        }
    }
    let mut rows = Vec::new();
    for strategy in &strategies {
        let n_stages = ledgers
            .iter()
            .flat_map(|(_, l)| l.stages.iter())
            .filter(|st| &st.strategy == strategy)
            .map(|st| st.stage)
            .max()
            .unwrap_or(0);
        let mut fwt_all = Vec::new();
        let mut bwt_all = Vec::new();
        for stage in 1..=n_stages {
            let recs: Vec<_> = ledgers
                .iter()
                .flat_map(|(_, l)| l.stages.iter())
                .filter(|st| &st.strategy == strategy && st.stage == stage)
                .collect();
            if recs.is_empty() {
                continue;
            }
            let suite = recs[0].suite_id.clone();
            let fwt: Vec<f64> = recs.iter().map(|r| r.fwt).collect();
            let (mean, std) = mean_std(&fwt);
            fwt_all.extend_from_slice(&fwt);
            rows.push(AggRow {
                strategy: strategy.clone(),
                stage: stage.to_string(),
                suite: suite.clone(),
                metric: "fwt".into(),
                mean,
                std,
                n: fwt.len(),
            });
            let bwt: Vec<f64> = recs.iter().filter_map(|r| r.bwt).collect();
            if bwt.len() < recs.len() && stage > 1 {
                eprintln!(
                    "warning: {strategy} stage {stage} is missing backward-transfer \
                     entries in {} of {} ledgers",
                    recs.len() - bwt.len(),
                    recs.len()
                );
            }
            if !bwt.is_empty() {
                let (mean, std) = mean_std(&bwt);
                bwt_all.extend_from_slice(&bwt);
                rows.push(AggRow {
                    strategy: strategy.clone(),
                    stage: stage.to_string(),
                    suite,
                    metric: "bwt".into(),
                    mean,
                    std,
                    n: bwt.len(),
                });
            }
        }
        for (metric, values) in [("fwt", fwt_all), ("bwt", bwt_all)] {
            if !values.is_empty() {
                let (mean, std) = mean_std(&values);
                rows.push(AggRow {
                    strategy: strategy.clone(),
                    stage: "all".into(),
                    suite: "all".into(),
                    metric: metric.into(),
                    mean,
                    std,
                    n: values.len(),
                });
            }
        }
    }
    Ok(rows)
}

fn rows_to_csv(rows: &[AggRow]) -> String {
    let mut csv = String::from("strategy,stage,suite,metric,mean,std,n\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.strategy, r.stage, r.suite, r.metric, r.mean, r.std, r.n
        ));
    }
    csv
}

fn rows_from_csv(text: &str) -> Result<Vec<AggRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(CliError::Data(format!(
                "aggregate CSV line {}: expected 7 fields, found {}",
                i + 1,
                f.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| CliError::Data(format!("aggregate CSV line {}: {e}", i + 1)))
        };
        rows.push(AggRow {
            strategy: f[0].into(),
            stage: f[1].into(),
            suite: f[2].into(),
            metric: f[3].into(),
            mean: num(f[4])?,
            std: num(f[5])?,
            n: num(f[6])? as usize,
        });
    }
    Ok(rows)
}

fn print_rows(rows: &[AggRow]) {
    println!(
        "{:<18} {:>5} {:<12} {:>6} {:>9} {:>8} {:>3}",
        "strategy", "stage", "suite", "metric", "mean", "std", "n"
    );
    for r in rows {
        println!(
            "{:<18} {:>5} {:<12} {:>6} {:>9.4} {:>8.4} {:>3}",
            r.strategy, r.stage, r.suite, r.metric, r.mean, r.std, r.n
        );
    }
}

pub fn metrics(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    if inputs.is_empty() {
        return Err(CliError::Config(
            "metrics needs at least one ledger directory or aggregate CSV".into(),
        ));
    }
    let rows = if inputs.len() == 1 && inputs[0].extension().is_some_and(|e| e == "csv") {
        let text = std::fs::read_to_string(&inputs[0])
            .map_err(|e| io_err("read", &inputs[0], e))?;
        rows_from_csv(&text)?
    } else {
        let mut ledgers = Vec::new();
        for dir in inputs {
            ledgers.push((dir.display().to_string(), load_ledger(dir)?));
        }
        aggregate(&ledgers)?
    };
    print_rows(&rows);
    if let Some(path) = out {
        std::fs::write(path, rows_to_csv(&rows)).map_err(|e| io_err("write", path, e))?;
    }
    Ok(())
}

// ── inspect ──────────────────────────────────────────────────────────

fn print_counts(counts: &ParamCounts) {
    for (group, n) in &counts.per_group {
        println!("  {group:<20} {n:>9}");
    }
    println!(
        "  trainable {} / {} = {:.4} ({:.2}%)",
        counts.trainable,
        counts.total,
        counts.fraction,
        counts.fraction * 100.0
    );
}

fn file_sizes(prefix: &Path) -> (u64, u64) {
    let size = |p: PathBuf| std::fs::metadata(p).map(|m| m.len()).unwrap_or(0);
    (
        size(prefix.with_extension("json")),
        size(prefix.with_extension("bin")),
    )
}

fn strategy_counts(
    store: &ParamStore,
    spec: &PolicySpec,
    digest: &str,
    strategy: &StrategySpec,
) -> Result<ParamCounts> {
    match (&strategy.kind, &strategy.adapter) {
        (StrategyKind::Tail, Some(aspec)) => {
            // a fresh zero-init bundle has exactly the trainable payload
            let bundle = init_adapter(spec, aspec, store, digest, "inspect", None, 0)?;
            let mask = build_freeze_mask(store, MaskStrategy::Tail, Some(&bundle))?;
            Ok(count_trainable(store, &mask, Some(&bundle)))
        }
        _ => {
            let mask_kind = match strategy.kind {
                StrategyKind::Fpf => MaskStrategy::Fpf,
                _ => MaskStrategy::Fft,
            };
            let mask = build_freeze_mask(store, mask_kind, None)?;
            Ok(count_trainable(store, &mask, None))
        }
    }
}

pub fn inspect(prefix: &Path, strategy: Option<&str>, config: Option<&Path>) -> Result<()> {
    let prefix = base_prefix(prefix);
    let (store, manifest) = checkpoint::load(&prefix)?;
    let (json_size, bin_size) = file_sizes(&prefix);
    println!(
        "{} ({}): {} parameters in {} tensors, {json_size} B manifest + {bin_size} B data",
        prefix.display(),
        manifest.kind,
        store.scalar_count(),
        store.len()
    );
    println!("per-group scalar counts:");
    for (group, n) in store.group_scalar_counts() {
        println!("  {:<20} {n:>9}", group.as_str());
    }

    if manifest.kind == "bundle" {
        println!("bundle payloads are fully trainable under the tail strategy");
        return Ok(());
    }
    if let Some(name) = strategy {
        let adapter = match config {
            Some(path) => load_config(path, None)?.adapter,
            None => AdapterSpec::defaults(),
        };
        let strat = parse_strategy(name, &adapter)?;
        let spec: PolicySpec = serde_json::from_value(manifest.meta["spec"].clone())
            .map_err(|e| CliError::Data(format!("checkpoint metadata: {e}")))?;
        if let Some(aspec) = &strat.adapter {
            aspec.validate(&spec)?;
        }
        let counts = strategy_counts(&store, &spec, &store.digest(), &strat)?;
        println!("trainable under {}:", strat.label());
        print_counts(&counts);
    }
    Ok(())
}

// ── sweep-rank ───────────────────────────────────────────────────────

fn parse_ranks(list: &str) -> Result<Vec<usize>> {
    let ranks: Vec<usize> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| CliError::Config(format!("bad rank {s:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    if ranks.is_empty() {
        return Err(CliError::Config("rank list is empty".into()));
    }
    Ok(ranks)
}

pub fn sweep_rank(
    config: &Path,
    ranks: Option<&str>,
    out: &Path,
    combinations: bool,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let n_stages = cfg.curriculum.stages.len();

    // (label, rank column, adapter spec) per sweep point; every spec is
    // validated before any training starts
    let mut points: Vec<(String, String, AdapterSpec)> = Vec::new();
    if combinations {
        // every non-empty subset of {prefix, bottleneck, lora}
        let methods = [Method::Prefix, Method::Bottleneck, Method::Lora];
        let names = ["prefix", "bottleneck", "lora"];
        for mask in 1u32..8 {
            let subset: Vec<Method> = (0..3)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| methods[i])
                .collect();
            let label: Vec<&str> = (0..3)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| names[i])
                .collect();
            points.push((
                label.join("+"),
                "-".into(),
                cfg.adapter.clone().with_methods(&subset),
            ));
        }
    } else {
        let list = ranks.ok_or_else(|| {
            CliError::Config("--ranks is required unless --combinations is set".into())
        })?;
        for rank in parse_ranks(list)? {
            let mut lora = cfg.adapter.clone().with_methods(&[Method::Lora]);
            lora.lora_rank = rank;
            points.push(("lora".into(), rank.to_string(), lora));
            let mut bott = cfg.adapter.clone().with_methods(&[Method::Bottleneck]);
            bott.bottleneck_size = rank;
            points.push(("bottleneck".into(), rank.to_string(), bott));
        }
    }
    for (_, _, spec) in &points {
        spec.validate(&cfg.policy)?;
    }
    create_dir(out)?;

    let mut csv = String::from("method,rank");
    for k in 1..=n_stages {
        csv.push_str(&format!(",fwt_stage{k}"));
    }
    csv.push_str(",fwt_mean\n");
    for (label, rank, spec) in &points {
        let strat = StrategySpec {
            kind: StrategyKind::Tail,
            adapter: Some(spec.clone()),
        };
        let state = run_curriculum(&cfg, &strat)?;
        let fwts: Vec<f64> = state.ledger.stages.iter().map(|s| s.fwt).collect();
        let mean = fwts.iter().sum::<f64>() / fwts.len() as f64;
        csv.push_str(&format!("{label},{rank}"));
        for f in &fwts {
            csv.push_str(&format!(",{f}"));
        }
        csv.push_str(&format!(",{mean}\n"));
        println!("{label} rank {rank}: fwt {fwts:?} (mean {mean:.2})");
    }
    let path = out.join("sweep.csv");
    std::fs::write(&path, csv).map_err(|e| io_err("write", &path, e))?;
    Ok(())
}
