use std::collections::BTreeSet;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use neuroview::checkpoint::{Checkpoint, Metrics};
use neuroview::config::RunConfig;
use neuroview::data::{load_dataset, DataSet};
use neuroview::interpret::{
    class_similarity, export_report, rank_steps, time_analysis_sweep, weight_map, CounterfactualResult,
    CounterfactualSpec, Ranking, Target, ZeroTarget,
};
use neuroview::network::{EncoderConfig, HeadKind, Model};
use neuroview::parallel::Execution;
use neuroview::train::{evaluate as eval_set, fit_with, write_history, EvalReport};
use neuroview::Error;
use serde::Serialize;

use crate::{CounterfactualArgs, DataArgs, EvalArgs, ExportArgs, InspectArgs, RunArgs, Split};

pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Exit code 2: the invocation, config or an input file is at fault.
fn usage(e: impl Display) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

/// Exit code 1: the run itself failed.
fn runtime(e: impl Display) -> Failure {
    Failure {
        code: 1,
        message: e.to_string(),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::NotNeuroView(_) | Error::LabelOutOfRange { .. } => {
                usage(e)
            }
            _ => runtime(e),
        }
    }
}

fn run_config(args: &RunArgs) -> CmdResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field.clone() {
                cfg.$field = v.into();
            }
        )*};
    }
    set!(dataset, cell, head, hidden, layers, bidirectional, mean_pool, init, horizon, znorm);
    set!(learning_rate, epochs, batch_size, clip_norm, seed, execution, output);
    if let Some(t) = &args.test {
        cfg.test = t.display().to_string();
    }
    if cfg.dataset.is_empty() {
        return Err(usage("no dataset given (use --dataset or set `dataset` in the config file)"));
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

struct Data {
    train: DataSet,
    test: Option<DataSet>,
}

fn load_run_data(cfg: &RunConfig) -> CmdResult<Data> {
    let test = (!cfg.test.is_empty()).then(|| PathBuf::from(&cfg.test));
    let (train, test) = load_dataset(&cfg.dataset, test.as_deref(), cfg.horizon, cfg.znorm).map_err(usage)?;
    Ok(Data { train, test })
}

/// Short, filesystem-safe name for a dataset argument.
fn dataset_stem(arg: &str) -> String {
    let name = Path::new(arg).file_name().and_then(|n| n.to_str()).unwrap_or(arg);
    let name = name.split("_TRAIN").next().unwrap_or(name);
    let name = name.split('.').next().unwrap_or(name);
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

struct Summary {
    train_accuracy: f64,
    test_accuracy: Option<f64>,
    checkpoint: PathBuf,
}

fn train_into(cfg: &RunConfig, data: &Data, dir: &Path, quiet: bool) -> CmdResult<Summary> {
    let enc = EncoderConfig {
        cell: cfg.cell,
        input_dim: data.train.feature_dim,
        hidden_dim: cfg.hidden,
        layers: cfg.layers,
        bidirectional: cfg.bidirectional,
        horizon: data.train.horizon,
    };
    let model =
        Model::new(enc, cfg.head, data.train.num_classes, cfg.init_scheme(), cfg.mean_pool).map_err(usage)?;
    let every = (cfg.epochs / 10).max(1);
    let out = fit_with(model, &data.train, &cfg.train_config(), |s| {
        if !quiet && (s.epoch % every == 0 || s.epoch == cfg.epochs) {
            eprintln!("epoch {:>5}  loss {:.6}  train {}", s.epoch, s.mean_loss, pct(s.train_acc));
        }
    })?;
    let exec = cfg.execution;
    let train_accuracy = eval_set(&out.model, &data.train, exec)?.overall;
    let test_accuracy = data.test.as_ref().map(|t| eval_set(&out.model, t, exec)).transpose()?.map(|r| r.overall);

    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let checkpoint = dir.join("checkpoint.json");
    Checkpoint {
        config: cfg.clone(),
        model: out.model,
        class_labels: data.train.class_labels.clone(),
        metrics: Metrics {
            epochs_run: out.history.len(),
            final_loss: out.history.last().map(|s| s.mean_loss),
            train_accuracy: Some(train_accuracy),
            test_accuracy,
        },
        adam: Some(out.adam),
        seed: cfg.seed,
    }
    .save(&checkpoint)?;
    write_history(dir.join("history.csv"), &out.history)?;
    cfg.save(dir.join("config.toml"))?;
    Ok(Summary {
        train_accuracy,
        test_accuracy,
        checkpoint,
    })
}

fn accuracy_line(s: &Summary) -> String {
    let test = s.test_accuracy.map_or("n/a".to_string(), pct);
    format!("train accuracy {}  test accuracy {}", pct(s.train_accuracy), test)
}

pub fn train(args: &RunArgs) -> CmdResult {
    let cfg = run_config(args)?;
    let data = load_run_data(&cfg)?;
    let name = format!("{}_{}-{}{}_seed{}", dataset_stem(&cfg.dataset), cfg.head, cfg.cell, cfg.hidden, cfg.seed);
    let s = train_into(&cfg, &data, &cfg.output.join(name), args.quiet)?;
    println!("{}", accuracy_line(&s));
    println!("checkpoint {}", s.checkpoint.display());
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    hidden: usize,
    train_accuracy: f64,
    test_accuracy: f64,
    checkpoint: String,
}

pub fn sweep(args: &RunArgs, sizes: &[usize]) -> CmdResult {
    let mut seen = BTreeSet::new();
    if let Some(d) = sizes.iter().find(|&&s| !seen.insert(s)) {
        return Err(usage(format!("hidden size {d} is listed more than once")));
    }
    let base = run_config(args)?;
    for &hidden in sizes {
        RunConfig { hidden, ..base.clone() }.validate().map_err(usage)?;
    }
    let data = load_run_data(&base)?;
    if data.test.is_none() {
        return Err(usage(format!("{} has no test split to rank hidden sizes by", base.dataset)));
    }
    let dir = base.output.join(format!("{}_{}-{}_sweep_seed{}", dataset_stem(&base.dataset), base.head, base.cell, base.seed));
    let mut rows = Vec::new();
    for &hidden in sizes {
        let cfg = RunConfig { hidden, ..base.clone() };
        if !args.quiet {
            eprintln!("hidden {hidden}");
        }
        let s = train_into(&cfg, &data, &dir.join(format!("hidden_{hidden}")), args.quiet)?;
        println!("hidden {hidden:>4}  {}", accuracy_line(&s));
        rows.push(SweepRow {
            hidden,
            train_accuracy: s.train_accuracy,
            test_accuracy: s.test_accuracy.expect("test split checked above"),
            checkpoint: s.checkpoint.strip_prefix(&dir).unwrap_or(&s.checkpoint).display().to_string(),
        });
    }
    let table = dir.join("results.csv");
    let mut w = csv::Writer::from_path(&table).map_err(runtime)?;
    for r in &rows {
        w.serialize(r).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    let best = rows
        .iter()
        .max_by(|a, b| a.test_accuracy.total_cmp(&b.test_accuracy).then(b.hidden.cmp(&a.hidden)))
        .expect("at least one size");
    fs::copy(dir.join(&best.checkpoint), dir.join("best_checkpoint.json")).map_err(runtime)?;
    let best_json = serde_json::to_string_pretty(best).map_err(runtime)? + "\n";
    fs::write(dir.join("best.json"), best_json).map_err(runtime)?;
    println!("best hidden {} (test accuracy {})", best.hidden, pct(best.test_accuracy));
    println!("results {}", table.display());
    Ok(())
}

struct Loaded {
    checkpoint: Checkpoint,
    data: DataSet,
    exec: Execution,
}

fn load_checkpoint(path: &Path) -> CmdResult<Checkpoint> {
    Checkpoint::load(path).map_err(usage)
}

/// The checkpoint plus the requested split, padded to the model's horizon
/// and normalized as during training.
fn load_for_eval(args: &DataArgs) -> CmdResult<Loaded> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let cfg = &checkpoint.config;
    let dataset = args.dataset.as_deref().unwrap_or(&cfg.dataset);
    let test = args
        .test
        .clone()
        .or_else(|| (args.dataset.is_none() && !cfg.test.is_empty()).then(|| PathBuf::from(&cfg.test)));
    let horizon = checkpoint.model.encoder.horizon;
    let (train, test) = load_dataset(dataset, test.as_deref(), horizon, cfg.znorm).map_err(usage)?;
    let data = match args.split {
        Split::Train => train,
        Split::Test => test.ok_or_else(|| usage(format!("{dataset} has no test split (pass --test or --split train)")))?,
    };
    if data.class_labels != checkpoint.class_labels {
        return Err(usage(format!(
            "dataset labels {:?} do not match the checkpoint's {:?}",
            data.class_labels, checkpoint.class_labels
        )));
    }
    let exec = args.execution.map_or(cfg.execution, Into::into);
    Ok(Loaded { checkpoint, data, exec })
}

fn require_nv(ck: &Checkpoint) -> CmdResult {
    match ck.model.head.kind {
        HeadKind::NeuroView => Ok(()),
        other => Err(usage(format!(
            "this checkpoint has a `{other}` head; timestep weight maps exist only for the `nv` head, \
             whose classifier sees every timestep (`last` sees the final state, `avg` a pooled state)"
        ))),
    }
}

#[derive(Serialize)]
struct EvalJson<'a> {
    class_labels: &'a [String],
    samples: usize,
    #[serde(flatten)]
    report: &'a EvalReport,
}

pub fn evaluate(args: &EvalArgs) -> CmdResult {
    let l = load_for_eval(&args.data)?;
    let report = eval_set(&l.checkpoint.model, &l.data, l.exec)?;
    let total = report.total();
    let correct: usize = (0..report.confusion.len()).map(|i| report.confusion[i][i]).sum();
    println!("accuracy {} ({correct}/{total})", pct(report.overall));
    for (c, acc) in report.per_class.iter().enumerate() {
        let n: usize = report.confusion[c].iter().sum();
        let acc = acc.map_or("n/a".to_string(), pct);
        println!("class {c} (label {}): {acc} of {n}", l.checkpoint.class_labels[c]);
    }
    if let Some(path) = &args.json {
        let json = EvalJson {
            class_labels: &l.checkpoint.class_labels,
            samples: total,
            report: &report,
        };
        fs::write(path, serde_json::to_string_pretty(&json).map_err(runtime)? + "\n")
            .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn parse_classes(spec: &str, classes: usize) -> CmdResult<Vec<usize>> {
    if spec.trim().eq_ignore_ascii_case("all") {
        return Ok((0..classes).collect());
    }
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let c: usize = part.parse().map_err(|_| usage(format!("`{part}` is not a class index")))?;
        if c >= classes {
            return Err(usage(format!("class {c} out of range for a {classes}-class model")));
        }
        if !out.contains(&c) {
            out.push(c);
        }
    }
    if out.is_empty() {
        return Err(usage("no classes selected"));
    }
    Ok(out)
}

fn check_block(enc: &EncoderConfig, layer: usize, direction: usize) -> CmdResult<usize> {
    if layer >= enc.layers || direction >= enc.directions() {
        return Err(usage(format!(
            "no block for layer {layer}, direction {direction} (model has {} layer(s), {} direction(s))",
            enc.layers,
            enc.directions()
        )));
    }
    Ok(enc.cell_index(layer, direction))
}

pub fn inspect(args: &InspectArgs) -> CmdResult {
    let ck = load_checkpoint(&args.checkpoint)?;
    require_nv(&ck)?;
    let model = &ck.model;
    let enc = &model.encoder;
    let classes = parse_classes(&args.classes, model.classes())?;
    let block = check_block(enc, args.layer, args.direction)?;
    let maps = classes
        .iter()
        .map(|&c| weight_map(&model.head, enc, c))
        .collect::<Result<Vec<_>, _>>()?;
    let similarity = class_similarity(&model.head)?;
    let manifest = export_report(&maps, enc, Some(&similarity), &[], &args.output)?;
    for map in &maps {
        let means = map.block_means(block);
        let top: Vec<String> = rank_steps(&means, 5.min(means.len()), Ranking::TopPositive)
            .into_iter()
            .map(|t| format!("t={t} ({:+.4})", means[t]))
            .collect();
        println!("class {} (label {}): {}", map.class, ck.class_labels[map.class], top.join(", "));
    }
    println!("wrote {} map file(s) and {} to {}", manifest.maps.len(), manifest.similarity.as_deref().unwrap_or("no similarity"), args.output.display());
    Ok(())
}

#[derive(Serialize)]
struct CounterfactualRow {
    k: usize,
    zeroed_steps: Vec<usize>,
    overall: f64,
    per_class: Vec<Option<f64>>,
}

#[derive(Serialize)]
struct CounterfactualTable<'a> {
    target: Target,
    ranking: Ranking,
    zero: ZeroTarget,
    layer: usize,
    direction: usize,
    class_labels: &'a [String],
    samples: usize,
    rows: Vec<CounterfactualRow>,
}

fn rows(results: &[CounterfactualResult]) -> Vec<CounterfactualRow> {
    results
        .iter()
        .map(|r| CounterfactualRow {
            k: r.k,
            zeroed_steps: r.zeroed_steps.clone(),
            overall: r.report.overall,
            per_class: r.report.per_class.clone(),
        })
        .collect()
}

pub fn counterfactual(args: &CounterfactualArgs) -> CmdResult {
    let l = load_for_eval(&args.data)?;
    require_nv(&l.checkpoint)?;
    let model = &l.checkpoint.model;
    check_block(&model.encoder, args.layer, args.direction)?;
    let target = match args.class {
        Some(c) => {
            parse_classes(&c.to_string(), model.classes())?;
            Target::Class(c)
        }
        None => Target::AllClasses,
    };
    let base = CounterfactualSpec {
        zero: if args.zero_weights { ZeroTarget::Weights } else { ZeroTarget::Inputs },
        block: (args.layer, args.direction),
        ..CounterfactualSpec::new(target, 0, args.ranking)
    };
    let results = time_analysis_sweep(model, &l.data, &base, &args.k, l.exec)?;
    for r in &results {
        let focus = match target {
            Target::Class(c) => format!("  class {c} {}", r.report.per_class[c].map_or("n/a".into(), pct)),
            Target::AllClasses => String::new(),
        };
        eprintln!("k={:<3} overall {}{focus}  zeroed {:?}", r.k, pct(r.report.overall), r.zeroed_steps);
    }
    let table = CounterfactualTable {
        target,
        ranking: args.ranking,
        zero: base.zero,
        layer: args.layer,
        direction: args.direction,
        class_labels: &l.checkpoint.class_labels,
        samples: l.data.len(),
        rows: rows(&results),
    };
    let json = serde_json::to_string_pretty(&table).map_err(runtime)? + "\n";
    if let Some(path) = &args.output {
        fs::write(path, &json).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    print!("{json}");
    Ok(())
}

pub fn export(args: &ExportArgs) -> CmdResult {
    let (ck, results) = if args.no_counterfactuals {
        (load_checkpoint(&args.data.checkpoint)?, Vec::new())
    } else {
        let l = load_for_eval(&args.data)?;
        require_nv(&l.checkpoint)?;
        let model = &l.checkpoint.model;
        let mut results = Vec::new();
        let targets = (0..model.classes()).map(Target::Class).chain([Target::AllClasses]);
        for target in targets {
            let base = CounterfactualSpec::new(target, 0, args.ranking);
            results.extend(time_analysis_sweep(model, &l.data, &base, &args.k, l.exec)?);
        }
        (l.checkpoint, results)
    };
    require_nv(&ck)?;
    let model = &ck.model;
    let maps = (0..model.classes())
        .map(|c| weight_map(&model.head, &model.encoder, c))
        .collect::<Result<Vec<_>, _>>()?;
    let similarity = class_similarity(&model.head)?;
    let manifest = export_report(&maps, &model.encoder, Some(&similarity), &results, &args.output)?;
    println!(
        "wrote {} map file(s), similarity and {} counterfactual row(s) to {}",
        manifest.maps.len(),
        results.len(),
        args.output.display()
    );
    Ok(())
}
