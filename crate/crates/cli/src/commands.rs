use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use hrgnn_core::checkpoint::Checkpoint;
use hrgnn_core::config::{DataSection, RunConfig};
use hrgnn_core::data::{encode_dataset, encode_record, generate, load_dataset, probe_accuracy, Split};
use hrgnn_core::experiment::{
    build_model, gradcheck_model_config, gradcheck_toy, load_splits, metrics_for, multi_seed_run, prepare, run_seed,
    stop_words, PreparedData, TrainReport,
};
use hrgnn_core::graph::{uniform_edge_weights, QaGraph};
use hrgnn_core::metrics::{AggregateReport, MetricsReport};
use hrgnn_core::model::{Ablation, Hrgnn};
use hrgnn_core::numerics::Tensor;
use hrgnn_core::text::Vocabulary;
use hrgnn_core::Error;
use serde::Serialize;
use serde_json::Value;

use crate::{AblationFlags, Command, ConfigArg};

pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => 2,
            Error::CheckpointMismatch(_) => 5,
            Error::Diverged { .. } | Error::Numerics(_) => 4,
            _ => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn config_failure(e: Error) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

impl AblationFlags {
    fn is_empty(&self) -> bool {
        !self.no_rgcn && !self.no_rgat && self.remove_relation.is_empty()
    }

    fn apply(&self, a: &mut Ablation) {
        if self.no_rgcn {
            a.use_rgcn = false;
        }
        if self.no_rgat {
            a.use_rgat = false;
        }
        a.removed_relations.extend(self.remove_relation.iter().copied());
    }
}

fn load_config(arg: &ConfigArg, flags: &AblationFlags) -> CliResult<RunConfig> {
    let mut run = match &arg.config {
        Some(path) => RunConfig::load(path).map_err(config_failure)?,
        None => RunConfig::default(),
    };
    run.apply_seed_env().map_err(config_failure)?;
    flags.apply(&mut run.ablation);
    run.validate().map_err(config_failure)?;
    Ok(run)
}

fn write(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure {
            code: 3,
            message: format!("{}: {e}", dir.display()),
        })?;
    }
    fs::write(path, text).map_err(|e| Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable output");
    s.push('\n');
    s
}

fn emit<T: Serialize>(json: bool, value: &T, human: impl FnOnce() -> String) {
    if json {
        print!("{}", to_json(value));
    } else {
        print!("{}", human());
    }
}

fn metrics_table(r: &MetricsReport) -> String {
    let mut s = format!(
        "n {}  tp {}  fp {}  fn {}  tn {}\nprecision {:.4}\nrecall    {:.4}\nf1        {:.4}\naccuracy  {:.4}\nccc       {:.4}\n",
        r.n, r.tp, r.fp, r.fn_, r.tn, r.precision, r.recall, r.f1, r.accuracy, r.ccc
    );
    if let Some(c) = r.ccc_probability {
        s += &format!("ccc(prob) {c:.4}\n");
    }
    if !r.undefined.is_empty() {
        s += &format!("undefined (reported as 0): {}\n", r.undefined.join(", "));
    }
    s
}

fn aggregate_table(agg: &AggregateReport) -> String {
    let mut s = format!("{:>6} {:>9} {:>9} {:>9} {:>9} {:>9}\n", "seed", "P", "R", "F1", "ACC", "CCC");
    for run in &agg.runs {
        match &run.report {
            Some(r) => {
                s += &format!(
                    "{:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
                    run.seed, r.precision, r.recall, r.f1, r.accuracy, r.ccc
                )
            }
            None => s += &format!("{:>6} aborted: {}\n", run.seed, run.error.as_deref().unwrap_or("")),
        }
    }
    for (name, m) in [("mean", &agg.mean), ("std", &agg.std)] {
        s += &format!(
            "{:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
            name, m.precision, m.recall, m.f1, m.accuracy, m.ccc
        );
    }
    s
}

pub fn run(command: Command, json: bool) -> CliResult {
    match command {
        Command::GenData { config, out } => gen_data(&config, &out, json),
        Command::Train {
            config,
            ablation,
            out,
            seed,
            epochs,
        } => train(&config, &ablation, &out, seed, epochs, json),
        Command::Eval {
            checkpoint,
            config,
            ablation,
            split,
        } => eval(&checkpoint, &config, &ablation, split, json),
        Command::Predict { checkpoint, input } => predict(&checkpoint, &input, json),
        Command::Gradcheck {
            config,
            ablation,
            eps,
            tolerance,
        } => gradcheck(&config, &ablation, eps, tolerance, json),
        Command::GraphDump {
            config,
            ablation,
            checkpoint,
            interview,
            session,
            split,
            questions,
            answers,
        } => {
            let run = load_config(&config, &ablation)?;
            let (graph, weights) = match (questions, answers) {
                (Some(q), Some(a)) => {
                    let m = run.model_config();
                    let g = QaGraph::build(q, a, m.past_window, m.future_window, &m.ablation.removed_relations)?;
                    let w = uniform_edge_weights(&g);
                    (g, w)
                }
                _ => {
                    let id = interview.ok_or_else(|| Failure {
                        code: 2,
                        message: "give --interview, or --questions with --answers".into(),
                    })?;
                    let explicit = config.config.is_some() || !ablation.is_empty();
                    session_graph(&run, explicit, checkpoint.as_deref(), &id, session, split)?
                }
            };
            graph_dump(&graph, &weights, json);
            Ok(())
        }
        Command::Multiseed {
            config,
            ablation,
            seeds,
            out,
        } => multiseed(&config, &ablation, seeds, out.as_deref(), json),
        Command::Sweep { config, ablation, out } => sweep(&config, &ablation, out.as_deref(), json),
    }
}

#[derive(Serialize)]
struct GenDataOutput {
    manifest: String,
    train: usize,
    validation: usize,
    test: usize,
    probe_accuracy: f64,
}

fn gen_data(config: &ConfigArg, out: &Path, json: bool) -> CliResult {
    let run = load_config(config, &AblationFlags::default())?;
    let spec = &run.data.generator;
    let corpus = generate(spec).map_err(config_failure)?;
    fs::create_dir_all(out).map_err(|e| Failure {
        code: 3,
        message: format!("{}: {e}", out.display()),
    })?;
    let manifest = corpus.write(out)?;
    let o = GenDataOutput {
        manifest: manifest.display().to_string(),
        train: corpus.train.len(),
        validation: corpus.validation.len(),
        test: corpus.test.len(),
        probe_accuracy: probe_accuracy(&corpus, spec.topics),
    };
    emit(json, &o, || {
        format!(
            "wrote {} ({} train, {} validation, {} test interviews)\nlinear probe test accuracy {:.4}\n",
            o.manifest, o.train, o.validation, o.test, o.probe_accuracy
        )
    });
    Ok(())
}

fn train(
    config: &ConfigArg,
    flags: &AblationFlags,
    out: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
    json: bool,
) -> CliResult {
    let mut run = load_config(config, flags)?;
    if let Some(s) = seed {
        run.training.seed = s;
    }
    if let Some(e) = epochs {
        run.training.epochs = e;
    }
    run.validate().map_err(config_failure)?;
    let data = prepare(&run.data)?;
    let (checkpoint, report) = run_seed(&run, &data, run.training.seed)?;
    checkpoint.save(&out.join("checkpoint.bin"))?;
    write(&out.join("report.json"), &to_json(&report))?;
    emit(json, &report, || train_summary(&report));
    Ok(())
}

fn train_summary(report: &TrainReport) -> String {
    let mut s = format!("{:>5} {:>10} {:>10} {:>10} {:>8}\n", "epoch", "lr", "train", "val loss", "val acc");
    for e in &report.epochs {
        s += &format!(
            "{:>5} {:>10.6} {:>10.4} {:>10.4} {:>8.4}\n",
            e.epoch, e.learning_rate, e.train_loss, e.validation_loss, e.validation_accuracy
        );
    }
    s += &format!("best epoch {} (seed {})\ntest:\n", report.best_epoch, report.seed);
    s + &metrics_table(&report.test)
}

/// Loads a checkpoint and, when the caller named a configuration, checks
/// that it matches.
fn checkpoint_for(path: &Path, run: &RunConfig, explicit: bool) -> CliResult<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if explicit {
        ckpt.ensure_compatible(&run.model_config(), &run.data.text)?;
    }
    Ok(ckpt)
}

fn eval(path: &Path, config: &ConfigArg, flags: &AblationFlags, split: Split, json: bool) -> CliResult {
    let run = load_config(config, flags)?;
    let ckpt = checkpoint_for(path, &run, config.config.is_some() || !flags.is_empty())?;
    let raw = load_splits(&run.data)?;
    let stop = stop_words(&run.data)?;
    let (encoded, _) = encode_dataset(raw.split(split), &ckpt.vocab, &stop, &ckpt.text)?;
    let report = metrics_for(&ckpt.model, &encoded, None)?;
    emit(json, &report, || metrics_table(&report));
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    id: String,
    probabilities: [f64; 2],
    predicted: u8,
}

fn predict(path: &Path, input: &Path, json: bool) -> CliResult {
    let ckpt = Checkpoint::load(path)?;
    let loaded = load_dataset(input)?;
    let stop = stop_words(&DataSection::default())?;
    let (encoded, _) = encode_dataset(&loaded.records, &ckpt.vocab, &stop, &ckpt.text)?;
    let probs = ckpt.model.predict(&encoded)?;
    let out: Vec<Prediction> = encoded
        .iter()
        .zip(probs)
        .map(|(iv, p)| Prediction {
            id: iv.id.clone(),
            probabilities: p,
            predicted: u8::from(p[1] > p[0]),
        })
        .collect();
    emit(json, &out, || {
        out.iter()
            .map(|p| format!("{}\t{:.6}\t{:.6}\t{}\n", p.id, p.probabilities[0], p.probabilities[1], p.predicted))
            .collect()
    });
    Ok(())
}

fn gradcheck(config: &ConfigArg, flags: &AblationFlags, eps: f64, tolerance: f64, json: bool) -> CliResult {
    let run = load_config(config, flags)?;
    let mut model = if config.config.is_some() {
        run.model_config()
    } else {
        gradcheck_model_config()
    };
    model.ablation = run.ablation.clone();
    let report = gradcheck_toy(model, run.training.seed, eps)?;
    emit(json, &report, || {
        format!(
            "max relative error {:.3e} over {} scalars in {} parameters (eps {:e})\n",
            report.max_relative_error, report.scalars, report.parameters, report.eps
        )
    });
    if report.max_relative_error < tolerance {
        Ok(())
    } else {
        Err(Failure {
            code: 4,
            message: format!(
                "max relative error {:.3e} is not below {tolerance:e}",
                report.max_relative_error
            ),
        })
    }
}

fn session_graph(
    run: &RunConfig,
    explicit: bool,
    checkpoint: Option<&Path>,
    id: &str,
    session: usize,
    split: Split,
) -> CliResult<(QaGraph, Tensor)> {
    let raw = load_splits(&run.data)?;
    let record = raw.split(split).iter().find(|r| r.id == id).ok_or_else(|| Failure {
        code: 3,
        message: format!("no interview `{id}` in the {split:?} split"),
    })?;
    let stop = stop_words(&run.data)?;
    let (model, vocab, text): (Hrgnn, Vocabulary, _) = match checkpoint {
        Some(path) => {
            let c = checkpoint_for(path, run, explicit)?;
            (c.model, c.vocab, c.text)
        }
        None => {
            let PreparedData { vocab, .. } = prepare(&run.data)?;
            (build_model(run, &vocab, run.training.seed)?, vocab, run.data.text.clone())
        }
    };
    let encoded = encode_record(record, &vocab, &stop, &text)?;
    let s = session
        .checked_sub(1)
        .and_then(|k| encoded.sessions.get(k))
        .ok_or_else(|| Failure {
            code: 3,
            message: format!("interview `{id}` has {} usable session(s)", encoded.sessions.len()),
        })?;
    Ok(model.session_edge_weights(s)?)
}

#[derive(Serialize)]
struct EdgeOut {
    target: usize,
    source: usize,
    relation: String,
    weight: f64,
}

#[derive(Serialize)]
struct GraphOut {
    questions: usize,
    answers: usize,
    past: usize,
    future: usize,
    edges: Vec<EdgeOut>,
}

fn graph_dump(graph: &QaGraph, weights: &Tensor, json: bool) {
    let out = GraphOut {
        questions: graph.questions,
        answers: graph.answers,
        past: graph.past,
        future: graph.future,
        edges: graph
            .edges
            .iter()
            .map(|e| EdgeOut {
                target: e.target + 1,
                source: e.source + 1,
                relation: e.relation.to_string(),
                weight: weights.get(e.target, e.source),
            })
            .collect(),
    };
    emit(json, &out, || graph.dump(weights));
}

fn multiseed(
    config: &ConfigArg,
    flags: &AblationFlags,
    seeds: Option<Vec<u64>>,
    out: Option<&Path>,
    json: bool,
) -> CliResult {
    let run = load_config(config, flags)?;
    let seeds = seeds.unwrap_or_else(|| run.training.seeds.clone());
    let data = prepare(&run.data)?;
    let agg = multi_seed_run(&run, &data, &seeds)?;
    if let Some(dir) = out {
        write(&dir.join("report.json"), &to_json(&agg))?;
        write(&dir.join("report.csv"), &agg.to_csv())?;
    }
    emit(json, &agg, || aggregate_table(&agg));
    if agg.completed == 0 {
        return Err(Failure {
            code: 4,
            message: "every seed run aborted".into(),
        });
    }
    if agg.is_partial() {
        log::warn!("{} of {} seed runs aborted", agg.runs.len() - agg.completed, agg.runs.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepPoint {
    point: BTreeMap<String, Value>,
    seed: u64,
    best_epoch: usize,
    validation_accuracy: f64,
    test: MetricsReport,
}

fn sweep(config: &ConfigArg, flags: &AblationFlags, out: Option<&Path>, json: bool) -> CliResult {
    let run = load_config(config, flags)?;
    let grid = run.grid().map_err(config_failure)?;
    let mut cached: Option<(DataSection, PreparedData)> = None;
    let mut results = Vec::with_capacity(grid.len());
    for (point, cfg) in grid {
        let data = match &cached {
            Some((section, data)) if *section == cfg.data => data,
            _ => &cached.insert((cfg.data.clone(), prepare(&cfg.data)?)).1,
        };
        let (_, report) = run_seed(&cfg, data, cfg.training.seed)?;
        log::info!("{point:?}: validation accuracy {:.4}", report.validation.accuracy);
        results.push(SweepPoint {
            point,
            seed: cfg.training.seed,
            best_epoch: report.best_epoch,
            validation_accuracy: report.validation.accuracy,
            test: report.test,
        });
    }
    if let Some(dir) = out {
        write(&dir.join("sweep.json"), &to_json(&results))?;
    }
    emit(json, &results, || {
        results
            .iter()
            .map(|r| {
                let point: Vec<String> = r.point.iter().map(|(k, v)| format!("{k}={v}")).collect();
                format!(
                    "{}\tvalidation {:.4}\ttest {:.4}\n",
                    if point.is_empty() { "(base)".into() } else { point.join(" ") },
                    r.validation_accuracy,
                    r.test.accuracy
                )
            })
            .collect()
    });
    Ok(())
}
