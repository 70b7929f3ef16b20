use std::path::{Path, PathBuf};

use gnflow_core::dynamics::{
    apply_missingness, sample_dataset, split_indices, write_dataset, SystemKind, SystemSpec, Trajectory,
};
use gnflow_core::flows::{read_checkpoint, write_checkpoint, FlowConfig};
use gnflow_core::graphs::{graph_metrics, random_dag, DagMatrix, GraphMetrics};
use gnflow_core::training::{
    evaluate_forecast, history_csv, perturbation_run, run_experiment, study_csv, timing_benchmark, timing_csv,
    Experiment, ExperimentConfig, GraphMode, StudyRow,
};
use gnflow_core::Error;

use crate::args::{BenchArgs, Command, EvalArgs, GenerateArgs, Subset, StudyArgs, SystemArg, TrainArgs};
use crate::config::{build_config, create_dir, env_seed, load_data, metrics_text, read_text, write_text};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::pool::fan_out;

pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const DAG_FILE: &str = "learned_dag.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const STUDY_FILE: &str = "study.csv";
pub const TIMING_FILE: &str = "timing.csv";

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Study(a) => study(a),
        Command::Bench(a) => bench(a),
    }
}

fn generate(a: GenerateArgs) -> CliResult<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let kind = match a.system {
        SystemArg::Sink => SystemKind::Sink,
        SystemArg::Triangle => SystemKind::Triangle,
        SystemArg::Sawtooth => SystemKind::Sawtooth,
        SystemArg::Square => SystemKind::Square,
    };
    let dag = random_dag(a.nodes, a.density, seed)?;
    let spec = SystemSpec::new(kind, dag)?;
    let mut batch = sample_dataset(&spec, a.samples, a.times, seed)?;
    if a.missing > 0.0 {
        apply_missingness(&mut batch, a.missing, seed)?;
    }
    let dag_path = a.dag.unwrap_or_else(|| sibling(&a.out, ".dag.csv"));
    write_text(&a.out, &write_dataset(&batch))?;
    write_text(&dag_path, &batch.adjacency.to_csv())?;
    println!("wrote {} and {}", a.out.display(), dag_path.display());
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn metric_pairs(m: &GraphMetrics) -> Vec<(&'static str, String)> {
    vec![
        ("tpr", m.tpr.to_string()),
        ("fdr", m.fdr.to_string()),
        ("fpr", m.fpr.to_string()),
        ("shd", m.shd.to_string()),
    ]
}

/// Experiment settings that are not part of the flow's own configuration,
/// stored alongside it in the checkpoint.
fn checkpoint_extras(config: &ExperimentConfig) -> Vec<(String, String)> {
    let flow_keys: Vec<&str> = config.flow.to_pairs().into_iter().map(|(k, _)| k).collect();
    config
        .to_pairs()
        .into_iter()
        .filter(|(k, _)| !flow_keys.contains(k))
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

/// Writes history, checkpoint, learned graph, and metrics for one run.
fn write_run(dir: &Path, exp: &Experiment) -> CliResult<()> {
    write_text(&dir.join(HISTORY_FILE), &history_csv(&exp.report.history))?;
    write_text(&dir.join(CHECKPOINT_FILE), &write_checkpoint(&exp.model, &checkpoint_extras(&exp.config)))?;
    let r = &exp.report;
    let mut pairs = vec![
        ("test_mse", exp.test_mse.to_string()),
        ("test_samples", exp.split.test.len().to_string()),
        ("best_val", r.best_val.to_string()),
        ("outer_iterations", r.outer_iterations.to_string()),
        ("converged", r.converged.to_string()),
        ("seconds_per_epoch", r.seconds_per_epoch().to_string()),
    ];
    if let Some(h) = r.final_h {
        pairs.push(("final_h", h.to_string()));
    }
    if let Some((a, m)) = &exp.learned {
        write_text(&dir.join(DAG_FILE), &a.to_csv())?;
        pairs.push(("threshold", exp.config.edge_threshold.to_string()));
        pairs.extend(metric_pairs(m));
    }
    write_text(&dir.join(METRICS_FILE), &metrics_text(&pairs))
}

/// Keeps the partial history of a diverged run before reporting it.
fn record_failure(dir: &Path, manifest: &mut RunManifest, e: Error) -> CliError {
    if let Error::Diverged { history, .. } = &e {
        let _ = write_text(&dir.join(HISTORY_FILE), &history_csv(history));
    }
    let err = CliError::from(e);
    let _ = manifest.finish(dir, &format!("failed: {err}"));
    err
}

fn train(a: TrainArgs) -> CliResult<()> {
    let data = load_data(&a.data)?;
    let config = build_config(&a.flags, &data, a.graph.map(Into::into))?;
    create_dir(&a.out)?;
    let mut manifest = RunManifest::start("train", &a.data, &a.out, &config);
    manifest.write(&a.out)?;
    let exp = run_experiment(&config, &data).map_err(|e| record_failure(&a.out, &mut manifest, e))?;
    write_run(&a.out, &exp)?;
    if exp.report.final_h.is_some() && !exp.report.converged {
        log::warn!("the learned graph did not meet the acyclicity tolerance");
    }
    manifest.finish(&a.out, "ok")?;
    println!(
        "test_mse {} after {} epochs; outputs in {}",
        exp.test_mse,
        exp.report.history.len(),
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    if !(a.threshold >= 0.0 && a.threshold.is_finite()) {
        return Err(CliError::Usage(format!("--threshold must be a non-negative number, got {}", a.threshold)));
    }
    let (model, extras) =
        read_checkpoint(&read_text(&a.checkpoint)?).map_err(|e| CliError::data(a.checkpoint.display(), e))?;
    let data = load_data(&a.data)?;
    let FlowConfig { arch, nodes, features, .. } = *model.config();
    if (nodes, features) != (data.n, data.d) {
        return Err(CliError::Data(format!(
            "checkpoint expects {nodes} nodes × {features} features, data has {} × {}",
            data.n, data.d
        )));
    }
    let indices: Vec<usize> = match a.subset {
        Subset::All => (0..data.len()).collect(),
        Subset::Test => {
            if !extras.iter().any(|(k, _)| k == "split_seed") {
                return Err(CliError::Usage("checkpoint records no split; use --subset all".into()));
            }
            let mut c = ExperimentConfig::new(arch, nodes, features);
            for (k, v) in &extras {
                c.set(k, v).map_err(|e| CliError::data(a.checkpoint.display(), e))?;
            }
            split_indices(data.len(), c.split, c.split_seed)?.test
        }
    };
    let samples: Vec<&Trajectory> = indices.iter().map(|&i| &data.samples[i]).collect();
    let mse = evaluate_forecast(&model, &samples)?;

    let subset = match a.subset {
        Subset::Test => "test",
        Subset::All => "all",
    };
    let mut pairs = vec![
        ("mse", mse.to_string()),
        ("samples", samples.len().to_string()),
        ("subset", subset.to_string()),
        ("threshold", a.threshold.to_string()),
    ];
    if let Some(path) = &a.truth {
        let truth = DagMatrix::from_csv(&read_text(path)?).map_err(|e| CliError::data(path.display(), e))?;
        // A model without a graph branch claims no edges.
        let learned = match model.adjacency() {
            Some(adj) => adj,
            None => DagMatrix::zeros(truth.n()),
        };
        if learned.n() != truth.n() {
            return Err(CliError::Data(format!("{}: {} nodes, model has {}", path.display(), truth.n(), learned.n())));
        }
        pairs.extend(metric_pairs(&graph_metrics(&learned, &truth, a.threshold)?));
    }
    let text = metrics_text(&pairs);
    if let Some(out) = &a.out {
        write_text(out, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn study(a: StudyArgs) -> CliResult<()> {
    if a.sigmas.is_empty() || a.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(CliError::Usage("--sigmas must be non-negative numbers".into()));
    }
    let jobs = jobs_or_default(a.jobs)?;
    let data = load_data(&a.data)?;
    let config = build_config(&a.flags, &data, Some(GraphMode::Learned))?;
    let seeds = if a.seeds.is_empty() { vec![config.model_seed] } else { a.seeds.clone() };
    create_dir(&a.out)?;
    let mut manifest = RunManifest::start("study", &a.data, &a.out, &config);
    manifest.write(&a.out)?;

    let tasks: Vec<(f64, u64)> = a.sigmas.iter().flat_map(|&s| seeds.iter().map(move |&k| (s, k))).collect();
    let results = fan_out(jobs, &tasks, |&(sigma, seed)| -> CliResult<StudyRow> {
        let dir = a.out.join(format!("sigma-{sigma}-seed-{seed}"));
        create_dir(&dir)?;
        let cfg = config.clone().with_seed(seed);
        let (row, exp) = perturbation_run(&cfg, &data, sigma, seed)?;
        write_run(&dir, &exp)?;
        Ok(row)
    });
    let rows = match results.into_iter().collect::<CliResult<Vec<_>>>() {
        Ok(rows) => rows,
        Err(e) => {
            let _ = manifest.finish(&a.out, &format!("failed: {e}"));
            return Err(e);
        }
    };
    write_text(&a.out.join(STUDY_FILE), &study_csv(&rows))?;
    manifest.finish(&a.out, "ok")?;
    println!("{} runs; table in {}", rows.len(), a.out.join(STUDY_FILE).display());
    Ok(())
}

fn jobs_or_default(jobs: Option<usize>) -> CliResult<usize> {
    match jobs {
        Some(0) => Err(CliError::Usage("--jobs must be positive".into())),
        Some(j) => Ok(j),
        None => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Epoch budget when neither flags nor the config file choose one.
const BENCH_EPOCHS: usize = 5;

fn bench(a: BenchArgs) -> CliResult<()> {
    jobs_or_default(Some(a.jobs))?;
    if a.archs.is_empty() {
        return Err(CliError::Usage("--archs must list at least one architecture".into()));
    }
    let data = load_data(&a.data)?;
    let mut flags = a.flags.clone();
    if flags.epochs.is_none() && flags.config.is_none() {
        flags.epochs = Some(BENCH_EPOCHS);
    }
    let config = build_config(&flags, &data, None)?;
    let epochs = config.train.epochs;
    create_dir(&a.out)?;
    let mut manifest = RunManifest::start("bench", &a.data, &a.out, &config);
    manifest.write(&a.out)?;

    let results = fan_out(a.jobs, &a.archs, |&arch| timing_benchmark(&config, &data, &[arch.into()], epochs));
    let mut rows = Vec::new();
    for r in results {
        match r {
            Ok(mut r) => rows.append(&mut r),
            Err(e) => return Err(record_failure(&a.out, &mut manifest, e)),
        }
    }
    write_text(&a.out.join(TIMING_FILE), &timing_csv(&rows))?;
    manifest.finish(&a.out, "ok")?;
    print!("{}", timing_csv(&rows));
    Ok(())
}
