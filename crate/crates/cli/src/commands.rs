//! The six batch commands. Every command dumps its resolved configuration
//! next to its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use skdf::checkpoint::Checkpoint;
use skdf::data::{dataset_stats, write_json, Dataset, DatasetFile, DatasetStats, SceneRecord, TaskSplit};
use skdf::eval::{detect_scenes, evaluate, match_detections, pr_curve, render_table, GtBox, MetricsReport};
use skdf::model::Detector;
use skdf::supervision::{teacher_to_json, UNKNOWN_NAME};
use skdf::trainer::TrainLog;

use crate::ablate::{self, AblationReport, AblationRow};
use crate::config::RunConfig;
use crate::pipeline::{self, version};
use crate::{plot, read_file, write_file, CliError};

/// Where `command` dumps its resolved configuration inside `dir`.
pub fn resolved_config_path(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("resolved_{command}.toml"))
}

pub fn dump_config(cfg: &RunConfig, dir: &Path, command: &str) -> Result<(), CliError> {
    let text = format!("# skdf {} seed={}\n{}", version(), cfg.seed, cfg.to_toml());
    write_file(&resolved_config_path(dir, command), text)
}

fn header(cfg: &RunConfig, extra: Value) -> Value {
    let mut h = json!({ "version": version(), "seed": cfg.seed });
    if let (Some(h), Value::Object(e)) = (h.as_object_mut(), extra) {
        h.extend(e);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub task: usize,
    pub train: DatasetStats,
    pub test: DatasetStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub version: String,
    pub seed: u64,
    pub tasks: Vec<TaskStats>,
}

fn task_stats(ds: &Dataset, split: &TaskSplit) -> Vec<TaskStats> {
    (0..split.tasks.len())
        .map(|t| TaskStats {
            task: t + 1,
            train: dataset_stats(ds, Some(&split.tasks[t].train_scenes), split.known(t)),
            test: dataset_stats(ds, Some(&split.tasks[t].test_scenes), split.known(t)),
        })
        .collect()
}

/// Writes the dataset, split, per-task training annotations and statistics
/// to `data_dir`.
pub fn generate_data(cfg: &RunConfig) -> Result<(), CliError> {
    let (ds, split) = pipeline::generate(cfg)?;
    pipeline::save_data(cfg, &ds, &split)?;
    let index = ds.index();
    for t in 0..split.tasks.len() {
        let current = split.current(t);
        let file = DatasetFile {
            version: Some(version()),
            seed: Some(cfg.seed),
            categories: ds.categories.clone(),
            scenes: split.tasks[t]
                .train_scenes
                .iter()
                .map(|id| SceneRecord {
                    scene_id: id.clone(),
                    image_path: format!("images/{id}.png"),
                    instances: index[id.as_str()].instances.iter().filter(|i| current.contains(&i.category)).cloned().collect(),
                })
                .collect(),
        };
        write_json(&cfg.data_dir.join(format!("train_task{}.json", t + 1)), &file)?;
    }
    let stats = StatsFile {
        version: version(),
        seed: cfg.seed,
        tasks: task_stats(&ds, &split),
    };
    write_json(&cfg.data_dir.join("stats.json"), &stats)?;
    dump_config(cfg, &cfg.data_dir, "generate-data")
}

/// Precomputes oracle teacher detections for every scene.
pub fn distill_labels(cfg: &RunConfig) -> Result<(), CliError> {
    let (ds, _) = pipeline::load_data(cfg)?;
    let dets = pipeline::oracle_detections(&ds, cfg, cfg.seed);
    let extra: BTreeMap<String, Value> = [("version".to_string(), json!(version())), ("seed".to_string(), json!(cfg.seed))].into();
    write_file(&cfg.out_dir.join("teacher.json"), teacher_to_json(&dets, &extra))?;
    dump_config(cfg, &cfg.out_dir, "distill-labels")
}

pub fn checkpoint_path(out: &Path, task: usize) -> PathBuf {
    out.join(format!("model_task{task}.ckpt"))
}

/// Trains tasks `1..=cfg.task`, writing a checkpoint and a log per task.
pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let (ds, split) = pipeline::load_data(cfg)?;
    let map = pipeline::alignment(cfg, &ds)?;
    let teacher = pipeline::teacher(cfg, &ds, cfg.teacher, cfg.seed)?;
    let runs = pipeline::run_tasks(cfg, &ds, &split, &teacher, &map)?;
    for (t, run) in runs.iter().enumerate() {
        let task = t + 1;
        let ck = run.model.to_checkpoint(header(cfg, json!({ "task": task })));
        write_file(&checkpoint_path(&cfg.out_dir, task), ck.to_bytes())?;
        write_file(&cfg.out_dir.join(format!("train_log_task{task}.csv")), run.log.to_csv(&version(), cfg.seed))?;
        if let Some(store) = &run.exemplars {
            let body = json!({ "version": version(), "seed": cfg.seed, "exemplars": store });
            write_file(&cfg.out_dir.join(format!("exemplars_task{task}.json")), serde_json::to_string_pretty(&body).expect("json") + "\n")?;
        }
    }
    dump_config(cfg, &cfg.out_dir, "train")
}

pub fn load_checkpoint(path: &Path) -> Result<Detector, CliError> {
    let ck = Checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Detector::from_checkpoint(&ck).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurves {
    pub version: String,
    pub seed: u64,
    pub task: usize,
    /// Category name to `(recall, precision)` points.
    pub curves: BTreeMap<String, Vec<(f64, f64)>>,
}

/// Scores the task checkpoint on the test scenes.
pub fn eval(cfg: &RunConfig) -> Result<MetricsReport, CliError> {
    let (ds, split) = pipeline::load_data(cfg)?;
    let t = cfg.task - 1;
    let model = load_checkpoint(&checkpoint_path(&cfg.out_dir, cfg.task))?;
    if model.config.num_known != split.known(t).len() {
        return Err(CliError::Data(format!(
            "{}: classifier has {} known channels, task {} knows {}",
            checkpoint_path(&cfg.out_dir, cfg.task).display(),
            model.config.num_known,
            cfg.task,
            split.known(t).len()
        )));
    }
    let index = ds.index();
    let scenes: Vec<_> = split.tasks[t].test_scenes.iter().map(|id| index[id.as_str()]).collect();
    let dets = detect_scenes(&model, &scenes, split.known(t), &cfg.eval.inference).map_err(|e| CliError::Abort(e.to_string()))?;
    let gts: Vec<(&str, &[skdf::data::Instance])> = scenes.iter().map(|s| (s.scene_id.as_str(), s.instances.as_slice())).collect();
    let report = evaluate(&dets, &gts, &split, t, &cfg.eval, (&version(), Some(cfg.seed)));

    let known = split.known(t);
    let mut curves = BTreeMap::new();
    for name in known.iter().map(String::as_str).chain([UNKNOWN_NAME]) {
        let d: Vec<_> = dets.iter().filter(|d| d.category == name).map(|d| (d.scene_id.as_str(), d.bbox, d.score)).collect();
        let g: Vec<GtBox> = scenes
            .iter()
            .flat_map(|s| {
                s.instances
                    .iter()
                    .filter(|i| if name == UNKNOWN_NAME { !known.contains(&i.category) } else { i.category == name })
                    .map(|i| GtBox {
                        scene_id: s.scene_id.as_str(),
                        bbox: i.bbox,
                    })
            })
            .collect();
        curves.insert(name.to_string(), pr_curve(&match_detections(&d, &g, cfg.eval.iou_threshold)));
    }
    let pr = PrCurves {
        version: version(),
        seed: cfg.seed,
        task: cfg.task,
        curves,
    };
    write_json(&cfg.out_dir.join(format!("pr_task{}.json", cfg.task)), &pr)?;
    write_json(&cfg.out_dir.join(format!("metrics_task{}.json", cfg.task)), &report)?;
    let text = format!("# skdf {} seed={}\n{}", version(), cfg.seed, render_table(std::slice::from_ref(&report)));
    write_file(&cfg.out_dir.join(format!("metrics_task{}.txt", cfg.task)), text)?;
    dump_config(cfg, &cfg.out_dir, &format!("eval_task{}", cfg.task))?;
    Ok(report)
}

/// Runs the variant grid over the configured seeds on task 1.
pub fn ablate(cfg: &RunConfig, only: Option<&str>) -> Result<AblationReport, CliError> {
    let variants: Vec<String> = match only {
        Some(v) => vec![v.to_string()],
        None => cfg.ablate.variants.clone(),
    };
    for v in &variants {
        ablate::switches(v)?;
    }
    let (ds, split) = pipeline::load_data(cfg)?;
    let map = pipeline::alignment(cfg, &ds)?;
    let mut rows = Vec::new();
    for &seed in &cfg.ablate.seeds {
        for v in &variants {
            let vc = ablate::apply(cfg, v, seed)?;
            let teacher = pipeline::teacher(&vc, &ds, vc.teacher, seed)?;
            let run = pipeline::run_first_task(&vc, &ds, &split, &teacher, &map)?;
            write_file(&cfg.out_dir.join(format!("ablation_{v}_seed{seed}.csv")), run.log.to_csv(&version(), seed))?;
            let report = pipeline::evaluate_model(&run.model, &ds, &split, 0, &vc)?;
            rows.push(AblationRow::from_report(v, seed, &report));
        }
    }
    let report = AblationReport {
        version: version(),
        data_seed: split.seed,
        seeds: cfg.ablate.seeds.clone(),
        rows,
    };
    write_json(&cfg.out_dir.join("ablation.json"), &report)?;
    let text = format!("# skdf {} seeds={:?} data_seed={:?}\n{}", version(), report.seeds, report.data_seed, report.table());
    write_file(&cfg.out_dir.join("ablation.txt"), text)?;
    dump_config(cfg, &cfg.out_dir, "ablate")?;
    Ok(report)
}

/// Parses a training log written by [`TrainLog::to_csv`] into
/// `(iteration, [losses..., total])` rows.
pub fn parse_log(text: &str) -> Result<Vec<(f64, Vec<f64>)>, String> {
    let mut rows = Vec::new();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    match lines.next() {
        Some(h) if h == TrainLog::HEADER => {}
        _ => return Err("missing training log header".into()),
    }
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 14 {
            return Err(format!("line {}: expected 14 columns", n + 3));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("line {}: {e}", n + 3));
        let it = num(cells[0])?;
        let vals = cells[2..10].iter().map(|c| num(c)).collect::<Result<Vec<_>, _>>()?;
        rows.push((it, vals));
    }
    Ok(rows)
}

fn sorted_matches(dir: &Path, prefix: &str, suffix: &str) -> Vec<(usize, PathBuf)> {
    let mut out: Vec<(usize, PathBuf)> = std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            let t = name.strip_prefix(prefix)?.strip_suffix(suffix)?.parse().ok()?;
            Some((t, e.path()))
        })
        .collect();
    out.sort();
    out
}

/// Renders loss curves, metric bars, PR curves and dataset histograms found
/// in the output and data directories. Returns the written files.
pub fn report(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let plots = cfg.out_dir.join("plots");
    let mut written = Vec::new();
    for (t, path) in sorted_matches(&cfg.out_dir, "train_log_task", ".csv") {
        let rows = parse_log(&read_file(&path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let series: Vec<Vec<(f64, f64)>> = (0..8).map(|k| rows.iter().map(|(i, v)| (*i, v[k])).collect()).collect();
        let p = plots.join(format!("loss_task{t}.png"));
        plot::lines(&p, &series, None)?;
        written.push(p);
    }
    let mut groups = Vec::new();
    for (_, path) in sorted_matches(&cfg.out_dir, "metrics_task", ".json") {
        let r: MetricsReport = serde_json::from_str(&read_file(&path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        groups.push(
            [r.unknown.u_recall, r.map_previous, r.map_current, r.map_both, r.unknown.precision, r.unknown.ap]
                .iter()
                .map(|v| v.unwrap_or(0.0))
                .collect(),
        );
    }
    if !groups.is_empty() {
        let p = plots.join("metrics.png");
        plot::bars(&p, &groups)?;
        written.push(p);
    }
    for (t, path) in sorted_matches(&cfg.out_dir, "pr_task", ".json") {
        let pr: PrCurves = serde_json::from_str(&read_file(&path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let series: Vec<Vec<(f64, f64)>> = pr.curves.values().cloned().collect();
        let p = plots.join(format!("pr_task{t}.png"));
        plot::lines(&p, &series, Some(((0.0, 1.0), (0.0, 1.0))))?;
        written.push(p);
    }
    let stats_path = cfg.data_dir.join("stats.json");
    if stats_path.exists() {
        let stats: StatsFile = serde_json::from_str(&read_file(&stats_path)?).map_err(|e| CliError::Data(format!("{}: {e}", stats_path.display())))?;
        for ts in &stats.tasks {
            for (name, st) in [("train", &ts.train), ("test", &ts.test)] {
                let p = plots.join(format!("area_{name}_task{}.png", ts.task));
                plot::bars(&p, &st.area.log_counts.iter().map(|&v| vec![v]).collect::<Vec<_>>())?;
                written.push(p);
                let p = plots.join(format!("aspect_{name}_task{}.png", ts.task));
                plot::bars(&p, &st.aspect_ratio.log_counts.iter().map(|&v| vec![v]).collect::<Vec<_>>())?;
                written.push(p);
                let p = plots.join(format!("centers_{name}_task{}.png", ts.task));
                plot::heatmap(&p, &st.centers)?;
                written.push(p);
            }
        }
    }
    dump_config(cfg, &cfg.out_dir, "report")?;
    Ok(written)
}
