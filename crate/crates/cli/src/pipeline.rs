//! Shared steps of the commands: data, teacher, training scenes, tasks,
//! evaluation.

use std::collections::BTreeMap;

use skdf::data::{
    derive_seed, generate_range, load_dataset, make_task_split, read_json, save_dataset, write_json, Dataset, Instance, SceneAnnotation, TaskSplit,
};
use skdf::eval::{detect_scenes, evaluate, MetricsReport};
use skdf::model::{patchify, Detector};
use skdf::supervision::{teacher_from_file, teacher_oracle, AlignmentMap, TeacherDetections};
use skdf::trainer::{replay_finetune, select_exemplars, train_new_task, train_task, ExemplarStore, TrainError, TrainLog, TrainScene};

use crate::config::{RunConfig, TeacherMode};
use crate::CliError;

const ORACLE_STREAM: u64 = 0x7EAC_4E55;

pub fn version() -> String {
    skdf::version_string()
}

/// Category groups per task, taken in universe order.
pub fn task_groups(cfg: &RunConfig) -> Vec<Vec<String>> {
    let names = cfg.data.generator.universe.names();
    let mut out = Vec::new();
    let mut start = 0;
    for &n in &cfg.data.task_sizes {
        out.push(names[start..start + n].to_vec());
        start += n;
    }
    out
}

/// Generates the train and test pools in memory and splits them into tasks.
pub fn generate(cfg: &RunConfig) -> Result<(Dataset, TaskSplit), CliError> {
    let n_train = cfg.data.train_scenes;
    let total = n_train + cfg.data.test_scenes;
    let (ds, report) = generate_range(&cfg.data.generator, cfg.seed, 0, total)?;
    if report.regenerated > 0 {
        log::info!("{} scenes redrawn after placement failures", report.regenerated);
    }
    let ids: Vec<String> = ds.scenes.iter().map(|s| s.scene_id.clone()).collect();
    let mut split = make_task_split(&ds.categories, &task_groups(cfg), &ds.scenes, &ids[..n_train], &ids[n_train..])?;
    split.version = Some(version());
    split.seed = Some(cfg.seed);
    Ok((ds, split))
}

pub fn save_data(cfg: &RunConfig, ds: &Dataset, split: &TaskSplit) -> Result<(), CliError> {
    save_dataset(&cfg.data_dir, ds, (&version(), cfg.seed))?;
    write_json(&cfg.data_dir.join("split.json"), split)?;
    Ok(())
}

pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, TaskSplit), CliError> {
    let ds = load_dataset(&cfg.data_dir.join("dataset.json"), cfg.data.generator.image_size)?;
    let split: TaskSplit = read_json(&cfg.data_dir.join("split.json"))?;
    split.validate(&ds.categories)?;
    if split.tasks.len() < cfg.task {
        return Err(CliError::Data(format!("split.json: has {} tasks, task {} requested", split.tasks.len(), cfg.task)));
    }
    let index = ds.index();
    for t in &split.tasks {
        if let Some(missing) = t.train_scenes.iter().chain(&t.test_scenes).find(|id| !index.contains_key(id.as_str())) {
            return Err(CliError::Data(format!("split.json: scene {missing:?} is not in dataset.json")));
        }
    }
    Ok((ds, split))
}

pub fn alignment(cfg: &RunConfig, ds: &Dataset) -> Result<AlignmentMap, CliError> {
    match &cfg.alignment_file {
        Some(p) => AlignmentMap::from_json(&crate::read_file(p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))),
        None => Ok(AlignmentMap::identity(ds.categories.iter().map(String::as_str))),
    }
}

/// Oracle detections for every scene of `ds`, seeded per scene position.
pub fn oracle_detections(ds: &Dataset, cfg: &RunConfig, seed: u64) -> TeacherDetections {
    ds.scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let sd = derive_seed(seed ^ ORACLE_STREAM, i as u64);
            (s.scene_id.clone(), teacher_oracle(&s.instances, &cfg.oracle, sd))
        })
        .collect()
}

/// Teacher detections according to the configured mode.
pub fn teacher(cfg: &RunConfig, ds: &Dataset, mode: TeacherMode, seed: u64) -> Result<TeacherDetections, CliError> {
    match mode {
        TeacherMode::Off => Ok(TeacherDetections::new()),
        TeacherMode::Oracle => Ok(oracle_detections(ds, cfg, seed)),
        TeacherMode::File => {
            let p = cfg.teacher_file.as_ref().ok_or_else(|| CliError::Config("teacher_file: not set".into()))?;
            teacher_from_file(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
        }
    }
}

/// Training annotations visible through task `task` (0-based): each scene
/// carries the categories introduced by the tasks whose pool contains it.
pub fn visible_annotations(ds: &Dataset, split: &TaskSplit, task: usize) -> BTreeMap<String, Vec<Instance>> {
    let index = ds.index();
    let mut out: BTreeMap<String, Vec<Instance>> = BTreeMap::new();
    for t in 0..=task {
        let current = split.current(t);
        for id in &split.tasks[t].train_scenes {
            let scene = index[id.as_str()];
            let entry = out.entry(id.clone()).or_default();
            for inst in &scene.instances {
                if current.contains(&inst.category) && !entry.contains(inst) {
                    entry.push(inst.clone());
                }
            }
        }
    }
    // keep annotation order of the scene
    for (id, insts) in out.iter_mut() {
        let order = &index[id.as_str()].instances;
        insts.sort_by_key(|i| order.iter().position(|o| o == i));
    }
    out
}

fn to_train_scene(
    scene: &SceneAnnotation,
    instances: &[Instance],
    known: &[String],
    teacher: &TeacherDetections,
    map: &AlignmentMap,
    cfg: &RunConfig,
) -> Result<TrainScene, CliError> {
    let patches = patchify(&scene.image, cfg.model.patch_size).map_err(|e| CliError::Data(format!("scene {}: {e}", scene.scene_id)))?;
    let dets = teacher.get(&scene.scene_id).map(Vec::as_slice).unwrap_or(&[]);
    Ok(TrainScene::build(&scene.scene_id, patches, instances, known, dets, map, &cfg.train.supervision))
}

/// Training scenes of task `task` (0-based) with current-task ground truth.
pub fn task_scenes(ds: &Dataset, split: &TaskSplit, task: usize, teacher: &TeacherDetections, map: &AlignmentMap, cfg: &RunConfig) -> Result<Vec<TrainScene>, CliError> {
    let index = ds.index();
    let current = split.current(task);
    split.tasks[task]
        .train_scenes
        .iter()
        .map(|id| {
            let scene = index[id.as_str()];
            let insts: Vec<Instance> = scene.instances.iter().filter(|i| current.contains(&i.category)).cloned().collect();
            to_train_scene(scene, &insts, split.known(task), teacher, map, cfg)
        })
        .collect()
}

/// Exemplar store after task `task` and its fine-tune scenes.
pub fn exemplar_scenes(
    ds: &Dataset,
    split: &TaskSplit,
    task: usize,
    teacher: &TeacherDetections,
    map: &AlignmentMap,
    cfg: &RunConfig,
) -> Result<(ExemplarStore, Vec<TrainScene>), CliError> {
    let visible = visible_annotations(ds, split, task);
    let view: Vec<(&str, &[Instance])> = visible.iter().map(|(id, v)| (id.as_str(), v.as_slice())).collect();
    let known = split.known(task);
    let store = select_exemplars(&view, known, cfg.train.exemplars_per_category);
    for missing in store.missing(known) {
        log::warn!("exemplar store has no scene for {missing:?}");
    }
    let index = ds.index();
    let scenes = store
        .scene_ids()
        .iter()
        .map(|id| to_train_scene(index[id.as_str()], &visible[id], known, teacher, map, cfg))
        .collect::<Result<_, _>>()?;
    Ok((store, scenes))
}

pub fn abort(e: TrainError) -> CliError {
    match e {
        TrainError::Config(m) => CliError::Config(format!("train: {m}")),
        other => CliError::Abort(other.to_string()),
    }
}

/// Output of training one task.
#[derive(Debug, Clone)]
pub struct TaskRun {
    pub model: Detector,
    pub log: TrainLog,
    pub exemplars: Option<ExemplarStore>,
}

/// Trains task 1 from a fresh detector.
pub fn run_first_task(cfg: &RunConfig, ds: &Dataset, split: &TaskSplit, teacher: &TeacherDetections, map: &AlignmentMap) -> Result<TaskRun, CliError> {
    let mut model = Detector::new(cfg.model.clone(), cfg.seed).map_err(|e| CliError::Config(format!("model: {e}")))?;
    let scenes = task_scenes(ds, split, 0, teacher, map, cfg)?;
    let train = skdf::trainer::TrainConfig { seed: cfg.seed, ..cfg.train };
    let log = train_task(&mut model, &scenes, &train).map_err(abort)?;
    Ok(TaskRun { model, log, exemplars: None })
}

/// New-task training of task `task` (0-based, at least 1) from `model`.
pub fn run_new_task(
    cfg: &RunConfig,
    model: &Detector,
    ds: &Dataset,
    split: &TaskSplit,
    task: usize,
    teacher: &TeacherDetections,
    map: &AlignmentMap,
) -> Result<TaskRun, CliError> {
    let mut model = model.clone();
    let scenes = task_scenes(ds, split, task, teacher, map, cfg)?;
    let train = skdf::trainer::TrainConfig { seed: cfg.seed, ..cfg.train };
    let log = train_new_task(&mut model, split.known(task).len(), &scenes, &train).map_err(abort)?;
    Ok(TaskRun { model, log, exemplars: None })
}

/// Exemplar replay after new-task training of task `task`.
pub fn run_replay(
    cfg: &RunConfig,
    run: &TaskRun,
    ds: &Dataset,
    split: &TaskSplit,
    task: usize,
    teacher: &TeacherDetections,
    map: &AlignmentMap,
) -> Result<TaskRun, CliError> {
    let (store, scenes) = exemplar_scenes(ds, split, task, teacher, map, cfg)?;
    let mut model = run.model.clone();
    let train = skdf::trainer::TrainConfig { seed: cfg.seed, ..cfg.train };
    let ft = replay_finetune(&mut model, &scenes, &train).map_err(abort)?;
    let mut log = run.log.clone();
    log.extend(ft);
    Ok(TaskRun {
        model,
        log,
        exemplars: Some(store),
    })
}

/// Trains tasks `1..=cfg.task` in sequence with replay after each increment.
pub fn run_tasks(cfg: &RunConfig, ds: &Dataset, split: &TaskSplit, teacher: &TeacherDetections, map: &AlignmentMap) -> Result<Vec<TaskRun>, CliError> {
    let mut runs = vec![run_first_task(cfg, ds, split, teacher, map)?];
    for t in 1..cfg.task {
        let prev = &runs[t - 1].model;
        let new = run_new_task(cfg, prev, ds, split, t, teacher, map)?;
        runs.push(run_replay(cfg, &new, ds, split, t, teacher, map)?);
    }
    Ok(runs)
}

/// Test-set metrics of `model` at task `task` (0-based).
pub fn evaluate_model(model: &Detector, ds: &Dataset, split: &TaskSplit, task: usize, cfg: &RunConfig) -> Result<MetricsReport, CliError> {
    let index = ds.index();
    let scenes: Vec<&SceneAnnotation> = split.tasks[task].test_scenes.iter().map(|id| index[id.as_str()]).collect();
    let dets = detect_scenes(model, &scenes, split.known(task), &cfg.eval.inference).map_err(|e| CliError::Abort(e.to_string()))?;
    let gts: Vec<(&str, &[Instance])> = scenes.iter().map(|s| (s.scene_id.as_str(), s.instances.as_slice())).collect();
    Ok(evaluate(&dets, &gts, split, task, &cfg.eval, (&version(), Some(cfg.seed))))
}
