//! Synthetic open-world scenes, dataset files, and task splits.
//!
//! Scenes are small RGB images of colored shapes on a noisy background. The
//! category universe is the cross product of shape kinds and colors
//! (`"red square"`, `"blue bar"`, ...). Annotations are exact tight boxes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BoxCCWH};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: image: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: image is {found:?}, expected {expected}x{expected}")]
    ImageSize {
        path: PathBuf,
        found: (u32, u32),
        expected: usize,
    },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("task groups do not partition the category universe: {0}")]
    Partition(String),
    #[error("split: {0}")]
    Split(String),
    #[error("scene {scene}: unknown category {category:?}")]
    Category { scene: String, category: String },
}

/// SplitMix64 step, used to derive independent per-scene seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub category: String,
    #[serde(rename = "box_ccwh")]
    pub bbox: BoxCCWH,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneAnnotation {
    pub scene_id: String,
    /// `H x W x 3`, values in `[0, 1]`.
    pub image: Tensor,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle, ShapeKind::Bar];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Bar => "bar",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorSpec {
    pub name: String,
    pub rgb: [f64; 3],
}

/// Shape kinds crossed with colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryUniverse {
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<ColorSpec>,
}

impl Default for CategoryUniverse {
    fn default() -> Self {
        let c = |name: &str, rgb: [f64; 3]| ColorSpec { name: name.into(), rgb };
        CategoryUniverse {
            shapes: ShapeKind::ALL.to_vec(),
            colors: vec![
                c("red", [0.9, 0.15, 0.15]),
                c("green", [0.15, 0.8, 0.2]),
                c("blue", [0.2, 0.3, 0.95]),
                c("yellow", [0.95, 0.9, 0.15]),
            ],
        }
    }
}

impl CategoryUniverse {
    /// Names in color-major order: `"red square", "red circle", ...`.
    pub fn names(&self) -> Vec<String> {
        self.colors
            .iter()
            .flat_map(|c| self.shapes.iter().map(move |s| format!("{} {}", c.name, s.name())))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.shapes.len() * self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn category(&self, index: usize) -> (ShapeKind, &ColorSpec) {
        let n = self.shapes.len();
        (self.shapes[index % n], &self.colors[index / n])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_scenes: usize,
    pub image_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Range of the longest box side, normalized.
    pub min_size: f64,
    pub max_size: f64,
    /// Maximum pairwise IoU among placed instances.
    pub max_overlap: f64,
    /// Standard deviation of the per-pixel background noise.
    pub noise: f64,
    /// Faint background blobs per scene.
    pub clutter: usize,
    pub universe: CategoryUniverse,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_scenes: 100,
            image_size: 64,
            min_instances: 1,
            max_instances: 4,
            min_size: 0.15,
            max_size: 0.35,
            max_overlap: 0.3,
            noise: 0.03,
            clutter: 3,
            universe: CategoryUniverse::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.into()));
        if self.image_size < 4 {
            return bad("image_size must be at least 4");
        }
        if self.min_instances > self.max_instances {
            return bad("min_instances exceeds max_instances");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return bad("sizes must satisfy 0 < min_size <= max_size <= 1");
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return bad("max_overlap must lie in [0, 1]");
        }
        if self.universe.is_empty() {
            return bad("empty category universe");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PlacedShape {
    kind: ShapeKind,
    rgb: [f64; 3],
    bbox: BoxCCWH,
}

impl PlacedShape {
    /// Point-in-shape test in normalized coordinates.
    fn contains(&self, x: f64, y: f64) -> bool {
        let [x0, y0, x1, y1] = self.bbox.corners();
        if x < x0 || x > x1 || y < y0 || y > y1 {
            return false;
        }
        match self.kind {
            ShapeKind::Square | ShapeKind::Bar => true,
            ShapeKind::Circle => {
                let dx = (x - self.bbox.cx) / (self.bbox.w / 2.0);
                let dy = (y - self.bbox.cy) / (self.bbox.h / 2.0);
                dx * dx + dy * dy <= 1.0
            }
            ShapeKind::Triangle => {
                // apex at top center, base along the bottom edge
                let t = (y - y0) / (y1 - y0);
                (x - self.bbox.cx).abs() <= t * self.bbox.w / 2.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SceneLayout {
    background: [f64; 3],
    blobs: Vec<(f64, f64, f64, [f64; 3])>,
    noise_seed: u64,
    shapes: Vec<PlacedShape>,
    categories: Vec<String>,
}

const SUBSAMPLES: usize = 4;

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render(layout: &SceneLayout, size: usize, noise: f64, skip: Option<usize>) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(layout.noise_seed);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut data = vec![0.0; size * size * 3];
    let inv = 1.0 / size as f64;
    for py in 0..size {
        for px in 0..size {
            let (x, y) = ((px as f64 + 0.5) * inv, (py as f64 + 0.5) * inv);
            let mut rgb = layout.background;
            for &(bx, by, r, col) in &layout.blobs {
                let d2 = ((x - bx) * (x - bx) + (y - by) * (y - by)) / (r * r);
                let a = 0.5 * (-d2).exp();
                for c in 0..3 {
                    rgb[c] = (1.0 - a) * rgb[c] + a * col[c];
                }
            }
            let n = normal.sample(&mut rng);
            for v in rgb.iter_mut() {
                *v += n;
            }
            for (k, shape) in layout.shapes.iter().enumerate() {
                if Some(k) == skip {
                    continue;
                }
                let mut hits = 0;
                for sy in 0..SUBSAMPLES {
                    for sx in 0..SUBSAMPLES {
                        let qx = (px as f64 + (sx as f64 + 0.5) / SUBSAMPLES as f64) * inv;
                        let qy = (py as f64 + (sy as f64 + 0.5) / SUBSAMPLES as f64) * inv;
                        if shape.contains(qx, qy) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let a = hits as f64 / (SUBSAMPLES * SUBSAMPLES) as f64;
                    for c in 0..3 {
                        rgb[c] = (1.0 - a) * rgb[c] + a * shape.rgb[c];
                    }
                }
            }
            let o = (py * size + px) * 3;
            for c in 0..3 {
                data[o + c] = quantize(rgb[c]);
            }
        }
    }
    Tensor::new([size, size, 3], data).expect("shape matches")
}

/// Generator bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub scenes: usize,
    pub instances: usize,
    /// Scenes redrawn with a fresh sub-seed after placement failed.
    pub regenerated: usize,
}

const PLACEMENT_RETRIES: usize = 50;
const SCENE_RETRIES: u64 = 100;

fn try_layout(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Option<SceneLayout> {
    let n_inst = rng.gen_range(cfg.min_instances..=cfg.max_instances);
    let base = rng.gen_range(0.05..0.35);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.05..0.05));
    let background = [base + tint[0], base + tint[1], base + tint[2]];
    let blobs = (0..cfg.clutter)
        .map(|_| {
            let col: [f64; 3] = std::array::from_fn(|_| base + rng.gen_range(-0.1..0.1));
            (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen_range(0.05..0.2), col)
        })
        .collect();
    let noise_seed = rng.gen();
    let mut shapes: Vec<PlacedShape> = Vec::new();
    let mut categories = Vec::new();
    for _ in 0..n_inst {
        let cat = rng.gen_range(0..cfg.universe.len());
        let (kind, color) = cfg.universe.category(cat);
        let rgb: [f64; 3] = std::array::from_fn(|c| (color.rgb[c] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
        let long = rng.gen_range(cfg.min_size..=cfg.max_size);
        let (w, h) = match kind {
            ShapeKind::Bar => {
                if rng.gen_bool(0.5) {
                    (long, long / 3.0)
                } else {
                    (long / 3.0, long)
                }
            }
            _ => (long, long),
        };
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
            let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
            let b = BoxCCWH::new(cx, cy, w, h).expect("positive extent");
            if shapes.iter().all(|s| iou(&s.bbox, &b) <= cfg.max_overlap) {
                placed = Some(b);
                break;
            }
        }
        shapes.push(PlacedShape { kind, rgb, bbox: placed? });
        categories.push(cfg.universe.names()[cat].clone());
    }
    Some(SceneLayout {
        background,
        blobs,
        noise_seed,
        shapes,
        categories,
    })
}

fn scene_layout(cfg: &GeneratorConfig, seed: u64, index: usize, report: &mut GenerationReport) -> SceneLayout {
    for attempt in 0..SCENE_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, index as u64), attempt));
        if let Some(layout) = try_layout(cfg, &mut rng) {
            return layout;
        }
        report.regenerated += 1;
    }
    // overlap cap infeasible for this config; fall back to an empty scene
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64));
    let mut layout = try_layout(&GeneratorConfig { max_instances: 0, min_instances: 0, ..cfg.clone() }, &mut rng).expect("empty layout");
    layout.shapes.clear();
    layout.categories.clear();
    layout
}

pub fn scene_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Generates one scene deterministically from `(seed, index)`.
pub fn generate_scene(cfg: &GeneratorConfig, seed: u64, index: usize, report: &mut GenerationReport) -> SceneAnnotation {
    let layout = scene_layout(cfg, seed, index, report);
    let image = render(&layout, cfg.image_size, cfg.noise, None);
    let instances = layout
        .shapes
        .iter()
        .zip(&layout.categories)
        .map(|(s, c)| Instance {
            category: c.clone(),
            bbox: s.bbox,
        })
        .collect();
    report.scenes += 1;
    report.instances += layout.shapes.len();
    SceneAnnotation {
        scene_id: scene_id(index),
        image,
        instances,
    }
}

/// The scene image with instance `skip` left out; used to locate the pixels
/// an instance touches.
pub fn render_without(cfg: &GeneratorConfig, seed: u64, index: usize, skip: usize) -> Tensor {
    let layout = scene_layout(cfg, seed, index, &mut GenerationReport::default());
    render(&layout, cfg.image_size, cfg.noise, Some(skip))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub categories: Vec<String>,
    pub scenes: Vec<SceneAnnotation>,
}

impl Dataset {
    pub fn scene(&self, id: &str) -> Option<&SceneAnnotation> {
        self.scenes.iter().find(|s| s.scene_id == id)
    }

    pub fn index(&self) -> BTreeMap<&str, &SceneAnnotation> {
        self.scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect()
    }
}

/// Generates `cfg.num_scenes` scenes in memory.
pub fn generate_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<(Dataset, GenerationReport), DataError> {
    generate_range(cfg, seed, 0, cfg.num_scenes)
}

/// Scenes with indices `start..end`; any sub-range reproduces the same
/// scenes as the full run.
pub fn generate_range(cfg: &GeneratorConfig, seed: u64, start: usize, end: usize) -> Result<(Dataset, GenerationReport), DataError> {
    cfg.validate()?;
    let mut report = GenerationReport::default();
    let scenes = (start..end).map(|i| generate_scene(cfg, seed, i, &mut report)).collect();
    Ok((
        Dataset {
            categories: cfg.universe.names(),
            scenes,
        },
        report,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub image_path: String,
    pub instances: Vec<Instance>,
}

/// On-disk dataset index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub categories: Vec<String>,
    pub scenes: Vec<SceneRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<(), DataError> {
    let s = image.shape();
    let (h, w) = (s[0] as u32, s[1] as u32);
    let bytes: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(w, h, bytes).expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|source| DataError::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_png(path: &Path, expected: usize) -> Result<Tensor, DataError> {
    let img = image::open(path)
        .map_err(|source| DataError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    if img.width() as usize != expected || img.height() as usize != expected {
        return Err(DataError::ImageSize {
            path: path.to_path_buf(),
            found: (img.width(), img.height()),
            expected,
        });
    }
    let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new([expected, expected, 3], data).expect("shape matches"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `dataset.json` and `images/<scene_id>.png` under `dir`.
pub fn save_dataset(dir: &Path, ds: &Dataset, header: (&str, u64)) -> Result<(), DataError> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(io_err(&images))?;
    let mut records = Vec::with_capacity(ds.scenes.len());
    for s in &ds.scenes {
        let rel = format!("images/{}.png", s.scene_id);
        write_png(&dir.join(&rel), &s.image)?;
        records.push(SceneRecord {
            scene_id: s.scene_id.clone(),
            image_path: rel,
            instances: s.instances.clone(),
        });
    }
    let file = DatasetFile {
        version: Some(header.0.to_string()),
        seed: Some(header.1),
        categories: ds.categories.clone(),
        scenes: records,
    };
    write_json(&dir.join("dataset.json"), &file)
}

/// Loads a dataset index; image paths are relative to the index file.
pub fn load_dataset(index: &Path, image_size: usize) -> Result<Dataset, DataError> {
    let file: DatasetFile = read_json(index)?;
    let base = index.parent().unwrap_or(Path::new("."));
    let known: BTreeSet<&str> = file.categories.iter().map(String::as_str).collect();
    let mut scenes = Vec::with_capacity(file.scenes.len());
    for r in file.scenes {
        if let Some(bad) = r.instances.iter().find(|i| !known.contains(i.category.as_str())) {
            return Err(DataError::Category {
                scene: r.scene_id.clone(),
                category: bad.category.clone(),
            });
        }
        let image = read_png(&base.join(&r.image_path), image_size)?;
        scenes.push(SceneAnnotation {
            scene_id: r.scene_id,
            image,
            instances: r.instances,
        });
    }
    Ok(Dataset {
        categories: file.categories,
        scenes,
    })
}

/// One task of the incremental sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Cumulative known categories; their order fixes the class channels.
    pub known: Vec<String>,
    pub train_scenes: Vec<String>,
    pub test_scenes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub tasks: Vec<TaskSpec>,
}

impl TaskSplit {
    /// Checks monotone known growth and that every name is in `universe`.
    pub fn validate(&self, universe: &[String]) -> Result<(), DataError> {
        let all: BTreeSet<&str> = universe.iter().map(String::as_str).collect();
        let mut prev: Vec<String> = Vec::new();
        for (t, task) in self.tasks.iter().enumerate() {
            if let Some(bad) = task.known.iter().find(|k| !all.contains(k.as_str())) {
                return Err(DataError::Split(format!("task {}: unknown category {bad:?}", t + 1)));
            }
            let distinct: BTreeSet<&String> = task.known.iter().collect();
            if distinct.len() != task.known.len() {
                return Err(DataError::Split(format!("task {}: duplicate known category", t + 1)));
            }
            if task.known.len() < prev.len() || task.known[..prev.len()] != prev[..] {
                return Err(DataError::Split(format!("task {}: known set must extend the previous task's", t + 1)));
            }
            prev = task.known.clone();
        }
        Ok(())
    }

    /// Known set of task `t` (0-based).
    pub fn known(&self, t: usize) -> &[String] {
        &self.tasks[t].known
    }

    /// Categories introduced by task `t`.
    pub fn current(&self, t: usize) -> &[String] {
        let start = if t == 0 { 0 } else { self.tasks[t - 1].known.len() };
        &self.tasks[t].known[start..]
    }

    /// Categories known before task `t`.
    pub fn previous(&self, t: usize) -> &[String] {
        if t == 0 {
            &[]
        } else {
            &self.tasks[t - 1].known
        }
    }

    /// Unknown set of task `t` relative to `universe`.
    pub fn unknown(&self, t: usize, universe: &[String]) -> Vec<String> {
        let k: BTreeSet<&String> = self.tasks[t].known.iter().collect();
        universe.iter().filter(|c| !k.contains(c)).cloned().collect()
    }
}

/// Builds cumulative known sets from ordered category groups. Training scenes
/// of task `t` are those in `train_ids` containing at least one instance of a
/// category introduced by task `t`.
pub fn make_task_split(
    universe: &[String],
    groups: &[Vec<String>],
    scenes: &[SceneAnnotation],
    train_ids: &[String],
    test_ids: &[String],
) -> Result<TaskSplit, DataError> {
    let mut seen = BTreeSet::new();
    for g in groups {
        for c in g {
            if !universe.contains(c) {
                return Err(DataError::Partition(format!("{c:?} is not in the universe")));
            }
            if !seen.insert(c.clone()) {
                return Err(DataError::Partition(format!("{c:?} appears in more than one group")));
            }
        }
    }
    if seen.len() != universe.len() {
        let missing: Vec<&String> = universe.iter().filter(|c| !seen.contains(*c)).collect();
        return Err(DataError::Partition(format!("missing {missing:?}")));
    }
    let by_id: BTreeMap<&str, &SceneAnnotation> = scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let mut tasks = Vec::with_capacity(groups.len());
    let mut known: Vec<String> = Vec::new();
    for g in groups {
        known.extend(g.iter().cloned());
        let current: BTreeSet<&str> = g.iter().map(String::as_str).collect();
        let train_scenes = train_ids
            .iter()
            .filter(|id| {
                by_id
                    .get(id.as_str())
                    .is_some_and(|s| s.instances.iter().any(|i| current.contains(i.category.as_str())))
            })
            .cloned()
            .collect();
        tasks.push(TaskSpec {
            known: known.clone(),
            train_scenes,
            test_scenes: test_ids.to_vec(),
        });
    }
    Ok(TaskSplit {
        version: None,
        seed: None,
        tasks,
    })
}

/// Instances of `scene` restricted to `categories`.
pub fn filter_instances(scene: &SceneAnnotation, categories: &[String]) -> Vec<Instance> {
    scene.instances.iter().filter(|i| categories.contains(&i.category)).cloned().collect()
}

/// Histogram with fixed bin edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Natural log of `1 + count` per bin.
    pub log_counts: Vec<f64>,
}

impl Histogram {
    fn new(edges: Vec<f64>) -> Self {
        let n = edges.len() - 1;
        Histogram {
            edges,
            counts: vec![0; n],
            log_counts: vec![0.0; n],
        }
    }

    fn add(&mut self, v: f64) {
        let n = self.counts.len();
        let k = self.edges[1..].iter().position(|&e| v < e).unwrap_or(n - 1);
        self.counts[k] += 1;
    }

    fn finish(&mut self) {
        self.log_counts = self.counts.iter().map(|&c| (1.0 + c as f64).ln()).collect();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: usize,
    pub known_instances: usize,
    pub unknown_instances: usize,
    pub avg_known: f64,
    pub avg_unknown: f64,
    /// Normalized box area.
    pub area: Histogram,
    /// Width over height.
    pub aspect_ratio: Histogram,
    /// Box-center counts on a `CENTER_GRID x CENTER_GRID` grid, row-major.
    pub centers: Vec<Vec<usize>>,
}

pub const CENTER_GRID: usize = 8;

/// Image and instance statistics of `scene_ids` (all scenes when `None`),
/// counting instances of `known` categories as known and the rest as unknown.
pub fn dataset_stats(ds: &Dataset, scene_ids: Option<&[String]>, known: &[String]) -> DatasetStats {
    let index = ds.index();
    let scenes: Vec<&SceneAnnotation> = match scene_ids {
        Some(ids) => ids.iter().filter_map(|id| index.get(id.as_str()).copied()).collect(),
        None => ds.scenes.iter().collect(),
    };
    let known: BTreeSet<&str> = known.iter().map(String::as_str).collect();
    let mut area = Histogram::new((0..=10).map(|k| k as f64 * 0.02).chain([1.0]).collect());
    let mut aspect = Histogram::new(vec![0.0, 0.25, 0.5, 0.8, 1.25, 2.0, 4.0, f64::MAX]);
    let mut centers = vec![vec![0usize; CENTER_GRID]; CENTER_GRID];
    let (mut nk, mut nu) = (0, 0);
    for s in &scenes {
        for inst in &s.instances {
            if known.contains(inst.category.as_str()) {
                nk += 1;
            } else {
                nu += 1;
            }
            area.add(inst.bbox.area());
            aspect.add(inst.bbox.w / inst.bbox.h);
            let gx = ((inst.bbox.cx * CENTER_GRID as f64) as usize).min(CENTER_GRID - 1);
            let gy = ((inst.bbox.cy * CENTER_GRID as f64) as usize).min(CENTER_GRID - 1);
            centers[gy][gx] += 1;
        }
    }
    area.finish();
    aspect.finish();
    let n = scenes.len();
    let avg = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    DatasetStats {
        images: n,
        known_instances: nk,
        unknown_instances: nu,
        avg_known: avg(nk),
        avg_unknown: avg(nu),
        area,
        aspect_ratio: aspect,
        centers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            num_scenes: 6,
            image_size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn universe_has_sixteen_unique_names() {
        let names = CategoryUniverse::default().names();
        assert_eq!(names.len(), 16);
        assert_eq!(names.iter().collect::<BTreeSet<_>>().len(), 16);
        assert_eq!(names[0], "red square");
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let cfg = small_cfg();
        let (a, report) = generate_dataset(&cfg, 5).unwrap();
        let (b, _) = generate_dataset(&cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(report.scenes, 6);
        let (sub, _) = generate_range(&cfg, 5, 2, 4).unwrap();
        assert_eq!(sub.scenes[0], a.scenes[2]);
        for s in &a.scenes {
            assert!((1..=4).contains(&s.instances.len()));
            for (i, x) in s.instances.iter().enumerate() {
                for y in &s.instances[i + 1..] {
                    assert!(iou(&x.bbox, &y.bbox) <= cfg.max_overlap);
                }
            }
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn empty_scenes() {
        let cfg = GeneratorConfig {
            min_instances: 0,
            max_instances: 0,
            ..small_cfg()
        };
        let (ds, _) = generate_dataset(&cfg, 1).unwrap();
        assert!(ds.scenes.iter().all(|s| s.instances.is_empty()));
    }

    #[test]
    fn drawn_pixels_stay_inside_dilated_boxes() {
        let cfg = small_cfg();
        let size = cfg.image_size as f64;
        for index in 0..cfg.num_scenes {
            let scene = generate_scene(&cfg, 9, index, &mut GenerationReport::default());
            for (k, inst) in scene.instances.iter().enumerate() {
                let without = render_without(&cfg, 9, index, k);
                let [x0, y0, x1, y1] = inst.bbox.corners();
                for py in 0..cfg.image_size {
                    for px in 0..cfg.image_size {
                        let o = (py * cfg.image_size + px) * 3;
                        let changed = (0..3).any(|c| scene.image.data()[o + c] != without.data()[o + c]);
                        if changed {
                            assert!(px as f64 >= x0 * size - 1.0 && (px + 1) as f64 <= x1 * size + 1.0);
                            assert!(py as f64 >= y0 * size - 1.0 && (py + 1) as f64 <= y1 * size + 1.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn disk_roundtrip_is_lossless() {
        let cfg = small_cfg();
        let (ds, _) = generate_dataset(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds, ("v0", 2)).unwrap();
        let back = load_dataset(&dir.path().join("dataset.json"), cfg.image_size).unwrap();
        assert_eq!(back, ds);
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn task_split_rules() {
        let universe = CategoryUniverse::default().names();
        let groups: Vec<Vec<String>> = universe.chunks(4).map(|c| c.to_vec()).collect();
        let split = make_task_split(&universe, &groups, &[], &[], &[]).unwrap();
        assert_eq!(split.tasks.len(), 4);
        assert_eq!(split.known(0).len(), 4);
        assert_eq!(split.known(3).len(), 16);
        assert!(split.unknown(3, &universe).is_empty());
        assert_eq!(split.current(1), &universe[4..8]);
        split.validate(&universe).unwrap();

        let single = make_task_split(&universe, &[universe.clone()], &[], &[], &[]).unwrap();
        assert!(single.unknown(0, &universe).is_empty());

        let mut reordered = groups.clone();
        reordered.swap(0, 1);
        let other = make_task_split(&universe, &reordered, &[], &[], &[]).unwrap();
        let last = |s: &TaskSplit| s.known(3).iter().cloned().collect::<BTreeSet<_>>();
        assert_eq!(last(&split), last(&other));
        assert_ne!(split.unknown(0, &universe), other.unknown(0, &universe));

        let overlapping = vec![universe[..9].to_vec(), universe[8..].to_vec()];
        assert!(make_task_split(&universe, &overlapping, &[], &[], &[]).is_err());
        assert!(make_task_split(&universe, &[universe[..15].to_vec()], &[], &[], &[]).is_err());

        let mut bad = split.clone();
        bad.tasks[1].known.remove(0);
        assert!(bad.validate(&universe).is_err());
    }

    #[test]
    fn train_scenes_need_a_current_instance() {
        let b = BoxCCWH::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let scene = |id: &str, cats: &[&str]| SceneAnnotation {
            scene_id: id.into(),
            image: Tensor::zeros([4, 4, 3]),
            instances: cats.iter().map(|c| Instance { category: c.to_string(), bbox: b }).collect(),
        };
        let universe = names(&["a", "b", "c"]);
        let scenes = vec![scene("x", &["a"]), scene("y", &["c"]), scene("z", &["b", "c"])];
        let ids = names(&["x", "y", "z"]);
        let split = make_task_split(&universe, &[names(&["a"]), names(&["b", "c"])], &scenes, &ids, &ids).unwrap();
        assert_eq!(split.tasks[0].train_scenes, names(&["x"]));
        assert_eq!(split.tasks[1].train_scenes, names(&["y", "z"]));
    }

    #[test]
    fn stats_hand_count() {
        let scene = |id: &str, boxes: &[(&str, [f64; 4])]| SceneAnnotation {
            scene_id: id.into(),
            image: Tensor::zeros([4, 4, 3]),
            instances: boxes
                .iter()
                .map(|(c, b)| Instance {
                    category: c.to_string(),
                    bbox: BoxCCWH::try_from(*b).unwrap(),
                })
                .collect(),
        };
        let ds = Dataset {
            categories: names(&["k", "u"]),
            scenes: vec![
                scene("a", &[("k", [0.1, 0.1, 0.1, 0.1]), ("u", [0.9, 0.9, 0.2, 0.1]), ("u", [0.5, 0.5, 0.1, 0.3])]),
                scene("b", &[("k", [0.5, 0.1, 0.3, 0.3])]),
            ],
        };
        let st = dataset_stats(&ds, None, &names(&["k"]));
        assert_eq!(st.images, 2);
        assert_eq!(st.avg_known, 1.0);
        assert_eq!(st.avg_unknown, 1.0);
        assert_eq!(st.area.counts.iter().sum::<usize>(), 4);
        assert_eq!(st.area.counts[..5], [1, 2, 0, 0, 1]);
        assert_eq!(st.centers[0][0], 1);
        assert_eq!(st.centers[7][7], 1);
        let only_b = dataset_stats(&ds, Some(&names(&["b"])), &names(&["k"]));
        assert_eq!((only_b.images, only_b.avg_known, only_b.avg_unknown), (1, 1.0, 0.0));
        let empty = dataset_stats(&Dataset { categories: vec![], scenes: vec![] }, None, &[]);
        assert_eq!((empty.images, empty.avg_known, empty.avg_unknown), (0, 0.0, 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn split_groups_partition_known(perm in Just((0..16usize).collect::<Vec<_>>()).prop_shuffle(), cuts in prop::collection::btree_set(1..16usize, 0..4), seed in 0u64..1000) {
            let universe = CategoryUniverse::default().names();
            let order: Vec<String> = perm.iter().map(|&i| universe[i].clone()).collect();
            let mut bounds: Vec<usize> = cuts.into_iter().collect();
            bounds.insert(0, 0);
            bounds.push(16);
            let groups: Vec<Vec<String>> = bounds.windows(2).map(|w| order[w[0]..w[1]].to_vec()).collect();
            let cfg = GeneratorConfig { num_scenes: 4, image_size: 16, ..Default::default() };
            let (ds, _) = generate_dataset(&cfg, seed).unwrap();
            let ids: Vec<String> = ds.scenes.iter().map(|s| s.scene_id.clone()).collect();
            let split = make_task_split(&universe, &groups, &ds.scenes, &ids, &ids).unwrap();
            split.validate(&universe).unwrap();
            for t in 0..split.tasks.len() {
                let prev: BTreeSet<&String> = split.previous(t).iter().collect();
                let cur: BTreeSet<&String> = split.current(t).iter().collect();
                let known: BTreeSet<&String> = split.known(t).iter().collect();
                prop_assert!(prev.is_disjoint(&cur));
                prop_assert_eq!(prev.union(&cur).copied().collect::<BTreeSet<_>>(), known.clone());
                let unknown = split.unknown(t, &universe);
                prop_assert_eq!(unknown.len() + known.len(), universe.len());
                prop_assert!(unknown.iter().all(|u| !known.contains(u)));
                for id in &split.tasks[t].train_scenes {
                    let scene = ds.scenes.iter().find(|s| &s.scene_id == id).unwrap();
                    let visible = filter_instances(scene, split.current(t));
                    prop_assert!(!visible.is_empty());
                    prop_assert!(visible.iter().all(|i| cur.contains(&i.category)));
                }
            }
        }
    }
}
