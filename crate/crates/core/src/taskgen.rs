//! Synthetic multi-task suites with disjoint input supports and the broad
//! reference set used for curvature estimation.
//!
//! Each task owns `C` Gaussian clusters. All `T * C` centers are placed by
//! rejection sampling so that every pair is at least `center_separation`
//! apart, and task samples are redrawn whenever their nearest center belongs
//! to another task, which makes the supports disjoint by construction.
//!
//! The reference set carries pretext labels: the label of its nearest center
//! under a per-task permutation that keeps exactly one class in place. The
//! pre-trained model therefore agrees with each task on a single class and
//! has to be fine-tuned for the others.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{f32_le_bytes, read_artifact, u32_le_bytes, write_artifact, PayloadReader};
use crate::error::{Error, Result};
use crate::net::Inputs;

const DATASET_FORMAT: &str = "delta-lab/dataset/v1";
const MAX_CENTER_RETRIES: usize = 10_000;
const MAX_SAMPLE_RETRIES: usize = 1_000;
const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSpec {
    pub tasks: usize,
    pub input_dim: usize,
    pub classes: usize,
    pub samples_per_task: usize,
    pub center_separation: f64,
    pub cluster_std: f64,
    pub seed: u64,
    /// Reference-set size as a multiple of `samples_per_task`.
    pub reference_factor: usize,
    /// Std of the reference set's near-center samples, relative to `cluster_std`.
    pub reference_center_scale: f64,
    /// Probability that a reference label is replaced by a uniformly drawn
    /// class, which softens the pre-trained model's confidence.
    pub pretext_noise: f64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            tasks: 4,
            input_dim: 16,
            classes: 3,
            samples_per_task: 2000,
            center_separation: 6.0,
            cluster_std: 1.0,
            seed: 0,
            reference_factor: 4,
            reference_center_scale: 0.5,
            pretext_noise: 0.5,
        }
    }
}

impl SuiteSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.tasks == 0 || self.input_dim == 0 {
            return bad("tasks and input_dim must be positive");
        }
        if self.classes < 2 {
            return bad("classes must be at least 2");
        }
        if self.samples_per_task < 5 * self.classes {
            return bad("samples_per_task must allow a stratified 80/20 split");
        }
        if !(self.center_separation > 0.0 && self.cluster_std > 0.0 && self.reference_center_scale > 0.0) {
            return bad("center_separation, cluster_std and reference_center_scale must be positive");
        }
        if !(0.0..1.0).contains(&self.pretext_noise) {
            return bad("pretext_noise must lie in [0, 1)");
        }
        if self.reference_factor == 0 {
            return bad("reference_factor must be positive");
        }
        Ok(())
    }

    /// Per-coordinate std of the center placement distribution.
    fn center_spread(&self) -> f64 {
        self.center_separation / 3.0
    }

    /// Per-coordinate std of the reference background component.
    pub fn background_std(&self) -> f64 {
        2.0 * self.center_separation / 3.0
    }

    pub fn reference_size(&self) -> usize {
        self.reference_factor * self.samples_per_task
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "variant", content = "task")]
pub enum ReferenceVariant {
    /// Near-center samples for every task plus broad background, 1:1.
    Broad,
    /// Near-center samples only.
    UnionOnly,
    /// Near-center samples of one task only.
    SingleTaskProxy(usize),
}

impl ReferenceVariant {
    pub fn name(&self) -> String {
        match self {
            ReferenceVariant::Broad => "broad".into(),
            ReferenceVariant::UnionOnly => "union_only".into(),
            ReferenceVariant::SingleTaskProxy(t) => format!("single_task_proxy_{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetKind {
    Task { index: usize },
    Reference { variant: ReferenceVariant },
}

/// Cluster center with its owner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Center {
    pub task: usize,
    pub class: usize,
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub suite: SuiteSpec,
    pub kind: DatasetKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    All,
}

/// Labeled samples with an explicit stratified train/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: String,
    pub dim: usize,
    pub classes: usize,
    inputs: Vec<f32>,
    labels: Vec<u32>,
    train: Vec<u32>,
    test: Vec<u32>,
    pub generator: GeneratorInfo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    task_id: String,
    dim: usize,
    classes: usize,
    len: usize,
    train: Vec<u32>,
    test: Vec<u32>,
    generator: GeneratorInfo,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn input(&self, i: usize) -> Vec<f64> {
        self.inputs[i * self.dim..(i + 1) * self.dim].iter().map(|&v| f64::from(v)).collect()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        match split {
            Split::Train => self.train.iter().map(|&i| i as usize).collect(),
            Split::Test => self.test.iter().map(|&i| i as usize).collect(),
            Split::All => (0..self.len()).collect(),
        }
    }

    /// Row-major `f64` inputs and labels of the selected rows, in index order.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut xs = Vec::with_capacity(indices.len() * self.dim);
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            xs.extend(self.inputs[i * self.dim..(i + 1) * self.dim].iter().map(|&v| f64::from(v)));
            ys.push(self.labels[i] as usize);
        }
        (xs, ys)
    }

    pub fn split(&self, split: Split) -> (Vec<f64>, Vec<usize>) {
        self.gather(&self.indices(split))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = DatasetMeta {
            task_id: self.task_id.clone(),
            dim: self.dim,
            classes: self.classes,
            len: self.len(),
            train: self.train.clone(),
            test: self.test.clone(),
            generator: self.generator.clone(),
        };
        let mut payload = f32_le_bytes(&self.inputs);
        payload.extend(u32_le_bytes(&self.labels));
        write_artifact(path, DATASET_FORMAT, &meta, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, bytes): (DatasetMeta, _) = read_artifact(path, DATASET_FORMAT)?;
        let mut reader = PayloadReader::new(path, &bytes);
        let inputs = reader.f32s(meta.len * meta.dim, "inputs")?;
        let labels = reader.u32s(meta.len, "labels")?;
        reader.finish()?;
        let corrupt = |reason: String| Error::Corrupt {
            path: path.display().to_string(),
            offset: 0,
            reason,
        };
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= meta.classes) {
            return Err(corrupt(format!("label {l} out of range")));
        }
        let mut seen = vec![false; meta.len];
        for &i in meta.train.iter().chain(&meta.test) {
            let i = i as usize;
            if i >= meta.len || seen[i] {
                return Err(corrupt(format!("split index {i} invalid or repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(corrupt("split does not cover every sample".into()));
        }
        Ok(Self {
            task_id: meta.task_id,
            dim: meta.dim,
            classes: meta.classes,
            inputs,
            labels,
            train: meta.train,
            test: meta.test,
            generator: meta.generator,
        })
    }
}

/// View over a gathered split: owns the `f64` buffer.
#[derive(Debug, Clone)]
pub struct Samples {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
}

impl Samples {
    pub fn from_dataset(ds: &TaskDataset, split: Split) -> Self {
        let (inputs, labels) = ds.split(split);
        Self { inputs, labels, dim: ds.dim }
    }

    pub fn view(&self) -> Inputs<'_> {
        Inputs::new(&self.inputs, self.dim).expect("consistent by construction")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Concatenation of several sample sets sharing a dimension.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Samples>, dim: usize) -> Self {
        let mut out = Samples { inputs: Vec::new(), labels: Vec::new(), dim };
        for p in parts {
            out.inputs.extend_from_slice(&p.inputs);
            out.labels.extend_from_slice(&p.labels);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub spec: SuiteSpec,
    pub centers: Vec<Center>,
    pub tasks: Vec<TaskDataset>,
    pub reference: TaskDataset,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_CENTERS: u64 = 1;
const STREAM_TASK_BASE: u64 = 100;
const STREAM_REFERENCE_BASE: u64 = 10_000;
const STREAM_NOISE_OFFSET: u64 = 1_000_000;

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center (ties to the lowest index).
pub fn nearest_center(centers: &[Center], x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = dist2(&c.coords, x);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Label the reference set assigns to inputs nearest to `(task, class)`.
///
/// Class `task % C` keeps its label; the remaining classes are rotated by one
/// position among themselves (a full swap when `C = 2`).
pub fn pretext_label(task: usize, class: usize, classes: usize) -> usize {
    let fixed = task % classes;
    if classes == 2 {
        return 1 - class;
    }
    if class == fixed {
        return fixed;
    }
    let others: Vec<usize> = (0..classes).filter(|&c| c != fixed).collect();
    let pos = others.iter().position(|&c| c == class).expect("class in range");
    others[(pos + 1) % others.len()]
}

fn place_centers(spec: &SuiteSpec) -> Result<Vec<Center>> {
    let mut rng = rng_for(spec.seed, STREAM_CENTERS);
    let spread = spec.center_spread();
    let sep2 = spec.center_separation * spec.center_separation;
    let mut centers: Vec<Center> = Vec::with_capacity(spec.tasks * spec.classes);
    let mut retries = 0;
    for task in 0..spec.tasks {
        for class in 0..spec.classes {
            loop {
                let coords: Vec<f64> = gaussian(&mut rng, spec.input_dim).into_iter().map(|v| v * spread).collect();
                if centers.iter().all(|c| dist2(&c.coords, &coords) >= sep2) {
                    centers.push(Center { task, class, coords });
                    break;
                }
                retries += 1;
                if retries > MAX_CENTER_RETRIES {
                    return Err(Error::PlacementFailed { retries });
                }
            }
        }
    }
    Ok(centers)
}

/// Stratified 80/20 split; indices are returned sorted.
fn stratified_split(labels: &[u32], classes: usize, rng: &mut ChaCha8Rng) -> (Vec<u32>, Vec<u32>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..classes as u32 {
        let mut idx: Vec<u32> = (0..labels.len() as u32).filter(|&i| labels[i as usize] == c).collect();
        shuffle(&mut idx, rng);
        let n_train = (idx.len() as f64 * TRAIN_FRACTION).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

fn make_task(spec: &SuiteSpec, centers: &[Center], task: usize) -> Result<TaskDataset> {
    let mut rng = rng_for(spec.seed, STREAM_TASK_BASE + task as u64);
    let own: Vec<&Center> = centers.iter().filter(|c| c.task == task).collect();
    let mut rows: Vec<(Vec<f64>, u32)> = Vec::with_capacity(spec.samples_per_task);
    for i in 0..spec.samples_per_task {
        let center = own[i % spec.classes];
        let mut attempts = 0;
        let x = loop {
            let x: Vec<f64> = center
                .coords
                .iter()
                .zip(gaussian(&mut rng, spec.input_dim))
                .map(|(c, n)| c + spec.cluster_std * n)
                .collect();
            if centers[nearest_center(centers, &x)].task == task {
                break x;
            }
            attempts += 1;
            if attempts > MAX_SAMPLE_RETRIES {
                return Err(Error::PlacementFailed { retries: attempts });
            }
        };
        rows.push((x, center.class as u32));
    }
    shuffle(&mut rows, &mut rng);
    finish_dataset(spec, format!("task_{task}"), DatasetKind::Task { index: task }, rows, &mut rng)
}

fn finish_dataset(spec: &SuiteSpec, task_id: String, kind: DatasetKind, rows: Vec<(Vec<f64>, u32)>, rng: &mut ChaCha8Rng) -> Result<TaskDataset> {
    let labels: Vec<u32> = rows.iter().map(|r| r.1).collect();
    let inputs: Vec<f32> = rows.iter().flat_map(|r| r.0.iter().map(|&v| v as f32)).collect();
    let (train, test) = stratified_split(&labels, spec.classes, rng);
    Ok(TaskDataset {
        task_id,
        dim: spec.input_dim,
        classes: spec.classes,
        inputs,
        labels,
        train,
        test,
        generator: GeneratorInfo { suite: spec.clone(), kind },
    })
}

fn make_reference(spec: &SuiteSpec, centers: &[Center], variant: ReferenceVariant) -> Result<TaskDataset> {
    let stream = match variant {
        ReferenceVariant::Broad => STREAM_REFERENCE_BASE,
        ReferenceVariant::UnionOnly => STREAM_REFERENCE_BASE + 1,
        ReferenceVariant::SingleTaskProxy(t) => STREAM_REFERENCE_BASE + 2 + t as u64,
    };
    let mut rng = rng_for(spec.seed, stream);
    let total = spec.reference_size();
    let pool: Vec<&Center> = match variant {
        ReferenceVariant::SingleTaskProxy(t) => centers.iter().filter(|c| c.task == t).collect(),
        _ => centers.iter().collect(),
    };
    let near_count = match variant {
        ReferenceVariant::Broad => total / 2,
        _ => total,
    };
    let near_std = spec.cluster_std * spec.reference_center_scale;
    let bg_std = spec.background_std();
    let label_of = |x: &[f64]| {
        let c = &centers[nearest_center(centers, x)];
        pretext_label(c.task, c.class, spec.classes) as u32
    };
    let mut rows = Vec::with_capacity(total);
    for i in 0..near_count {
        let c = pool[i % pool.len()];
        let x: Vec<f64> = c.coords.iter().zip(gaussian(&mut rng, spec.input_dim)).map(|(m, n)| m + near_std * n).collect();
        let y = label_of(&x);
        rows.push((x, y));
    }
    for _ in near_count..total {
        let x: Vec<f64> = gaussian(&mut rng, spec.input_dim).into_iter().map(|n| bg_std * n).collect();
        let y = label_of(&x);
        rows.push((x, y));
    }
    if spec.pretext_noise > 0.0 {
        let mut noise = rng_for(spec.seed, stream + STREAM_NOISE_OFFSET);
        for row in &mut rows {
            if noise.random::<f64>() < spec.pretext_noise {
                row.1 = noise.random_range(0..spec.classes as u32);
            }
        }
    }
    shuffle(&mut rows, &mut rng);
    finish_dataset(spec, format!("reference_{}", variant.name()), DatasetKind::Reference { variant }, rows, &mut rng)
}

/// Generates every task plus the broad reference set.
pub fn make_suite(spec: &SuiteSpec) -> Result<Suite> {
    spec.validate()?;
    let centers = place_centers(spec)?;
    let tasks = (0..spec.tasks).map(|t| make_task(spec, &centers, t)).collect::<Result<Vec<_>>>()?;
    let reference = make_reference(spec, &centers, ReferenceVariant::Broad)?;
    Ok(Suite {
        spec: spec.clone(),
        centers,
        tasks,
        reference,
    })
}

/// Alternative reference sets for curvature sensitivity studies.
pub fn make_reference_variant(spec: &SuiteSpec, variant: ReferenceVariant) -> Result<TaskDataset> {
    spec.validate()?;
    if let ReferenceVariant::SingleTaskProxy(t) = variant {
        if t >= spec.tasks {
            return Err(Error::InvalidConfig(format!(
                "single_task_proxy task {t} out of range for {} tasks",
                spec.tasks
            )));
        }
    }
    let centers = place_centers(spec)?;
    make_reference(spec, &centers, variant)
}

/// Regenerates the centers of a suite from its spec.
pub fn suite_centers(spec: &SuiteSpec) -> Result<Vec<Center>> {
    spec.validate()?;
    place_centers(spec)
}

/// Smallest pairwise distance between centers.
pub fn min_center_distance(centers: &[Center]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            best = best.min(dist2(&centers[i].coords, &centers[j].coords).sqrt());
        }
    }
    best
}
