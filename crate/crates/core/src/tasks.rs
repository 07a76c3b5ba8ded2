//! Synthetic incremental-segmentation data: shape images, task schedules,
//! disjoint/overlapped splits and background relabeling.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Result, UcdError};
use crate::numerics::DenseTensor;

/// Background class id.
pub const BACKGROUND: usize = 0;

/// Integer label grid, row-major `height × width`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SemanticMap {
    height: usize,
    width: usize,
    labels: Vec<usize>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if height * width != labels.len() || height == 0 || width == 0 {
            return Err(UcdError::shape(format!(
                "semantic map {height}x{width} with {} labels",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: usize) {
        self.labels[row * self.width + col] = label;
    }

    pub fn max_label(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn contains_any(&self, classes: &BTreeSet<usize>) -> bool {
        self.labels.iter().any(|l| classes.contains(l))
    }

    /// One text row per grid row, labels separated by spaces.
    pub fn debug_dump(&self) -> String {
        let mut s = String::new();
        for row in self.labels.chunks_exact(self.width) {
            let cells: Vec<String> = row.iter().map(|l| l.to_string()).collect();
            let _ = writeln!(s, "{}", cells.join(" "));
        }
        s
    }

    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor::new(
            vec![self.height, self.width],
            self.labels.iter().map(|&l| l as f64).collect(),
        )
        .expect("map dims are non-zero")
    }

    pub fn from_tensor(t: &DenseTensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(UcdError::shape(format!("label tensor rank {}", t.rank())));
        }
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(UcdError::Format(format!("invalid label value {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(t.shape()[0], t.shape()[1], labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `H × W × channels`, values in `[0, 1]`.
    pub pixels: DenseTensor,
    pub labels: SemanticMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Classes introduced at one learning step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub step_index: usize,
    pub class_ids: BTreeSet<usize>,
}

impl TaskSpec {
    pub fn new_class_count(&self) -> usize {
        self.class_ids.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    Disjoint,
    Overlapped,
}

impl FromStr for SplitMode {
    type Err = UcdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(SplitMode::Disjoint),
            "overlapped" => Ok(SplitMode::Overlapped),
            other => Err(UcdError::Config(format!("unknown split mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for SplitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitMode::Disjoint => "disjoint",
            SplitMode::Overlapped => "overlapped",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncrementalSchedule {
    pub tasks: Vec<TaskSpec>,
    pub mode: SplitMode,
}

impl IncrementalSchedule {
    /// Builds a schedule from explicit class lists; validates disjointness and
    /// that background is never listed.
    pub fn new(class_lists: Vec<Vec<usize>>, mode: SplitMode) -> Result<Self> {
        if class_lists.is_empty() {
            return Err(UcdError::invalid("schedule has no steps"));
        }
        let mut seen = BTreeSet::new();
        let mut tasks = Vec::with_capacity(class_lists.len());
        for (k, classes) in class_lists.into_iter().enumerate() {
            if classes.is_empty() {
                return Err(UcdError::invalid(format!("step {} has no classes", k + 1)));
            }
            let mut ids = BTreeSet::new();
            for c in classes {
                if c == BACKGROUND {
                    return Err(UcdError::invalid("background listed in a task"));
                }
                if !seen.insert(c) {
                    return Err(UcdError::invalid(format!("class {c} listed twice")));
                }
                ids.insert(c);
            }
            tasks.push(TaskSpec {
                step_index: k + 1,
                class_ids: ids,
            });
        }
        Ok(Self { tasks, mode })
    }

    /// `"3-1"` → classes {1,2,3} then {4}.
    pub fn from_counts(spec: &str, mode: SplitMode) -> Result<Self> {
        let mut next = 1;
        let mut lists = Vec::new();
        for part in spec.split('-') {
            let n: usize = part
                .trim()
                .parse()
                .map_err(|_| UcdError::Config(format!("bad schedule {spec:?}")))?;
            lists.push((next..next + n).collect());
            next += n;
        }
        Self::new(lists, mode)
    }

    pub fn n_steps(&self) -> usize {
        self.tasks.len()
    }

    pub fn total_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.new_class_count()).sum()
    }

    /// All foreground classes introduced at steps `1..=k`.
    pub fn seen_classes(&self, k: usize) -> BTreeSet<usize> {
        self.tasks[..k]
            .iter()
            .flat_map(|t| t.class_ids.iter().copied())
            .collect()
    }

    /// `T^k`: number of outputs (background included) after step `k`.
    pub fn total_outputs(&self, k: usize) -> usize {
        1 + self.tasks[..k].iter().map(|t| t.new_class_count()).sum::<usize>()
    }

    /// Checks the schedule covers exactly the classes `1..=n_classes` and
    /// that class ids are contiguous per step (ids map onto classifier rows).
    pub fn validate_against(&self, n_classes: usize) -> Result<()> {
        let all = self.seen_classes(self.tasks.len());
        for &c in &all {
            if c > n_classes {
                return Err(UcdError::invalid(format!(
                    "schedule references unknown class {c} (dataset has {n_classes})"
                )));
            }
        }
        if all.len() != n_classes {
            return Err(UcdError::invalid(format!(
                "schedule covers {} of {n_classes} classes",
                all.len()
            )));
        }
        let mut expected = 1;
        for t in &self.tasks {
            for &c in &t.class_ids {
                if c != expected {
                    return Err(UcdError::invalid(
                        "class ids must be introduced in increasing order",
                    ));
                }
                expected += 1;
            }
        }
        Ok(())
    }
}

/// Generation knobs beyond the required arguments.
#[derive(Debug, Clone, Copy)]
pub struct ShapesParams {
    pub noise_std: f64,
    pub channels: usize,
}

impl Default for ShapesParams {
    fn default() -> Self {
        Self {
            noise_std: 0.05,
            channels: 3,
        }
    }
}

/// Mean color of a class: background is mid-gray, foreground classes are
/// spread around the hue circle.
pub fn class_color(class: usize, n_classes: usize) -> [f64; 3] {
    if class == BACKGROUND {
        return [0.45, 0.45, 0.45];
    }
    let hue = (class - 1) as f64 / n_classes as f64;
    let h6 = hue * 6.0;
    let x = 1.0 - ((h6 % 2.0) - 1.0).abs();
    let (r, g, b) = match h6 as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.1 + 0.8 * r, 0.1 + 0.8 * g, 0.1 + 0.8 * b]
}

pub fn generate_shapes_dataset(
    seed: u64,
    n_images: usize,
    height: usize,
    width: usize,
    n_classes: usize,
) -> Result<Dataset> {
    generate_shapes_dataset_with(seed, n_images, height, width, n_classes, ShapesParams::default())
}

/// Each image holds 1..=4 rectangles or discs of random classes over a
/// background; every image draws from its own stream keyed by `(seed, index)`.
pub fn generate_shapes_dataset_with(
    seed: u64,
    n_images: usize,
    height: usize,
    width: usize,
    n_classes: usize,
    params: ShapesParams,
) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(UcdError::invalid("n_classes must be at least 2"));
    }
    if height < 8 || width < 8 {
        return Err(UcdError::invalid("image dimensions must be at least 8"));
    }
    if n_images == 0 {
        return Err(UcdError::invalid("n_images must be positive"));
    }
    if params.channels != 3 {
        return Err(UcdError::invalid("only 3-channel images are generated"));
    }
    if !(params.noise_std >= 0.0) {
        return Err(UcdError::invalid("noise_std must be non-negative"));
    }
    let images = (0..n_images)
        .into_par_iter()
        .map(|i| generate_image(seed, i as u64, height, width, n_classes, params))
        .collect();
    Ok(Dataset { n_classes, images })
}

fn generate_image(
    seed: u64,
    index: u64,
    height: usize,
    width: usize,
    n_classes: usize,
    params: ShapesParams,
) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut labels = SemanticMap::filled(height, width, BACKGROUND);
    let n_shapes = rng.random_range(1..=4);
    let min_side = (height.min(width) / 4).max(2);
    let max_side = (height.min(width) / 2).max(min_side + 1);
    for _ in 0..n_shapes {
        let class = rng.random_range(1..=n_classes);
        let disc = rng.random_bool(0.5);
        let h = rng.random_range(min_side..=max_side);
        let w = rng.random_range(min_side..=max_side);
        let top = rng.random_range(0..=height - h);
        let left = rng.random_range(0..=width - w);
        let (cy, cx) = (top as f64 + h as f64 / 2.0, left as f64 + w as f64 / 2.0);
        let radius = h.min(w) as f64 / 2.0;
        for r in top..top + h {
            for c in left..left + w {
                let inside = !disc || {
                    let dy = r as f64 + 0.5 - cy;
                    let dx = c as f64 + 0.5 - cx;
                    dy * dy + dx * dx <= radius * radius
                };
                if inside {
                    labels.set(r, c, class);
                }
            }
        }
    }
    let noise = Normal::new(0.0, params.noise_std).expect("validated noise std");
    let mut pixels = DenseTensor::zeros(&[height, width, params.channels]);
    for (p, &label) in labels.labels().iter().enumerate() {
        let color = class_color(label, n_classes);
        for (ch, v) in pixels.lane_mut(p).iter_mut().enumerate() {
            *v = (color[ch] + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    LabeledImage { pixels, labels }
}

/// Per-step training sets `T^k` as indices into `data.images`.
///
/// Disjoint: an image goes to the earliest step whose classes it contains.
/// Overlapped: an image joins every step whose classes it contains. The seed
/// permutes the order within each step (the training order).
pub fn split_schedule(
    data: &Dataset,
    schedule: &IncrementalSchedule,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    schedule.validate_against(data.n_classes)?;
    let mut steps = vec![Vec::new(); schedule.n_steps()];
    for (i, img) in data.images.iter().enumerate() {
        let eligible = schedule
            .tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| img.labels.contains_any(&t.class_ids))
            .map(|(k, _)| k);
        match schedule.mode {
            SplitMode::Disjoint => {
                if let Some(k) = eligible.min() {
                    steps[k].push(i);
                }
            }
            SplitMode::Overlapped => {
                for k in eligible {
                    steps[k].push(i);
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for step in &mut steps {
        rand::seq::SliceRandom::shuffle(step.as_mut_slice(), &mut rng);
    }
    Ok(steps)
}

/// Keeps only the labels of `task`; everything else becomes background.
pub fn relabel_for_step(labels: &SemanticMap, task: &TaskSpec) -> SemanticMap {
    relabel_keep(labels, &task.class_ids)
}

pub fn relabel_keep(labels: &SemanticMap, keep: &BTreeSet<usize>) -> SemanticMap {
    SemanticMap {
        height: labels.height,
        width: labels.width,
        labels: labels
            .labels
            .iter()
            .map(|l| if keep.contains(l) { *l } else { BACKGROUND })
            .collect(),
    }
}

/// Nearest-neighbour downsampling: `out[i, j] = labels[i·s, j·s]`.
pub fn downsample_labels(labels: &SemanticMap, stride: usize) -> Result<SemanticMap> {
    if stride == 0 || !labels.height.is_multiple_of(stride) || !labels.width.is_multiple_of(stride) {
        return Err(UcdError::invalid(format!(
            "stride {stride} does not divide {}x{}",
            labels.height, labels.width
        )));
    }
    let (h, w) = (labels.height / stride, labels.width / stride);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push(labels.get(i * stride, j * stride));
        }
    }
    SemanticMap::new(h, w, out)
}

const MANIFEST: &str = "manifest.txt";

/// Writes one pixel tensor and one label tensor per image plus a manifest.
pub fn save_dataset(
    dir: &Path,
    data: &Dataset,
    schedule: Option<&IncrementalSchedule>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "n_classes {}", data.n_classes);
    let _ = writeln!(manifest, "n_images {}", data.images.len());
    if let Some(s) = schedule {
        let steps: Vec<String> = s
            .tasks
            .iter()
            .map(|t| {
                t.class_ids
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect();
        let _ = writeln!(manifest, "schedule {} {}", s.mode, steps.join(" "));
    }
    for (i, img) in data.images.iter().enumerate() {
        let id = format!("img_{i:05}");
        let shape: Vec<String> = img.pixels.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(manifest, "image {id} {}", shape.join(" "));
        fs::write(dir.join(format!("{id}.pixels.bin")), img.pixels.to_bytes())?;
        fs::write(dir.join(format!("{id}.labels.bin")), img.labels.to_tensor().to_bytes())?;
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, Option<IncrementalSchedule>)> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let mut n_classes = None;
    let mut schedule = None;
    let mut images = Vec::new();
    for line in manifest.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("n_classes") => {
                n_classes = parts.next().and_then(|v| v.parse().ok());
            }
            Some("n_images") | None => {}
            Some("schedule") => {
                let mode: SplitMode = parts
                    .next()
                    .ok_or_else(|| UcdError::Format("schedule without mode".into()))?
                    .parse()?;
                let lists = parts
                    .map(|step| {
                        step.split(',')
                            .map(|c| {
                                c.parse()
                                    .map_err(|_| UcdError::Format(format!("bad class {c:?}")))
                            })
                            .collect::<Result<Vec<usize>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                schedule = Some(IncrementalSchedule::new(lists, mode)?);
            }
            Some("image") => {
                let id = parts
                    .next()
                    .ok_or_else(|| UcdError::Format("image line without id".into()))?;
                let pixels =
                    DenseTensor::from_bytes(&fs::read(dir.join(format!("{id}.pixels.bin")))?)?;
                let labels = SemanticMap::from_tensor(&DenseTensor::from_bytes(&fs::read(
                    dir.join(format!("{id}.labels.bin")),
                )?)?)?;
                images.push(LabeledImage { pixels, labels });
            }
            Some(other) => {
                return Err(UcdError::Format(format!("unknown manifest entry {other:?}")));
            }
        }
    }
    let n_classes =
        n_classes.ok_or_else(|| UcdError::Format("manifest lacks n_classes".into()))?;
    Ok((Dataset { n_classes, images }, schedule))
}
