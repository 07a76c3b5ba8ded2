//! Per-patch segmenter: a two-layer tanh featurizer followed by a linear
//! classifier, evaluated on a strided grid, with hand-written backprop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, UcdError};
use crate::numerics::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    /// Odd side length of the square input patch.
    pub patch_size: usize,
    pub in_channels: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            patch_size: 7,
            in_channels: 3,
            hidden_dim: 32,
            feature_dim: 16,
        }
    }
}

impl Arch {
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }
}

/// Model parameters; also used for their gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `hidden × patch_len`
    pub w1: DenseTensor,
    pub b1: DenseTensor,
    /// `feature × hidden`
    pub w2: DenseTensor,
    pub b2: DenseTensor,
    /// `classes × feature`
    pub wc: DenseTensor,
    pub bc: DenseTensor,
}

pub const PARAM_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "wc", "bc"];

impl Params {
    pub fn tensors(&self) -> [&DenseTensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.wc, &self.bc]
    }

    pub fn tensors_mut(&mut self) -> [&mut DenseTensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.wc,
            &mut self.bc,
        ]
    }

    pub fn zeros_like(&self) -> Params {
        let z = |t: &DenseTensor| DenseTensor::zeros(t.shape());
        Params {
            w1: z(&self.w1),
            b1: z(&self.b1),
            w2: z(&self.w2),
            b2: z(&self.b2),
            wc: z(&self.wc),
            bc: z(&self.bc),
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Params) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_scaled(alpha, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.scale(alpha);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.squared_norm()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmenter {
    pub arch: Arch,
    pub params: Params,
}

/// Outputs of one forward pass, all on the `h × w` feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub hidden: DenseTensor,
    pub features: DenseTensor,
    pub logits: DenseTensor,
}

/// Upstream gradients; `None` stands for zeros.
#[derive(Debug, Clone, Copy, Default)]
pub struct Upstream<'a> {
    pub hidden: Option<&'a DenseTensor>,
    pub features: Option<&'a DenseTensor>,
    pub logits: Option<&'a DenseTensor>,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// `y = W x + b` for a row-major `W`.
fn affine(w: &DenseTensor, b: &DenseTensor, x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w.data()[r * cols..(r + 1) * cols];
        *o = b.data()[r] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

/// `out += Wᵀ g`
fn affine_transpose(w: &DenseTensor, g: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (r, gr) in g.iter().enumerate() {
        if *gr == 0.0 {
            continue;
        }
        let row = &w.data()[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += gr * a;
        }
    }
}

/// `dW += g ⊗ x`, `db += g`
fn accumulate_outer(dw: &mut DenseTensor, db: &mut DenseTensor, g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, gr) in g.iter().enumerate() {
        if *gr == 0.0 {
            continue;
        }
        db.data_mut()[r] += gr;
        let row = &mut dw.data_mut()[r * cols..(r + 1) * cols];
        for (d, v) in row.iter_mut().zip(x) {
            *d += gr * v;
        }
    }
}

impl Segmenter {
    /// Gaussian init scaled by `1/√fan_in`, zero biases.
    pub fn new(arch: Arch, n_outputs: usize, seed: u64) -> Result<Self> {
        if arch.patch_size.is_multiple_of(2) || arch.patch_size == 0 {
            return Err(UcdError::invalid("patch_size must be odd"));
        }
        if arch.in_channels == 0 || arch.hidden_dim == 0 || arch.feature_dim == 0 || n_outputs == 0 {
            return Err(UcdError::invalid("model dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |rows: usize, cols: usize| {
            let dist = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("positive std");
            let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
            DenseTensor::new(vec![rows, cols], data).expect("consistent shape")
        };
        let params = Params {
            w1: init(arch.hidden_dim, arch.patch_len()),
            b1: DenseTensor::zeros(&[arch.hidden_dim]),
            w2: init(arch.feature_dim, arch.hidden_dim),
            b2: DenseTensor::zeros(&[arch.feature_dim]),
            wc: init(n_outputs, arch.feature_dim),
            bc: DenseTensor::zeros(&[n_outputs]),
        };
        Ok(Self { arch, params })
    }

    /// Number of classifier outputs (`T^k`, background included).
    pub fn n_outputs(&self) -> usize {
        self.params.bc.len()
    }

    fn grid(&self, image: &DenseTensor, stride: usize) -> Result<(usize, usize)> {
        let s = image.shape();
        if image.rank() != 3 || s[2] != self.arch.in_channels {
            return Err(UcdError::shape(format!(
                "expected H×W×{} image, got {s:?}",
                self.arch.in_channels
            )));
        }
        if stride == 0 || !s[0].is_multiple_of(stride) || !s[1].is_multiple_of(stride) {
            return Err(UcdError::invalid(format!("stride {stride} does not divide {s:?}")));
        }
        let half = self.arch.patch_size / 2;
        if half >= s[0] || half >= s[1] {
            return Err(UcdError::invalid("patch larger than the image"));
        }
        Ok((s[0] / stride, s[1] / stride))
    }

    /// Patch centred on pixel `(i·s, j·s)` with reflective borders.
    fn patch(&self, image: &DenseTensor, stride: usize, i: usize, j: usize, out: &mut Vec<f64>) {
        out.clear();
        let (hh, ww) = (image.shape()[0], image.shape()[1]);
        let half = (self.arch.patch_size / 2) as isize;
        let (cy, cx) = ((i * stride) as isize, (j * stride) as isize);
        for dy in -half..=half {
            let r = reflect(cy + dy, hh);
            for dx in -half..=half {
                let c = reflect(cx + dx, ww);
                out.extend_from_slice(image.lane(r * ww + c));
            }
        }
    }

    pub fn forward(&self, image: &DenseTensor, stride: usize) -> Result<Forward> {
        let (h, w) = self.grid(image, stride)?;
        let a = self.arch;
        let t = self.n_outputs();
        let mut hidden = DenseTensor::zeros(&[h, w, a.hidden_dim]);
        let mut features = DenseTensor::zeros(&[h, w, a.feature_dim]);
        let mut logits = DenseTensor::zeros(&[h, w, t]);
        let mut x = Vec::with_capacity(a.patch_len());
        let p = &self.params;
        for i in 0..h {
            for j in 0..w {
                let cell = i * w + j;
                self.patch(image, stride, i, j, &mut x);
                let hv = hidden.lane_mut(cell);
                affine(&p.w1, &p.b1, &x, hv);
                hv.iter_mut().for_each(|v| *v = v.tanh());
                let hv = hidden.lane(cell).to_vec();
                affine(&p.w2, &p.b2, &hv, features.lane_mut(cell));
                let fv = features.lane(cell).to_vec();
                affine(&p.wc, &p.bc, &fv, logits.lane_mut(cell));
            }
        }
        Ok(Forward {
            hidden,
            features,
            logits,
        })
    }

    /// Parameter gradients for the given upstream gradients.
    pub fn backward(&self, image: &DenseTensor, stride: usize, upstream: Upstream<'_>) -> Result<Params> {
        let fwd = self.forward(image, stride)?;
        let check = |g: Option<&DenseTensor>, like: &DenseTensor, name: &str| -> Result<()> {
            match g {
                Some(g) if g.shape() != like.shape() => Err(UcdError::shape(format!(
                    "{name} gradient {:?} vs output {:?}",
                    g.shape(),
                    like.shape()
                ))),
                _ => Ok(()),
            }
        };
        check(upstream.hidden, &fwd.hidden, "hidden")?;
        check(upstream.features, &fwd.features, "feature")?;
        check(upstream.logits, &fwd.logits, "logit")?;

        let p = &self.params;
        let mut grads = p.zeros_like();
        let (h, w) = (fwd.hidden.shape()[0], fwd.hidden.shape()[1]);
        let mut x = Vec::with_capacity(self.arch.patch_len());
        for i in 0..h {
            for j in 0..w {
                let cell = i * w + j;
                let mut g_feat = match upstream.features {
                    Some(g) => g.lane(cell).to_vec(),
                    None => vec![0.0; self.arch.feature_dim],
                };
                if let Some(gl) = upstream.logits {
                    let gl = gl.lane(cell);
                    accumulate_outer(&mut grads.wc, &mut grads.bc, gl, fwd.features.lane(cell));
                    affine_transpose(&p.wc, gl, &mut g_feat);
                }
                let hv = fwd.hidden.lane(cell);
                accumulate_outer(&mut grads.w2, &mut grads.b2, &g_feat, hv);
                let mut g_hidden = match upstream.hidden {
                    Some(g) => g.lane(cell).to_vec(),
                    None => vec![0.0; self.arch.hidden_dim],
                };
                affine_transpose(&p.w2, &g_feat, &mut g_hidden);
                for (g, a) in g_hidden.iter_mut().zip(hv) {
                    *g *= 1.0 - a * a;
                }
                if g_hidden.iter().any(|&v| v != 0.0) {
                    self.patch(image, stride, i, j, &mut x);
                    accumulate_outer(&mut grads.w1, &mut grads.b1, &g_hidden, &x);
                }
            }
        }
        Ok(grads)
    }

    /// Appends `new_count` zero rows to the classifier.
    pub fn expand_classifier(&self, new_count: usize) -> Segmenter {
        let mut out = self.clone();
        if new_count == 0 {
            return out;
        }
        let d = self.arch.feature_dim;
        let t = self.n_outputs() + new_count;
        let mut wc = self.params.wc.data().to_vec();
        wc.resize(t * d, 0.0);
        let mut bc = self.params.bc.data().to_vec();
        bc.resize(t, 0.0);
        out.params.wc = DenseTensor::new(vec![t, d], wc).expect("consistent shape");
        out.params.bc = DenseTensor::new(vec![t], bc).expect("consistent shape");
        out
    }

    pub fn freeze(&self) -> FrozenSegmenter {
        FrozenSegmenter(self.clone())
    }

    /// Writes `manifest.txt` plus one tensor file per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let a = self.arch;
        let mut m = String::new();
        let _ = writeln!(m, "patch_size {}", a.patch_size);
        let _ = writeln!(m, "in_channels {}", a.in_channels);
        let _ = writeln!(m, "hidden_dim {}", a.hidden_dim);
        let _ = writeln!(m, "feature_dim {}", a.feature_dim);
        let _ = writeln!(m, "n_outputs {}", self.n_outputs());
        for (name, t) in PARAM_NAMES.iter().zip(self.params.tensors()) {
            let file = format!("{name}.bin");
            let _ = writeln!(m, "param {name} {file}");
            fs::write(dir.join(&file), t.to_bytes())?;
        }
        fs::write(dir.join("manifest.txt"), m)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Segmenter> {
        let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
        let mut arch = Arch::default();
        let mut n_outputs = None;
        let mut tensors: Vec<Option<DenseTensor>> = vec![None; 6];
        for line in manifest.lines() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<usize> {
                parts
                    .get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| UcdError::Format(format!("bad manifest line {line:?}")))
            };
            match parts.first().copied() {
                Some("patch_size") => arch.patch_size = num(1)?,
                Some("in_channels") => arch.in_channels = num(1)?,
                Some("hidden_dim") => arch.hidden_dim = num(1)?,
                Some("feature_dim") => arch.feature_dim = num(1)?,
                Some("n_outputs") => n_outputs = Some(num(1)?),
                Some("param") if parts.len() == 3 => {
                    let slot = PARAM_NAMES
                        .iter()
                        .position(|n| *n == parts[1])
                        .ok_or_else(|| UcdError::Format(format!("unknown parameter {}", parts[1])))?;
                    tensors[slot] = Some(DenseTensor::from_bytes(&fs::read(dir.join(parts[2]))?)?);
                }
                None => {}
                _ => return Err(UcdError::Format(format!("bad manifest line {line:?}"))),
            }
        }
        let n_outputs = n_outputs.ok_or_else(|| UcdError::Format("manifest lacks n_outputs".into()))?;
        let mut it = tensors.into_iter().enumerate().map(|(i, t)| {
            t.ok_or_else(|| UcdError::Format(format!("missing parameter {}", PARAM_NAMES[i])))
        });
        let mut next = || it.next().expect("six slots");
        let params = Params {
            w1: next()?,
            b1: next()?,
            w2: next()?,
            b2: next()?,
            wc: next()?,
            bc: next()?,
        };
        let model = Segmenter { arch, params };
        let expected = Segmenter::new(arch, n_outputs, 0)?;
        for (name, (a, b)) in PARAM_NAMES
            .iter()
            .zip(model.params.tensors().into_iter().zip(expected.params.tensors()))
        {
            if a.shape() != b.shape() {
                return Err(UcdError::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(model)
    }
}

/// Read-only copy of a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenSegmenter(Segmenter);

impl FrozenSegmenter {
    pub fn model(&self) -> &Segmenter {
        &self.0
    }

    pub fn forward(&self, image: &DenseTensor, stride: usize) -> Result<Forward> {
        self.0.forward(image, stride)
    }

    pub fn n_outputs(&self) -> usize {
        self.0.n_outputs()
    }
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ v + (g + λ θ)`, `θ ← θ − η v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Params>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, model: &mut Segmenter, grads: &Params) -> Result<()> {
        let mut update = grads.clone();
        if self.weight_decay != 0.0 {
            update.add_scaled(self.weight_decay, &model.params)?;
        }
        let v = match self.velocity.take() {
            Some(mut v) if v.w1.shape() == update.w1.shape() && v.wc.shape() == update.wc.shape() => {
                v.scale(self.momentum);
                v.add_scaled(1.0, &update)?;
                v
            }
            _ => update,
        };
        if self.lr != 0.0 {
            model.params.add_scaled(-self.lr, &v)?;
        }
        self.velocity = Some(v);
        Ok(())
    }
}
