//! An analytically constructed convolutional toy model `f = h ∘ g`.
//!
//! `g` correlates the input with `k` fixed templates, applies ReLU and
//! global-average-pools each map into one activation; `h` is affine. The
//! default templates are oriented edges living in separate input channels, so
//! the activation direction of template `i` is exactly the unit vector `e_i`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CraftError, Result};
use crate::npy;
use crate::rng::{streams, Rng};
use crate::tensor::{Matrix, Tensor4};

/// Feature extractor `g` with an exact vector-Jacobian product.
pub trait Backbone: Sync {
    /// `(height, width, channels)` of one input image.
    fn input_shape(&self) -> (usize, usize, usize);
    fn n_features(&self) -> usize;
    fn features(&self, x: &Tensor4) -> Result<Matrix>;
    /// Gradient of `⟨features(x), cotangent⟩` with respect to `x`.
    fn vjp_features(&self, x: &Tensor4, cotangent: &Matrix) -> Result<Tensor4>;
}

/// Output function `h` on one activation vector.
pub trait Head: Sync {
    fn n_inputs(&self) -> usize;
    fn forward(&self, a: &[f64]) -> f64;
    fn gradient(&self, a: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Head for LinearHead {
    fn n_inputs(&self) -> usize {
        self.weights.len()
    }

    fn forward(&self, a: &[f64]) -> f64 {
        self.weights.iter().zip(a).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    fn gradient(&self, _a: &[f64]) -> Vec<f64> {
        self.weights.clone()
    }
}

/// `scale · a_p · a_q + Σ_k weights_k a_k`
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionHead {
    pub pair: (usize, usize),
    pub scale: f64,
    pub weights: Vec<f64>,
}

impl Head for InteractionHead {
    fn n_inputs(&self) -> usize {
        self.weights.len()
    }

    fn forward(&self, a: &[f64]) -> f64 {
        let (p, q) = self.pair;
        self.scale * a[p] * a[q] + self.weights.iter().zip(a).map(|(w, x)| w * x).sum::<f64>()
    }

    fn gradient(&self, a: &[f64]) -> Vec<f64> {
        let (p, q) = self.pair;
        let mut g = self.weights.clone();
        g[p] += self.scale * a[q];
        g[q] += self.scale * a[p];
        g
    }
}

/// Applies a head to every row of an activation matrix.
pub fn head_outputs(head: &dyn Head, a: &Matrix) -> Result<Vec<f64>> {
    if a.cols() != head.n_inputs() {
        return Err(CraftError::arg(format!(
            "head expects {} activations, got {}",
            head.n_inputs(),
            a.cols()
        )));
    }
    Ok(a.row_iter().map(|row| head.forward(row)).collect())
}

/// Row-wise head gradients `∂h/∂a`.
pub fn head_gradients(head: &dyn Head, a: &Matrix) -> Result<Matrix> {
    if a.cols() != head.n_inputs() {
        return Err(CraftError::arg(format!(
            "head expects {} activations, got {}",
            head.n_inputs(),
            a.cols()
        )));
    }
    let rows: Vec<f64> = a.row_iter().flat_map(|row| head.gradient(row)).collect();
    Matrix::new(a.rows(), a.cols(), rows)
}

/// Odd edge profile of the default templates.
const EDGE_PROFILE: [f64; 5] = [1.0, 2.0, 0.0, -2.0, -1.0];
pub const TEMPLATE_SIDE: usize = 5;
pub const IMAGE_SIDE: usize = 16;
pub const N_TEMPLATES: usize = 4;

/// Correlation filter stored densely as `(side_h, side_w, channels)` plus its
/// non-zero entries.
#[derive(Debug, Clone, PartialEq)]
struct Template {
    dense: Vec<f64>,
    taps: Vec<(usize, usize, usize, f64)>,
}

impl Template {
    fn new(dense: Vec<f64>, shape: (usize, usize, usize)) -> Self {
        let (_, tw, c) = shape;
        let taps = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(k, &v)| (k / (tw * c), (k / c) % tw, k % c, v))
            .collect();
        Self { dense, taps }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    templates: Vec<Template>,
    template_shape: (usize, usize, usize),
    input_shape: (usize, usize, usize),
    pub head: LinearHead,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    input_shape: (usize, usize, usize),
    template_shape: (usize, usize, usize),
    head: LinearHead,
    #[serde(default)]
    early_head: Option<LinearHead>,
}

impl ToyBackbone {
    pub fn new(
        templates: Vec<Vec<f64>>,
        template_shape: (usize, usize, usize),
        input_shape: (usize, usize, usize),
        head: LinearHead,
    ) -> Result<Self> {
        let (th, tw, tc) = template_shape;
        let (h, w, c) = input_shape;
        if templates.is_empty() {
            return Err(CraftError::arg("at least one template is required"));
        }
        if tc != c || th == 0 || tw == 0 || th > h || tw > w {
            return Err(CraftError::arg(format!(
                "template shape {template_shape:?} does not fit input shape {input_shape:?}"
            )));
        }
        if let Some(t) = templates.iter().find(|t| t.len() != th * tw * tc) {
            return Err(CraftError::arg(format!(
                "template has {} values, expected {}",
                t.len(),
                th * tw * tc
            )));
        }
        if head.weights.len() != templates.len() {
            return Err(CraftError::arg(format!(
                "{} head weights for {} templates",
                head.weights.len(),
                templates.len()
            )));
        }
        Ok(Self {
            templates: templates.into_iter().map(|t| Template::new(t, template_shape)).collect(),
            template_shape,
            input_shape,
            head,
        })
    }

    /// Four unit-norm oriented edges (horizontal, vertical, diagonal,
    /// anti-diagonal), template `i` in input channel `i`. The head favours
    /// template 0 and is positive exactly when it is present.
    pub fn standard() -> Self {
        let s = TEMPLATE_SIDE;
        let norm = EDGE_PROFILE.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut templates = Vec::with_capacity(N_TEMPLATES);
        for t in 0..N_TEMPLATES {
            let mut dense = vec![0.0; s * s * N_TEMPLATES];
            for (k, &v) in EDGE_PROFILE.iter().enumerate() {
                let (y, x) = match t {
                    0 => (s / 2, k),
                    1 => (k, s / 2),
                    2 => (k, k),
                    _ => (k, s - 1 - k),
                };
                dense[(y * s + x) * N_TEMPLATES + t] = v / norm;
            }
            templates.push(dense);
        }
        let positions = ((IMAGE_SIDE - s + 1) * (IMAGE_SIDE - s + 1)) as f64;
        let head = LinearHead {
            weights: [1.0, 0.2, 0.1, -0.1].iter().map(|w| w * positions).collect(),
            bias: -0.9,
        };
        Self::new(
            templates,
            (s, s, N_TEMPLATES),
            (IMAGE_SIDE, IMAGE_SIDE, N_TEMPLATES),
            head,
        )
        .expect("standard toy shapes are consistent")
    }

    pub fn n_templates(&self) -> usize {
        self.templates.len()
    }

    pub fn template_shape(&self) -> (usize, usize, usize) {
        self.template_shape
    }

    /// Dense `(side_h, side_w, channels)` values of template `i`.
    pub fn template(&self, i: usize) -> &[f64] {
        &self.templates[i].dense
    }

    /// Activation direction produced by template `i` alone, unit-normalized.
    pub fn template_direction(&self, i: usize) -> Result<Vec<f64>> {
        let (th, tw, c) = self.template_shape;
        let (h, w, _) = self.input_shape;
        let mut x = Tensor4::zeros([1, h, w, c]);
        let (y0, x0) = ((h - th) / 2, (w - tw) / 2);
        for (dy, dx, ch, v) in &self.templates[i].taps {
            x.set(0, y0 + dy, x0 + dx, *ch, *v);
        }
        let a = self.features(&x)?;
        let n = crate::tensor::norm(a.row(0));
        Ok(a.row(0).iter().map(|v| v / n).collect())
    }

    pub fn head_outputs(&self, a: &Matrix) -> Result<Vec<f64>> {
        head_outputs(&self.head, a)
    }

    /// Class predictions: 1 where the head output is positive, else 0.
    pub fn predict(&self, x: &Tensor4) -> Result<Vec<i64>> {
        let a = self.features(x)?;
        Ok(self.head_outputs(&a)?.into_iter().map(|v| i64::from(v > 0.0)).collect())
    }

    /// Same architecture and head with every template replaced by unit-norm
    /// Gaussian noise.
    pub fn randomize_weights(&self, seed: u64) -> Self {
        let mut rng = Rng::new(seed, streams::RANDOMIZE);
        let templates = self
            .templates
            .iter()
            .map(|t| {
                let raw: Vec<f64> = t.dense.iter().map(|_| rng.normal()).collect();
                let n = crate::tensor::norm(&raw);
                raw.into_iter().map(|v| v / n).collect()
            })
            .collect();
        Self::new(templates, self.template_shape, self.input_shape, self.head.clone())
            .expect("shapes unchanged")
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        if x.image_shape() != self.input_shape {
            return Err(CraftError::arg(format!(
                "input images have shape {:?}, model expects {:?}",
                x.image_shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    fn out_dims(&self) -> (usize, usize) {
        (
            self.input_shape.0 - self.template_shape.0 + 1,
            self.input_shape.1 - self.template_shape.1 + 1,
        )
    }

    fn pre_activation(&self, img: &[f64], t: &Template, y: usize, x: usize) -> f64 {
        let (_, w, c) = self.input_shape;
        t.taps
            .iter()
            .map(|&(dy, dx, ch, v)| img[((y + dy) * w + x + dx) * c + ch] * v)
            .sum()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.save_with(dir, "toy", None, None)
    }

    fn save_with(&self, dir: &Path, kind: &str, head: Option<&LinearHead>, mix: Option<&Matrix>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CraftError::io(dir, e))?;
        let (th, tw, c) = self.template_shape;
        let data: Vec<f64> = self.templates.iter().flat_map(|t| t.dense.iter().copied()).collect();
        npy::save_tensor4(&Tensor4::new([self.templates.len(), th, tw, c], data)?, dir.join("templates.npy"))?;
        if let Some(m) = mix {
            npy::save_matrix(m, dir.join("mix.npy"))?;
        }
        let manifest = Manifest {
            kind: kind.to_string(),
            input_shape: self.input_shape,
            template_shape: self.template_shape,
            head: head.unwrap_or(&self.head).clone(),
            early_head: head.map(|_| self.head.clone()),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| CraftError::io(&path, e))
    }
}

impl Backbone for ToyBackbone {
    fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    fn n_features(&self) -> usize {
        self.templates.len()
    }

    fn features(&self, x: &Tensor4) -> Result<Matrix> {
        self.check_input(x)?;
        let (oh, ow) = self.out_dims();
        let k = self.templates.len();
        let area = (oh * ow) as f64;
        let rows: Vec<Vec<f64>> = (0..x.batch())
            .into_par_iter()
            .map(|b| {
                let img = x.image_data(b);
                self.templates
                    .iter()
                    .map(|t| {
                        let mut total = 0.0;
                        for y in 0..oh {
                            for xx in 0..ow {
                                let v = self.pre_activation(img, t, y, xx);
                                if v > 0.0 {
                                    total += v;
                                }
                            }
                        }
                        total / area
                    })
                    .collect()
            })
            .collect();
        Matrix::new(x.batch(), k, rows.concat())
    }

    fn vjp_features(&self, x: &Tensor4, cotangent: &Matrix) -> Result<Tensor4> {
        self.check_input(x)?;
        if cotangent.shape() != (x.batch(), self.templates.len()) {
            return Err(CraftError::arg(format!(
                "cotangent has shape {:?}, expected {:?}",
                cotangent.shape(),
                (x.batch(), self.templates.len())
            )));
        }
        let (oh, ow) = self.out_dims();
        let (h, w, c) = self.input_shape;
        let area = (oh * ow) as f64;
        let images: Vec<Vec<f64>> = (0..x.batch())
            .into_par_iter()
            .map(|b| {
                let img = x.image_data(b);
                let mut grad = vec![0.0; h * w * c];
                for (t, &ct) in self.templates.iter().zip(cotangent.row(b)) {
                    if ct == 0.0 {
                        continue;
                    }
                    let scale = ct / area;
                    for y in 0..oh {
                        for xx in 0..ow {
                            if self.pre_activation(img, t, y, xx) > 0.0 {
                                for &(dy, dx, ch, v) in &t.taps {
                                    grad[((y + dy) * w + xx + dx) * c + ch] += scale * v;
                                }
                            }
                        }
                    }
                }
                grad
            })
            .collect();
        Tensor4::new([x.batch(), h, w, c], images.concat())
    }
}

/// Two-stage toy: the late layer linearly mixes the pooled template
/// responses of an early [`ToyBackbone`] with a nonnegative matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBackbone {
    early: ToyBackbone,
    /// `late × early` mixing weights.
    mix: Matrix,
    pub head: LinearHead,
}

impl MixedBackbone {
    pub fn new(early: ToyBackbone, mix: Matrix, head: LinearHead) -> Result<Self> {
        if mix.cols() != early.n_templates() || !mix.is_nonnegative() {
            return Err(CraftError::arg(format!(
                "mixing matrix must be nonnegative with {} columns",
                early.n_templates()
            )));
        }
        if head.weights.len() != mix.rows() {
            return Err(CraftError::arg("late head size does not match the mixing matrix"));
        }
        Ok(Self { early, mix, head })
    }

    /// Late features `[a₀ + a₁, a₂, a₃]` over the standard toy: templates 0
    /// and 1 merge into one late concept, which the head favours.
    pub fn standard() -> Self {
        let early = ToyBackbone::standard();
        let mix = Matrix::from_rows(&[
            vec![1.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
        .expect("static shape");
        let scale = early.head.weights[0];
        let head = LinearHead {
            weights: vec![scale, 0.1 * scale, -0.1 * scale],
            bias: -0.9,
        };
        Self::new(early, mix, head).expect("standard mixed shapes are consistent")
    }

    pub fn early(&self) -> &ToyBackbone {
        &self.early
    }

    pub fn mix(&self) -> &Matrix {
        &self.mix
    }

    pub fn randomize_weights(&self, seed: u64) -> Self {
        Self {
            early: self.early.randomize_weights(seed),
            mix: self.mix.clone(),
            head: self.head.clone(),
        }
    }
}

impl Backbone for MixedBackbone {
    fn input_shape(&self) -> (usize, usize, usize) {
        self.early.input_shape
    }

    fn n_features(&self) -> usize {
        self.mix.rows()
    }

    fn features(&self, x: &Tensor4) -> Result<Matrix> {
        Ok(self.early.features(x)?.matmul_t(&self.mix))
    }

    fn vjp_features(&self, x: &Tensor4, cotangent: &Matrix) -> Result<Tensor4> {
        if cotangent.cols() != self.mix.rows() {
            return Err(CraftError::arg(format!(
                "cotangent has {} columns, expected {}",
                cotangent.cols(),
                self.mix.rows()
            )));
        }
        self.early.vjp_features(x, &cotangent.matmul(&self.mix))
    }
}

/// Either toy model, as loaded from a model directory or a `toy:` argument.
#[derive(Debug, Clone, PartialEq)]
pub enum ToyModel {
    Single(ToyBackbone),
    Mixed(MixedBackbone),
}

impl ToyModel {
    pub fn backbone(&self) -> &dyn Backbone {
        match self {
            ToyModel::Single(m) => m,
            ToyModel::Mixed(m) => m,
        }
    }

    pub fn head(&self) -> &LinearHead {
        match self {
            ToyModel::Single(m) => &m.head,
            ToyModel::Mixed(m) => &m.head,
        }
    }

    /// The layer below the one the bank is fit on, if the model has one.
    pub fn earlier(&self) -> Option<&ToyBackbone> {
        match self {
            ToyModel::Single(_) => None,
            ToyModel::Mixed(m) => Some(&m.early),
        }
    }

    /// The template backbone at the bottom of the model.
    pub fn base(&self) -> &ToyBackbone {
        match self {
            ToyModel::Single(m) => m,
            ToyModel::Mixed(m) => &m.early,
        }
    }

    pub fn predict(&self, x: &Tensor4) -> Result<Vec<i64>> {
        let a = self.backbone().features(x)?;
        Ok(head_outputs(self.head(), &a)?.into_iter().map(|v| i64::from(v > 0.0)).collect())
    }

    pub fn randomize_weights(&self, seed: u64) -> Self {
        match self {
            ToyModel::Single(m) => ToyModel::Single(m.randomize_weights(seed)),
            ToyModel::Mixed(m) => ToyModel::Mixed(m.randomize_weights(seed)),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        match self {
            ToyModel::Single(m) => m.save(dir),
            ToyModel::Mixed(m) => m.early.save_with(dir, "toy2", Some(&m.head), Some(&m.mix)),
        }
    }

    /// Reads `manifest.json`, `templates.npy` and, for two-stage models, `mix.npy`.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| CraftError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| CraftError::Format(format!("{}: {e}", path.display())))?;
        let t = npy::load_tensor4(dir.join("templates.npy"))?;
        let [k, th, tw, c] = t.dims();
        if (th, tw, c) != manifest.template_shape {
            return Err(CraftError::Format(format!(
                "templates.npy has shape {:?}, manifest says {:?}",
                (th, tw, c),
                manifest.template_shape
            )));
        }
        let templates = (0..k).map(|i| t.image_data(i).to_vec()).collect();
        match manifest.kind.as_str() {
            "toy" => Ok(ToyModel::Single(ToyBackbone::new(
                templates,
                manifest.template_shape,
                manifest.input_shape,
                manifest.head,
            )?)),
            "toy2" => {
                let early_head = manifest
                    .early_head
                    .ok_or_else(|| CraftError::Format("two-stage manifest lacks early_head".into()))?;
                let early = ToyBackbone::new(templates, manifest.template_shape, manifest.input_shape, early_head)?;
                let mix = npy::load_matrix(dir.join("mix.npy"))?;
                Ok(ToyModel::Mixed(MixedBackbone::new(early, mix, manifest.head)?))
            }
            other => Err(CraftError::Unsupported(format!("model kind '{other}'"))),
        }
    }
}

/// One template placed with its top-left corner at `(y, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub template: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StampRule {
    /// Each allowed template independently with probability `p`, at least
    /// one and at most `max` per image.
    Bernoulli { p: f64, max: usize },
    /// Exactly one allowed template, uniformly chosen.
    ExactlyOne,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n: usize,
    pub noise: f64,
    pub seed: u64,
    pub templates: Vec<usize>,
    pub rule: StampRule,
    /// Template whose presence defines the label.
    pub favored: usize,
}

impl DatasetSpec {
    pub fn new(n: usize, noise: f64, seed: u64) -> Self {
        Self {
            n,
            noise,
            seed,
            templates: (0..N_TEMPLATES).collect(),
            rule: StampRule::Bernoulli { p: 0.5, max: 3 },
            favored: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub images: Tensor4,
    pub labels: Vec<i64>,
    pub stamps: Vec<Vec<Stamp>>,
}

/// Images with 1–3 templates stamped at non-overlapping positions plus
/// uniform `[0, noise)` pixel noise; label 1 iff template 0 is present.
pub fn make_synthetic_dataset(model: &ToyBackbone, n: usize, noise: f64, seed: u64) -> Result<SyntheticDataset> {
    generate_dataset(model, &DatasetSpec::new(n, noise, seed))
}

pub fn generate_dataset(model: &ToyBackbone, spec: &DatasetSpec) -> Result<SyntheticDataset> {
    if spec.n == 0 {
        return Err(CraftError::arg("dataset size must be at least 1"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(CraftError::arg(format!("noise must be >= 0, got {}", spec.noise)));
    }
    if spec.templates.is_empty() || spec.templates.iter().any(|&t| t >= model.n_templates()) {
        return Err(CraftError::arg(format!(
            "template ids must be in 0..{}",
            model.n_templates()
        )));
    }
    if let StampRule::Bernoulli { p, max } = spec.rule {
        if !(p > 0.0 && p <= 1.0) || max == 0 {
            return Err(CraftError::arg("stamp probability must be in (0,1] and max >= 1"));
        }
    }
    let (h, w, c) = model.input_shape;
    let (th, tw, _) = model.template_shape;
    let base = Rng::new(spec.seed, streams::DATASET);

    let parts: Vec<(Vec<f64>, Vec<Stamp>)> = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = base.fork(i as u64);
            let mut chosen: Vec<usize> = match spec.rule {
                StampRule::ExactlyOne => vec![spec.templates[rng.below(spec.templates.len())]],
                StampRule::Bernoulli { p, max } => {
                    let mut picked = Vec::new();
                    while picked.is_empty() {
                        picked = spec.templates.iter().copied().filter(|_| rng.bernoulli(p)).collect();
                    }
                    while picked.len() > max {
                        picked.remove(rng.below(picked.len()));
                    }
                    picked
                }
            };
            rng.shuffle(&mut chosen);

            let mut stamps: Vec<Stamp> = Vec::with_capacity(chosen.len());
            for &template in &chosen {
                loop {
                    let y = rng.below(h - th + 1);
                    let x = rng.below(w - tw + 1);
                    let clear = stamps
                        .iter()
                        .all(|s| y + th <= s.y || s.y + th <= y || x + tw <= s.x || s.x + tw <= x);
                    if clear {
                        stamps.push(Stamp { template, y, x });
                        break;
                    }
                }
            }

            let mut img: Vec<f64> = (0..h * w * c)
                .map(|_| if spec.noise > 0.0 { rng.uniform() * spec.noise } else { 0.0 })
                .collect();
            for s in &stamps {
                for &(dy, dx, ch, v) in &model.templates[s.template].taps {
                    img[((s.y + dy) * w + s.x + dx) * c + ch] += v;
                }
            }
            (img, stamps)
        })
        .collect();

    let labels = parts
        .iter()
        .map(|(_, s)| i64::from(s.iter().any(|s| s.template == spec.favored)))
        .collect();
    let (images, stamps): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    Ok(SyntheticDataset {
        images: Tensor4::new([spec.n, h, w, c], images.concat())?,
        labels,
        stamps,
    })
}
