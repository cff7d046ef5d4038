//! Concept extraction on top of a [`Backbone`]: crops, concept banks,
//! recursive refinement, attribution maps and fidelity curves.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CraftError, Result};
use crate::implicit::jacobian_transform;
use crate::nmf::{fit_nmf, transform_solution, FactorizationState, NmfParams};
use crate::npy;
use crate::rng::{streams, Rng};
use crate::sobol::{self, SobolEstimate, SobolSequence};
use crate::tensor::{cosine, Matrix, Tensor4};
use crate::toy::{head_gradients, head_outputs, Backbone, Head};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    /// Corner-anchored, uniformly spaced windows.
    Grid,
    Random(u64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    pub mode: CropMode,
    pub crop_fraction: f64,
    pub crops_per_image: usize,
    pub resize_to: (usize, usize),
}

impl CropSpec {
    pub fn new(resize_to: (usize, usize)) -> Self {
        Self {
            mode: CropMode::Grid,
            crop_fraction: 0.5,
            crops_per_image: 8,
            resize_to,
        }
    }

    /// Side of the square window cut from an `h × w` image.
    pub fn side(&self, h: usize, w: usize) -> Result<usize> {
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(CraftError::arg(format!(
                "crop fraction must be in (0, 1], got {}",
                self.crop_fraction
            )));
        }
        let side = (self.crop_fraction * h.min(w) as f64).round() as usize;
        if side == 0 {
            return Err(CraftError::arg(format!(
                "crop fraction {} gives an empty crop on a {h}x{w} image",
                self.crop_fraction
            )));
        }
        Ok(side)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub image: usize,
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
}

fn spaced(count: usize, span: usize) -> Vec<usize> {
    if count <= 1 {
        return vec![0];
    }
    (0..count)
        .map(|k| (k as f64 * span as f64 / (count - 1) as f64).round() as usize)
        .collect()
}

fn grid_positions(count: usize, h: usize, w: usize, side: usize) -> Vec<(usize, usize)> {
    let rows = ((count as f64).sqrt().floor() as usize).max(1);
    let cols = count.div_ceil(rows);
    let mut out = Vec::with_capacity(count);
    for y in spaced(rows, h - side) {
        for x in spaced(cols, w - side) {
            if out.len() < count && !out.contains(&(y, x)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Bilinear resize with half-pixel centres and clamped borders.
pub fn resize_bilinear(src: &[f64], (h, w, c): (usize, usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ys = axis(oh, h);
    let xs = axis(ow, w);
    let mut out = vec![0.0; oh * ow * c];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * ow + ox) * c + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Raw (un-resized) pixels of one window.
pub fn crop_window(images: &Tensor4, rec: &CropRecord) -> Vec<f64> {
    let (_, w, c) = images.image_shape();
    let img = images.image_data(rec.image);
    let mut out = Vec::with_capacity(rec.side * rec.side * c);
    for y in rec.y0..rec.y0 + rec.side {
        out.extend_from_slice(&img[(y * w + rec.x0) * c..(y * w + rec.x0 + rec.side) * c]);
    }
    out
}

/// Cuts `crops_per_image` square windows from every image and resizes them.
pub fn extract_crops(images: &Tensor4, spec: &CropSpec) -> Result<(Tensor4, Vec<CropRecord>)> {
    let (h, w, c) = images.image_shape();
    let side = spec.side(h, w)?;
    if side > h || side > w {
        return Err(CraftError::arg(format!("crop side {side} exceeds image size {h}x{w}")));
    }
    if spec.crops_per_image == 0 {
        return Err(CraftError::arg("crops_per_image must be at least 1"));
    }
    let (oh, ow) = spec.resize_to;
    if oh == 0 || ow == 0 {
        return Err(CraftError::arg("resize target must be non-empty"));
    }
    let per_image: Vec<Vec<(CropRecord, Vec<f64>)>> = (0..images.batch())
        .into_par_iter()
        .map(|b| {
            let positions = match spec.mode {
                CropMode::Grid => grid_positions(spec.crops_per_image, h, w, side),
                CropMode::Random(seed) => {
                    let mut rng = Rng::new(seed, streams::CROPS).fork(b as u64);
                    (0..spec.crops_per_image)
                        .map(|_| (rng.below(h - side + 1), rng.below(w - side + 1)))
                        .collect()
                }
            };
            positions
                .into_iter()
                .map(|(y0, x0)| {
                    let rec = CropRecord { image: b, x0, y0, side };
                    let pixels = resize_bilinear(&crop_window(images, &rec), (side, side, c), (oh, ow));
                    (rec, pixels)
                })
                .collect()
        })
        .collect();
    let (records, data): (Vec<_>, Vec<_>) = per_image.into_iter().flatten().unzip();
    let crops = Tensor4::new([records.len(), oh, ow, c], data.concat())?;
    Ok((crops, records))
}

/// Binary predictions: class 1 where the head output is positive.
pub fn predict(backbone: &dyn Backbone, head: &dyn Head, images: &Tensor4) -> Result<Vec<i64>> {
    let a = backbone.features(images)?;
    Ok(head_outputs(head, &a)?.into_iter().map(|v| i64::from(v > 0.0)).collect())
}

pub fn select_class_set(predictions: &[i64], target_class: i64) -> Result<Vec<usize>> {
    let idx: Vec<usize> = predictions
        .iter()
        .enumerate()
        .filter(|(_, &p)| p == target_class)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(CraftError::EmptyClassSet { class: target_class });
    }
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParentRef {
    pub bank: String,
    pub concept: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    /// `p × r`, nonnegative with unit-norm columns.
    pub w: Matrix,
    pub layer_tag: String,
    pub rank: usize,
    pub fit_objective: f64,
    pub converged: bool,
    pub kkt_residual: f64,
    pub parent: Option<ParentRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankMeta {
    pub rank: usize,
    pub layer_tag: String,
    pub objective: f64,
    pub column_norms: Vec<f64>,
    pub converged: bool,
    pub kkt_residual: f64,
    pub parent: Option<ParentRef>,
    pub created_by: String,
}

impl ConceptBank {
    pub fn from_state(state: &FactorizationState, layer_tag: &str) -> Self {
        Self {
            w: state.w.clone(),
            layer_tag: layer_tag.to_string(),
            rank: state.rank(),
            fit_objective: state.objective(),
            converged: state.converged,
            kkt_residual: state.kkt_residual,
            parent: None,
        }
    }

    pub fn meta(&self) -> BankMeta {
        BankMeta {
            rank: self.rank,
            layer_tag: self.layer_tag.clone(),
            objective: self.fit_objective,
            column_norms: self.w.col_norms(),
            converged: self.converged,
            kkt_residual: self.kkt_residual,
            parent: self.parent.clone(),
            created_by: concat!("craft-kit ", env!("CARGO_PKG_VERSION")).to_string(),
        }
    }

    /// Writes `W.npy` and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CraftError::io(dir, e))?;
        npy::save_matrix(&self.w, dir.join("W.npy"))?;
        let path = dir.join("meta.json");
        fs::write(&path, serde_json::to_string_pretty(&self.meta())? + "\n").map_err(|e| CraftError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let w = npy::load_matrix(dir.join("W.npy"))?;
        let path = dir.join("meta.json");
        let text = fs::read_to_string(&path).map_err(|e| CraftError::io(&path, e))?;
        let meta: BankMeta =
            serde_json::from_str(&text).map_err(|e| CraftError::Format(format!("{}: {e}", path.display())))?;
        if meta.rank != w.cols() {
            return Err(CraftError::Format(format!(
                "meta.json declares rank {} but W.npy has {} columns",
                meta.rank,
                w.cols()
            )));
        }
        if !w.is_nonnegative() {
            return Err(CraftError::Data("concept bank has negative entries".into()));
        }
        Ok(Self {
            w,
            layer_tag: meta.layer_tag,
            rank: meta.rank,
            fit_objective: meta.objective,
            converged: meta.converged,
            kkt_residual: meta.kkt_residual,
            parent: meta.parent,
        })
    }
}

/// Factorizes an activation matrix into a concept bank and its coefficients.
pub fn fit_bank(activations: &Matrix, params: &NmfParams, layer_tag: &str) -> Result<(ConceptBank, FactorizationState)> {
    if !activations.is_nonnegative() {
        return Err(CraftError::Data("activations must be nonnegative".into()));
    }
    let state = fit_nmf(activations, params)?;
    Ok((ConceptBank::from_state(&state, layer_tag), state))
}

/// Everything produced while building a bank from images.
#[derive(Debug, Clone)]
pub struct BankFit {
    pub bank: ConceptBank,
    pub state: FactorizationState,
    pub class_set: Vec<usize>,
    pub crops: Tensor4,
    pub provenance: Vec<CropRecord>,
    pub activations: Matrix,
}

impl BankFit {
    pub fn coefficients(&self) -> &Matrix {
        &self.state.u
    }
}

/// Crops the images predicted as `target_class`, embeds the crops and
/// factorizes their activations.
pub fn build_concept_bank(
    images: &Tensor4,
    backbone: &dyn Backbone,
    head: &dyn Head,
    target_class: i64,
    spec: &CropSpec,
    params: &NmfParams,
) -> Result<BankFit> {
    let predictions = predict(backbone, head, images)?;
    let class_set = select_class_set(&predictions, target_class)?;
    let (crops, mut provenance) = extract_crops(&images.select(&class_set), spec)?;
    for rec in &mut provenance {
        rec.image = class_set[rec.image];
    }
    let activations = backbone.features(&crops)?;
    let (bank, state) = fit_bank(&activations, params, "features")?;
    Ok(BankFit {
        bank,
        state,
        class_set,
        crops,
        provenance,
        activations,
    })
}

pub const PERCENTILE: usize = 90;
pub const MIN_SELECTED: usize = 10;

/// Threshold at the `⌊0.9·n⌋`-th order statistic, so that exactly
/// `⌈0.1·n⌉` values lie strictly above it when values are distinct.
/// A single value gets `-∞`.
pub fn percentile_threshold(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = PERCENTILE * values.len() / 100;
    Some(if rank == 0 { f64::NEG_INFINITY } else { sorted[rank - 1] })
}

/// Indices whose value is strictly above [`percentile_threshold`].
pub fn select_above_percentile(values: &[f64]) -> Vec<usize> {
    match percentile_threshold(values) {
        Some(t) => values.iter().enumerate().filter(|(_, &v)| v > t).map(|(i, _)| i).collect(),
        None => Vec::new(),
    }
}

#[derive(Debug, Clone)]
pub struct SubBank {
    pub bank: ConceptBank,
    pub state: FactorizationState,
    /// Crop indices whose coefficient exceeded the threshold.
    pub selected: Vec<usize>,
    pub threshold: f64,
}

/// Refits concept `concept` of `bank` at an earlier layer on the crops that
/// express it most.
#[allow(clippy::too_many_arguments)]
pub fn recursive_decompose(
    bank: &ConceptBank,
    bank_id: &str,
    u: &Matrix,
    concept: usize,
    crops: &Tensor4,
    earlier: &dyn Backbone,
    r_sub: usize,
    params: &NmfParams,
) -> Result<SubBank> {
    if concept >= bank.rank || u.cols() != bank.rank {
        return Err(CraftError::arg(format!(
            "concept {concept} out of range for a rank-{} bank",
            bank.rank
        )));
    }
    if u.rows() != crops.batch() {
        return Err(CraftError::arg(format!(
            "{} coefficient rows for {} crops",
            u.rows(),
            crops.batch()
        )));
    }
    let column = u.col(concept);
    let threshold = percentile_threshold(&column).unwrap_or(f64::INFINITY);
    let selected = select_above_percentile(&column);
    if selected.len() < MIN_SELECTED {
        return Err(CraftError::InsufficientData {
            selected: selected.len(),
            required: MIN_SELECTED,
        });
    }
    let activations = earlier.features(&crops.select(&selected))?;
    let sub_params = NmfParams { rank: r_sub, ..*params };
    let (mut sub, state) = fit_bank(&activations, &sub_params, &format!("{}-sub", bank.layer_tag))?;
    sub.parent = Some(ParentRef {
        bank: bank_id.to_string(),
        concept,
    });
    Ok(SubBank {
        bank: sub,
        state,
        selected,
        threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributionMethod {
    Gradient,
    SmoothGrad,
    Occlusion,
}

pub const SMOOTHGRAD_SAMPLES: usize = 16;
pub const SMOOTHGRAD_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Matrix,
    pub concept_index: usize,
    pub method: AttributionMethod,
}

fn reduce_channels(g: &Tensor4) -> Matrix {
    let (h, w, c) = g.image_shape();
    let data = g.image_data(0);
    Matrix::from_fn(h, w, |y, x| data[(y * w + x) * c..(y * w + x + 1) * c].iter().map(|v| v.abs()).sum())
}

fn gradient_map(x: &Tensor4, w: &Matrix, backbone: &dyn Backbone, concept: usize) -> Result<Matrix> {
    let a = backbone.features(x)?;
    let sol = transform_solution(&a, w, &Default::default())?;
    let jac = jacobian_transform(&a, w, &sol)?;
    let mut cot = Matrix::zeros(1, w.cols());
    cot[(0, concept)] = 1.0;
    let d_a = jac.vjp(&cot)?;
    if d_a.max_abs() == 0.0 {
        let (h, wd, _) = x.image_shape();
        return Ok(Matrix::zeros(h, wd));
    }
    Ok(reduce_channels(&backbone.vjp_features(x, &d_a)?))
}

/// Where in `x` (a single image) concept `concept` of the bank is expressed.
///
/// `seed` drives the smoothgrad noise and is ignored by the other methods.
pub fn concept_attribution_map(
    x: &Tensor4,
    bank: &ConceptBank,
    backbone: &dyn Backbone,
    concept: usize,
    method: AttributionMethod,
    seed: u64,
) -> Result<Heatmap> {
    if concept >= bank.rank {
        return Err(CraftError::arg(format!(
            "concept {concept} out of range for a rank-{} bank",
            bank.rank
        )));
    }
    if x.batch() != 1 {
        return Err(CraftError::arg(format!("expected one image, got {}", x.batch())));
    }
    if backbone.n_features() != bank.w.rows() {
        return Err(CraftError::arg(format!(
            "bank has {} features but the model produces {}",
            bank.w.rows(),
            backbone.n_features()
        )));
    }
    let (h, w, c) = x.image_shape();
    let values = match method {
        AttributionMethod::Gradient => gradient_map(x, &bank.w, backbone, concept)?,
        AttributionMethod::SmoothGrad => {
            let data = x.as_slice();
            let range = data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - data.iter().copied().fold(f64::INFINITY, f64::min);
            let sigma = SMOOTHGRAD_SIGMA * range;
            let base = Rng::new(seed, streams::SMOOTHGRAD);
            let maps: Vec<Matrix> = (0..SMOOTHGRAD_SAMPLES)
                .into_par_iter()
                .map(|s| {
                    let mut rng = base.fork(s as u64);
                    let data = x.as_slice().iter().map(|v| v + sigma * rng.normal()).collect();
                    let noisy = Tensor4::new(x.dims(), data)?;
                    gradient_map(&noisy, &bank.w, backbone, concept)
                })
                .collect::<Result<_>>()?;
            let sum = maps.iter().skip(1).fold(maps[0].clone(), |acc, m| acc.add(m));
            sum.scale(1.0 / SMOOTHGRAD_SAMPLES as f64)
        }
        AttributionMethod::Occlusion => {
            let patch = (h.min(w) / 8).max(1);
            let stride = (patch / 2).max(1);
            let mut windows = Vec::new();
            for y in (0..=h - patch).step_by(stride) {
                for xx in (0..=w - patch).step_by(stride) {
                    windows.push((y, xx));
                }
            }
            let mut batch = Vec::with_capacity((windows.len() + 1) * h * w * c);
            batch.extend_from_slice(x.as_slice());
            for &(y0, x0) in &windows {
                let mut img = x.as_slice().to_vec();
                for y in y0..y0 + patch {
                    img[(y * w + x0) * c..(y * w + x0 + patch) * c].iter_mut().for_each(|v| *v = 0.0);
                }
                batch.extend(img);
            }
            let batch = Tensor4::new([windows.len() + 1, h, w, c], batch)?;
            let u = transform_solution(&backbone.features(&batch)?, &bank.w, &Default::default())?.u;
            let base = u[(0, concept)];
            let mut total = Matrix::zeros(h, w);
            let mut hits = Matrix::zeros(h, w);
            for (k, &(y0, x0)) in windows.iter().enumerate() {
                let drop = base - u[(k + 1, concept)];
                for y in y0..y0 + patch {
                    for xx in x0..x0 + patch {
                        total[(y, xx)] += drop;
                        hits[(y, xx)] += 1.0;
                    }
                }
            }
            total.zip_map(&hits, |t, n| if n > 0.0 { t / n } else { 0.0 })
        }
    };
    if !values.is_finite() {
        return Err(CraftError::Numerical("attribution map is not finite".into()));
    }
    Ok(Heatmap {
        values,
        concept_index: concept,
        method,
    })
}

/// Sobol and TCAV importance of every concept, as persisted in `importance.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub concept_id: usize,
    pub total_sobol: f64,
    pub tcav: f64,
    pub n_samples: usize,
    pub degenerate: bool,
}

/// Class-level Sobol importance of the bank's concepts through `head`.
pub fn sobol_importance(
    u: &Matrix,
    w: &Matrix,
    head: &dyn Head,
    n_samples: usize,
    mu: f64,
    sequence: SobolSequence,
) -> Result<SobolEstimate> {
    if head.n_inputs() != w.rows() {
        return Err(CraftError::arg(format!(
            "head expects {} activations but the bank has {} features",
            head.n_inputs(),
            w.rows()
        )));
    }
    sobol::concept_importance(u, w, |a| head.forward(a), n_samples, mu, sequence)
}

/// TCAV scores from head gradients at the given activations.
pub fn tcav_scores(activations: &Matrix, w: &Matrix, head: &dyn Head) -> Result<Vec<f64>> {
    sobol::tcav_importance(&head_gradients(head, activations)?, w)
}

pub fn importance_records(sobol: &SobolEstimate, tcav: &[f64]) -> Vec<ImportanceRecord> {
    sobol
        .total_indices
        .iter()
        .zip(tcav)
        .enumerate()
        .map(|(i, (&s, &t))| ImportanceRecord {
            concept_id: i,
            total_sobol: s,
            tcav: t,
            n_samples: sobol.n_samples,
            degenerate: sobol.degenerate,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Deletion,
    Insertion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankingSource {
    Sobol,
    Tcav,
    Random(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityCurve {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub auc: f64,
    pub direction: Direction,
    pub ranking_source: RankingSource,
}

/// Importance scores that rank concepts in a seeded random order.
pub fn random_importance(r: usize, seed: u64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..r).collect();
    Rng::new(seed, streams::RANKING).shuffle(&mut order);
    let mut scores = vec![0.0; r];
    for (pos, &c) in order.iter().enumerate() {
        scores[c] = (r - pos) as f64;
    }
    scores
}

/// Concepts by decreasing importance; ties keep index order.
pub fn ranking(importance: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]));
    order
}

pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2).zip(ys.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0).sum()
}

/// Mean head output as concepts are removed from (deletion) or added to
/// (insertion) the reconstruction `Ũ Wᵀ`, most important first.
pub fn fidelity_curves(
    u: &Matrix,
    w: &Matrix,
    head: &dyn Head,
    importance: &[f64],
    direction: Direction,
    mu: f64,
    ranking_source: RankingSource,
) -> Result<FidelityCurve> {
    let r = u.cols();
    if w.cols() != r || importance.len() != r {
        return Err(CraftError::arg(format!(
            "U has {r} concepts, W has {} and importance has {}",
            w.cols(),
            importance.len()
        )));
    }
    if u.rows() == 0 {
        return Err(CraftError::arg("U has no rows"));
    }
    let order = ranking(importance);
    let mut xs = Vec::with_capacity(r + 1);
    let mut ys = Vec::with_capacity(r + 1);
    for k in 0..=r {
        let mut keep = vec![direction == Direction::Deletion; r];
        for &c in &order[..k] {
            keep[c] = direction == Direction::Insertion;
        }
        let masked = Matrix::from_fn(u.rows(), r, |i, j| if keep[j] { u[(i, j)] } else { mu });
        let outputs = head_outputs(head, &masked.matmul_t(w))?;
        xs.push(k as f64 / r as f64);
        ys.push(outputs.iter().sum::<f64>() / outputs.len() as f64);
    }
    let auc = trapezoid(&xs, &ys);
    Ok(FidelityCurve {
        xs,
        ys,
        auc,
        direction,
        ranking_source,
    })
}

/// Principal angles (radians, ascending) between the column spans of `a` and `b`.
pub fn principal_angles(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    if a.rows() != b.rows() {
        return Err(CraftError::arg(format!(
            "subspaces live in R^{} and R^{}",
            a.rows(),
            b.rows()
        )));
    }
    let to_na = |m: &Matrix| nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let qa = to_na(a).qr().q();
    let qb = to_na(b).qr().q();
    let k = a.cols().min(b.cols()).min(a.rows());
    let qa = qa.columns(0, a.cols().min(a.rows())).into_owned();
    let qb = qb.columns(0, b.cols().min(b.rows())).into_owned();
    let sv = (qa.transpose() * qb).singular_values();
    let mut cosines: Vec<f64> = sv.iter().copied().collect();
    cosines.sort_by(|x, y| y.total_cmp(x));
    Ok(cosines.into_iter().take(k).map(|c| c.clamp(-1.0, 1.0).acos()).collect())
}

/// Best one-to-one assignment of bank columns to reference directions,
/// returned as the matched cosine for each reference (exhaustive, small r).
pub fn matched_cosines(w: &Matrix, references: &[Vec<f64>]) -> Result<Vec<f64>> {
    let r = w.cols();
    if references.len() > r || r > 8 {
        return Err(CraftError::arg(format!(
            "cannot match {} references against {r} columns",
            references.len()
        )));
    }
    let cos = Matrix::from_fn(references.len(), r, |i, j| cosine(&references[i], &w.col(j)));
    let mut best = (f64::NEG_INFINITY, vec![]);
    let mut used = vec![false; r];
    let mut pick = Vec::with_capacity(references.len());
    fn search(
        cos: &Matrix,
        used: &mut [bool],
        pick: &mut Vec<usize>,
        best: &mut (f64, Vec<usize>),
    ) {
        if pick.len() == cos.rows() {
            let total: f64 = pick.iter().enumerate().map(|(i, &j)| cos[(i, j)]).sum();
            if total > best.0 {
                *best = (total, pick.clone());
            }
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                pick.push(j);
                search(cos, used, pick, best);
                pick.pop();
                used[j] = false;
            }
        }
    }
    search(&cos, &mut used, &mut pick, &mut best);
    Ok(best.1.iter().enumerate().map(|(i, &j)| cos[(i, j)]).collect())
}
