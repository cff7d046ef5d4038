//! Workflows over a run directory, shared by the command-line tool and the
//! end-to-end tests.
//!
//! Layout written under the output directory:
//!
//! ```text
//! run.json            inputs needed by later commands
//! crops.npy           resized crops of the class set
//! provenance.json     (image, x0, y0, side) per crop
//! activations.npy     crop activations, n × p
//! bank/W.npy          concept bank, p × r
//! bank/meta.json
//! coeffs.npy          concept coefficients, n × r
//! importance.json
//! curves.csv          fraction,mean_output (sobol ranking, deletion)
//! curves_<ranking>_<direction>.csv
//! heatmaps/<image>_<concept>.npy
//! sub_<concept>/      recursive sub-bank
//! sanity.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CraftError, Result};
use crate::nmf::NmfParams;
use crate::npy;
use crate::pipeline::{
    self, AttributionMethod, ConceptBank, CropMode, CropRecord, CropSpec, Direction, ImportanceRecord, RankingSource,
};
use crate::sobol::SobolSequence;
use crate::tensor::{Matrix, Tensor4};
use crate::toy::{generate_dataset, Backbone, DatasetSpec, MixedBackbone, ToyBackbone, ToyModel};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSource {
    /// Standard toy model; the seed drives the generated dataset.
    Toy(u64),
    /// Two-stage toy model.
    Toy2(u64),
    Dir(PathBuf),
}

impl ModelSource {
    pub fn parse(spec: &str) -> Result<Self> {
        let seed = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| CraftError::arg(format!("--model: bad seed in '{spec}'")))
        };
        if let Some(s) = spec.strip_prefix("toy:") {
            Ok(ModelSource::Toy(seed(s)?))
        } else if let Some(s) = spec.strip_prefix("toy2:") {
            Ok(ModelSource::Toy2(seed(s)?))
        } else {
            Ok(ModelSource::Dir(PathBuf::from(spec)))
        }
    }

    fn load(&self) -> Result<ToyModel> {
        match self {
            ModelSource::Toy(_) => Ok(ToyModel::Single(ToyBackbone::standard())),
            ModelSource::Toy2(_) => Ok(ToyModel::Mixed(MixedBackbone::standard())),
            ModelSource::Dir(dir) => ToyModel::load(dir),
        }
    }

    fn dataset_seed(&self) -> Option<u64> {
        match self {
            ModelSource::Toy(s) | ModelSource::Toy2(s) => Some(*s),
            ModelSource::Dir(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingKind {
    Sobol,
    Tcav,
    Random,
}

impl RankingKind {
    pub fn name(self) -> &'static str {
        match self {
            RankingKind::Sobol => "sobol",
            RankingKind::Tcav => "tcav",
            RankingKind::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropModeKind {
    Grid,
    Random,
}

/// Every option any command accepts; commands ignore what they do not use.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out: PathBuf,
    pub model: Option<String>,
    pub activations: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub class: i64,
    pub rank: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub crop_fraction: f64,
    pub crops_per_image: usize,
    pub crop_mode: CropModeKind,
    pub mu: f64,
    pub ranking: RankingKind,
    pub direction: Direction,
    pub method: AttributionMethod,
    pub concept: Option<usize>,
    pub n_images: usize,
    pub noise: f64,
    pub max_images: usize,
}

impl RunConfig {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            model: None,
            activations: None,
            images: None,
            class: 1,
            rank: 4,
            n_samples: 1024,
            seed: 0,
            crop_fraction: 0.5,
            crops_per_image: 8,
            crop_mode: CropModeKind::Grid,
            mu: 0.0,
            ranking: RankingKind::Sobol,
            direction: Direction::Deletion,
            method: AttributionMethod::Gradient,
            concept: None,
            n_images: 200,
            noise: 0.01,
            max_images: 4,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(CraftError::arg("--rank must be at least 1"));
        }
        if self.n_samples < 2 {
            return Err(CraftError::arg(format!("--n-samples must be at least 2, got {}", self.n_samples)));
        }
        if !self.mu.is_finite() {
            return Err(CraftError::arg("--mu must be finite"));
        }
        if self.n_images == 0 {
            return Err(CraftError::arg("--n-images must be at least 1"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(CraftError::arg("--noise must be >= 0"));
        }
        for (flag, path) in [("--activations", &self.activations), ("--images", &self.images)] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(CraftError::arg(format!("{flag}: no such file {}", p.display())));
                }
            }
        }
        if let Some(ModelSource::Dir(dir)) = self.model.as_deref().map(ModelSource::parse).transpose()? {
            if !dir.join("manifest.json").is_file() {
                return Err(CraftError::arg(format!(
                    "--model: {} is not a model directory (no manifest.json)",
                    dir.display()
                )));
            }
        }
        Ok(())
    }

    fn crop_spec(&self, input: (usize, usize)) -> CropSpec {
        CropSpec {
            mode: match self.crop_mode {
                CropModeKind::Grid => CropMode::Grid,
                CropModeKind::Random => CropMode::Random(self.seed),
            },
            crop_fraction: self.crop_fraction,
            crops_per_image: self.crops_per_image,
            resize_to: input,
        }
    }
}

/// Inputs recorded by `fit` so later commands can rebuild the same data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: Option<String>,
    pub images: Option<PathBuf>,
    pub activations: Option<PathBuf>,
    pub n_images: usize,
    pub noise: f64,
    pub class: i64,
    pub seed: u64,
    pub rank: usize,
    pub crop_fraction: f64,
    pub crops_per_image: usize,
    pub crop_mode: CropModeKind,
    pub class_set: Vec<usize>,
}

/// What a command wrote and whether a numerical problem should be reported.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub written: Vec<PathBuf>,
    pub numerical_issue: Option<String>,
}

impl Report {
    fn flag(&mut self, msg: String) {
        match &mut self.numerical_issue {
            Some(existing) => {
                existing.push_str("; ");
                existing.push_str(&msg);
            }
            None => self.numerical_issue = Some(msg),
        }
    }
}

fn write_text(path: &Path, text: &str, report: &mut Report) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CraftError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CraftError::io(path, e))?;
    report.written.push(path.to_path_buf());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T, report: &mut Report) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"), report)
}

fn write_matrix(path: &Path, m: &Matrix, report: &mut Report) -> Result<()> {
    npy::save_matrix(m, path)?;
    report.written.push(path.to_path_buf());
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CraftError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CraftError::Format(format!("{}: {e}", path.display())))
}

fn load_images(cfg_images: Option<&Path>, source: Option<&ModelSource>, model: &ToyModel, n: usize, noise: f64) -> Result<Tensor4> {
    if let Some(path) = cfg_images {
        let images = npy::load_tensor4(path)?;
        if images.image_shape() != model.backbone().input_shape() {
            return Err(CraftError::Data(format!(
                "{}: images have shape {:?}, model expects {:?}",
                path.display(),
                images.image_shape(),
                model.backbone().input_shape()
            )));
        }
        return Ok(images);
    }
    let seed = source.and_then(ModelSource::dataset_seed).ok_or_else(|| {
        CraftError::arg("--images is required unless the model is toy:<seed> or toy2:<seed>")
    })?;
    Ok(generate_dataset(model.base(), &DatasetSpec::new(n, noise, seed))?.images)
}

/// Model and images of a run, rebuilt from its record.
struct RunInputs {
    record: RunRecord,
    model: Option<ToyModel>,
}

fn model_for(record: &RunRecord, cfg: &RunConfig) -> Result<Option<(ModelSource, ToyModel)>> {
    let spec = cfg.model.as_ref().or(record.model.as_ref());
    spec.map(|s| {
        let src = ModelSource::parse(s)?;
        let model = src.load()?;
        Ok((src, model))
    })
    .transpose()
}

fn open_run(cfg: &RunConfig) -> Result<RunInputs> {
    let path = cfg.out.join("run.json");
    if !path.is_file() {
        return Err(CraftError::arg(format!(
            "--out: {} has no run.json; run `fit` first",
            cfg.out.display()
        )));
    }
    let record: RunRecord = read_json(&path)?;
    let model = model_for(&record, cfg)?.map(|(_, m)| m);
    Ok(RunInputs { record, model })
}

fn require_model<'a>(inputs: &'a RunInputs, what: &str) -> Result<&'a ToyModel> {
    inputs
        .model
        .as_ref()
        .ok_or_else(|| CraftError::arg(format!("{what} needs --model (the run was fit from activations only)")))
}

/// Outer iteration budget for CLI fits.
const RUN_OUTER_ITERS: usize = 1000;

fn nmf_params(rank: usize) -> NmfParams {
    NmfParams {
        outer_iters: RUN_OUTER_ITERS,
        ..NmfParams::new(rank)
    }
}

/// `fit`: factorizes activations into `bank/` and `coeffs.npy`.
pub fn cmd_fit(cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    if cfg.model.is_none() && cfg.activations.is_none() {
        return Err(CraftError::arg("fit needs --model or --activations"));
    }
    let mut report = Report::default();
    let params = nmf_params(cfg.rank);
    fs::create_dir_all(&cfg.out).map_err(|e| CraftError::io(&cfg.out, e))?;

    let (bank, state, class_set) = if let Some(path) = &cfg.activations {
        let a = npy::load_matrix(path)?;
        if !a.is_nonnegative() {
            return Err(CraftError::Data(format!("{}: activations must be nonnegative", path.display())));
        }
        let (bank, state) = pipeline::fit_bank(&a, &params, "activations")?;
        write_matrix(&cfg.out.join("activations.npy"), &a, &mut report)?;
        (bank, state, (0..a.rows()).collect())
    } else {
        let src = ModelSource::parse(cfg.model.as_deref().expect("checked above"))?;
        let model = src.load()?;
        let images = load_images(cfg.images.as_deref(), Some(&src), &model, cfg.n_images, cfg.noise)?;
        let (h, w, _) = model.backbone().input_shape();
        let fit = pipeline::build_concept_bank(&images, model.backbone(), model.head(), cfg.class, &cfg.crop_spec((h, w)), &params)?;
        npy::save_tensor4(&fit.crops, cfg.out.join("crops.npy"))?;
        report.written.push(cfg.out.join("crops.npy"));
        write_json(&cfg.out.join("provenance.json"), &fit.provenance, &mut report)?;
        write_matrix(&cfg.out.join("activations.npy"), &fit.activations, &mut report)?;
        (fit.bank, fit.state, fit.class_set)
    };

    bank.save(&cfg.out.join("bank"))?;
    report.written.push(cfg.out.join("bank"));
    write_matrix(&cfg.out.join("coeffs.npy"), &state.u, &mut report)?;
    let record = RunRecord {
        model: cfg.model.clone(),
        images: cfg.images.clone(),
        activations: cfg.activations.clone(),
        n_images: cfg.n_images,
        noise: cfg.noise,
        class: cfg.class,
        seed: cfg.seed,
        rank: cfg.rank,
        crop_fraction: cfg.crop_fraction,
        crops_per_image: cfg.crops_per_image,
        crop_mode: cfg.crop_mode,
        class_set,
    };
    write_json(&cfg.out.join("run.json"), &record, &mut report)?;
    if !state.converged {
        report.flag(format!(
            "factorization did not converge (KKT residual {:e}); bank written and flagged",
            state.kkt_residual
        ));
    }
    Ok(report)
}

fn load_fit(out: &Path) -> Result<(ConceptBank, Matrix, Matrix)> {
    let bank = ConceptBank::load(&out.join("bank"))?;
    let u = npy::load_matrix(out.join("coeffs.npy"))?;
    let a = npy::load_matrix(out.join("activations.npy"))?;
    if u.cols() != bank.rank || u.rows() != a.rows() || a.cols() != bank.w.rows() {
        return Err(CraftError::Format(format!(
            "run files disagree: W {:?}, coeffs {:?}, activations {:?}",
            bank.w.shape(),
            u.shape(),
            a.shape()
        )));
    }
    Ok((bank, u, a))
}

/// `importance`: Sobol total indices and TCAV scores into `importance.json`.
pub fn cmd_importance(cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    let inputs = open_run(cfg)?;
    let model = require_model(&inputs, "importance")?;
    let (bank, u, a) = load_fit(&cfg.out)?;
    let head = model.head();
    let sobol = pipeline::sobol_importance(&u, &bank.w, head, cfg.n_samples, cfg.mu, SobolSequence::JoeKuo)?;
    let tcav = pipeline::tcav_scores(&a, &bank.w, head)?;
    let records = pipeline::importance_records(&sobol, &tcav);
    let mut report = Report::default();
    write_json(&cfg.out.join("importance.json"), &records, &mut report)?;
    Ok(report)
}

/// Name of the curve file for a ranking and direction.
pub fn curves_file_name(ranking: RankingKind, direction: Direction) -> String {
    match (ranking, direction) {
        (RankingKind::Sobol, Direction::Deletion) => "curves.csv".to_string(),
        (r, Direction::Deletion) => format!("curves_{}_deletion.csv", r.name()),
        (r, Direction::Insertion) => format!("curves_{}_insertion.csv", r.name()),
    }
}

/// `fidelity`: deletion or insertion curve for the chosen ranking.
pub fn cmd_fidelity(cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    let inputs = open_run(cfg)?;
    let model = require_model(&inputs, "fidelity")?;
    let (bank, u, _) = load_fit(&cfg.out)?;
    let (importance, source) = match cfg.ranking {
        RankingKind::Random => (pipeline::random_importance(bank.rank, cfg.seed), RankingSource::Random(cfg.seed)),
        kind => {
            let path = cfg.out.join("importance.json");
            if !path.is_file() {
                return Err(CraftError::arg(format!(
                    "--ranking {}: {} is missing; run `importance` first",
                    kind.name(),
                    path.display()
                )));
            }
            let records: Vec<ImportanceRecord> = read_json(&path)?;
            if records.len() != bank.rank {
                return Err(CraftError::Format(format!(
                    "importance.json has {} concepts, bank has {}",
                    records.len(),
                    bank.rank
                )));
            }
            let pick = |r: &ImportanceRecord| if kind == RankingKind::Sobol { r.total_sobol } else { r.tcav };
            let source = if kind == RankingKind::Sobol { RankingSource::Sobol } else { RankingSource::Tcav };
            (records.iter().map(pick).collect(), source)
        }
    };
    let curve = pipeline::fidelity_curves(&u, &bank.w, model.head(), &importance, cfg.direction, cfg.mu, source)?;
    let mut csv = String::from("fraction,mean_output\n");
    for (x, y) in curve.xs.iter().zip(&curve.ys) {
        csv.push_str(&format!("{x},{y}\n"));
    }
    let mut report = Report::default();
    write_text(&cfg.out.join(curves_file_name(cfg.ranking, cfg.direction)), &csv, &mut report)?;
    Ok(report)
}

fn run_images(inputs: &RunInputs, cfg: &RunConfig, model: &ToyModel) -> Result<Tensor4> {
    let record = &inputs.record;
    let src = cfg.model.as_ref().or(record.model.as_ref()).map(|s| ModelSource::parse(s)).transpose()?;
    let images = cfg.images.as_deref().or(record.images.as_deref());
    load_images(images, src.as_ref(), model, record.n_images, record.noise)
}

/// `explain`: concept attribution maps for the first class-set images.
pub fn cmd_explain(cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    let inputs = open_run(cfg)?;
    let model = require_model(&inputs, "explain")?;
    let (bank, _, _) = load_fit(&cfg.out)?;
    let images = run_images(&inputs, cfg, model)?;
    let concepts: Vec<usize> = match cfg.concept {
        Some(c) if c >= bank.rank => {
            return Err(CraftError::arg(format!("--concept {c} out of range for rank {}", bank.rank)))
        }
        Some(c) => vec![c],
        None => (0..bank.rank).collect(),
    };
    let mut report = Report::default();
    let dir = cfg.out.join("heatmaps");
    fs::create_dir_all(&dir).map_err(|e| CraftError::io(&dir, e))?;
    for &img in inputs.record.class_set.iter().take(cfg.max_images) {
        if img >= images.batch() {
            return Err(CraftError::Data(format!("class-set image {img} missing from the image set")));
        }
        let x = images.image(img);
        for &c in &concepts {
            match pipeline::concept_attribution_map(&x, &bank, model.backbone(), c, cfg.method, cfg.seed) {
                Ok(h) => write_matrix(&dir.join(format!("{img}_{c}.npy")), &h.values, &mut report)?,
                Err(e @ (CraftError::Degenerate { .. } | CraftError::Numerical(_))) => {
                    report.flag(format!("image {img}, concept {c}: {e}"))
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(report)
}

/// `recurse`: refits one concept at the earlier layer into `sub_<concept>/`.
///
/// Single-stage models refine at the same layer.
pub fn cmd_recurse(cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    let inputs = open_run(cfg)?;
    let model = require_model(&inputs, "recurse")?;
    let concept = cfg.concept.ok_or_else(|| CraftError::arg("recurse needs --concept"))?;
    let (bank, u, _) = load_fit(&cfg.out)?;
    let crops = npy::load_tensor4(cfg.out.join("crops.npy"))?;
    let earlier: &dyn Backbone = match model.earlier() {
        Some(e) => e,
        None => model.backbone(),
    };
    let sub = pipeline::recursive_decompose(&bank, "bank", &u, concept, &crops, earlier, cfg.rank, &nmf_params(cfg.rank))?;
    let dir = cfg.out.join(format!("sub_{concept}"));
    let mut report = Report::default();
    sub.bank.save(&dir)?;
    report.written.push(dir.clone());
    write_matrix(&dir.join("coeffs.npy"), &sub.state.u, &mut report)?;
    #[derive(Serialize)]
    struct Selection<'a> {
        concept: usize,
        threshold: f64,
        selected: &'a [usize],
    }
    write_json(
        &dir.join("selection.json"),
        &Selection {
            concept,
            threshold: sub.threshold,
            selected: &sub.selected,
        },
        &mut report,
    )?;
    if !sub.state.converged {
        report.flag("sub-bank factorization did not converge".into());
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub rank: usize,
    pub seed: u64,
    /// Principal angles in radians between trained and randomized banks.
    pub principal_angles: Vec<f64>,
    pub trained_objective: f64,
    pub randomized_objective: f64,
}

/// `sanity`: refits the bank on a randomized model and reports the
/// principal angles between the two banks.
pub fn cmd_sanity(cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    let inputs = open_run(cfg)?;
    let model = require_model(&inputs, "sanity")?;
    let (bank, _, _) = load_fit(&cfg.out)?;
    let crops = npy::load_tensor4(cfg.out.join("crops.npy"))?;
    let randomized = model.randomize_weights(cfg.seed);
    let a = randomized.backbone().features(&crops)?;
    let (rbank, state) = pipeline::fit_bank(&a, &nmf_params(bank.rank), "randomized")?;
    let angles = pipeline::principal_angles(&bank.w, &rbank.w)?;
    let mut report = Report::default();
    write_json(
        &cfg.out.join("sanity.json"),
        &SanityReport {
            rank: bank.rank,
            seed: cfg.seed,
            principal_angles: angles,
            trained_objective: bank.fit_objective,
            randomized_objective: state.objective(),
        },
        &mut report,
    )?;
    Ok(report)
}

/// Crop provenance of a run.
pub fn read_provenance(out: &Path) -> Result<Vec<CropRecord>> {
    read_json(&out.join("provenance.json"))
}
