use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use craft_core::npy;
use craft_core::tensor::{cosine, Matrix, Tensor4};
use craft_core::toy::{LinearHead, ToyBackbone, ToyModel};

fn craft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_craft-kit"))
        .args(args)
        .env_remove("CRAFT_KIT_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = craft(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn toy_fit(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec!["fit", "--model", "toy:7", "--class", "1", "--rank", "4", "--n-images", "80", "--out", out];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn fit_writes_a_four_by_four_bank() {
    let dir = tempfile::tempdir().unwrap();
    toy_fit(dir.path(), &[]);
    let w = npy::load_matrix(dir.path().join("bank/W.npy")).unwrap();
    assert_eq!(w.shape(), (4, 4));
    let meta = json(&dir.path().join("bank/meta.json"));
    assert_eq!(meta["rank"], 4);
    assert_eq!(meta["column_norms"].as_array().unwrap().len(), 4);
    for name in ["crops.npy", "provenance.json", "activations.npy", "coeffs.npy"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = craft(&["fit", "--rank", "2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("--model") && msg.contains("--activations"), "{msg}");

    let out = craft(&["fit", "--activations", "/nonexistent/A.npy", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--activations"));
}

#[test]
fn exact_fixture_from_activations() {
    let dir = tempfile::tempdir().unwrap();
    let u = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
    let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
    let a_path = dir.path().join("A.npy");
    npy::save_matrix(&u.matmul_t(&w), &a_path).unwrap();
    let run = dir.path().join("run");
    ok(&["fit", "--activations", a_path.to_str().unwrap(), "--rank", "2", "--out", run.to_str().unwrap()]);
    let meta = json(&run.join("bank/meta.json"));
    assert!(meta["objective"].as_f64().unwrap() < 1e-6);
    // Importance needs an output function, which an activations-only run lacks.
    let out = craft(&["importance", "--out", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn importance_ranks_the_favored_template_first() {
    let dir = tempfile::tempdir().unwrap();
    toy_fit(dir.path(), &[]);
    ok(&["importance", "--n-samples", "512", "--out", dir.path().to_str().unwrap()]);
    let records = json(&dir.path().join("importance.json"));
    let records = records.as_array().unwrap();
    assert_eq!(records.len(), 4);
    let sobol: Vec<f64> = records.iter().map(|r| r["total_sobol"].as_f64().unwrap()).collect();
    let top = (0..4).max_by(|&a, &b| sobol[a].total_cmp(&sobol[b])).unwrap();
    let w = npy::load_matrix(dir.path().join("bank/W.npy")).unwrap();
    let favored = ToyBackbone::standard().template_direction(0).unwrap();
    let aligned = (0..4)
        .max_by(|&a, &b| cosine(&w.col(a), &favored).total_cmp(&cosine(&w.col(b), &favored)))
        .unwrap();
    assert_eq!(top, aligned, "sobol {sobol:?}");
    for r in records {
        assert!(r["tcav"].as_f64().unwrap() >= 0.0);
        assert_eq!(r["n_samples"], 512);
        assert_eq!(r["degenerate"], false);
    }
}

#[test]
fn zero_samples_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    toy_fit(dir.path(), &[]);
    let out = craft(&["importance", "--n-samples", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn constant_head_is_flagged_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let base = ToyBackbone::standard();
    let constant = ToyBackbone::new(
        (0..4).map(|i| base.template(i).to_vec()).collect(),
        base.template_shape(),
        (16, 16, 4),
        LinearHead {
            weights: vec![0.0; 4],
            bias: 1.0,
        },
    )
    .unwrap();
    let model_dir = dir.path().join("model");
    ToyModel::Single(constant).save(&model_dir).unwrap();
    let images = craft_core::toy::make_synthetic_dataset(&base, 30, 0.01, 4).unwrap().images;
    let img_path = dir.path().join("images.npy");
    npy::save_tensor4(&images, &img_path).unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let before = fs::read(&img_path).unwrap();
    ok(&["fit", "--model", model_dir.to_str().unwrap(), "--images", img_path.to_str().unwrap(), "--rank", "2", "--out", run_s]);
    ok(&["importance", "--n-samples", "64", "--out", run_s]);
    assert_eq!(fs::read(&img_path).unwrap(), before, "inputs are never rewritten");
    let records = json(&run.join("importance.json"));
    for r in records.as_array().unwrap() {
        assert_eq!(r["degenerate"], true);
        assert_eq!(r["total_sobol"].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn fidelity_writes_one_file_per_ranking_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    toy_fit(dir.path(), &[]);
    ok(&["importance", "--n-samples", "256", "--out", out]);
    ok(&["fidelity", "--ranking", "sobol", "--out", out]);
    ok(&["fidelity", "--ranking", "random", "--seed", "3", "--out", out]);
    let sobol = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    let random = fs::read_to_string(dir.path().join("curves_random_deletion.csv")).unwrap();
    assert!(sobol.starts_with("fraction,mean_output\n"));
    assert_eq!(sobol.lines().count(), 6);
    ok(&["fidelity", "--ranking", "random", "--seed", "3", "--out", out]);
    assert_eq!(fs::read_to_string(dir.path().join("curves_random_deletion.csv")).unwrap(), random);
    ok(&["fidelity", "--ranking", "tcav", "--direction", "insertion", "--out", out]);
    assert!(dir.path().join("curves_tcav_insertion.csv").is_file());
}

#[test]
fn recurse_on_flat_coefficients_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let base = ToyBackbone::standard();
    let one = craft_core::toy::make_synthetic_dataset(&base, 1, 0.0, 1).unwrap();
    let images = Tensor4::stack(&vec![one.images.clone(); 40]).unwrap();
    let labels = base.predict(&one.images).unwrap();
    let img_path = dir.path().join("images.npy");
    npy::save_tensor4(&images, &img_path).unwrap();
    let model_dir = dir.path().join("model");
    ToyModel::Single(base).save(&model_dir).unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let class = labels[0].to_string();
    ok(&[
        "fit", "--model", model_dir.to_str().unwrap(), "--images", img_path.to_str().unwrap(), "--class", &class,
        "--rank", "1", "--crop-fraction", "1.0", "--out", run_s,
    ]);
    let out = craft(&["recurse", "--concept", "0", "--rank", "2", "--out", run_s]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn recurse_writes_a_linked_sub_bank() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["fit", "--model", "toy2:5", "--rank", "3", "--out", out]);
    ok(&["recurse", "--concept", "0", "--rank", "2", "--out", out]);
    let meta = json(&dir.path().join("sub_0/meta.json"));
    assert_eq!(meta["parent"]["concept"], 0);
    assert_eq!(meta["rank"], 2);
}

#[test]
fn explain_writes_image_sized_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    toy_fit(dir.path(), &[]);
    let status = craft(&["explain", "--max-images", "2", "--method", "occlusion", "--out", out]).status;
    assert!(matches!(status.code(), Some(0) | Some(4)));
    let maps: Vec<_> = fs::read_dir(dir.path().join("heatmaps")).unwrap().collect();
    assert!(!maps.is_empty());
    for entry in maps {
        let m = npy::load_matrix(entry.unwrap().path()).unwrap();
        assert_eq!(m.shape(), (16, 16));
    }
}

#[test]
fn sanity_reports_principal_angles() {
    let dir = tempfile::tempdir().unwrap();
    toy_fit(dir.path(), &[]);
    ok(&["sanity", "--seed", "7", "--out", dir.path().to_str().unwrap()]);
    let report = json(&dir.path().join("sanity.json"));
    let angles = report["principal_angles"].as_array().unwrap();
    assert_eq!(angles.len(), 4);
    for a in angles {
        let a = a.as_f64().unwrap();
        assert!((0.0..=std::f64::consts::FRAC_PI_2 + 1e-12).contains(&a));
    }
}

#[test]
fn runs_are_byte_identical_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    toy_fit(a.path(), &["--threads", "1"]);
    let out = Command::new(env!("CARGO_BIN_EXE_craft-kit"))
        .args(["fit", "--model", "toy:7", "--class", "1", "--rank", "4", "--n-images", "80", "--out"])
        .arg(b.path())
        .env("CRAFT_KIT_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    for name in ["crops.npy", "provenance.json", "activations.npy", "coeffs.npy", "bank/W.npy", "bank/meta.json", "run.json"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}
