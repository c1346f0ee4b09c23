//! Process-level tests: run the built binary the way a user would and check
//! exit codes, artifacts, and determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use modalfit::frf::FrequencyGrid;
use modalfit::modal::{DampingModel, ModalParameters, RigidBodyMode};
use modalfit::synth::{self, SynthSpec};
use nalgebra::DVector;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_modalfit"))
}

fn run(sub: &str, config: &Path, out: &Path) -> Output {
    bin()
        .args([sub, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

/// A small noiseless dataset with one rigid-body and two flexible modes,
/// saved as CSV; returns (frf path, truth).
fn small_dataset(dir: &Path, seed: u64) -> (PathBuf, ModalParameters) {
    let spec = SynthSpec {
        n_outputs: 2,
        n_inputs: 2,
        damping: DampingModel::General,
        n_rigid: 1,
        n_flexible: 2,
        freq_range_hz: (15.0, 60.0),
        zeta_range: (0.01, 0.03),
    };
    let truth = synth::random_modal_system(&spec, seed).unwrap();
    let grid = FrequencyGrid::log_spaced_hz(2.0, 150.0, 300).unwrap();
    let data = synth::simulate_frf(&truth, &grid, 0.0, seed).unwrap();
    let path = dir.join("data.csv");
    modalfit::frf::save_frf(&data, &path).unwrap();
    (path, truth)
}

fn fit_config(frf: &Path, truth: &ModalParameters) -> String {
    let freqs: Vec<String> = truth
        .flexible
        .iter()
        .map(|m| format!("{}", m.natural_frequency_hz() * 1.05))
        .collect();
    format!(
        r#"{{
  "frf": "{}",
  "damping_model": "general",
  "n_rbm": 1,
  "init": {{ "mode": "explicit", "frequencies_hz": [{}] }}
}}"#,
        frf.display(),
        freqs.join(", ")
    )
}

#[test]
fn fit_writes_all_artifacts_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (frf, truth) = small_dataset(tmp.path(), 101);
    let config = tmp.path().join("fit.json");
    write(&config, &fit_config(&frf, &truth));

    let out1 = tmp.path().join("run1");
    let out2 = tmp.path().join("run2");
    for out in [&out1, &out2] {
        let o = run("fit", &config, out);
        assert!(
            o.status.success(),
            "stderr: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }

    let artifacts = [
        "additive.json",
        "covariance.csv",
        "covariance_index.json",
        "modal.json",
        "state_space.json",
        "riv_trace.csv",
        "ipem_trace.csv",
        "report.json",
    ];
    for name in artifacts {
        let a = read(&out1.join(name));
        let b = read(&out2.join(name));
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    assert!(!out1.join("failed_after.json").exists());

    // Every artifact validates against its schema on re-load.
    let modal =
        modalfit::modal::from_json(&String::from_utf8(read(&out1.join("modal.json"))).unwrap())
            .unwrap();
    assert_eq!(modal.flexible.len(), truth.flexible.len());
    modalfit::additive::from_json(
        &String::from_utf8(read(&out1.join("additive.json"))).unwrap(),
    )
    .unwrap();
    let ss = modalfit::realize::from_json(
        &String::from_utf8(read(&out1.join("state_space.json"))).unwrap(),
    )
    .unwrap();
    assert_eq!(ss.n_states(), 2 * (1 + truth.flexible.len()));

    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8(read(&out1.join("report.json"))).unwrap())
            .unwrap();
    assert_eq!(report["version"], "fit-report-v1");
    assert!(report["stage1"]["final_cost"].as_f64().unwrap() < 1e-16);
    assert_eq!(
        report["residual_norms"].as_array().unwrap().len(),
        300
    );
    assert!(report.get("timing").is_none());

    // Recovered frequencies match the truth closely on noiseless data.
    for (got, want) in modal.flexible.iter().zip(&truth.flexible) {
        let rel = (got.natural_frequency_hz() - want.natural_frequency_hz()).abs()
            / want.natural_frequency_hz();
        assert!(rel < 1e-6, "frequency error {rel:e}");
    }
}

#[test]
fn missing_frf_file_is_a_config_error_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("fit.json");
    write(
        &config,
        r#"{ "frf": "/nonexistent/data.csv", "damping_model": "general",
             "init": { "mode": "explicit", "frequencies_hz": [10.0] } }"#,
    );
    let out = tmp.path().join("out");
    let o = run("fit", &config, &out);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    // No artifacts: either the directory was never created or it is empty.
    let produced = std::fs::read_dir(&out)
        .map(|d| d.count())
        .unwrap_or(0);
    assert_eq!(produced, 0);
}

#[test]
fn malformed_config_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("fit.json");
    write(&config, "{ not json");
    let o = run("fit", &config, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));

    // Unknown fields are rejected too (typo protection).
    write(
        &config,
        r#"{ "frf": "x.csv", "damping_model": "general", "dampin_model": "general",
             "init": { "mode": "explicit", "frequencies_hz": [10.0] } }"#,
    );
    let o = run("fit", &config, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numerical_failure_leaves_a_stage_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let (frf, _) = small_dataset(tmp.path(), 103);
    let config = tmp.path().join("fit.json");
    // Two identical initial frequencies make the numerator initialization
    // rank-deficient: a numerical failure, not a config error.
    write(
        &config,
        &format!(
            r#"{{ "frf": "{}", "damping_model": "general", "n_rbm": 1,
                 "init": {{ "mode": "explicit", "frequencies_hz": [30.0, 30.0] }} }}"#,
            frf.display()
        ),
    );
    let out = tmp.path().join("out");
    let o = run("fit", &config, &out);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let marker: serde_json::Value = serde_json::from_str(
        &String::from_utf8(read(&out.join("failed_after.json"))).unwrap(),
    )
    .unwrap();
    assert_eq!(marker["version"], "failed-after-v1");
    assert_eq!(marker["failed_after"], "initialization");
}

#[test]
fn synth_cmif_and_realize_chain_together() {
    let tmp = tempfile::tempdir().unwrap();
    let synth_cfg = tmp.path().join("synth.json");
    write(
        &synth_cfg,
        r#"{ "n_outputs": 2, "n_inputs": 3, "damping_model": "proportional",
             "n_rigid": 1, "n_flexible": 3, "freq_range_hz": [10.0, 50.0],
             "grid": { "kind": "log", "f_lo": 1.0, "f_hi": 120.0, "n": 250 },
             "noise_level": 0.0, "seed": 7 }"#,
    );
    let synth_out = tmp.path().join("synth");
    let o = run("synth", &synth_cfg, &synth_out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // Seed flag overrides the config and changes the system.
    let synth_out2 = tmp.path().join("synth2");
    let o = bin()
        .args(["synth", "--config"])
        .arg(&synth_cfg)
        .arg("--out")
        .arg(&synth_out2)
        .args(["--seed", "8"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_ne!(
        read(&synth_out.join("modal_truth.json")),
        read(&synth_out2.join("modal_truth.json"))
    );

    let cmif_cfg = tmp.path().join("cmif.json");
    write(
        &cmif_cfg,
        &format!(
            r#"{{ "frf": "{}" }}"#,
            synth_out.join("frf.csv").display()
        ),
    );
    let cmif_out = tmp.path().join("cmif");
    let o = run("cmif", &cmif_cfg, &cmif_out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(read(&cmif_out.join("cmif.csv"))).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("freq_hz,sv1_squared,sv2_squared"));
    assert_eq!(lines.count(), 250);

    let realize_cfg = tmp.path().join("realize.json");
    write(
        &realize_cfg,
        &format!(
            r#"{{ "modal": "{}" }}"#,
            synth_out.join("modal_truth.json").display()
        ),
    );
    let realize_out = tmp.path().join("realize");
    let o = run("realize", &realize_cfg, &realize_out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ss = modalfit::realize::from_json(
        &String::from_utf8(read(&realize_out.join("state_space.json"))).unwrap(),
    )
    .unwrap();
    assert_eq!(ss.n_states(), 2 * (1 + 3));
}

#[test]
fn eval_of_a_double_integrator_gives_minus_one_at_one_radian() {
    let tmp = tempfile::tempdir().unwrap();
    let modal = ModalParameters {
        n_outputs: 1,
        n_inputs: 1,
        damping: DampingModel::General,
        rigid: vec![RigidBodyMode {
            phi_left: DVector::from_vec(vec![1.0]),
            phi_right: DVector::from_vec(vec![1.0]),
        }],
        flexible: vec![],
        dc_gain: None,
    };
    let model_path = tmp.path().join("model.json");
    write(&model_path, &modalfit::modal::to_json(&modal).unwrap());

    let hz = 1.0 / (2.0 * std::f64::consts::PI);
    let eval_cfg = tmp.path().join("eval.json");
    write(
        &eval_cfg,
        &format!(
            r#"{{ "model": "{}", "grid": {{ "kind": "list", "frequencies_hz": [{hz}] }} }}"#,
            model_path.display()
        ),
    );
    let out = tmp.path().join("out");
    let o = run("eval", &eval_cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let data = modalfit::frf::load_frf(&out.join("frf.csv"), None).unwrap();
    let g = data.responses[0][(0, 0)];
    assert!((g.re + 1.0).abs() < 1e-12 && g.im.abs() < 1e-12, "got {g}");
}

#[test]
fn eval_accepts_all_three_model_formats_and_they_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_outputs: 2,
        n_inputs: 2,
        damping: DampingModel::General,
        n_rigid: 0,
        n_flexible: 2,
        freq_range_hz: (10.0, 40.0),
        zeta_range: (0.02, 0.05),
    };
    let truth = synth::random_modal_system(&spec, 11).unwrap();
    let modal_path = tmp.path().join("modal.json");
    write(&modal_path, &modalfit::modal::to_json(&truth).unwrap());
    let additive_path = tmp.path().join("additive.json");
    write(
        &additive_path,
        &modalfit::additive::to_json(&truth.map_to_additive().unwrap()).unwrap(),
    );
    let ss_path = tmp.path().join("ss.json");
    write(
        &ss_path,
        &modalfit::realize::to_json(&modalfit::realize::realize(&truth).unwrap()).unwrap(),
    );

    let mut outputs = Vec::new();
    for (i, model) in [&modal_path, &additive_path, &ss_path].iter().enumerate() {
        let cfg = tmp.path().join(format!("eval{i}.json"));
        write(
            &cfg,
            &format!(
                r#"{{ "model": "{}",
                     "grid": {{ "kind": "linear", "f_lo": 5.0, "f_hi": 60.0, "n": 40 }} }}"#,
                model.display()
            ),
        );
        let out = tmp.path().join(format!("out{i}"));
        let o = run("eval", &cfg, &out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(modalfit::frf::load_frf(&out.join("frf.csv"), None).unwrap());
    }
    for k in 0..40 {
        let a = &outputs[0].responses[k];
        let b = &outputs[1].responses[k];
        let c = &outputs[2].responses[k];
        assert!((a - b).norm() < 1e-10 * a.norm());
        assert!((a - c).norm() < 1e-10 * a.norm());
    }

    // An unrecognized version tag is a config error.
    let bogus = tmp.path().join("bogus.json");
    write(&bogus, r#"{ "version": "model-v9" }"#);
    let cfg = tmp.path().join("eval_bogus.json");
    write(
        &cfg,
        &format!(
            r#"{{ "model": "{}", "grid": {{ "kind": "list", "frequencies_hz": [1.0] }} }}"#,
            bogus.display()
        ),
    );
    let o = run("eval", &cfg, &tmp.path().join("out_bogus"));
    assert_eq!(o.status.code(), Some(2));
}
