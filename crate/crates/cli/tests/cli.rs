use std::io::Write;
use std::process::{Command, Output};

use isometry_core::gains::{closed_form_gain, GainActivation, WeightFamily};
use serde_json::Value;

fn isometry(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isometry"))
        .args(args)
        .env_remove("ISOMETRY_MAX_DIM")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn spec_file(body: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(body.as_bytes()).unwrap();
    f
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

const ISOMETRIC: &str = r#"{
  "dims": [256, 256, 256],
  "blocks": [
    {"serial": [{"kind": "Orthogonal", "params": {"beta": 1, "m": 256}}, {"kind": "Tanh"}]},
    {"parallel": [[{"kind": "Identity"}],
                  [{"kind": "DenseGaussian", "params": {"m": 256, "sigma2": 0.0001}}, {"kind": "ReLU"}]]}
  ]
}"#;

#[test]
fn gains_example() {
    let o = isometry(&["gains", "--activation", "leaky_relu", "--gamma", "0.3", "--family", "orthogonal"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("beta = 1.354571"), "{}", stdout(&o));

    let o = isometry(&["--json", "gains", "--activation", "leaky_relu", "--gamma", "0.3", "--family", "orthogonal"]);
    let v = json(&o);
    assert_eq!(v["schema_version"], 1);
    let lib = closed_form_gain::<f64>(GainActivation::LeakyReLU { gamma: 0.3 }, WeightFamily::Orthogonal).unwrap();
    let printed = v["recommendation"]["values"][0].as_f64().unwrap();
    assert!((printed - lib.values[0]).abs() <= 1e-12);
    assert!((v["recommendation"]["achieved_varphi"].as_f64().unwrap() - lib.achieved_varphi.unwrap()).abs() <= 1e-12);
}

#[test]
fn gains_input_errors() {
    let o = isometry(&["gains", "--activation", "leaky_relu", "--gamma", "1.5", "--family", "orthogonal"]);
    assert_eq!(o.status.code(), Some(2));
    let o = isometry(&["gains", "--activation", "relu", "--family", "gaussian"]);
    assert_eq!(o.status.code(), Some(2));
    let o = isometry(&["gains", "--activation", "swish", "--family", "gaussian"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn selu_examples() {
    let o = isometry(&["--json", "selu-solve", "--gamma0", "1", "--eps", "0.0716"]);
    assert_eq!(o.status.code(), Some(0));
    let s = &json(&o)["solution"];
    assert!((s["lambda"].as_f64().unwrap() - 1.0507).abs() < 1e-3);
    assert!((s["alpha"].as_f64().unwrap() - 1.6733).abs() < 1e-3);

    let o = isometry(&["selu-solve", "--depth", "32"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("eps = 0.028125"));

    let o = isometry(&["selu-solve", "--gamma0", "0.5", "--eps", "0.13"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = isometry(&["selu-solve", "--eps", "0.1", "--depth", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn effective_kernel_examples() {
    let o = isometry(&["effective-kernel", "--k", "3", "3", "--stride", "1", "1", "--pad", "0", "0", "--in", "32", "32"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "9");
    let o = isometry(&["--json", "effective-kernel", "--k", "3", "3", "--pad", "1", "1", "--in", "3", "3", "--oracle"]);
    let v = json(&o);
    assert_eq!(v["effective_kernel_size"], v["oracle"]);
    assert!((v["effective_kernel_size"].as_f64().unwrap() - 49.0 / 9.0).abs() < 1e-12);
    let o = isometry(&["effective-kernel", "--k", "3", "3", "--pad", "3", "3", "--in", "8", "8"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_isometric_network() {
    let f = spec_file(ISOMETRIC);
    let path = f.path().to_str().unwrap();
    let o = isometry(&["analyze", path, "--forward"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("block 0:") && text.contains("block 1:") && text.contains("forward alpha2"));

    let a = json(&isometry(&["--json", "analyze", path, "--forward"]));
    let b = json(&isometry(&["--json", "analyze", path, "--forward"]));
    assert_eq!(a, b);
    assert_eq!(a["violations"], false);
    let phi = a["result"]["moments"]["phi"].as_f64().unwrap();
    assert!((phi - (1.0 + 256.0 * 1e-4 * 0.5)).abs() < 1e-12);
    assert_eq!(a["gradient_norm_profile"].as_array().unwrap().len(), 2);
}

#[test]
fn analyze_reports_violations() {
    let drifting = spec_file(
        r#"{"dims":[128,128],"blocks":[{"serial":[{"kind":"DenseGaussian","params":{"m":128,"sigma2":0.05}},{"kind":"ReLU"}]}]}"#,
    );
    let o = isometry(&["analyze", drifting.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));

    let two_rectifiers = spec_file(r#"{"dims":[16,16],"blocks":[{"parallel":[[{"kind":"ReLU"}],[{"kind":"Tanh"}]]}]}"#);
    let o = isometry(&["--json", "analyze", two_rectifiers.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(json(&o)["result"]["prerequisite_verdict"], "violated");

    // Loosened tolerances from the file turn the drift into a pass.
    let loose = spec_file(
        r#"{"dims":[128,128],"blocks":[{"serial":[{"kind":"DenseGaussian","params":{"m":128,"sigma2":0.015625}},{"kind":"ReLU"}]}],
            "analysis":{"tol_phi":0.1,"tol_varphi":3}}"#,
    );
    assert_eq!(isometry(&["analyze", loose.path().to_str().unwrap()]).status.code(), Some(0));
}

#[test]
fn analyze_input_errors() {
    let bad_gamma = spec_file(r#"{"dims":[8,8],"blocks":[{"serial":[{"kind":"LeakyReLU","params":{"gamma":1.5}}]}]}"#);
    let o = isometry(&["analyze", bad_gamma.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("blocks[0].serial[0].params.gamma"), "{}", stderr(&o));

    let malformed = spec_file("{\"dims\": [8, 8],\n \"blocks\": [");
    let o = isometry(&["analyze", malformed.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    assert_eq!(isometry(&["analyze", "/nonexistent/spec.json"]).status.code(), Some(2));
}

#[test]
fn verify_spec_and_limits() {
    let chain = spec_file(
        r#"{"dims":[200,200,200],"blocks":[
            {"serial":[{"kind":"DenseGaussian","params":{"m":200,"sigma2":0.01}},{"kind":"ReLU"}]},
            {"serial":[{"kind":"DenseGaussian","params":{"m":200,"sigma2":0.01}},{"kind":"ReLU"}]}]}"#,
    );
    let path = chain.path().to_str().unwrap();
    let a = isometry(&["--json", "verify", "--spec", path, "--trials", "4", "--seed", "11"]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let b = isometry(&["--json", "verify", "--spec", path, "--trials", "4", "--seed", "11"]);
    assert_eq!(a.stdout, b.stdout);
    let v = json(&a);
    let r = &v["summary"]["reports"][0];
    assert!((r["phi_ratio"].as_f64().unwrap() - 1.0).abs() < 0.07);
    assert_eq!(r["trials"].as_array().unwrap().len(), 4);

    let o = Command::new(env!("CARGO_BIN_EXE_isometry"))
        .args(["verify", "--spec", path, "--trials", "2"])
        .env("ISOMETRY_MAX_DIM", "100")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("exceeds the limit 100"));
}

#[test]
fn verify_small_sweep() {
    let o = isometry(&[
        "verify", "--sweep", "addition", "--configs", "2", "--trials", "3", "--dim-range", "150", "200", "--depth-range", "2", "3",
    ]);
    assert!(matches!(o.status.code(), Some(0 | 1)), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("config ")).count(), 2);
    assert_eq!(isometry(&["verify"]).status.code(), Some(2));
}

#[test]
fn profile_and_costs() {
    let v = json(&isometry(&["--json", "resnet-profile", "--blocks", "4", "--downsample-at", "2"]));
    let alpha2: Vec<f64> = v["profile"]["alpha2"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(alpha2, vec![1.0, 2.0, 3.0, 2.0, 3.0]);
    assert_eq!(isometry(&["resnet-profile", "--blocks", "4", "--downsample-at", "4"]).status.code(), Some(2));

    let v = json(&isometry(&["--json", "smn-cost"]));
    assert_eq!(v["speedup"]["bn_ops"], 13);
    assert_eq!(v["speedup"]["smn_ops"], 10);
}
