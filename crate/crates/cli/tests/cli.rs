use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn flashcap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flashcap")).args(args).output().expect("spawn flashcap")
}

fn synthetic(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/synthetic/mat0")
        .join(rel)
        .to_string_lossy()
        .into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn manifest_value(dir: &Path, key: &str) -> Option<String> {
    let text = std::fs::read_to_string(dir.join("manifest.txt")).ok()?;
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
}

#[test]
fn fit_help_prints_usage() {
    let o = flashcap(&["fit", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for flag in ["--strategy", "--init", "--iters", "--views", "--direct", "--refine"] {
        assert!(text.contains(flag), "{flag} missing from usage:\n{text}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = flashcap(&["fit", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn runtime_failures_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing.json");
    let o = flashcap(&["fit", "--capture", missing.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_of_identical_bundles_is_all_zeros() {
    let maps = synthetic("maps");
    let o = flashcap(&["eval", "--maps", &maps, "--truth", &maps]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for key in ["albedo_rmse", "normal_deg", "roughness_rmse", "specular_rmse", "total_rmse"] {
        let line = text.lines().find(|l| l.starts_with(&format!("{key}="))).expect(key);
        let v: f64 = line.split('=').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, 0.0, "{line}");
    }
}

#[test]
fn eval_rejects_novel_views_that_were_fitted() {
    let capture = synthetic("capture/manifest.json");
    let maps = synthetic("maps");
    let o = flashcap(&["eval", "--maps", &maps, "--truth", &maps, "--capture", &capture, "--novel", &capture]);
    assert_eq!(o.status.code(), Some(1));
}

fn fit_into(dir: &Path) -> PathBuf {
    let capture = synthetic("capture/manifest.json");
    let o = flashcap(&[
        "fit", "--capture", &capture, "--views", "0,4,8", "--iters", "4", "--out", dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("maps")
}

#[test]
fn fit_on_the_bundled_example_writes_maps_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fit");
    let maps = fit_into(&out);
    assert!(flashcap::io::load_bundle(&maps).unwrap().validate().is_ok());
    assert!(out.join("latent.ntc").is_file());
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iter,total,pixel,percept"));
    assert_eq!(manifest_value(&out, "command").as_deref(), Some("fit"));
    assert_eq!(manifest_value(&out, "views").as_deref(), Some("0,4,8"));
    assert_eq!(manifest_value(&out, "strategy").as_deref(), Some("S3"));
    assert!(manifest_value(&out, "final_loss").is_some());
}

#[test]
fn identical_runs_give_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let report = |name: &str| {
        let maps = fit_into(&tmp.path().join(name));
        let o = flashcap(&[
            "eval",
            "--maps",
            maps.to_str().unwrap(),
            "--truth",
            &synthetic("maps"),
            "--capture",
            &synthetic("capture/manifest.json"),
            "--views",
            "0,4,8",
            "--novel",
            &synthetic("novel/manifest.json"),
        ]);
        assert_eq!(o.status.code(), Some(0));
        stdout(&o)
    };
    assert_eq!(report("a"), report("b"));
}

#[test]
fn render_then_eval_round_trips_a_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let cap = tmp.path().join("cap");
    let o = flashcap(&["render", "--maps", &synthetic("maps"), "--out", cap.to_str().unwrap(), "--setup", "novel"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(cap.join("manifest.json").is_file() && cap.join("manifest.txt").is_file());
    let views = flashcap::io::load_capture(&cap.join("manifest.json")).unwrap();
    assert_eq!(views.len(), 2);
}
