use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn saecv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saecv")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = saecv(args);
    assert!(out.status.success(), "saecv {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn csv_rows(p: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(p).unwrap().records().map(|r| r.unwrap()).collect()
}

/// The ten-province scenario cut down to a fast survey.
fn small_ten_provinces(dir: &Path, replicates: usize) -> PathBuf {
    let text = std::fs::read_to_string(configs().join("ten_provinces.toml"))
        .unwrap()
        .replace("clusters_per_stratum = 50", "clusters_per_stratum = 20")
        .replace("replicates = 50", &format!("replicates = {replicates}"))
        .replace("loao = [\"M1\", \"M3\"]", "loao = []");
    let p = dir.join("ten.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn simulate_minimal_writes_four_files_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let config = configs().join("minimal.toml");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["simulate", "--config", path(&config), "--out", path(&a)]);
    ok(&["simulate", "--config", path(&config), "--out", path(&b)]);
    let files: Vec<_> = std::fs::read_dir(&a).unwrap().collect();
    assert_eq!(files.len(), 4);
    assert_eq!(csv_rows(&a.join("truth.csv")).len(), 2);
    for f in ["frame.csv", "population.csv", "truth.csv", "scenario.json"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
}

#[test]
fn simulate_ten_provinces_has_ten_truth_rows() {
    let tmp = TempDir::new().unwrap();
    ok(&["simulate", "--config", path(&configs().join("ten_provinces.toml")), "--out", path(tmp.path())]);
    let rows = csv_rows(&tmp.path().join("truth.csv"));
    assert_eq!(rows.len(), 10);
    assert_eq!(&rows[0][0], "P01");
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = TempDir::new().unwrap();
    let config = configs().join("minimal.toml");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["simulate", "--config", path(&config), "--out", path(&a)]);
    ok(&["simulate", "--config", path(&config), "--out", path(&b), "--seed", "8"]);
    assert_ne!(read(&a.join("population.csv")), read(&b.join("population.csv")));
}

#[test]
fn typo_in_config_fails_with_the_key() {
    let tmp = TempDir::new().unwrap();
    let text = std::fs::read_to_string(configs().join("minimal.toml")).unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, text.replace("replicates = 3", "repliactes = 3")).unwrap();
    let out = saecv(&["simulate", "--config", path(&bad), "--out", path(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("repliactes"));
    assert!(!tmp.path().join("truth.csv").exists());
}

#[test]
fn json_config_accepted() {
    let tmp = TempDir::new().unwrap();
    let json = r#"{
        "seed": 1,
        "scenario": {
            "clusters_per_stratum": 2,
            "households_per_cluster": 5,
            "areas": [{"id": "A", "prevalence": 0.4, "frame_clusters": 5}]
        }
    }"#;
    let p = tmp.path().join("c.json");
    std::fs::write(&p, json).unwrap();
    ok(&["simulate", "--config", path(&p), "--out", path(tmp.path())]);
    assert_eq!(csv_rows(&tmp.path().join("truth.csv")).len(), 1);
}

#[test]
fn study_smoke_run_is_identical_across_job_counts() {
    let tmp = TempDir::new().unwrap();
    let config = configs().join("minimal.toml");
    let text = std::fs::read_to_string(&config).unwrap().replace("replicates = 3", "replicates = 2");
    let config = tmp.path().join("two.toml");
    std::fs::write(&config, text).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["study", "--config", path(&config), "--out", path(&a), "--jobs", "1"]);
    ok(&["study", "--config", path(&config), "--out", path(&b), "--jobs", "8"]);
    for f in ["replicates.csv", "areas.csv", "models.csv", "summary.json"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    ok(&["report", "--input", path(&a)]);
    let md = String::from_utf8(read(&a.join("report.md"))).unwrap();
    assert!(md.contains("2 of 2 replicates completed"));
}

#[test]
fn compare_model_with_itself_is_inconclusive() {
    let tmp = TempDir::new().unwrap();
    let text = std::fs::read_to_string(configs().join("minimal.toml")).unwrap().replace("a = \"fh\"", "a = \"bb\"");
    let config = tmp.path().join("self.toml");
    std::fs::write(&config, text).unwrap();
    ok(&["survey", "--config", path(&config), "--out", path(tmp.path())]);
    ok(&["compare", "--config", path(&config), "--survey", path(&tmp.path().join("survey.csv")), "--out", path(tmp.path())]);
    let v: serde_json::Value = serde_json::from_slice(&read(&tmp.path().join("bb_vs_bb.json"))).unwrap();
    assert_eq!(v["difference"], 0.0);
    assert_eq!(v["decision"], "inconclusive");
}

#[test]
fn compare_flags_change_the_scheme() {
    let tmp = TempDir::new().unwrap();
    let config = configs().join("minimal.toml");
    ok(&["survey", "--config", path(&config), "--out", path(tmp.path())]);
    let survey = tmp.path().join("survey.csv");
    ok(&["compare", "--config", path(&config), "--survey", path(&survey), "--out", path(tmp.path()), "--scheme", "psu", "--k", "2", "--q", "equal"]);
    let v: serde_json::Value = serde_json::from_slice(&read(&tmp.path().join("fh_vs_bb.json"))).unwrap();
    assert_eq!(v["scheme"], "psu");
    assert_eq!(v["k"], 2);
    let areas = csv_rows(&tmp.path().join("fh_vs_bb_areas.csv"));
    assert_eq!(areas.len(), 2);
}

#[test]
fn strongly_pooled_model_loses_on_a_heterogeneous_survey() {
    let tmp = TempDir::new().unwrap();
    let config = small_ten_provinces(tmp.path(), 1);
    ok(&["survey", "--config", path(&config), "--out", path(tmp.path())]);
    let survey = tmp.path().join("survey.csv");
    let text = std::fs::read_to_string(&config).unwrap() + "\n[[pairs]]\na = \"M3\"\nb = \"M2\"\n";
    std::fs::write(&config, text).unwrap();
    ok(&["compare", "--config", path(&config), "--survey", path(&survey), "--out", path(tmp.path())]);
    let v: serde_json::Value = serde_json::from_slice(&read(&tmp.path().join("M3_vs_M2.json"))).unwrap();
    assert_eq!(v["decision"], "prefer-b", "{v}");

    // The same survey fitted on its own: M3 shrinks the areas together.
    let spread = |model: &str| {
        ok(&["fit", "--config", path(&config), "--model", model, "--survey", path(&survey), "--out", path(tmp.path())]);
        let means: Vec<f64> =
            csv_rows(&tmp.path().join(format!("{model}_estimates.csv"))).iter().map(|r| r[1].parse().unwrap()).collect();
        means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min)
    };
    assert!(spread("M3") < 0.5 * spread("M1"));
}

#[test]
fn fit_on_direct_estimates_gives_one_row_per_area() {
    let tmp = TempDir::new().unwrap();
    let config = configs().join("minimal.toml");
    ok(&["survey", "--config", path(&config), "--out", path(tmp.path())]);
    let direct = tmp.path().join("direct.csv");
    ok(&["fit", "--config", path(&config), "--model", "fh", "--direct", path(&direct), "--out", path(tmp.path())]);
    assert_eq!(csv_rows(&tmp.path().join("fh_estimates.csv")).len(), 2);
    let out = saecv(&["fit", "--config", path(&config), "--model", "bb", "--direct", path(&direct), "--out", path(tmp.path())]);
    assert!(!out.status.success());
}

#[test]
fn missing_output_directory_is_an_error() {
    let tmp = TempDir::new().unwrap();
    let text = std::fs::read_to_string(configs().join("minimal.toml")).unwrap().replace("[output]\ndir = \"out/minimal\"\n", "");
    let config = tmp.path().join("noout.toml");
    std::fs::write(&config, text).unwrap();
    let out = saecv(&["simulate", "--config", path(&config)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}
