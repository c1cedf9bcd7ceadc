use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use isoclip::align::{self, Modality, ProjectorPair};
use isoclip::linearize::{self, MlpHeadParams};
use isoclip::retrieval::{self, EvalOptions, Precision};
use isoclip::tensorio::{self, DType};
use isoclip::{spectral, Execution, Matrix, Vector};
use serde_json::Value;

fn isoclip(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isoclip"))
        .arg("--output-dir")
        .arg(dir)
        .args(args)
        .env_remove("ISOCLIP_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = isoclip(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

struct Fixture {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        ok(&dir, &["--precision", "f64", "synth", "--out", "fx"]);
        Fixture { _tmp: tmp, dir }
    }

    fn path(&self, rel: &str) -> String {
        self.dir.join(rel).display().to_string()
    }
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

#[test]
fn unknown_subcommand_exits_with_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = isoclip(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_input_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = isoclip(tmp.path(), &["whiten", "--w", "does-not-exist.iso"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["category"], "io");
    assert!(err["message"]
        .as_str()
        .unwrap()
        .contains("does-not-exist.iso"));
}

#[test]
fn infeasible_band_is_a_band_error() {
    let fx = Fixture::new();
    let out = isoclip(
        &fx.dir,
        &[
            "align",
            "--wi",
            &fx.path("fx/wi.iso"),
            "--wt",
            &fx.path("fx/wt.iso"),
            "--kt",
            "40",
            "--kb",
            "24",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["category"], "band");
}

#[test]
fn corrupt_tensor_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.iso");
    fs::write(&bad, b"NOPE\x01\x01\x00\x00\x00\x00").unwrap();
    let out = isoclip(tmp.path(), &["whiten", "--w", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["category"], "format");
}

#[test]
fn spectrum_dumps_rank_many_values() {
    let fx = Fixture::new();
    let summary = ok(
        &fx.dir,
        &[
            "spectrum",
            "--wi",
            &fx.path("fx/wi.iso"),
            "--wt",
            &fx.path("fx/wt.iso"),
            "--out",
            "s.csv",
        ],
    );
    assert_eq!(summary["rank"], 64);
    let (header, rows) = read_csv(&fx.dir.join("s.csv"));
    assert_eq!(header, ["index", "singular_value"]);
    assert_eq!(rows.len(), 64);

    let pair = ProjectorPair::load(fx.dir.join("fx/wi.iso"), fx.dir.join("fx/wt.iso")).unwrap();
    let op = align::inter_modal_operator(&pair).unwrap();
    for (row, s) in rows.iter().zip(op.singular_values()) {
        assert_eq!(row[1].parse::<f64>().unwrap(), *s);
    }
}

#[test]
fn every_run_writes_a_config_echo() {
    let fx = Fixture::new();
    ok(&fx.dir, &["--seed", "3", "gradcheck", "--instances", "2"]);
    let echo: Value =
        serde_json::from_str(&fs::read_to_string(fx.dir.join("gradcheck.config.json")).unwrap())
            .unwrap();
    assert_eq!(echo["command"], "gradcheck");
    assert_eq!(echo["global"]["seed"], 3);
    assert_eq!(echo["args"]["instances"], 2);
    assert_eq!(echo["args"]["dim"], 16);
    assert!(fx.dir.join("synth.config.json").exists());
}

#[test]
fn json_keys_are_sorted() {
    let fx = Fixture::new();
    ok(
        &fx.dir,
        &["gradcheck", "--instances", "3", "--out", "g.json"],
    );
    let text = fs::read_to_string(fx.dir.join("g.json")).unwrap();
    let top_keys: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("  \""))
        .map(|l| l.trim().split('"').nth(1).unwrap())
        .collect();
    let mut sorted = top_keys.clone();
    sorted.sort();
    assert_eq!(top_keys, sorted);
    assert!(top_keys.contains(&"passed"));
}

#[test]
fn gradcheck_report_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let summary = ok(tmp.path(), &["gradcheck", "--instances", "20"]);
    assert_eq!(summary["passed"], true);
    let report: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("gradcheck.json")).unwrap())
            .unwrap();
    assert_eq!(report["instances"].as_array().unwrap().len(), 20);
}

#[test]
fn sweep_recovers_the_planted_band() {
    let fx = Fixture::new();
    let summary = ok(
        &fx.dir,
        &[
            "sweep",
            "--wi",
            &fx.path("fx/wi.iso"),
            "--wt",
            &fx.path("fx/wt.iso"),
            "--manifest",
            &fx.path("fx/image.json"),
            "--kt",
            "0:17:4",
            "--kb",
            "0:17:4",
        ],
    );
    assert_eq!(
        (summary["best_k_t"].as_u64(), summary["best_k_b"].as_u64()),
        (Some(8), Some(8))
    );
    let (header, rows) = read_csv(&fx.dir.join("sweep.csv"));
    assert_eq!(header, ["k_t", "k_b", "map"]);
    assert_eq!(rows.len(), 25);
    assert!(fx.dir.join("sweep.json").exists());
}

#[test]
fn sweep_marks_infeasible_cells_empty() {
    let fx = Fixture::new();
    ok(
        &fx.dir,
        &[
            "sweep",
            "--wi",
            &fx.path("fx/wi.iso"),
            "--wt",
            &fx.path("fx/wt.iso"),
            "--manifest",
            &fx.path("fx/image.json"),
            "--kt",
            "0,60",
            "--kb",
            "0,8",
        ],
    );
    let (_, rows) = read_csv(&fx.dir.join("sweep.csv"));
    let last = rows.last().unwrap();
    assert_eq!(last, &["60", "8", ""]);
}

#[test]
fn cli_retrieval_matches_the_library() {
    let fx = Fixture::new();
    ok(
        &fx.dir,
        &[
            "--precision",
            "f64",
            "align",
            "--wi",
            &fx.path("fx/wi.iso"),
            "--wt",
            &fx.path("fx/wt.iso"),
            "--kt",
            "8",
            "--kb",
            "8",
        ],
    );
    ok(
        &fx.dir,
        &[
            "--precision",
            "f64",
            "retrieve",
            "--projector",
            &fx.path("aligned"),
            "--modality",
            "text",
            "--manifest",
            &fx.path("fx/text.json"),
            "--p-at-k",
            "1,5",
        ],
    );
    let report: Value =
        serde_json::from_str(&fs::read_to_string(fx.dir.join("retrieve.json")).unwrap()).unwrap();

    let pair = ProjectorPair::load(fx.dir.join("fx/wi.iso"), fx.dir.join("fx/wt.iso")).unwrap();
    let aligned = align::isoclip(&pair, 8, 8).unwrap();
    let dataset = tensorio::load_dataset(fx.dir.join("fx/text.json")).unwrap();
    let opts = EvalOptions {
        precision: Precision::F64,
        exec: Execution::Sequential,
    };
    let lib =
        retrieval::retrieve(aligned.projector(Modality::Text), &dataset, &[1, 5], opts).unwrap();
    assert_eq!(report["map"].as_f64().unwrap(), lib.map);
    assert_eq!(
        report["precision_at_k"]["5"].as_f64().unwrap(),
        lib.precision_at_k[&5]
    );
}

#[test]
fn thread_count_does_not_change_results() {
    let fx = Fixture::new();
    let run = |threads: &str, out: &str| {
        ok(
            &fx.dir,
            &[
                "--threads",
                threads,
                "retrieve",
                "--projector",
                &fx.path("fx/wi.iso"),
                "--manifest",
                &fx.path("fx/image.json"),
                "--p-at-k",
                "1,10",
                "--out",
                out,
            ],
        );
        fs::read_to_string(fx.dir.join(out)).unwrap()
    };
    assert_eq!(run("1", "serial.json"), run("4", "parallel.json"));

    let out = Command::new(env!("CARGO_BIN_EXE_isoclip"))
        .args([
            "--output-dir",
            fx.dir.to_str().unwrap(),
            "gradcheck",
            "--instances",
            "2",
        ])
        .env("ISOCLIP_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    let echo: Value =
        serde_json::from_str(&fs::read_to_string(fx.dir.join("gradcheck.config.json")).unwrap())
            .unwrap();
    assert_eq!(echo["global"]["threads"], 1);
}

#[test]
fn zero_threads_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = isoclip(
        tmp.path(),
        &["--threads", "0", "gradcheck", "--instances", "1"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["category"], "parameter");
}

#[test]
fn overlap_shrinks_after_alignment() {
    let fx = Fixture::new();
    ok(
        &fx.dir,
        &[
            "align",
            "--wi",
            &fx.path("fx/wi.iso"),
            "--wt",
            &fx.path("fx/wt.iso"),
            "--kt",
            "8",
            "--kb",
            "8",
        ],
    );
    let before = ok(
        &fx.dir,
        &[
            "overlap",
            "--projector",
            &fx.path("fx/wi.iso"),
            "--manifest",
            &fx.path("fx/image.json"),
            "--out",
            "before.csv",
        ],
    );
    let after = ok(
        &fx.dir,
        &[
            "overlap",
            "--projector",
            &fx.path("aligned"),
            "--manifest",
            &fx.path("fx/image.json"),
            "--out",
            "after.csv",
        ],
    );
    assert!(after["iou"].as_f64().unwrap() < before["iou"].as_f64().unwrap());
    let (header, rows) = read_csv(&fx.dir.join("after.csv"));
    assert_eq!(header, ["bin_left", "bin_right", "pos_mass", "neg_mass"]);
    assert_eq!(rows.len(), 100);
    let mass: f64 = rows.iter().map(|r| r[2].parse::<f64>().unwrap()).sum();
    assert!((mass - 1.0).abs() < 1e-9);
}

#[test]
fn classify_with_aligned_projector() {
    let fx = Fixture::new();
    ok(
        &fx.dir,
        &[
            "align",
            "--wi",
            &fx.path("fx/wi.iso"),
            "--wt",
            &fx.path("fx/wt.iso"),
            "--kt",
            "8",
            "--kb",
            "8",
        ],
    );
    let protos = fx.dir.join("protos");
    let summary = ok(
        &fx.dir,
        &[
            "classify",
            "--projector",
            &fx.path("aligned"),
            "--train",
            &fx.path("fx/image.json"),
            "--test",
            &fx.path("fx/image.json"),
            "--prototypes",
            protos.to_str().unwrap(),
        ],
    );
    assert_eq!(summary["classes"], 10);
    assert_eq!(summary["total"], 200);
    assert!(summary["accuracy"].as_f64().unwrap() > 0.9);
    assert!(protos.join("classes.json").exists());
}

#[test]
fn bands_report_includes_extensions() {
    let fx = Fixture::new();
    let summary = ok(
        &fx.dir,
        &[
            "bands",
            "--wi",
            &fx.path("fx/wi.iso"),
            "--wt",
            &fx.path("fx/wt.iso"),
            "--manifest",
            &fx.path("fx/image.json"),
            "--width",
            "16",
            "--extend",
            "0,8,24",
        ],
    );
    let bands = summary["bands"].as_array().unwrap();
    let names: Vec<&str> = bands.iter().map(|b| b["band"].as_str().unwrap()).collect();
    assert_eq!(
        names,
        [
            "top",
            "middle",
            "bottom",
            "middle+top0",
            "middle+top8",
            "middle+top24"
        ]
    );
    assert_eq!(bands[1]["start"], 24);
    assert_eq!(bands[5]["start"], 0);
    let (_, rows) = read_csv(&fx.dir.join("bands.csv"));
    assert_eq!(rows.len(), 6);
}

#[test]
fn whiten_writes_a_semi_orthogonal_map() {
    let tmp = tempfile::tempdir().unwrap();
    let w = Matrix::from_fn(6, 9, |i, j| ((i * 9 + j) as f64 * 0.37).sin());
    let input = tmp.path().join("w.iso");
    tensorio::write_matrix(&input, &w, DType::F64).unwrap();
    ok(
        tmp.path(),
        &[
            "--precision",
            "f64",
            "whiten",
            "--w",
            input.to_str().unwrap(),
        ],
    );
    let white = tensorio::read_matrix(tmp.path().join("whitened.iso")).unwrap();
    for s in spectral::svd(&white).unwrap().s {
        assert!((s - 1.0).abs() < 1e-8);
    }
}

#[test]
fn linearize_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let (m, n) = (5, 7);
    let f = |k: usize| move |i: usize, j: usize| (((i * 31 + j * 7 + k) as f64) * 0.61).cos() * 0.3;
    let params = MlpHeadParams::new(
        Matrix::from_fn(m, n, f(1)),
        Vector::from_fn(m, |i, _| 0.1 * i as f64),
        Matrix::from_fn(n, m, f(2)),
        Vector::from_fn(n, |i, _| -0.05 * i as f64),
        Vector::from_fn(n, |i, _| 1.0 + 0.1 * i as f64),
        Vector::from_fn(n, |i, _| 0.02 * i as f64),
        1e-6,
    )
    .unwrap();
    let head = tmp.path().join("head");
    params.save(&head, DType::F64).unwrap();
    ok(
        tmp.path(),
        &[
            "--precision",
            "f64",
            "linearize",
            "--head",
            head.to_str().unwrap(),
        ],
    );
    let w_eff = tensorio::read_matrix(tmp.path().join("w_eff.iso")).unwrap();
    assert_eq!(w_eff, linearize::linearize_head(&params).w_eff);
    assert_eq!(w_eff.shape(), (n, n + 1));
}
