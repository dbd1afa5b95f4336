use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bpann"));
    c.env_remove("BPANN_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Small deterministic generator so the fixtures do not depend on the library.
struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f32 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((self.0 >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    }
}

fn rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut g = Lcg(seed);
    (0..n).map(|_| (0..dim).map(|_| g.next()).collect()).collect()
}

fn write_fvecs(path: &Path, rows: &[Vec<f32>]) {
    let mut bytes = Vec::new();
    for r in rows {
        bytes.extend_from_slice(&(r.len() as i32).to_le_bytes());
        for x in r {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).unwrap();
}

fn read_ivecs(path: &Path) -> Vec<Vec<i32>> {
    let bytes = std::fs::read(path).unwrap();
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let d = i32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        at += 4;
        out.push(
            (0..d)
                .map(|i| i32::from_le_bytes(bytes[at + 4 * i..at + 4 * i + 4].try_into().unwrap()))
                .collect(),
        );
        at += 4 * d;
    }
    out
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: Vec<Vec<f32>>,
}

impl Fixture {
    fn new(n: usize, dim: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = rows(n, dim, 7);
        write_fvecs(&root.join("data.fvecs"), &data);
        write_fvecs(&root.join("queries.fvecs"), &rows(50, dim, 8));
        Fixture { _dir: dir, root, data }
    }

    fn p(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }

    fn build(&self, out: &str, extra: &[&str]) -> String {
        let (data, out) = (self.p("data.fvecs"), self.p(out));
        let mut args = vec!["build", "--data", &data, "--out", &out, "--threads", "2"];
        args.extend_from_slice(extra);
        ok(&args)
    }
}

#[test]
fn default_build_verifies_and_is_deterministic() {
    let f = Fixture::new(10_000, 16);
    let report = f.build("a.bin", &[]);
    assert!(report.contains("skip edges"), "{report}");
    assert!(report.contains("clustering"));
    let verified = ok(&["verify", "--index", &f.p("a.bin")]);
    assert!(verified.starts_with("ok: 10000 vectors"), "{verified}");
    assert!(verified.contains("edges yes"));

    f.build("b.bin", &[]);
    let a = std::fs::read(f.p("a.bin")).unwrap();
    let b = std::fs::read(f.p("b.bin")).unwrap();
    assert!(a == b, "identical inputs produced different index files");
}

#[test]
fn no_edges_index_rejects_refinement() {
    let f = Fixture::new(2000, 8);
    f.build(
        "plain.bin",
        &["--no-edges", "--kappa-leaf", "100", "--kappa-inner", "8"],
    );
    assert!(ok(&["verify", "--index", &f.p("plain.bin")]).contains("edges no"));
    let q = "0.1,0.2,0.3,0.4,-0.5,0.6,0.7,0.8";
    let out = ok(&["query", "--index", &f.p("plain.bin"), "--vector", q, "--k", "3"]);
    assert_eq!(out.lines().filter(|l| l.starts_with(char::is_numeric)).count(), 3);

    let out = run(&["query", "--index", &f.p("plain.bin"), "--vector", q, "--d-edge", "8"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("skip edges"));
}

#[test]
fn groundtruth_matches_independent_full_sort() {
    let f = Fixture::new(1000, 6);
    write_fvecs(&f.root.join("self.fvecs"), &f.data[..5]);
    ok(&[
        "groundtruth",
        "--data",
        &f.p("data.fvecs"),
        "--queries",
        &f.p("self.fvecs"),
        "--k",
        "3",
        "--out",
        &f.p("self.ivecs"),
    ]);
    for (p, row) in read_ivecs(&f.root.join("self.ivecs")).iter().enumerate() {
        assert_eq!(row[0], p as i32);
    }

    ok(&[
        "groundtruth",
        "--data",
        &f.p("data.fvecs"),
        "--queries",
        &f.p("queries.fvecs"),
        "--k",
        "100",
        "--out",
        &f.p("gt.ivecs"),
    ]);
    let gt = read_ivecs(&f.root.join("gt.ivecs"));
    let queries = rows(50, 6, 8);
    assert_eq!(gt.len(), 50);
    for (q, got) in queries.iter().zip(&gt) {
        assert_eq!(got.len(), 100);
        let mut all: Vec<(f64, i32)> = f
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| {
                (
                    v.iter().zip(q).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>(),
                    i as i32,
                )
            })
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want: Vec<i32> = all[..100].iter().map(|x| x.1).collect();
        // Near-ties may order differently between f32 and f64 arithmetic.
        let same = got.iter().zip(&want).filter(|(a, b)| a == b).count();
        assert!(same >= 98, "{same} of 100 agree");
    }

    let out = run(&[
        "groundtruth",
        "--data",
        &f.p("data.fvecs"),
        "--queries",
        &f.p("queries.fvecs"),
        "--k",
        "5000",
        "--out",
        &f.p("bad.ivecs"),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_sweep_writes_consistent_rows() {
    let f = Fixture::new(3000, 8);
    f.build(
        "idx.bin",
        &[
            "--kappa-leaf",
            "128",
            "--kappa-inner",
            "8",
            "--d-edge",
            "16",
            "--s-leaf",
            "8",
        ],
    );
    ok(&[
        "groundtruth",
        "--data",
        &f.p("data.fvecs"),
        "--queries",
        &f.p("queries.fvecs"),
        "--k",
        "10",
        "--out",
        &f.p("gt.ivecs"),
    ]);
    let table = ok(&[
        "bench",
        "--index",
        &f.p("idx.bin"),
        "--queries",
        &f.p("queries.fvecs"),
        "--groundtruth",
        &f.p("gt.ivecs"),
        "--beta",
        "1,4,64",
        "--batch",
        "1,8",
        "--out",
        &f.p("bench.jsonl"),
        "--cache-fraction",
        "0.25",
        "--temporal-sort",
    ]);
    assert!(table.contains("recall"));
    let text = std::fs::read_to_string(f.p("bench.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0]["meta"]["thread_count"], 10);
    assert_eq!(lines[0]["meta"]["index_checksum"].as_str().unwrap().len(), 16);
    let mut last_recall = 0.0;
    for row in &lines[1..] {
        let r = &row["row"];
        let recall = r["recall_k_at_k"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&recall));
        let implied = r["qps"].as_f64().unwrap() * r["total_seconds"].as_f64().unwrap();
        assert!((implied - 50.0).abs() <= 0.5, "qps x seconds = {implied}");
        if r["config"]["batch"] == 1 {
            assert!(recall + 0.01 >= last_recall);
            last_recall = recall;
        }
    }
    assert!(last_recall >= 0.99);
}

#[test]
fn views_mode_logs_survival() {
    let f = Fixture::new(2000, 4);
    f.build(
        "idx.bin",
        &[
            "--kappa-leaf",
            "64",
            "--kappa-inner",
            "8",
            "--d-edge",
            "8",
            "--s-leaf",
            "4",
        ],
    );
    let out = ok(&[
        "view-demo",
        "--index",
        &f.p("idx.bin"),
        "--queries",
        &f.p("queries.fvecs"),
        "--data",
        &f.p("data.fvecs"),
        "--k-view",
        "200",
        "--temporal-sort",
        "--survival-log",
        &f.p("survival.jsonl"),
    ]);
    assert!(out.contains("mean survival"), "{out}");
    assert!(out.contains("mean recall"));
    let log = std::fs::read_to_string(f.p("survival.jsonl")).unwrap();
    let served: u64 = log
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["queries_served"]
                .as_u64()
                .unwrap()
        })
        .sum();
    assert_eq!(served, 50);

    let out = ok(&[
        "bench",
        "--index",
        &f.p("idx.bin"),
        "--queries",
        &f.p("queries.fvecs"),
        "--views",
        "--k-view",
        "100",
    ]);
    assert!(out.contains("views"));
}

#[test]
fn damaged_files_map_to_distinct_exit_codes() {
    let f = Fixture::new(500, 4);
    f.build("idx.bin", &["--kappa-leaf", "32", "--kappa-inner", "8", "--no-edges"]);
    let good = std::fs::read(f.p("idx.bin")).unwrap();

    let mut bad = good.clone();
    bad[0] = b'Z';
    std::fs::write(f.p("magic.bin"), &bad).unwrap();
    assert_eq!(run(&["verify", "--index", &f.p("magic.bin")]).status.code(), Some(3));

    std::fs::write(f.p("short.bin"), &good[..good.len() - 7]).unwrap();
    assert_eq!(run(&["verify", "--index", &f.p("short.bin")]).status.code(), Some(4));

    assert_eq!(run(&["verify", "--index", &f.p("missing.bin")]).status.code(), Some(5));
    assert_eq!(run(&["verify"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let f = Fixture::new(600, 4);
    let cfg = f.root.join("bpann.toml");
    std::fs::write(
        &cfg,
        format!(
            "threads = 1\n[build]\ndata = {:?}\nkappa_leaf = 16\nkappa_inner = 4\nno_edges = true\n[verify]\nindex = {:?}\n",
            f.p("data.fvecs"),
            f.p("cfg.bin")
        ),
    )
    .unwrap();
    let cfg = cfg.display().to_string();
    ok(&[
        "--config",
        &cfg,
        "build",
        "--out",
        &f.p("cfg.bin"),
        "--kappa-leaf",
        "64",
    ]);
    let verified = ok(&["--config", &cfg, "verify"]);
    assert!(verified.contains("edges no"));
    // The file's kappa_leaf = 16 would force at least 38 leaves; the flag's 64 allows far fewer nodes.
    let nodes: usize = verified
        .split(", ")
        .nth(1)
        .unwrap()
        .trim_end_matches(" nodes")
        .parse()
        .unwrap();
    assert!(nodes < 38, "{verified}");

    std::fs::write(&cfg, "[build]\nkappa_leaf = \"big\"\n").unwrap();
    let out = run(&[
        "--config",
        &cfg,
        "build",
        "--data",
        &f.p("data.fvecs"),
        "--out",
        &f.p("x.bin"),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
