use std::process::{Command, Output};

fn ugd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ugd")).args(args).output().unwrap()
}

fn small() -> Vec<String> {
    [
        "data.base_classes=6",
        "data.novel_classes=6",
        "data.samples_per_class=12",
        "data.dims=[4,3,5]",
        "n_gamma=8",
        "iters=2",
        "ds_iters=20",
        "episodes=3",
        "queries_per_class=3",
        "etas=[0.0,0.3]",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn with_sets<'a>(cmd: &'a str, sets: &'a [String], rest: &'a [&'a str]) -> Vec<&'a str> {
    let mut args = vec![cmd];
    for s in sets {
        args.push("--set");
        args.push(s);
    }
    args.extend_from_slice(rest);
    args
}

#[test]
fn synth_stats_and_sweep_over_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let stats = tmp.path().join("stats");
    let out = tmp.path().join("out");
    let sets = small();
    let data_s = data.display().to_string();
    let r = ugd(&with_sets("synth", &sets, &["--out", &data_s]));
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(data.join("base.json").exists() && data.join("novel.json").exists());

    let files = [
        "data={\"kind\":\"files\",\"base_manifest\":\"BASE\",\"novel_manifest\":\"NOVEL\"}"
            .replace("BASE", &data.join("base.json").display().to_string())
            .replace("NOVEL", &data.join("novel.json").display().to_string()),
    ];
    let mut file_sets: Vec<String> = sets.iter().filter(|s| !s.starts_with("data.")).cloned().collect();
    file_sets.extend(files);
    let stats_s = stats.display().to_string();
    let r = ugd(&with_sets("stats", &file_sets, &["--out", &stats_s]));
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(stats.join("index.json").exists());

    let out_s = out.display().to_string();
    let r = ugd(&with_sets("sweep", &file_sets, &["--out", &out_s, "--per-episode", "--jobs", "2"]));
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["results.csv", "results.json", "per_episode.jsonl"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    // the default method set at two η values
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);

    // re-rendering the report reproduces the table byte for byte
    let again = tmp.path().join("again");
    let json = out.join("results.json").display().to_string();
    let again_s = again.display().to_string();
    let r = ugd(&["report", "--input", &json, "--out", &again_s]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(std::fs::read(again.join("results.csv")).unwrap(), csv.into_bytes());
}

#[test]
fn run_writes_stage_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let sets = small();
    let out_s = out.display().to_string();
    let r = ugd(&with_sets("run", &sets, &["--out", &out_s, "--per-episode"]));
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["aggregation_trace.jsonl", "rectify_trace.jsonl", "results.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().display().to_string();
    // unknown key
    assert_eq!(ugd(&["sweep", "--set", "nope=1", "--out", &out]).status.code(), Some(2));
    // complete-view samples cannot lose 99% of their slots
    assert_eq!(ugd(&["sweep", "--set", "etas=[0.99]", "--out", &out]).status.code(), Some(2));
    let missing = r#"data={"kind":"files","novel_manifest":"/nonexistent/novel.json"}"#;
    assert_eq!(ugd(&["sweep", "--set", missing, "--out", &out]).status.code(), Some(3));
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{\"episodes\": \"many\"}").unwrap();
    let bad_s = bad.display().to_string();
    assert_eq!(ugd(&["sweep", "--config", &bad_s, "--out", &out]).status.code(), Some(2));
}
