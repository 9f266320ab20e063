use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_glasspipe"))
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn lines(s: &str) -> Vec<serde_json::Value> {
    s.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn segment_prints_one_record_per_window() {
    let out = ok(bin().arg("segment").arg("--audio").arg(scenarios().join("audio/nchc.wav")).output().unwrap());
    let recs = lines(&out);
    assert_eq!(recs.len(), 8);
    for key in ["index", "start_s", "end_s", "energy", "zcr", "is_speech"] {
        assert!(recs[0].get(key).is_some(), "{key}");
    }
    assert!(recs.iter().any(|r| r["is_speech"] == true));
}

#[test]
fn synthetic_silence_has_no_speech() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("s.wav");
    ok(bin().args(["audio", "synth", "--kind", "silence", "--seconds", "2", "--out"]).arg(&wav).output().unwrap());
    let recs = lines(&ok(bin().arg("segment").arg("--audio").arg(&wav).output().unwrap()));
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r["is_speech"] == false));
}

#[test]
fn raw_pcm_uses_the_rate_flag() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("tone.pcm");
    let bytes: Vec<u8> = (0..16_000)
        .map(|i| ((i as f64 * 0.1).sin() * 8_000.0) as i16)
        .flat_map(|s| s.to_le_bytes())
        .collect();
    std::fs::write(&raw, bytes).unwrap();
    let at_8k = lines(&ok(bin().arg("segment").arg("--audio").arg(&raw).args(["--rate", "8000"]).output().unwrap()));
    assert_eq!(at_8k.len(), 3);
    assert_eq!(at_8k[1]["start_s"], 0.5);
    let at_16k = lines(&ok(bin().arg("segment").arg("--audio").arg(&raw).output().unwrap()));
    assert_eq!(at_16k.len(), 1);
}

#[test]
fn classify_ranks_navigation_first() {
    let out = ok(bin()
        .args(["classify", "--command", "I want to go to NCHC", "--registry"])
        .arg(scenarios().join("intents.json"))
        .output()
        .unwrap());
    let ranked: Vec<serde_json::Value> = serde_json::from_str(&out).unwrap();
    assert_eq!(ranked[0]["intent_id"], "navigate");
    assert_eq!(ranked.len(), 4);
}

#[test]
fn memory_add_then_query() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("m.jsonl");
    for (id, text) in [("a", "robot arm protective stop"), ("b", "lunch menu for friday")] {
        ok(bin().arg("memory").arg("--store").arg(&store).args(["add", "--id", id, "--text", text]).output().unwrap());
    }
    let out = ok(bin()
        .arg("memory")
        .arg("--store")
        .arg(&store)
        .args(["query", "--k", "1", "--text", "the robot arm stopped"])
        .output()
        .unwrap());
    let hits = lines(&out);
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0]["doc_id"], "a");
    let dup = bin().arg("memory").arg("--store").arg(&store).args(["add", "--id", "a", "--text", "x"]).output().unwrap();
    assert!(!dup.status.success());
}

#[test]
fn netpath_score_emits_ticks() {
    let out = ok(bin().args(["netpath", "score", "--trace"]).arg(scenarios().join("lossy_trace.json")).output().unwrap());
    let ticks = lines(&out);
    assert_eq!(ticks.len(), 81);
    for key in ["t", "method", "score", "rate"] {
        assert!(ticks[0].get(key).is_some(), "{key}");
    }
}

#[test]
fn sched_run_offline_orders_by_priority() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = dir.path().join("tasks.json");
    std::fs::write(
        &tasks,
        r#"[
 {"task_id":"t1","task_type":"launch_app","utility":10,"decay":2,"alpha":0.1,"arrival_s":0,"payload":{"app":"a"},"resources":{"cpu":4}},
 {"task_id":"t2","task_type":"launch_app","utility":8,"decay":1,"alpha":0.1,"arrival_s":0,"payload":{"app":"b"},"resources":{"cpu":4}},
 {"task_id":"t3","task_type":"frobnicate","utility":4,"decay":1,"alpha":0,"arrival_s":0,"resources":{"cpu":4}}
]"#,
    )
    .unwrap();
    let out = ok(bin()
        .args(["sched", "run", "--capacity", "cpu=4,display=1", "--backfill=false", "--tasks"])
        .arg(&tasks)
        .output()
        .unwrap());
    let effects = lines(&out);
    let order: Vec<&str> = effects.iter().map(|e| e["task_id"].as_str().unwrap()).collect();
    assert_eq!(order, ["t2", "t1", "t3"]);
    assert_eq!(effects[2]["effect_type"], "failure");
}

#[test]
fn verify_passes_shipped_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["nchc_maps", "ur10_fault", "silence", "desk_session"] {
        let out = ok(bin()
            .arg("verify")
            .arg(scenarios().join(format!("{name}.json")))
            .arg("--data-dir")
            .arg(dir.path().join(name))
            .output()
            .unwrap());
        assert!(out.contains("PASS"), "{name}: {out}");
        assert!(dir.path().join(name).join("report.json").is_file());
    }
}

#[test]
fn run_json_reports_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(bin()
        .arg("run")
        .arg(scenarios().join("desk_session.json"))
        .args(["--seed", "5", "--json", "--data-dir"])
        .arg(dir.path())
        .output()
        .unwrap());
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["report"]["seed"], 5);
    assert_eq!(v["check"]["pass"], true);
}

#[test]
fn verify_fails_on_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let src = std::fs::read_to_string(scenarios().join("silence.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&src).unwrap();
    v["expected_effects"] = serde_json::json!([{ "effect_type": "open_url" }]);
    v["audio_path"] = serde_json::json!(scenarios().join("audio/silence.wav"));
    v["intent_registry_path"] = serde_json::json!(scenarios().join("intents.json"));
    v["link_trace_path"] = serde_json::json!(scenarios().join("clean_trace.json"));
    let path = dir.path().join("bad.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let out = bin().arg("verify").arg(&path).arg("--data-dir").arg(dir.path().join("out")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("missing"));
}
