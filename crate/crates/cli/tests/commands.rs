use std::path::Path;
use std::process::{Command, Output};

use alive_core::checkpoint;
use alive_core::funnel::{make_synthetic_records, DataRecord};
use alive_core::tensor::Tensor;
use serde_json::Value;

const KITCHEN: &str = "Subjects: Subject1: A man in a purple shirt with a clear voice. Subject2: A bearded man with a deep voice. Visual: A modern kitchen with grey cabinets. Narration: Subject1 points to Subject2 and says <W>The vegetables are sold out</W> accompanied by <I>sizzling steak sounds</I>. Subject2 turns around to cut vegetables.";

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alive-forge"))
        .args(args)
        .env_remove("ALIVE_FORGE_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = forge(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn positions_check_prints_centroids() {
    let out: Value = serde_json::from_str(&ok(&["check", "positions", "--video-latents", "2", "--audio-latents", "8"])).unwrap();
    assert_eq!(out["passed"], true);
    assert_eq!(out["output"][0]["modality"], "video");
    assert_eq!(out["output"][0]["positions"], serde_json::json!([1.5, 5.5]));
}

#[test]
fn parse_caption_reports_documents() {
    let dir = tempfile::tempdir().unwrap();
    let txt = dir.path().join("kitchen.txt");
    std::fs::write(&txt, KITCHEN).unwrap();
    let doc = &json_lines(&ok(&["parse-caption", "--input", s(&txt)]))[0];
    assert_eq!(doc["canonical"], true);
    assert_eq!(doc["doc"]["subjects"][0]["vocal_desc"], "a clear voice");

    let jsonl = dir.path().join("caps.jsonl");
    let lines = [
        serde_json::json!({"id": "a", "caption": KITCHEN}),
        serde_json::json!({"id": "b", "caption": "Visual: no subjects"}),
    ];
    std::fs::write(&jsonl, lines.iter().map(|l| l.to_string() + "\n").collect::<String>()).unwrap();
    let out = dir.path().join("parsed.jsonl");
    let run = forge(&["parse-caption", "--input", s(&jsonl), "--out", s(&out)]);
    assert!(!run.status.success());
    let parsed = json_lines(&std::fs::read_to_string(&out).unwrap());
    assert!(parsed[0]["error"].is_null() && parsed[1]["error"].is_string());
    assert!(dir.path().join("parsed.jsonl.manifest.json").exists());
}

#[test]
fn correct_subjects_relabels_the_speaker() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    std::fs::write(p("cap.txt"), KITCHEN).unwrap();
    std::fs::write(p("scores.json"), r#"{"fps": 4, "tracks": 2, "scores": [[0,0,0,0,0,0,0,0],[3,3,3,3,0,0,0,0]]}"#).unwrap();
    std::fs::write(p("sent.jsonl"), "{\"text\": \"The vegetables are sold out\", \"t_start\": 0.0, \"t_end\": 1.0}\n").unwrap();
    std::fs::write(p("map.json"), r#"{"0": {"subject": "Subject1"}, "1": {"subject": "Subject2"}}"#).unwrap();
    let out = p("fixed.txt");
    let status = ok(&[
        "correct-subjects", "--caption", s(&p("cap.txt")), "--scores", s(&p("scores.json")), "--sentences",
        s(&p("sent.jsonl")), "--trackmap", s(&p("map.json")), "--theta", "1.5", "--min-margin", "0.5", "--out", s(&out),
    ]);
    assert!(status.contains("corrected"), "{status}");
    let fixed = std::fs::read_to_string(&out).unwrap();
    assert!(fixed.contains("<W who=\"Subject2\">The vegetables are sold out</W>"), "{fixed}");
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(p("fixed.txt.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "correct-subjects");
}

#[test]
fn filter_writes_records_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    let records = make_synthetic_records(800, 3);
    std::fs::write(&input, records.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect::<String>()).unwrap();
    let (out, report) = (dir.path().join("out.jsonl"), dir.path().join("report.json"));
    ok(&["filter", "--stage", "sft", "--records", s(&input), "--out", s(&out), "--report", s(&report)]);
    let kept: Vec<DataRecord> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["input"], 800);
    assert_eq!(rep["output"], kept.len());
    assert!(kept.iter().all(|r| r.clarity_score.unwrap() >= 4));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn cross_pairs_and_sound_refinement() {
    let dir = tempfile::tempdir().unwrap();
    let cands = dir.path().join("c.jsonl");
    std::fs::write(
        &cands,
        "{\"record_a\":\"a\",\"record_b\":\"b\",\"face_sim\":0.5,\"global_sim\":0.88}\n\
         {\"record_a\":\"a\",\"record_b\":\"c\",\"face_sim\":0.3,\"global_sim\":0.9}\n\
         {\"record_a\":\"a\",\"record_b\":\"d\",\"face_sim\":0.9,\"global_sim\":0.99}\n",
    )
    .unwrap();
    let verdicts: Vec<Value> = json_lines(&ok(&["cross-pairs", "--candidates", s(&cands), "--tol", "0.05"]))
        .into_iter()
        .map(|d| d["verdict"].clone())
        .collect();
    assert_eq!(verdicts, ["accepted", "face_too_low", "quasi_identical"]);

    let vec2 = |a: f64, b: f64| Tensor::new(vec![2], vec![a, b]).unwrap();
    let (index, terms) = (dir.path().join("index.alvf"), dir.path().join("terms.alvf"));
    checkpoint::save(&index, &[("explosion".into(), vec2(1.0, 0.0)), ("rain".into(), vec2(0.0, 1.0))]).unwrap();
    checkpoint::save(&terms, &[("boom".into(), vec2(0.96, 0.28)), ("noise".into(), vec2(0.8, 0.6))]).unwrap();
    let subs = json_lines(&ok(&["refine-sounds", "--terms", s(&terms), "--index", s(&index), "--tau", "0.85"]));
    assert_eq!(subs[0]["output"], "explosion");
    assert_eq!(subs[1]["output"], "noise");
}

#[test]
fn train_then_sample_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "pairs = 16\n[train]\nbatch = 2\nlr_video = 1e-3\n").unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--stage", "joint", "--config", s(&cfg), "--steps", "3", "--seed", "4", "--out", s(&run)]);
    let metrics = json_lines(&std::fs::read_to_string(run.join("metrics.jsonl")).unwrap());
    assert_eq!(metrics.len(), 3);
    assert_eq!(metrics[2]["step"], 2);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let model = run.join("model.alvf");
    let sample = |mode: &[&str], out: &Path, seed: &str| {
        let mut args = vec!["sample", "--checkpoint", s(&model), "--steps", "2", "--seed", seed, "--out", s(out)];
        args.extend_from_slice(mode);
        ok(&args);
        std::fs::read(out.join("latents.alvf")).unwrap()
    };
    let a = sample(&["--mode", "t2va"], &dir.path().join("a"), "1");
    let b = sample(&["--mode", "t2va"], &dir.path().join("b"), "1");
    let c = sample(&["--mode", "t2va"], &dir.path().join("c"), "2");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let i2va = dir.path().join("i2va");
    sample(&["--mode", "i2va", "--first-frame", "0.5,-1,0,2"], &i2va, "1");
    let video = &checkpoint::load(&i2va.join("latents.alvf")).unwrap()[0].1;
    assert_eq!(video.row(0), &[0.5, -1.0, 0.0, 2.0]);
    let r2va = dir.path().join("r2va");
    sample(&["--mode", "r2va", "--reference", "1,0,0,0", "--s-txt", "1", "--s-ref", "1"], &r2va, "1");
    let m: Value = serde_json::from_str(&std::fs::read_to_string(r2va.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["summary"]["forwards"], 6);
    assert!(!forge(&["sample", "--mode", "i2va", "--out", s(&dir.path().join("x"))]).status.success());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_alive-forge"));
        cmd.env_remove("ALIVE_FORGE_SEED");
        if let Some(v) = env {
            cmd.env("ALIVE_FORGE_SEED", v);
        }
        let out = dir.path().join(out);
        assert!(cmd.args(["sample", "--steps", "1", "--out", s(&out)]).status().unwrap().success());
        let m: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        m["seed"].as_u64().unwrap()
    };
    assert_eq!(run(None, "d"), 0);
    assert_eq!(run(Some("31"), "e"), 31);
}
