mod common;

use std::sync::atomic::Ordering;

use common::{snapshot, Fixture};
use serde_json::Value;
use zpd_cli::{run, Command};
use zpd_core::data::{self, Query, ResponseRecord, Setting, Task};
use zpd_core::gateway::GatewayMode;

fn read_json(path: &std::path::Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_in_replay_after_priming() {
    let fx = Fixture::new(30, "");
    fx.prime();
    let primed = fx.calls.load(Ordering::SeqCst);
    assert!(primed > 0);
    fx.run_all("a", GatewayMode::Replay);
    assert_eq!(fx.calls.load(Ordering::SeqCst), primed);

    let out = |n: &str| fx.path("a").join(n);
    let points = std::fs::read_to_string(out("policy_points.csv")).unwrap();
    assert_eq!(points.lines().count(), 1 + 99 * 99);
    assert!(points.starts_with("tau1,tau2,accuracy,total_tokens,n_icl_routed"));
    let zones = std::fs::read_to_string(out("zones.csv")).unwrap();
    assert_eq!(zones.lines().count(), 1 + 2 * 30);
    let schedule = read_json(&out("schedule.json"));
    assert_eq!(schedule["hyperparameters"]["lr"], 1e-5);
    assert_eq!(schedule["optimizer_state"], "continuous");
    let report = read_json(&out("report.json"));
    assert!(report["missing"].as_array().unwrap().is_empty(), "{report}");
    let eval = read_json(&out("irt_eval.json"));
    assert_eq!(eval["variants"].as_array().unwrap().len(), 4);
}

#[test]
fn primed_cache_in_live_mode_makes_no_calls() {
    let fx = Fixture::new(12, "");
    fx.prime();
    let primed = fx.calls.load(Ordering::SeqCst);
    let ctx = fx.context("again", GatewayMode::Live);
    run(Command::BuildOracle, &ctx).unwrap();
    run(Command::MeasureZones, &ctx).unwrap();
    assert_eq!(fx.calls.load(Ordering::SeqCst), primed);
    assert_eq!(snapshot(&fx.path("prime")), snapshot(&fx.path("again")));
}

#[test]
fn interrupted_oracle_build_resumes() {
    let fx = Fixture::new(12, "");
    fx.prime();
    let ctx = fx.context("resumed", GatewayMode::Replay);
    run(Command::BuildOracle, &ctx).unwrap();
    let full = snapshot(&fx.path("resumed"));
    // keep the first few oracle lines and drop one ICL record, as after a crash
    let oracle = fx.path("resumed").join("oracle.jsonl");
    let text = std::fs::read_to_string(&oracle).unwrap();
    let kept: Vec<&str> = text.lines().take(5).collect();
    std::fs::write(&oracle, kept.join("\n") + "\n").unwrap();
    let icl = fx.path("resumed").join("icl_responses.jsonl");
    let text = std::fs::read_to_string(&icl).unwrap();
    let kept: Vec<&str> = text.lines().skip(1).collect();
    std::fs::write(&icl, kept.join("\n") + "\n").unwrap();
    run(Command::BuildOracle, &ctx).unwrap();
    assert_eq!(snapshot(&fx.path("resumed")), full);
}

#[test]
fn missing_icl_in_replay_names_the_stage() {
    let fx = Fixture::new(8, "");
    let ctx = fx.context("out", GatewayMode::Replay);
    let err = run(Command::MeasureZones, &ctx).unwrap_err();
    assert_eq!(err.stage, "measure-zones");
    let j = err.to_json();
    assert_eq!(j["error"]["stage"], "measure-zones");
    assert!(j["error"]["message"].as_str().unwrap().contains("cache miss"), "{j}");
}

#[test]
fn oracle_k_beyond_pool_is_truncated_with_warning() {
    let fx = Fixture::new(4, "");
    let mut ctx = fx.context("out", GatewayMode::Live);
    ctx.config.oracle.k = 10;
    run(Command::BuildOracle, &ctx).unwrap();
    let lines: Vec<Value> = std::fs::read_to_string(fx.path("out").join("oracle.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 8);
    for l in &lines {
        assert_eq!(l["demos"].as_array().unwrap().len(), 3);
        assert!(!l["warnings"].as_array().unwrap().is_empty());
    }
}

#[test]
fn toy_paired_set_zone_counts() {
    let fx = Fixture::new(4, "");
    let qs: Vec<Query> = (0..4)
        .map(|i| Query::new(format!("t{i}"), Task::MathQa, format!("toy {i}"), "1"))
        .collect();
    data::write_jsonl(&fx.path("queries.jsonl"), &qs).unwrap();
    let pairs = [(true, true), (false, true), (false, false), (true, false)];
    let mut recs = Vec::new();
    for (q, (dp, icl)) in qs.iter().zip(pairs) {
        for (setting, label) in [(Setting::Dp, dp), (Setting::Icl, icl)] {
            recs.push(ResponseRecord {
                model_id: "m".into(),
                example_id: q.example_id.clone(),
                setting,
                prompt_text: String::new(),
                raw_output: String::new(),
                label,
                prompt_token_count: 1,
            });
        }
    }
    data::write_jsonl(&fx.path("responses.jsonl"), &recs).unwrap();
    let input = std::fs::read(fx.path("responses.jsonl")).unwrap();
    let mut ctx = fx.context("out", GatewayMode::Replay);
    ctx.config.gateway.models.clear();
    ctx.config.paths.responses = Some(fx.path("responses.jsonl"));
    run(Command::MeasureZones, &ctx).unwrap();
    let first = snapshot(&fx.path("out"));
    let dist = read_json(&fx.path("out").join("zone_dist.json"));
    let m = &dist["models"][0];
    for z in ["Z_OK", "Z_ZPD", "Z_FAIL", "Z_DEGRADE"] {
        assert_eq!(m["counts"][z], 1, "{z}");
    }
    assert_eq!(m["merged_counts"]["Z_OK"], 2);
    assert_eq!(m["merged_counts"]["Z_ZPD"], 1);
    assert_eq!(m["merged_counts"]["Z_FAIL"], 1);
    // a single model has no pairs to overlap
    let overlap = read_json(&fx.path("out").join("overlap.json"));
    assert!(overlap["Z_OK"]["skipped"].is_string());
    run(Command::MeasureZones, &ctx).unwrap();
    assert_eq!(snapshot(&fx.path("out")), first);
    assert_eq!(std::fs::read(fx.path("responses.jsonl")).unwrap(), input);
}

#[test]
fn downstream_stage_without_model_fails_cleanly() {
    let fx = Fixture::new(4, "");
    let ctx = fx.context("out", GatewayMode::Replay);
    let err = run(Command::SelectIcl, &ctx).unwrap_err();
    assert_eq!(err.stage, "select-icl");
    assert!(err.to_string().contains("fit-irt"), "{err}");
}
