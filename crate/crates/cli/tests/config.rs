use cascade_cli::{load_config, parse_config, CliError, Preset};
use cascade_core::attack::DEFAULT_PASS_CAP;
use cascade_core::sharding::{build_plan, SplitFactor};
use std::path::PathBuf;

fn repo(path: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(path)
}

const MINIMAL: &str = r#"{ "model": { "seed": 3 }, "plan": { "n": 8, "c": 1, "alpha": 2 } }"#;

#[test]
fn minimal_config_gets_defaults() {
    let cfg = parse_config(MINIMAL, "minimal").unwrap();
    assert_eq!(cfg.network.bytes_per_element, 2);
    assert_eq!(cfg.attack.rho, 3);
    assert_eq!(cfg.attack.pass_cap, DEFAULT_PASS_CAP);
    assert_eq!(cfg.model.preset, Preset::Tiny);
    assert_eq!(cfg.model.config, Preset::Tiny.config());
    assert_eq!(cfg.plan().unwrap(), build_plan(8, 1, 2, SplitFactor::Auto).unwrap());

    let echo = serde_json::to_value(&cfg).unwrap();
    assert_eq!(echo["network"]["bytes_per_element"], 2);
    assert_eq!(echo["attack"]["pass_cap"], DEFAULT_PASS_CAP);
    assert_eq!(echo["run"]["trials"], 10);
}

#[test]
fn echo_round_trips() {
    for text in [MINIMAL.to_string(), std::fs::read_to_string(repo("configs/example.json")).unwrap()] {
        let once = parse_config(&text, "x").unwrap();
        let twice = parse_config(&serde_json::to_string_pretty(&once).unwrap(), "echo").unwrap();
        assert_eq!(once, twice);
    }
}

#[test]
fn shipped_configs_load() {
    for name in ["configs/example.json", "configs/bench-bert-base.json", "configs/security-small.json"] {
        load_config(&repo(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn preset_fields_can_be_overridden() {
    let text = r#"{ "model": { "preset": "bert-large-attention", "num_layers": 2 }, "plan": { "n": 16, "c": 1, "alpha": 2, "m": 1 } }"#;
    let cfg = parse_config(text, "x").unwrap();
    assert_eq!((cfg.model.config.num_layers, cfg.model.config.n_heads, cfg.model.config.head_dim), (2, 16, 64));
}

#[test]
fn explicit_plan_with_wrong_period_is_rejected() {
    let mut plan = build_plan(12, 2, 2, SplitFactor::Fixed(1)).unwrap();
    plan.delta = 5;
    let text = serde_json::json!({ "model": {}, "plan": { "explicit": plan } }).to_string();
    let err = parse_config(&text, "x").unwrap_err();
    assert!(matches!(err, CliError::Plan(_)), "{err}");
    assert!(err.to_string().contains("delta"), "{err}");
}

#[test]
fn explicit_valid_plan_loads() {
    let plan = build_plan(12, 2, 2, SplitFactor::Fixed(2)).unwrap();
    let text = serde_json::json!({ "model": {}, "plan": { "explicit": plan } }).to_string();
    assert_eq!(parse_config(&text, "x").unwrap().plan().unwrap(), plan);
}

#[test]
fn parse_errors_carry_line_context() {
    let text = "{\n  \"model\": {},\n  \"plan\": { \"n\": 8,, }\n}";
    match parse_config(text, "broken.json").unwrap_err() {
        CliError::Parse { line, snippet, path, .. } => {
            assert_eq!(line, 3);
            assert!(snippet.contains("\"n\": 8,,"));
            assert_eq!(path, "broken.json");
        }
        other => panic!("{other}"),
    }
}

#[test]
fn validation_names_the_broken_invariant() {
    let cases = [
        (r#"{ "model": { "n_kv_heads": 3 }, "plan": { "n": 8, "c": 1, "alpha": 2 } }"#, "H_KV"),
        (r#"{ "model": {}, "plan": { "n": 8, "c": 1 } }"#, "alpha"),
        (r#"{ "model": {}, "plan": { "n": 8, "c": 1, "alpha": 2 }, "network": { "latency": 0 } }"#, "latency"),
        (r#"{ "model": {}, "plan": { "n": 8, "c": 1, "alpha": 2 }, "attack": { "rho": 0 } }"#, "rho"),
        (r#"{ "model": {}, "plan": { "n": 8, "c": 1, "alpha": 2 }, "run": { "trails": 3 } }"#, "trails"),
        (r#"{ "model": {}, "plan": { "n": 8, "c": 1, "alpha": 2, "beta": 3 } }"#, "beta"),
        (r#"{ "model": {}, "plan": { "n": 4, "c": 1, "alpha": 2, "m": 3 } }"#, "split"),
        (r#"{ "model": {} }"#, "plan"),
        (r#"{ "model": {}, "plan": { "n": 8, "c": 1, "alpha": 2 }, "extra": {} }"#, "extra"),
        (r#"{ "model": {}, "plan": { "n": 8, "c": 1, "alpha": 2 }, "run": { "prompt": [1, 99] } }"#, "99"),
    ];
    for (text, needle) in cases {
        let err = parse_config(text, "x").unwrap_err().to_string();
        assert!(err.contains(needle), "{text}: {err}");
    }
}

#[test]
fn comments_are_ignored_everywhere() {
    let text = r#"{ "_comment": "top", "model": { "_comment": "m" }, "plan": { "_comment": "p", "n": 8, "c": 1, "alpha": 2 } }"#;
    assert!(parse_config(text, "x").is_ok());
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(load_config(&repo("configs/does-not-exist.json")), Err(CliError::Io { .. })));
}
