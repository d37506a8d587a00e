use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "
corpus.num_pairs = 300
toxicity.eval_pool_size = 300
policy.embed = 8
policy.hidden = 12
policy.adapter_rank = 2
policy.adapter_alpha = 4
pretrain.num_sentences = 200
pretrain.epochs = 1
sft.epochs = 1
grpo.epochs = 1
grpo.num_inputs = 6
grpo.max_new_tokens = 8
eval.max_len = 8
eval.num_test = 10
eval.shift_num_sources = 10
";

fn detox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_detox")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

#[test]
fn help_succeeds_and_usage_errors_exit_1() {
    assert_eq!(code(&detox(&["--help"])), 0);
    assert_eq!(code(&detox(&["frobnicate"])), 1);
    assert_eq!(code(&detox(&["sweep"])), 1);
}

#[test]
fn bad_config_exits_1_and_missing_inputs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "grpo.k = 1\n").unwrap();
    let o = detox(&["--config", cfg.to_str().unwrap(), "gen-corpus"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));

    let out = tmp.path().join("empty");
    let o = detox(&["--out", out.to_str().unwrap(), "train-tox"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-corpus"));

    let o = detox(&["--out", out.to_str().unwrap(), "sweep", "--axis", "temperature"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn stage_commands_chain_in_one_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("work");
    let out = out.to_str().unwrap();
    for cmd in ["gen-corpus", "train-tox", "filter", "sft", "grpo", "eval"] {
        let o = detox(&["--config", &cfg, "--out", out, "--seed", "4", cmd]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let dir = Path::new(out);
    for f in ["train.txt", "tox_eval.txt", "sft_data.txt", "adapter_sft.txt", "adapter_grpo.txt", "eval_report.csv"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let report = fs::read_to_string(dir.join("eval_report.csv")).unwrap();
    assert!(report.starts_with("metric,value\nSTA,"));

    let metrics = dir.join("grpo_metrics.csv");
    let o = detox(&["curves", metrics.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(dir.join("grpo_metrics_mean_reward.csv").exists());
}

#[test]
fn pipeline_runs_once_per_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("runs");
    let args = ["--config", &cfg, "--out", out.to_str().unwrap(), "pipeline"];
    let o = detox(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("J,"));
    assert_eq!(code(&detox(&args)), 1);
}
