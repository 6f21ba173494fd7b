use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn jamt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jamt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run jamt")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = jamt(dir, args);
    assert!(
        out.status.success(),
        "jamt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

const TINY: &str = "d_model=16\nn_heads=2\nff_dim=32\nenc_layers=1\ndec_layers=1\nbatch_size=8\nckpt_interval=2\nwarmup=10\nsteps=4\n";

/// Tiny corpora, tokenizers, config and two joint checkpoints.
fn workspace() -> TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &[
        "gen-data", "-o", "data", "--asr", "40", "--mt", "40", "--st", "30", "--text", "40", "--test", "6",
        "--vocab", "12", "--feature-dim", "8",
    ]);
    ok(d, &["tok-train", "data/asr/src.txt", "data/st/src.txt", "--merges", "10000", "-o", "src.bpe"]);
    ok(d, &["tok-train", "data/mt/tgt.txt", "data/st/tgt.txt", "--merges", "10000", "-o", "tgt.bpe"]);
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    for (seed, out) in [("1", "j1.ckpt"), ("2", "j2.ckpt")] {
        ok(d, &[
            "train", "--mode", "joint", "--config", "tiny.cfg", "--seed", seed, "--src-bpe", "src.bpe", "--tgt-bpe",
            "tgt.bpe", "--train", "data/st", "--valid", "data/test", "-o", out,
        ]);
    }
    tmp
}

const DECODE: [&str; 6] = ["--src-bpe", "src.bpe", "--tgt-bpe", "tgt.bpe", "--data", "data/test"];

fn decode(d: &Path, extra: &[&str], out: &str) -> String {
    let mut args = vec!["decode"];
    args.extend(DECODE);
    args.extend(extra);
    args.extend(["-o", out]);
    ok(d, &args);
    fs::read_to_string(d.join(out)).unwrap()
}

#[test]
fn score_on_shipped_fixture() {
    let out = ok(Path::new("."), &[
        "score",
        "--metric",
        "wer",
        fixture("ref.txt").to_str().unwrap(),
        fixture("hyp.txt").to_str().unwrap(),
    ]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "WER 0.5000\n");

    let r = fixture("ref.txt");
    let out = ok(Path::new("."), &["score", "--metric", "bleu", r.to_str().unwrap(), r.to_str().unwrap()]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "BLEU 100.00\n");
}

#[test]
fn averaging_a_checkpoint_with_itself_is_byte_identical() {
    let w = workspace();
    let d = w.path();
    ok(d, &["avg-ckpt", "j1.ckpt", "j1.ckpt", "-o", "m.ckpt"]);
    assert_eq!(fs::read(d.join("m.ckpt")).unwrap(), fs::read(d.join("j1.ckpt")).unwrap());
    assert!(d.join("m.ckpt.manifest").exists());
}

#[test]
fn degenerate_ensemble_matches_single_model() {
    let w = workspace();
    let d = w.path();
    let single = decode(d, &["--mode", "joint-joint", "--joint", "j1.ckpt"], "single.txt");
    let ens = decode(
        d,
        &["--mode", "ens", "--joint", "j1.ckpt", "--joint", "j2.ckpt", "--weights", "1,0"],
        "ens.txt",
    );
    assert_eq!(single, ens);
    let threaded = decode(d, &["--mode", "joint-joint", "--joint", "j1.ckpt", "--threads", "3"], "threaded.txt");
    assert_eq!(single, threaded);
}

#[test]
fn every_decode_mode_writes_id_aligned_output() {
    let w = workspace();
    let d = w.path();
    let base = ["--config", "tiny.cfg", "--src-bpe", "src.bpe", "--tgt-bpe", "tgt.bpe", "--valid", "data/test"];
    for (mode, train, out) in [("asr", "data/asr", "a.ckpt"), ("mt", "data/mt", "m.ckpt"), ("lm", "data/mt", "lm.ckpt")] {
        let mut args = vec!["train", "--mode", mode, "--train", train, "-o", out];
        args.extend(base);
        ok(d, &args);
    }
    let mut args = vec!["train", "--mode", "adapt", "--init", "j1.ckpt", "--text", "data/text", "--train", "data/st", "-o", "ad.ckpt"];
    args.extend(base);
    ok(d, &args);

    let ids = fs::read_to_string(d.join("data/test/ids.txt")).unwrap();
    let ids: Vec<&str> = ids.lines().collect();
    let runs: [&[&str]; 6] = [
        &["--mode", "ext-ext", "--asr", "a.ckpt", "--mt", "m.ckpt"],
        &["--mode", "ext-joint", "--asr", "a.ckpt", "--joint", "j1.ckpt"],
        &["--mode", "joint-ext", "--joint", "ad.ckpt", "--mt", "m.ckpt"],
        &["--mode", "joint-joint", "--joint", "ad.ckpt", "--nbest", "3"],
        &["--mode", "ens", "--joint", "j1.ckpt", "--joint", "j2.ckpt"],
        &["--mode", "ext-ext", "--asr", "a.ckpt", "--mt", "m.ckpt", "--lm", "lm.ckpt", "--lm-weight", "0.3"],
    ];
    for (i, extra) in runs.iter().enumerate() {
        let text = decode(d, extra, &format!("out{i}.txt"));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), ids.len(), "{extra:?}");
        for (line, id) in lines.iter().zip(&ids) {
            let cols: Vec<&str> = line.split('\t').collect();
            assert_eq!(cols.len(), 5, "{line}");
            assert_eq!(cols[0], *id);
            assert!(cols[3].parse::<f64>().unwrap() <= 0.0);
            assert!(cols[4].parse::<f64>().unwrap() <= 0.0);
        }
    }
}

#[test]
fn training_is_reproducible_from_its_manifest() {
    let w = workspace();
    let d = w.path();
    let args = [
        "train", "--mode", "joint", "--config", "tiny.cfg", "--seed", "1", "--src-bpe", "src.bpe", "--tgt-bpe",
        "tgt.bpe", "--train", "data/st", "--valid", "data/test", "-o", "again.ckpt",
    ];
    ok(d, &args);
    assert_eq!(fs::read(d.join("again.ckpt")).unwrap(), fs::read(d.join("j1.ckpt")).unwrap());

    let manifest = fs::read_to_string(d.join("again.ckpt.manifest")).unwrap();
    assert!(manifest.contains("\nseed=1\n"));
    assert!(manifest.contains("\nconfig.d_model=16\n"));
    assert!(manifest.contains("\nconfig.lambda=0.5\n"));
    assert!(manifest.lines().any(|l| l.starts_with("input.src.bpe=") && l.len() == "input.src.bpe=".len() + 64));
}

#[test]
fn flags_override_config_file() {
    let w = workspace();
    let d = w.path();
    let out = ok(d, &[
        "train", "--mode", "mt", "--config", "tiny.cfg", "--set", "steps=3", "--steps", "2", "--src-bpe", "src.bpe",
        "--tgt-bpe", "tgt.bpe", "--train", "data/mt", "--valid", "data/test", "-o", "m.ckpt",
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("2 updates"));
    let manifest = fs::read_to_string(d.join("m.ckpt.manifest")).unwrap();
    assert!(manifest.contains("\nconfig.steps=2\n"));
    assert!(manifest.contains("\nconfig.d_model=16\n"));
}

#[test]
fn errors_map_to_exit_codes() {
    let w = workspace();
    let d = w.path();
    let train = |extra: &[&str]| {
        let mut args = vec![
            "train", "--mode", "asr", "--config", "tiny.cfg", "--src-bpe", "src.bpe", "--tgt-bpe", "tgt.bpe",
            "--valid", "data/test", "-o", "x.ckpt",
        ];
        args.extend(extra);
        jamt(d, &args).status.code()
    };
    assert_eq!(train(&["--train", "data/asr", "--set", "colour=blue"]), Some(1));
    assert_eq!(train(&["--train", "data/asr", "--set", "steps=many"]), Some(1));
    assert_eq!(train(&["--train", "no/such/dir"]), Some(2));
    assert_eq!(train(&["--train", "data/asr", "--set", "lr_scale=1e30"]), Some(3));
    assert_eq!(jamt(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(jamt(d, &["decode", "--mode", "ext-ext"]).status.code(), Some(1));

    fs::write(d.join("bad.ckpt"), "not a checkpoint").unwrap();
    let mut args = vec!["decode"];
    args.extend(DECODE);
    args.extend(["--mode", "joint-joint", "--joint", "bad.ckpt", "-o", "o.txt"]);
    assert_eq!(jamt(d, &args).status.code(), Some(2));
}

#[test]
fn prune_writes_kept_corpus_and_report() {
    let w = workspace();
    let d = w.path();
    ok(d, &["prune", "--asr", "j1.ckpt", "--src-bpe", "src.bpe", "--data", "data/st", "--threshold", "1.0", "-o", "kept"]);
    // WER can exceed 1 through insertions, so only the sizes must add up
    let kept = fs::read_to_string(d.join("kept/ids.txt")).unwrap().lines().count();
    let dropped = fs::read_to_string(d.join("kept/dropped.txt")).unwrap().lines().count();
    assert_eq!(kept + dropped, 30);
    assert!(d.join("kept/manifest.txt").exists());
    assert_eq!(
        jamt(d, &["prune", "--asr", "j1.ckpt", "--src-bpe", "src.bpe", "--data", "data/st", "--threshold", "2", "-o", "k2"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn generated_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a", "b"] {
        ok(d, &["gen-data", "-o", out, "--asr", "5", "--mt", "5", "--st", "10", "--text", "5", "--test", "5", "--corruption", "0.3"]);
    }
    for f in ["st/src.txt", "st/tgt.txt", "test/ids.txt", "corrupted.txt", "asr/feats/asr000000.f32"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read_to_string(d.join("a/corrupted.txt")).unwrap().lines().count(), 3);
}
