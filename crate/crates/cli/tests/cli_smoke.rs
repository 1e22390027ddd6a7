//! Binary-level checks: subcommand wiring and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use spatialgen_core::pipeline::parse_record;
use spatialgen_core::synthetic::{generate_manifest, SyntheticSpec};

fn spatialgen(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spatialgen"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

#[test]
fn synth_emits_a_parseable_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { scenes: 6, ..SyntheticSpec::default() };
    generate_manifest(dir.path(), &spec).unwrap();

    let output = spatialgen(
        &["synth", "--manifest", "manifest.json", "--out", "corpus.jsonl"],
        dir.path(),
    );
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(stdout(&output).contains("records emitted: 6"));

    let corpus = std::fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap();
    for line in corpus.lines() {
        parse_record(line).unwrap();
    }
}

#[test]
fn synth_reports_and_honors_seed_and_workers_flags() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { scenes: 8, ..SyntheticSpec::default() };
    generate_manifest(dir.path(), &spec).unwrap();

    let run = |out: &str, extra: &[&str]| {
        let mut args = vec!["synth", "--manifest", "manifest.json", "--out", out];
        args.extend_from_slice(extra);
        let output = spatialgen(&args, dir.path());
        assert!(output.status.success());
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let a = run("a.jsonl", &["--seed", "5", "--workers", "1"]);
    let b = run("b.jsonl", &["--seed", "5", "--workers", "8"]);
    let c = run("c.jsonl", &["--seed", "6"]);
    assert_eq!(a, b);
    assert_ne!(a, c);

    let output = spatialgen(
        &[
            "synth",
            "--manifest",
            "manifest.json",
            "--out",
            "d.jsonl",
            "--report",
            "report.txt",
        ],
        dir.path(),
    );
    assert!(output.status.success());
    let report = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(report.contains("records emitted: 8"));
}

#[test]
fn empty_corpus_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        scenes: 2,
        multi_view_every: 0,
        single_object_every: 1,
        ..SyntheticSpec::default()
    };
    generate_manifest(dir.path(), &spec).unwrap();
    let output = spatialgen(
        &["synth", "--manifest", "manifest.json", "--out", "corpus.jsonl"],
        dir.path(),
    );
    assert_eq!(output.status.code(), Some(2), "{}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn missing_manifest_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let output = spatialgen(
        &["synth", "--manifest", "nope.json", "--out", "corpus.jsonl"],
        dir.path(),
    );
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn usage_errors_exit_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    // unknown flag
    let output = spatialgen(&["synth", "--nonsense"], dir.path());
    assert_eq!(output.status.code(), Some(1));
    // invalid config contents
    std::fs::write(dir.path().join("bad.json"), r#"{"workers": 0}"#).unwrap();
    let spec = SyntheticSpec { scenes: 1, ..SyntheticSpec::default() };
    generate_manifest(dir.path(), &spec).unwrap();
    let output = spatialgen(
        &[
            "synth",
            "--manifest",
            "manifest.json",
            "--config",
            "bad.json",
            "--out",
            "corpus.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn pairs_scores_file_lists_band_membership() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("scores.txt"), "f1 f2 0.5\nf1 f3 0.2\nf2 f3 0.65\n")
        .unwrap();
    let output = spatialgen(&["pairs", "--scores", "scores.txt"], dir.path());
    assert!(output.status.success());
    let text = stdout(&output);
    assert!(text.contains("f1\tf2\t0.500000\tyes"), "{text}");
    assert!(text.contains("f1\tf3\t0.200000\tno"), "{text}");
    assert!(text.contains("f2\tf3\t0.650000\tyes"), "{text}");
    assert!(text.contains("2 of 3 pairs admitted"), "{text}");
}

#[test]
fn expand_reports_votes_and_final_set() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("scores.txt"),
        "a b 0.5\na c 0.3\nb c 0.3\na d 0.3\nb d 0.3\nc d 0.3\n",
    )
    .unwrap();
    let output = spatialgen(
        &[
            "expand",
            "--scores",
            "scores.txt",
            "--anchor-a",
            "a",
            "--anchor-b",
            "b",
            "--candidates",
            "c,d",
        ],
        dir.path(),
    );
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let text = stdout(&output);
    assert!(text.contains("vote c: valid"), "{text}");
    assert!(text.contains("view set (4): a b c d"), "{text}");
}

#[test]
fn grad_check_passes_and_prints_groups() {
    let dir = tempfile::tempdir().unwrap();
    let output = spatialgen(&["grad-check", "--instances", "4"], dir.path());
    assert!(output.status.success());
    let text = stdout(&output);
    assert!(text.contains("w_q"), "{text}");
    assert!(text.contains("PASS"), "{text}");
}

#[test]
fn param_audit_lists_named_configs() {
    let dir = tempfile::tempdir().unwrap();
    let output = spatialgen(&["param-audit"], dir.path());
    assert!(output.status.success());
    let text = stdout(&output);
    for name in ["openclip-vit-g14", "siglip2-vit-g16", "dinov2-vit-g14", "dinov3-vit-7b16"] {
        assert!(text.contains(name), "{text}");
    }
}

#[test]
fn plan_stages_prints_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let output = spatialgen(&["plan-stages"], dir.path());
    assert!(output.status.success());
    let text = stdout(&output);
    assert!(text.contains("projector, llm"), "{text}");
    assert!(text.contains("dual_channel_plus, projector"), "{text}");
}

#[test]
fn demo_then_synth_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let demo = spatialgen(&["demo", "--out", "data", "--scenes", "5"], dir.path());
    assert!(demo.status.success());
    let synth = spatialgen(
        &["synth", "--manifest", "data/manifest.json", "--out", "data/corpus.jsonl"],
        dir.path(),
    );
    assert!(synth.status.success());
    assert_eq!(
        std::fs::read_to_string(dir.path().join("data/corpus.jsonl")).unwrap().lines().count(),
        5
    );
}
