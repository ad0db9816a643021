//! The `laspa` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set", "corpus.n_speakers=4",
    "--set", "corpus.utts_per_speaker_per_language=2",
    "--set", "corpus.frames_per_utt=24",
    "--set", "optimizer.batch_size=8",
    "--set", "optimizer.epochs=2",
    "--set", "optimizer.checkpoint_every=1",
    "--set", "encoder.channels=[4, 8]",
    "--set", "eval.n_speakers=3",
    "--set", "eval.utts_per_speaker_per_language=2",
    "--set", "eval.n_target=10",
    "--set", "eval.n_nontarget=20",
];

fn laspa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_laspa"))
        .current_dir(dir)
        .env("LASPA_THREADS", "1")
        .args(SMALL)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn malformed_key_fails_and_names_the_key() {
    let d = tempfile::tempdir().unwrap();
    let o = laspa(d.path(), &["--set", "optimizer.learnign_rate=0.1", "config"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.starts_with("error[config]:"), "{err}");
    assert!(err.contains("optimizer.learnign_rate"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    std::fs::write(d.path().join("bad.toml"), "encoder.depth = 3\n").unwrap();
    let o = laspa(d.path(), &["--config", "bad.toml", "config"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("encoder.depth"));
}

#[test]
fn gradcheck_on_the_tiny_config_exits_zero() {
    let d = tempfile::tempdir().unwrap();
    let o = laspa(d.path(), &["gradcheck", "--tiny"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("fusion.pt_spk.prefix_k"));
    assert!(out.contains("gradcheck: pass"));
}

#[test]
fn every_run_reports_digest_and_prefix_fraction() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_laspa")).current_dir(d.path()).arg("config").output().unwrap();
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("config_digest: "));
    let frac: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("prefix_fraction: "))
        .and_then(|v| v.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(frac > 0.0 && frac < 0.05, "{frac}");
    // the dump lists every default
    assert!(out.contains("optimizer.learning_rate = 0.001"));
    assert!(out.contains("dcf.p_target = 0.05"));
}

#[test]
fn pipeline_is_reproducible_byte_for_byte() {
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &runs {
        for args in [&["gen-corpus"][..], &["train"], &["evaluate", "--checkpoint", "run/train/final.lspc"]] {
            let o = laspa(d.path(), args);
            assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        }
        assert!(!d.path().join("run/train/.laspa.lock").exists());
    }
    for f in [
        "run/corpus/train/manifest.txt",
        "run/corpus/eval/manifest.txt",
        "run/corpus/trials.txt",
        "run/train/metrics.csv",
        "run/train/epoch_0001.lspc",
        "run/train/final.lspc",
        "run/train/scores.txt",
        "run/train/config.resolved.toml",
    ] {
        let a = std::fs::read(runs[0].path().join(f)).unwrap();
        let b = std::fs::read(runs[1].path().join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    // mel binaries too
    let listing = |d: &Path| {
        let mut v: Vec<_> = std::fs::read_dir(d.join("run/corpus/train/mels")).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    let names = listing(runs[0].path());
    assert_eq!(names, listing(runs[1].path()));
    for n in names {
        let rel = Path::new("run/corpus/train/mels").join(n);
        assert_eq!(std::fs::read(runs[0].path().join(&rel)).unwrap(), std::fs::read(runs[1].path().join(&rel)).unwrap());
    }

    // evaluate prints both metrics
    let o = laspa(runs[0].path(), &["evaluate", "--checkpoint", "run/train/final.lspc"]);
    let out = stdout(&o);
    assert!(out.contains("eer_percent: ") && out.contains("min_dcf: "), "{out}");

    // a checkpoint from another configuration is refused
    let o = laspa(runs[0].path(), &["--set", "attention.prefix_len=2", "evaluate", "--checkpoint", "run/train/final.lspc"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[checkpoint]"), "{}", stderr(&o));
}

#[test]
fn locked_output_directory_is_refused() {
    let d = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(d.path().join("run/corpus")).unwrap();
    std::fs::write(d.path().join("run/corpus/.laspa.lock"), "").unwrap();
    let o = laspa(d.path(), &["gen-corpus"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("locked"), "{}", stderr(&o));
}

#[test]
fn score_embed_and_mel_commands() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    std::fs::write(p.join("a.txt"), "1 0 0\n").unwrap();
    std::fs::write(p.join("b.txt"), "1 1 0\n").unwrap();
    let o = laspa(p, &["score", "a.txt", "b.txt"]);
    assert!(o.status.success());
    let s: f64 = stdout(&o).lines().find_map(|l| l.strip_prefix("score: ")).unwrap().parse().unwrap();
    assert!((s - 0.5f64.sqrt()).abs() < 1e-12);

    // a sine wave through the front end
    let samples: Vec<f32> = (0..8000).map(|i| (i as f32 * 0.1).sin() * 0.3).collect();
    let wave = laspa_core::features::Waveform::new(samples, 16_000).unwrap();
    laspa_core::features::write_wav(&p.join("x.wav"), &wave).unwrap();
    let o = laspa(p, &["mel", "--wav", "x.wav", "--out", "x.mel"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mel = laspa_core::features::read_mel(&p.join("x.mel")).unwrap();
    assert_eq!((mel.n_frames(), mel.n_mels()), (48, 40));

    // embed with a freshly trained checkpoint
    for args in [&["gen-corpus"][..], &["train"]] {
        assert!(laspa(p, args).status.success());
    }
    let o = laspa(p, &["embed", "--checkpoint", "run/train/final.lspc", "--mel", "x.mel", "--out", "e.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(p.join("e.txt")).unwrap().lines().count(), 64);
    let o = laspa(p, &["score", "e.txt", "e.txt"]);
    let s: f64 = stdout(&o).lines().find_map(|l| l.strip_prefix("score: ")).unwrap().parse().unwrap();
    assert!((s - 1.0).abs() < 1e-12);
}
