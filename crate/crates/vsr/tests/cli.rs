mod common;

use std::fs;

use common::{files_under, raw_tree, s, vsr, write_config};
use tempfile::tempdir;
use vsr::checkpoint::Checkpoint;
use vsr::eval::bicubic_clip;
use vsr::imageio::read_clip_dir;
use vsr_core::trainer::Trainer;

#[test]
fn prepare_is_idempotent() {
    let t = tempdir().unwrap();
    let (raw, out) = (t.path().join("raw"), t.path().join("prep"));
    raw_tree(&raw, &["a", "b"], 34, 40, 3);
    let first = vsr(&["prepare-data", "--input", s(&raw), "--output", s(&out)]);
    assert_eq!(first.code, 0, "{}", first.stderr);
    assert!(first.stdout.contains("prepared 2 scene(s)"));
    let files = files_under(&out);
    assert!(files.iter().any(|p| p.ends_with("manifest.txt")));
    assert_eq!(files.iter().filter(|p| p.extension().is_some_and(|e| e == "png")).count(), 12);
    let lr = read_clip_dir(&out.join("LR/a"), "a").unwrap();
    assert_eq!(lr.dims(), (8, 10));
    let stamps: Vec<_> = files.iter().map(|p| fs::metadata(p).unwrap().modified().unwrap()).collect();

    let second = vsr(&["prepare-data", "--input", s(&raw), "--output", s(&out)]);
    assert_eq!(second.code, 0, "{}", second.stderr);
    assert!(second.stdout.contains("skipped 2"), "{}", second.stdout);
    assert!(second.stdout.contains("manifest unchanged"));
    assert_eq!(files_under(&out), files);
    let again: Vec<_> = files.iter().map(|p| fs::metadata(p).unwrap().modified().unwrap()).collect();
    assert_eq!(again, stamps);

    let changed = vsr(&["prepare-data", "--input", s(&raw), "--output", s(&out), "--sigma", "1.2"]);
    assert_ne!(changed.code, 0);
    assert!(changed.stderr.contains("--force"));
    let forced = vsr(&["prepare-data", "--input", s(&raw), "--output", s(&out), "--sigma", "1.2", "--force"]);
    assert_eq!(forced.code, 0, "{}", forced.stderr);
}

#[test]
fn corrupt_png_is_a_data_error_naming_the_file() {
    let t = tempdir().unwrap();
    let raw = t.path().join("raw");
    raw_tree(&raw, &["a"], 32, 32, 2);
    let bad = raw.join("a").join("00001.png");
    fs::write(&bad, b"\x89PNG\r\n\x1a\nnot really").unwrap();
    let o = vsr(&["prepare-data", "--input", s(&raw), "--output", s(&t.path().join("out"))]);
    assert_eq!(o.code, 3);
    assert_eq!(o.stderr.lines().count(), 1, "{}", o.stderr);
    assert!(o.stderr.starts_with("error: category=data"));
    assert!(o.stderr.contains("00001.png"));
}

#[test]
fn exit_codes() {
    assert_eq!(vsr(&["--help"]).code, 0);
    assert_eq!(vsr(&["--version"]).code, 0);
    let o = vsr(&["train", "--frobnicate"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.starts_with("error: category=bad-arguments"));
    assert_eq!(o.stderr.lines().count(), 1);
    let o = vsr(&["describe", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(o.code, 3);
    assert!(o.stderr.contains("/nonexistent/run.cfg"));
    let t = tempdir().unwrap();
    let o = vsr(&["prepare-data", "--input", s(t.path()), "--output", s(&t.path().join("o")), "--ksize", "12"]);
    assert_eq!(o.code, 2);
    let cfg = t.path().join("bad.cfg");
    fs::write(&cfg, "preset = exp4_1\nn_neighbors = 3\n").unwrap();
    let o = vsr(&["describe", "--config", s(&cfg)]);
    assert_eq!(o.code, 2);
    fs::write(&cfg, "colour = red\n").unwrap();
    let o = vsr(&["describe", "--config", s(&cfg)]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("colour"));
}

#[test]
fn describe_prints_sizes() {
    let t = tempdir().unwrap();
    let cfg = write_config(&t.path().join("c.cfg"), t.path(), "");
    let o = vsr(&["describe", "--config", s(&cfg)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.contains("discriminator parameters"));
    assert!(o.stdout.contains("preset = rbpn_only"));
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let t = tempdir().unwrap();
    let raw = t.path().join("raw");
    raw_tree(&raw, &["a", "b"], 32, 32, 3);
    let cfg = write_config(&t.path().join("c.cfg"), &raw, "");
    let (one, two) = (t.path().join("one"), t.path().join("two"));

    let o = vsr(&["train", "--config", s(&cfg), "--output", s(&one), "--quiet"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(one.join("final.ckpt").is_file());
    assert!(one.join("run_manifest.json").is_file());
    assert!(one.join("checkpoints/step-00000002.ckpt").is_file());

    let o = vsr(&["train", "--config", s(&cfg), "--output", s(&two), "--max-steps", "3", "--quiet"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.contains("stopped at step 3"));
    let o = vsr(&["train", "--config", s(&cfg), "--output", s(&two), "--quiet"]);
    assert_eq!(o.code, 2, "fresh run into a used directory: {}", o.stdout);
    let o = vsr(&["train", "--config", s(&cfg), "--output", s(&two), "--resume", "--quiet"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.contains("resumed from 3"));

    let read = |d: &std::path::Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(&one, "train_log.jsonl"), read(&two, "train_log.jsonl"));
    assert_eq!(read(&one, "final.ckpt"), read(&two, "final.ckpt"));
    let log = String::from_utf8(read(&one, "train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(!log.contains("wall_time_s"));
}

#[test]
fn infer_is_deterministic_and_zero_reconstruction_is_bicubic() {
    let t = tempdir().unwrap();
    let raw = t.path().join("raw");
    let prep = t.path().join("prep");
    raw_tree(&raw, &["a"], 32, 36, 3);
    assert_eq!(vsr(&["prepare-data", "--input", s(&raw), "--output", s(&prep)]).code, 0);
    let cfg = write_config(&t.path().join("c.cfg"), &prep, "");
    let cfg = vsr::config::RunConfig::load(&cfg).unwrap();
    let mut tr = Trainer::new(cfg.train).unwrap();
    tr.models_mut().generator.zero_reconstruction();
    let ck = t.path().join("zero.ckpt");
    Checkpoint::of(&tr).save(&ck).unwrap();

    let (x, y) = (t.path().join("x"), t.path().join("y"));
    for out in [&x, &y] {
        let o = vsr(&["infer", "--checkpoint", s(&ck), "--input", s(&prep), "--output", s(out), "--compare"]);
        assert_eq!(o.code, 0, "{}", o.stderr);
    }
    for n in ["00000.png", "00001.png", "00002.png"] {
        assert_eq!(fs::read(x.join("a").join(n)).unwrap(), fs::read(y.join("a").join(n)).unwrap());
    }
    assert!(x.join("compare/a/00000.png").is_file());
    let sr = read_clip_dir(&x.join("a"), "a").unwrap();
    let lr = read_clip_dir(&prep.join("LR/a"), "a").unwrap();
    let bic = bicubic_clip(&lr).unwrap();
    for (a, b) in sr.frames().iter().zip(bic.frames()) {
        assert!(a.tensor().max_abs_diff(b.tensor()) < 1e-9);
    }
}

#[test]
fn evaluate_and_report() {
    let t = tempdir().unwrap();
    let raw = t.path().join("raw");
    let scenes = ["calendar", "city", "foliage", "walk"];
    raw_tree(&raw, &scenes, 64, 64, 6);
    let base = t.path().join("bicubic.json");
    let o = vsr(&["baseline", "--gt", s(&raw), "--report", s(&base)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(t.path().join("bicubic.csv").is_file());
    assert!(t.path().join("bicubic.manifest.json").is_file());

    // A second "model": the ground truth itself.
    let same = t.path().join("same.json");
    let o = vsr(&["evaluate", "--gen", s(&raw), "--gt", s(&raw), "--report", s(&same), "--model", "oracle"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let r = vsr::eval::read_report(&same).unwrap();
    assert_eq!(r.overall.psnr_infinite_frames, 4 * 2);
    assert_eq!(r.overall.tof, 0.0);

    let out = t.path().join("report");
    let o = vsr(&["report", "--inputs", s(&base), s(&same), "--out", s(&out)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let tables = fs::read_to_string(out.join("tables.txt")).unwrap();
    assert!(tables.contains("bicubic") && tables.contains("oracle"));
    assert!(tables.contains("BIC (published)"));
    assert!(tables.contains("23.66"));
    assert!(out.join("plots/psnr_calendar.png").is_file());
    let o = vsr(&["report", "--inputs", s(&base), "--out", s(&t.path().join("r2")), "--dataset", "none"]);
    assert_eq!(o.code, 0);
    assert!(!fs::read_to_string(t.path().join("r2/tables.txt")).unwrap().contains("(published)"));

    let partial = t.path().join("partial");
    raw_tree(&partial, &scenes[..3], 64, 64, 6);
    let o = vsr(&["evaluate", "--gen", s(&partial), "--gt", s(&raw), "--report", s(&t.path().join("p.json"))]);
    assert_eq!(o.code, 3);
    assert!(o.stderr.contains("walk"), "{}", o.stderr);
}
