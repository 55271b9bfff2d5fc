//! End-to-end checks of the `maskbench` binary: exit codes, output wording,
//! and cross-run determinism, driving real files through temp dirs.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use maskbench_core::dataset::read_manifest;
use maskbench_core::trainer::read_report;
use maskbench_core::{write_annotations, Annotation, AnnotationSet, BBox, Image, Mask, Model};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_maskbench"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn maskbench")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, base: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, base, out);
            } else {
                let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"), "stderr: {}", stderr(&out));
}

#[test]
fn version_names_the_file_formats() {
    let out = run(&["--version"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    for token in ["MBNET1", "MBMANIFEST 1", "MBANNOT 1", "MBREPORT 1"] {
        assert!(text.contains(token), "missing {token} in: {text}");
    }
}

#[test]
fn unknown_flag_exits_2() {
    let out = run(&["synth", "--bogus", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_file_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "segment",
        "--input",
        dir.path().join("absent.ppm").to_str().unwrap(),
        "--output",
        dir.path().join("m.pgm").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error: "), "stderr: {}", stderr(&out));
}

#[test]
fn gradcheck_passes_at_seed_3() {
    let out = run(&["gradcheck", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("max_rel_err="), "stdout: {text}");
    assert!(text.trim_end().ends_with("PASS"), "stdout: {text}");
}

#[test]
fn synth_is_deterministic_across_runs() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = |dir: &Path| {
        vec![
            "synth".to_string(),
            "--out".into(),
            dir.to_str().unwrap().into(),
            "--samples".into(),
            "6".into(),
            "--side".into(),
            "8".into(),
            "--seed".into(),
            "4".into(),
        ]
    };
    let o1 = bin().args(args(d1.path())).output().unwrap();
    let o2 = bin().args(args(d2.path())).output().unwrap();
    assert_eq!(o1.status.code(), Some(0), "stderr: {}", stderr(&o1));
    assert_eq!(o2.status.code(), Some(0));
    assert_eq!(files(d1.path()), files(d2.path()));

    let manifest = read_manifest(&d1.path().join("dataset.manifest")).unwrap();
    assert_eq!(manifest.len(), 6);
    assert!(stdout(&o1).contains("6 samples"), "stdout: {}", stdout(&o1));
}

#[test]
fn segment_recovers_the_synthetic_shape() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("data");
    let o = run(&[
        "synth",
        "--out",
        out_dir.to_str().unwrap(),
        "--samples",
        "1",
        "--side",
        "32",
        "--amplitude",
        "0.15",
        "--seed",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));

    // Too-small images reject the default seed sampler with an actionable
    // message instead of silently degrading.
    let small = dir.path().join("small");
    run(&["synth", "--out", small.to_str().unwrap(), "--samples", "1", "--side", "16"]);
    let o = run(&[
        "segment",
        "--input",
        small.join("img_000000.ppm").to_str().unwrap(),
        "--output",
        dir.path().join("m.pgm").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seed_count"), "stderr: {}", stderr(&o));

    let mask_out = dir.path().join("mask.pgm");
    let o = run(&[
        "segment",
        "--input",
        out_dir.join("img_000000.ppm").to_str().unwrap(),
        "--output",
        mask_out.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    assert!(stdout(&o).contains("foreground"), "stdout: {}", stdout(&o));

    let got = Mask::read_pgm(&mask_out).unwrap();
    let truth = Mask::read_pgm(&out_dir.join("msk_000000.pgm")).unwrap();
    let inter = got.bits().iter().zip(truth.bits()).filter(|(a, b)| **a && **b).count();
    let union = got.bits().iter().zip(truth.bits()).filter(|(a, b)| **a || **b).count();
    assert!(
        inter as f64 / union as f64 >= 0.9,
        "IoU {} too low",
        inter as f64 / union as f64
    );
}

#[test]
fn binarize_output_is_binary_and_stable() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    run(&[
        "synth", "--out", data_dir.to_str().unwrap(), "--samples", "1", "--side", "8", "--seed",
        "7",
    ]);
    let (b1, b2) = (dir.path().join("b1.ppm"), dir.path().join("b2.ppm"));
    let input = data_dir.join("img_000000.ppm");
    let o = run(&["binarize", "--input", input.to_str().unwrap(), "--output", b1.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    let img = Image::read_netpbm(&b1).unwrap();
    assert!(img.data().iter().all(|&v| v == 0.0 || v == 1.0));
    // A second pass over its own output changes nothing.
    let o = run(&["binarize", "--input", b1.to_str().unwrap(), "--output", b2.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(&b1).unwrap(), std::fs::read(&b2).unwrap());
}

#[test]
fn train_attack_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run(&[
        "synth", "--out", data.to_str().unwrap(), "--samples", "12", "--side", "8", "--seed", "4",
    ]);
    let manifest = data.join("dataset.manifest");
    let model_path = dir.path().join("model.mbnet");

    let o = run(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        model_path.to_str().unwrap(),
        "--epochs",
        "2",
        "--batch-size",
        "6",
        "--seed",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    assert!(stderr(&o).contains("epoch   1:"), "stderr: {}", stderr(&o));
    assert!(stdout(&o).contains("epochs=2"), "stdout: {}", stdout(&o));
    Model::load(&model_path).unwrap();

    let o = run(&[
        "attack",
        "--model",
        model_path.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--steps",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    let text = stdout(&o);
    assert!(
        text.contains("natural_acc=") && text.contains("adv_acc="),
        "stdout: {text}"
    );

    let report_path = dir.path().join("eval.report");
    let o = run(&[
        "eval",
        "--model",
        model_path.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    assert!(stdout(&o).contains("samples=12 natural_acc="), "stdout: {}", stdout(&o));
    let report = read_report(&report_path).unwrap();
    assert_eq!(report.samples, 12);
    assert_eq!(report.pgd_correct, None);
}

fn tiny_end2end(dir: &Path, seed: &str) -> Output {
    run(&[
        "end2end",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        seed,
        "--samples",
        "24",
        "--side",
        "8",
        "--train-frac",
        "0.75",
        "--epochs-natural",
        "1",
        "--epochs-adversarial",
        "1",
        "--batch-size",
        "8",
        "--train-attack-steps",
        "2",
    ])
}

#[test]
fn end2end_is_deterministic_and_table_reproducible() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let o1 = tiny_end2end(d1.path(), "9");
    let o2 = tiny_end2end(d2.path(), "9");
    assert_eq!(o1.status.code(), Some(0), "stderr: {}", stderr(&o1));
    assert_eq!(o2.status.code(), Some(0));
    assert_eq!(o1.stdout, o2.stdout, "table on stdout differs between identical runs");
    assert_eq!(files(d1.path()), files(d2.path()));

    let table_txt = std::fs::read_to_string(d1.path().join("table.txt")).unwrap();
    assert_eq!(stdout(&o1), table_txt);
    assert!(table_txt.contains("delta"), "table: {table_txt}");

    // The eval --table view of the four reports reproduces the same table.
    let reports: Vec<String> = ["x_n", "x_a", "fg_n", "fg_a"]
        .iter()
        .map(|n| d1.path().join(format!("{n}.report")).to_str().unwrap().to_string())
        .collect();
    let mut args = vec!["eval".to_string(), "--table".into()];
    args.extend(reports);
    let o = bin().args(&args).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    assert_eq!(stdout(&o), table_txt);
}

#[test]
fn config_file_supplies_defaults_but_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.cfg");
    std::fs::write(&cfg, "samples=6\nside=8\nseed=1\n").unwrap();

    let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
    // Config alone.
    let o = run(&[
        "synth", "--config", cfg.to_str().unwrap(), "--out", d1.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    assert_eq!(read_manifest(&d1.join("dataset.manifest")).unwrap().len(), 6);

    // Explicit flag beats the config value.
    let o = run(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        d2.to_str().unwrap(),
        "--samples",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    assert_eq!(read_manifest(&d2.join("dataset.manifest")).unwrap().len(), 3);

    // Unknown keys surface as unknown flags: usage error.
    std::fs::write(&cfg, "bogus_key=1\n").unwrap();
    let o = run(&[
        "synth", "--config", cfg.to_str().unwrap(), "--out", d1.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn build_dataset_from_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.ppm");
    let mask = dir.path().join("scene_mask.pgm");

    let mut data = vec![0.05; 20 * 20 * 3];
    for y in 4..12 {
        for x in 4..12 {
            for c in 0..3 {
                data[(y * 20 + x) * 3 + c] = 0.9;
            }
        }
    }
    Image::new(20, 20, 3, data).unwrap().write_netpbm(&scene).unwrap();
    let mut bits = vec![false; 20 * 20];
    for y in 4..12 {
        for x in 4..12 {
            bits[y * 20 + x] = true;
        }
    }
    Mask::new(20, 20, bits).unwrap().write_pgm(&mask).unwrap();

    let annots = AnnotationSet {
        root: dir.path().to_path_buf(),
        label_names: vec!["block".into()],
        objects: vec![Annotation {
            image: "scene.ppm".into(),
            mask: "scene_mask.pgm".into(),
            label: 0,
            bbox: BBox { x: 4, y: 4, w: 8, h: 8 },
        }],
    };
    let annot_path = dir.path().join("objects.annot");
    write_annotations(&annots, &annot_path).unwrap();

    let out_dir = dir.path().join("dataset");
    let o = run(&[
        "build-dataset",
        "--annotations",
        annot_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--classes",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    assert!(stdout(&o).contains("1 records"), "stdout: {}", stdout(&o));
    let manifest = read_manifest(&out_dir.join("dataset.manifest")).unwrap();
    assert_eq!(manifest.len(), 1);
    assert_eq!(manifest.label_names, ["block"]);
    // 32x32 output pair exists and loads.
    let record = &manifest.records[0];
    let img = Image::read_netpbm(&manifest.image_path(record)).unwrap();
    assert_eq!((img.height(), img.width()), (32, 32));
    Mask::read_pgm(&manifest.mask_path(record).unwrap()).unwrap();
}
