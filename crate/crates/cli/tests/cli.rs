use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bandswap_core::gate::format_gate_list;
use bandswap_core::image::Image;
use bandswap_core::io::{load_image, save_fimg, save_pnm};
use bandswap_core::metrics::RunMetrics;

fn bandswap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bandswap"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = bandswap(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("data{seed}"));
    ok(&[
        "gen-data",
        "--seed",
        seed,
        "--per-class",
        "6",
        "--out",
        s(&out),
    ]);
    out
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn gradient_image(h: usize, w: usize, phase: f64) -> Image {
    let data = (0..h * w)
        .map(|k| 0.5 + 0.4 * ((k / w) as f64 * 0.7 + (k % w) as f64 * 0.3 + phase).sin())
        .collect();
    Image::new(h, w, 1, data).unwrap()
}

#[test]
fn gen_data_writes_indexes_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_data(dir.path(), "3");
    let index = fs::read_to_string(a.join("source_train/index.txt")).unwrap();
    assert_eq!(index.lines().count(), 4 * 6);
    let unlabeled = fs::read_to_string(a.join("target_train/index.txt")).unwrap();
    assert!(unlabeled.lines().all(|l| l.ends_with(" -")));
    let b = dir.path().join("again");
    ok(&[
        "gen-data",
        "--seed",
        "3",
        "--per-class",
        "6",
        "--out",
        s(&b),
    ]);
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn bad_band_syntax_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    for band in ["0.6-0.8", "0.9:0.6", "x:1"] {
        let out = bandswap(&["gen-data", "--src-band", band, "--out", s(dir.path())]);
        assert_eq!(out.status.code(), Some(2), "{band}");
    }
    // parses, but overlaps the class band
    let out = bandswap(&["gen-data", "--src-band", "0.1:0.5", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(bandswap(&["train", "--bogus"]).status.code(), Some(2));
}

#[test]
fn decompose_reports_exact_recomposition() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.pgm");
    save_pnm(&gradient_image(20, 20, 0.0), &img).unwrap();
    let out = dir.path().join("bands");
    ok(&[
        "decompose",
        "--in",
        s(&img),
        "--bands",
        "8",
        "--out",
        s(&out),
    ]);
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("spectrum_recomposition_exact true"));
    let err: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("max_recomposition_error "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(err <= 1e-9);
    let mut total = vec![0.0; 400];
    for b in 1..=8 {
        let band = load_image(&out.join(format!("band_{b:02}.fimg"))).unwrap();
        total.iter_mut().zip(band.data()).for_each(|(t, v)| *t += v);
        assert!(out.join(format!("band_{b:02}.pgm")).exists());
    }
    let original = load_image(&img).unwrap();
    let drift = total
        .iter()
        .zip(original.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    // each band is stored as f32
    assert!(drift <= 1e-5, "{drift}");
}

#[test]
fn one_band_equals_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.fimg");
    let x = gradient_image(10, 10, 1.0);
    save_fimg(&x, &img).unwrap();
    let out = dir.path().join("one");
    ok(&[
        "decompose",
        "--in",
        s(&img),
        "--bands",
        "1",
        "--out",
        s(&out),
    ]);
    let band = load_image(&out.join("band_01.fimg")).unwrap();
    assert!(band.max_abs_diff(&x) <= 1e-6);
    let wide = dir.path().join("wide.fimg");
    save_fimg(&gradient_image(6, 10, 1.0), &wide).unwrap();
    ok(&[
        "decompose",
        "--in",
        s(&wide),
        "--bands",
        "3",
        "--out",
        s(&out),
    ]);
    let band = load_image(&out.join("band_01.fimg")).unwrap();
    assert_eq!((band.height(), band.width()), (6, 10));
    assert_eq!(
        bandswap(&[
            "decompose",
            "--in",
            s(&img),
            "--bands",
            "0",
            "--out",
            s(&out)
        ])
        .status
        .code(),
        Some(2)
    );
    let missing = dir.path().join("nope.pgm");
    assert_eq!(
        bandswap(&["decompose", "--in", s(&missing), "--out", s(&out)])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn four_by_four_band_listing() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.fimg");
    save_fimg(&gradient_image(4, 4, 0.3), &img).unwrap();
    let out = dir.path().join("b");
    ok(&[
        "decompose",
        "--in",
        s(&img),
        "--bands",
        "2",
        "--out",
        s(&out),
    ]);
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    // offsets in {-1, 0, 1}² sit within √2 = half of √8 of the centre
    assert!(report.contains("band 1 coefficients 9\n"), "{report}");
    assert!(report.contains("band 2 coefficients 7\n"), "{report}");
}

#[test]
fn attack_with_gate_files_and_random_gates() {
    let dir = tempfile::tempdir().unwrap();
    let (x, r) = (gradient_image(16, 16, 0.0), gradient_image(16, 16, 2.0));
    let (xp, rp) = (dir.path().join("x.pgm"), dir.path().join("r.pgm"));
    save_pnm(&x, &xp).unwrap();
    save_pnm(&r, &rp).unwrap();
    let x8 = load_image(&xp).unwrap();
    let r8 = load_image(&rp).unwrap();
    for (name, all, want) in [("zeros", false, &x8), ("ones", true, &r8)] {
        let gate = dir.path().join(format!("{name}.txt"));
        fs::write(&gate, format_gate_list(&[all; 6])).unwrap();
        let out = dir.path().join(name);
        ok(&[
            "attack",
            "--in",
            s(&xp),
            "--ref",
            s(&rp),
            "--bands",
            "6",
            "--gate-file",
            s(&gate),
            "--out",
            s(&out),
        ]);
        let faa = load_image(&out.join("faa.pgm")).unwrap();
        assert!(faa.max_abs_diff(want) <= 0.5 / 255.0 + 1e-9, "{name}");
        assert_eq!(
            fs::read_to_string(out.join("gate.txt")).unwrap(),
            format_gate_list(&[all; 6])
        );
    }
    let run = |out: &Path, seed: &str| {
        ok(&[
            "attack",
            "--in",
            s(&xp),
            "--ref",
            s(&rp),
            "--bands",
            "16",
            "--gate-random",
            "0.3",
            "--seed",
            seed,
            "--out",
            s(out),
        ]);
        tree(out)
    };
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    assert_eq!(run(&a, "5"), run(&b, "5"));
    assert_ne!(run(&a, "5"), run(&c, "6"));
    let wrong = dir.path().join("short.txt");
    fs::write(&wrong, format_gate_list(&[true; 3])).unwrap();
    let out = bandswap(&[
        "attack",
        "--in",
        s(&xp),
        "--ref",
        s(&rp),
        "--bands",
        "6",
        "--gate-file",
        s(&wrong),
        "--out",
        s(&a),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = bandswap(&[
        "attack",
        "--in",
        s(&xp),
        "--ref",
        s(&rp),
        "--gate-random",
        "1.5",
        "--out",
        s(&a),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_smoke_runs_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "0");
    let train = |mode: &str, out: &Path| {
        ok(&[
            "train",
            "--mode",
            mode,
            "--data",
            s(&data),
            "--iters",
            "200",
            "--batch",
            "8",
            "--log-every",
            "20",
            "--out",
            s(out),
        ]);
    };
    let base = dir.path().join("baseline");
    train("baseline", &base);
    let metrics =
        RunMetrics::from_csv(&fs::read_to_string(base.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(metrics.rows().len(), 10);
    assert!(base.join("model.ckpt").exists());
    assert!(!base.join("gate.ckpt").exists());

    let (faa, again) = (dir.path().join("faa"), dir.path().join("faa2"));
    train("faa", &faa);
    train("faa", &again);
    assert!(faa.join("gate.ckpt").exists());
    assert_eq!(tree(&faa), tree(&again));

    let svg = dir.path().join("curves.svg");
    ok(&[
        "curves",
        "--metrics",
        s(&base.join("metrics.csv")),
        s(&faa.join("metrics.csv")),
        "--out",
        s(&svg),
    ]);
    let text = fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<polyline").count(), 4);

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    assert_eq!(
        bandswap(&["curves", "--metrics", s(&empty), "--out", s(&svg)])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        bandswap(&[
            "train",
            "--mode",
            "nope",
            "--data",
            s(&data),
            "--out",
            s(&faa)
        ])
        .status
        .code(),
        Some(2)
    );
    let nowhere = dir.path().join("nowhere");
    assert_eq!(
        bandswap(&[
            "train",
            "--data",
            s(&nowhere),
            "--iters",
            "5",
            "--out",
            s(&faa)
        ])
        .status
        .code(),
        Some(1)
    );
}
