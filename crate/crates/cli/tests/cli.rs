use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array2;
use rawbench::stats::mix64;
use rawbench::{rawb, FrameMeta, PackedImage, RawFrame, SampleType, ValueSpace};

fn rawbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rawbench")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Deterministic approximately standard normal values.
struct Noise(u64);

impl Noise {
    fn uniform(&mut self) -> f64 {
        self.0 = self.0.wrapping_add(1);
        (mix64(self.0) >> 11) as f64 / (1u64 << 53) as f64
    }

    fn gauss(&mut self) -> f64 {
        // Irwin-Hall with 12 terms has unit variance.
        (0..12).map(|_| self.uniform()).sum::<f64>() - 6.0
    }
}

fn write_darks(dir: &Path, iso: u32, count: usize, seed: u64) {
    fs::create_dir_all(dir).unwrap();
    let mut n = Noise(seed);
    for i in 0..count {
        let mut data = Array2::<f64>::zeros((64, 64));
        for mut row in data.rows_mut() {
            let band = 2.0 * n.gauss();
            for v in row.iter_mut() {
                *v = 512.0 + band + 5.0 * n.gauss();
            }
        }
        let f = RawFrame::new(data, SampleType::F32, ValueSpace::Dn, FrameMeta::new("testcam", iso, 512.0, 16383.0)).unwrap();
        rawb::write_frame(&f, dir.join(format!("dark_{iso}_{i:02}.rawb"))).unwrap();
    }
}

fn smooth(side: usize, phase: f64) -> PackedImage {
    let planes: [Array2<f64>; 4] = std::array::from_fn(|c| {
        Array2::from_shape_fn((side, side), |(y, x)| {
            0.3 + 0.1 * ((x as f64 + phase) / 9.0).sin() + 0.05 * (y as f64 / 13.0).cos() + 0.01 * c as f64
        })
    });
    PackedImage::new(planes, ValueSpace::Normalized, 1.0, FrameMeta::new("testcam", 1600, 512.0, 16383.0)).unwrap()
}

fn calibrated_profile(root: &Path) -> PathBuf {
    let darks = root.join("darks");
    write_darks(&darks, 1600, 6, 1);
    write_darks(&darks, 3200, 6, 2);
    let profile = root.join("profile.json");
    let out = rawbench(&["calibrate", "--darks", p(&darks), "--gains", "1600=1.6,3200=3.2", "--out", p(&profile)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    profile
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn calibrate_writes_profile_with_both_isos() {
    let tmp = tempfile::tempdir().unwrap();
    let profile = calibrated_profile(tmp.path());
    let loaded = rawbench::calibration::load_profile(&profile).unwrap();
    assert_eq!(loaded.isos.keys().copied().collect::<Vec<_>>(), vec![1600, 3200]);
    let p = loaded.params(1600).unwrap();
    assert_eq!(p.k, 1.6);
    assert!((p.sigma_read - 5.0).abs() < 0.5, "{}", p.sigma_read);
    assert_eq!(loaded.iso(1600).unwrap().dark_library.len(), 6);
}

#[test]
fn calibrate_from_flat_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let darks = tmp.path().join("darks");
    write_darks(&darks, 800, 4, 3);
    let flats = tmp.path().join("flats");
    fs::create_dir_all(&flats).unwrap();
    let mut n = Noise(99);
    let k = 0.8;
    for (li, mean) in [200.0, 800.0, 2000.0, 4000.0].into_iter().enumerate() {
        for j in 0..2 {
            let mut meta = FrameMeta::new("testcam", 800, 512.0, 16383.0);
            meta.exposure_s = Some(0.01 * (li + 1) as f64);
            let planes: [Array2<f64>; 4] =
                std::array::from_fn(|_| Array2::from_shape_fn((64, 64), |_| 512.0 + mean + (k * mean + 9.0f64).sqrt() * n.gauss()));
            let img = PackedImage::new(planes, ValueSpace::Dn, 1.0, meta).unwrap();
            rawb::write_packed(&img, flats.join(format!("flat_{li}_{j}.rawb"))).unwrap();
        }
    }
    let profile = tmp.path().join("p.json");
    let out = rawbench(&["calibrate", "--darks", p(&darks), "--flats", p(&flats), "--out", p(&profile)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let fitted = rawbench::calibration::load_profile(&profile).unwrap().params(800).unwrap().k;
    assert!((fitted - k).abs() / k < 0.05, "{fitted}");
}

#[test]
fn synth_is_deterministic_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let profile = calibrated_profile(tmp.path());
    let clean = tmp.path().join("clean");
    fs::create_dir_all(&clean).unwrap();
    rawb::write_packed(&smooth(64, 0.0), clean.join("scene_a.rawb")).unwrap();
    rawb::write_packed(&smooth(64, 5.0), clean.join("scene_b.rawb")).unwrap();

    let run = |threads: &str, out: &Path| {
        let o = rawbench(&[
            "--seed", "7", "--threads", threads, "synth", "--profile", p(&profile), "--clean", p(&clean), "--out", p(out),
            "--iso-set", "1600,3200", "--dgain-range", "10:200", "--mode", "hybrid", "--rho", "0.5", "--patch", "32",
            "--per-image", "3",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run("1", &a);
    run("3", &b);
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    assert_eq!(fa.len(), 2 * 6 + 1);
    assert_eq!(fa, fb);
}

#[test]
fn denoise_isp_and_eval_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let profile = calibrated_profile(tmp.path());
    let clean = tmp.path().join("clean");
    fs::create_dir_all(&clean).unwrap();
    rawb::write_packed(&smooth(64, 0.0), clean.join("scene.rawb")).unwrap();
    let pairs = tmp.path().join("pairs");
    let o = rawbench(&[
        "synth", "--profile", p(&profile), "--clean", p(&clean), "--out", p(&pairs), "--iso-set", "1600", "--dgain-set",
        "100", "--patch", "128", "--per-image", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let (pred, gt) = (tmp.path().join("pred"), tmp.path().join("gt"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    fs::copy(pairs.join("scene_p000_clean.rawb"), gt.join("img.rawb")).unwrap();
    let noisy = pairs.join("scene_p000_noisy.rawb");
    let o = rawbench(&[
        "denoise", "--in", p(&noisy), "--profile", p(&profile), "--iso", "1600", "--dgain", "100", "--transform", "gat",
        "--out", p(&pred.join("img.rawb")), "--tile", "32", "--overlap", "8",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let ppm = tmp.path().join("img.ppm");
    let o = rawbench(&["isp", "--in", p(&pred.join("img.rawb")), "--out", p(&ppm), "--wb", "gray-world", "--gamma", "srgb"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = fs::read(&ppm).unwrap();
    assert!(bytes.starts_with(b"P6\n128 128\n65535\n"));

    let metrics = tmp.path().join("metrics.csv");
    let o = rawbench(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--phase", "dev", "--crop", "48", "--out", p(&metrics)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&metrics).unwrap();
    let header = csv.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "image_id,camera,iso,dgain,psnr_db,ssim");
    assert!(csv.contains("crop=48"));

    // The denoised image must beat the noisy input.
    let noisy_dir = tmp.path().join("noisy");
    fs::create_dir_all(&noisy_dir).unwrap();
    fs::copy(&noisy, noisy_dir.join("img.rawb")).unwrap();
    let noisy_metrics = tmp.path().join("noisy.csv");
    let o = rawbench(&["eval", "--pred", p(&noisy_dir), "--gt", p(&gt), "--crop", "48", "--out", p(&noisy_metrics)]);
    assert_eq!(code(&o), 0);
    let psnr_of = |path: &Path| -> f64 {
        let text = fs::read_to_string(path).unwrap();
        text.lines().filter(|l| !l.starts_with('#')).nth(1).unwrap().split(',').nth(4).unwrap().parse().unwrap()
    };
    assert!(psnr_of(&metrics) > psnr_of(&noisy_metrics) + 3.0);
}

const TABLE: [(&str, [f64; 5]); 7] = [
    ("MR-CAS", [41.90, 0.9633, 0.2314, 0.4615, 0.2584]),
    ("IPIU-LAB", [41.59, 0.9621, 0.2426, 0.4698, 0.2619]),
    ("VMCL-ISP", [41.15, 0.9585, 0.2443, 0.4631, 0.2671]),
    ("HIT-IIL", [41.52, 0.9605, 0.2295, 0.4374, 0.2540]),
    ("DIPLab", [41.23, 0.9592, 0.2182, 0.4227, 0.2567]),
    ("MSA-Net", [41.13, 0.9596, 0.2523, 0.4680, 0.2576]),
    ("MS-Unet", [40.82, 0.9581, 0.2506, 0.4684, 0.2463]),
];

fn long_scores() -> String {
    let mut s = String::from("team,metric,value\n");
    for (team, v) in TABLE {
        for (m, x) in ["psnr", "ssim", "lpips", "arniqa", "topiq"].iter().zip(v) {
            s.push_str(&format!("{team},{m},{x}\n"));
        }
    }
    s
}

fn read_table(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn col(rows: &[Vec<String>], team: &str, name: &str) -> String {
    let i = rows[0].iter().position(|c| c == name).unwrap();
    rows.iter().find(|r| r[0] == team).unwrap()[i].clone()
}

#[test]
fn rank_reproduces_category_positions_from_long_and_wide_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let long = tmp.path().join("long.csv");
    fs::write(&long, long_scores()).unwrap();
    let mut wide = String::from("team,psnr,ssim,lpips,arniqa,topiq\n");
    for (team, v) in TABLE {
        wide.push_str(&format!("{team},{},{},{},{},{}\n", v[0], v[1], v[2], v[3], v[4]));
    }
    let wide_path = tmp.path().join("wide.csv");
    fs::write(&wide_path, wide).unwrap();

    let mut outputs = vec![];
    for input in [&long, &wide_path] {
        let out = tmp.path().join(format!("{}_rank.csv", input.file_stem().unwrap().to_str().unwrap()));
        let o = rawbench(&["rank", "--scores", p(input), "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let rows = read_table(&out);
        for (team, pos) in [("MR-CAS", "1"), ("IPIU-LAB", "2"), ("HIT-IIL", "3"), ("DIPLab", "4"), ("MSA-Net", "5"), ("VMCL-ISP", "6"), ("MS-Unet", "7")] {
            assert_eq!(col(&rows, team, "position_fidelity"), pos, "{team}");
        }
        for (team, pos) in [("IPIU-LAB", "1"), ("VMCL-ISP", "2"), ("MR-CAS", "3"), ("DIPLab", "4"), ("MSA-Net", "5"), ("HIT-IIL", "6"), ("MS-Unet", "7")] {
            assert_eq!(col(&rows, team, "position_perceptual"), pos, "{team}");
        }
        outputs.push(fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

fn bench_fixture(root: &Path) -> PathBuf {
    let gt_dir = root.join("gt");
    let noisy_dir = root.join("noisy");
    fs::create_dir_all(&gt_dir).unwrap();
    fs::create_dir_all(&noisy_dir).unwrap();
    let mut entries = vec![];
    for (i, phase) in [0.0, 3.0].into_iter().enumerate() {
        let id = format!("img{i}");
        let gt = smooth(40, phase);
        rawb::write_packed(&gt, gt_dir.join(format!("{id}.rawb"))).unwrap();
        rawb::write_packed(&gt, noisy_dir.join(format!("{id}.rawb"))).unwrap();
        for (team, offset) in [("alpha", 0.0), ("beta", 0.02)] {
            let dir = root.join("pred").join(team);
            fs::create_dir_all(&dir).unwrap();
            let planes: [Array2<f64>; 4] = std::array::from_fn(|c| gt.plane(c).mapv(|v| v + offset));
            rawb::write_packed(&gt.with_planes(planes).unwrap(), dir.join(format!("{id}.rawb"))).unwrap();
        }
        entries.push(format!(
            r#"{{"image_id":"{id}","camera":"testcam","scene_type":"paired","iso":1600,"dgain":100,"noisy_path":"noisy/{id}.rawb","gt_path":"gt/{id}.rawb"}}"#
        ));
    }
    let manifest = root.join("manifest.json");
    fs::write(&manifest, format!(r#"{{"phase":"dev","entries":[{}]}}"#, entries.join(","))).unwrap();
    manifest
}

#[test]
fn bench_scores_ranks_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = bench_fixture(tmp.path());
    let external = tmp.path().join("ext.csv");
    fs::write(&external, "team,metric,value\nalpha,lpips,0.30\nbeta,lpips,0.20\n").unwrap();
    let pred = tmp.path().join("pred");
    let run = |out: &Path| {
        let o = rawbench(&[
            "--strict", "bench", "--manifest", p(&manifest), "--pred", p(&pred), "--external", p(&external), "--out",
            p(out), "--crop", "32",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (a, b) = (tmp.path().join("out_a"), tmp.path().join("out_b"));
    run(&a);
    run(&b);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let rows = read_table(&a.join("ranktable.csv"));
    assert_eq!(col(&rows, "alpha", "psnr"), "inf");
    assert_eq!(col(&rows, "alpha", "position_fidelity"), "1");
    assert_eq!(col(&rows, "beta", "position_fidelity"), "2");
    let scores = fs::read_to_string(a.join("scores.csv")).unwrap();
    assert!(scores.lines().any(|l| l.starts_with("alpha,img0,testcam,1600,100,inf,1")), "{scores}");
}

#[test]
fn bench_lists_every_missing_prediction() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = bench_fixture(tmp.path());
    fs::remove_file(tmp.path().join("pred/beta/img1.rawb")).unwrap();
    fs::remove_file(tmp.path().join("pred/alpha/img0.rawb")).unwrap();
    let o = rawbench(&["bench", "--manifest", p(&manifest), "--pred", p(&tmp.path().join("pred")), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("alpha/img0") && err.contains("beta/img1"), "{err}");
}

#[test]
fn manifest_errors_are_validation_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("m.json");
    let entry = r#"{"image_id":"x","camera":"c","scene_type":"paired","iso":800,"noisy_path":"n.rawb","gt_path":"g.rawb"}"#;
    fs::write(&manifest, format!(r#"{{"phase":"dev","entries":[{entry},{entry}]}}"#)).unwrap();
    fs::create_dir_all(tmp.path().join("pred")).unwrap();
    let o = rawbench(&["bench", "--manifest", p(&manifest), "--pred", p(&tmp.path().join("pred")), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("duplicate"));
}

#[test]
fn strict_mode_reports_missing_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rawbench(&[
        "--strict", "denoise", "--in", p(&tmp.path().join("none.rawb")), "--profile", p(&tmp.path().join("none.json")), "--iso",
        "800", "--out", p(&tmp.path().join("o.rawb")),
    ]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("none.rawb") && err.contains("none.json"), "{err}");
}

#[test]
fn eval_without_predictions_is_missing_data() {
    let tmp = tempfile::tempdir().unwrap();
    let (pred, gt) = (tmp.path().join("pred"), tmp.path().join("gt"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    rawb::write_packed(&smooth(16, 0.0), gt.join("a.rawb")).unwrap();
    let o = rawbench(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--crop", "8", "--out", p(&tmp.path().join("m.csv"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn bad_arguments_are_validation_errors() {
    assert_eq!(code(&rawbench(&["denoise", "--transform", "wavelet"])), 2);
    assert_eq!(code(&rawbench(&["frobnicate"])), 2);
}

#[test]
fn budget_exit_status_follows_the_limits() {
    let tmp = tempfile::tempdir().unwrap();
    let small = tmp.path().join("small.json");
    fs::write(
        &small,
        r#"{"name":"tiny","layers":[{"kind":"bgc","in_ch":4,"out_ch":32,"kernel":3},{"kind":"elementwise","in_ch":32},{"kind":"conv2d","in_ch":32,"out_ch":4,"kernel":3}]}"#,
    )
    .unwrap();
    let o = rawbench(&["budget", "--model", p(&small)]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("total params 5892") && text.trim_end().ends_with("PASS"), "{text}");

    let json = rawbench(&["budget", "--model", p(&small), "--json"]);
    let report: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(report["total_macs"], 2 * 512 * 512 * 9 * 4 * 32);

    let big = tmp.path().join("big.json");
    fs::write(&big, r#"{"layers":[{"kind":"conv2d","in_ch":4,"out_ch":1024,"kernel":3},{"kind":"conv2d","in_ch":1024,"out_ch":1024,"kernel":3},{"kind":"conv2d","in_ch":1024,"out_ch":1024,"kernel":3}]}"#).unwrap();
    let o = rawbench(&["budget", "--model", p(&big)]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("violation"));

    let ensemble = tmp.path().join("ens.json");
    fs::write(&ensemble, r#"{"ensemble":true,"layers":[{"kind":"pointwise","in_ch":4,"out_ch":4}]}"#).unwrap();
    assert_eq!(code(&rawbench(&["budget", "--model", p(&ensemble)])), 1);

    let broken = tmp.path().join("broken.json");
    fs::write(&broken, r#"{"layers":[{"kind":"conv2d","in_ch":0,"out_ch":4}]}"#).unwrap();
    assert_eq!(code(&rawbench(&["budget", "--model", p(&broken)])), 2);
    assert_eq!(code(&rawbench(&["budget", "--model", p(&tmp.path().join("absent.json"))])), 3);
}
