#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rawbench::budget::{budget_report, load_model, CountOptions};
use rawbench::calibration::{
    build_profile, load_profile, photon_transfer_point, save_profile, BandAxis, GainSource, ProfileInputs,
};
use rawbench::denoise::{denoise_raw, ChannelParams, DenoiseConfig, TransformKind};
use rawbench::harness::{evaluate_dirs, ingest_external_scores, load_manifest, run_benchmark, write_image_scores, EvalOptions};
use rawbench::isp::{run_isp, write_ppm16, Gamma, IspConfig, WhiteBalance};
use rawbench::metrics::Phase;
use rawbench::ranking::{final_table, read_records_csv, MetricRecord};
use rawbench::raw::normalize;
use rawbench::synth::{make_pair_batch, DgainSpec, PairSampler, SynthMode};
use rawbench::transforms::PgParams;
use rawbench::{rawb, Error, PackedImage, RawFrame, Result, Roi, ValueSpace};

/// Exit status when a model breaks the efficiency limits.
const BUDGET_FAILED: u8 = 1;

#[derive(Parser)]
#[command(name = "rawbench", version, about = "Low-light RAW noise synthesis, denoising and benchmarking")]
struct Cli {
    /// Master seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Check that every referenced file exists before doing any work.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a sensor profile from dark frames and gains or flat pairs.
    Calibrate(CalibrateArgs),
    /// Synthesize noisy/clean training pairs from clean images.
    Synth(SynthArgs),
    /// Denoise a packed RAW image with the VST + DCT baseline.
    Denoise(DenoiseArgs),
    /// Render a packed RAW image to RGB.
    Isp(IspArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Rank teams from per-team metric scores.
    Rank(RankArgs),
    /// Count parameters and MACs of a model and check the limits.
    Budget(BudgetArgs),
    /// Score, merge external scores and rank every team in a manifest.
    Bench(BenchArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    /// Directory of RAWB mosaic dark frames; grouped by the ISO in each header.
    #[arg(long)]
    darks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Camera id; defaults to the first dark frame's.
    #[arg(long)]
    camera: Option<String>,
    /// ISOs to calibrate; defaults to every ISO found.
    #[arg(long, value_delimiter = ',')]
    isos: Vec<u32>,
    /// Effective area as x0,y0,w,h in mosaic pixels; defaults to the full frame.
    #[arg(long, value_parser = parse_roi)]
    roi: Option<Roi>,
    /// Calibrated gains as ISO=K pairs, e.g. 800=0.81,1600=1.62.
    #[arg(long, value_delimiter = ',', value_parser = parse_gain, conflicts_with = "flats", required_unless_present = "flats")]
    gains: Vec<(u32, f64)>,
    /// Directory of flat frames; consecutive frames with equal ISO and exposure form a pair.
    #[arg(long)]
    flats: Option<PathBuf>,
    /// Banding direction.
    #[arg(long, default_value = "row")]
    axis: BandAxis,
    #[arg(long, default_value_t = 1.0)]
    quant_step: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    profile: PathBuf,
    /// Directory of clean RAWB images.
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "800,1600,3200")]
    iso_set: Vec<u32>,
    /// Uniform digital gain range lo:hi.
    #[arg(long, value_parser = parse_range, conflicts_with = "dgain_set")]
    dgain_range: Option<(f64, f64)>,
    /// Digital gain presets, e.g. 100,200.
    #[arg(long, value_delimiter = ',')]
    dgain_set: Vec<f64>,
    #[arg(long, default_value = "parametric")]
    mode: SynthMode,
    /// Probability of a real dark patch in hybrid mode.
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    /// Patch side in mosaic pixels.
    #[arg(long, default_value_t = 512)]
    patch: usize,
    #[arg(long, default_value_t = 8)]
    per_image: usize,
    #[arg(long, default_value_t = 1.0)]
    clip_hi: f64,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    iso: u32,
    #[arg(long, default_value_t = 1.0)]
    dgain: f64,
    #[arg(long, default_value = "gat")]
    transform: TransformKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    tile: usize,
    #[arg(long, default_value_t = 32)]
    overlap: usize,
    /// Hard threshold in units of the noise level.
    #[arg(long, default_value_t = 3.0)]
    threshold: f64,
    #[arg(long, default_value_t = 4)]
    stride: usize,
    /// Scale factors applied to K and sigma to study parameter mismatch.
    /// More than one value writes one output per factor.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    param_scale: Vec<f64>,
}

#[derive(Args)]
struct IspArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Output path; `.ppm` writes 16-bit PPM, anything else an RGB RAWB.
    #[arg(long)]
    out: PathBuf,
    /// `gray-world` or fixed gains r,g,b.
    #[arg(long, default_value = "gray-world", value_parser = parse_wb)]
    wb: WhiteBalance,
    #[arg(long, default_value = "srgb", value_parser = parse_gamma)]
    gamma: Gamma,
    /// Row-major 3x3 color matrix.
    #[arg(long, value_delimiter = ',', num_args = 9)]
    ccm: Vec<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value = "dev")]
    phase: Phase,
    #[arg(long)]
    out: PathBuf,
    /// Crop side overriding the phase default.
    #[arg(long)]
    crop: Option<usize>,
    /// Manifest supplying digital gains per image id.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct RankArgs {
    /// Wide CSV (team,psnr,ssim,lpips,arniqa,topiq) or long CSV (team,metric,value).
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BudgetArgs {
    #[arg(long)]
    model: PathBuf,
    /// Leave bias terms out of the parameter count.
    #[arg(long)]
    no_bias: bool,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of team subdirectories holding `<image_id>.rawb` predictions.
    #[arg(long)]
    pred: PathBuf,
    /// External per-team scores (team,metric,value).
    #[arg(long)]
    external: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Profile whose ISOs the manifest is checked against.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long)]
    crop: Option<usize>,
}

fn parse_roi(s: &str) -> std::result::Result<Roi, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad ROI component {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x0, y0, w, h] => Roi::new(x0, y0, w, h).map_err(|e| e.to_string()),
        _ => Err("ROI must be x0,y0,w,h".into()),
    }
}

fn parse_gain(s: &str) -> std::result::Result<(u32, f64), String> {
    let (iso, k) = s.split_once('=').ok_or_else(|| format!("expected ISO=K, got {s:?}"))?;
    Ok((iso.trim().parse().map_err(|_| format!("bad ISO {iso:?}"))?, k.trim().parse().map_err(|_| format!("bad gain {k:?}"))?))
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected lo:hi, got {s:?}"))?;
    Ok((lo.trim().parse().map_err(|_| format!("bad bound {lo:?}"))?, hi.trim().parse().map_err(|_| format!("bad bound {hi:?}"))?))
}

fn parse_wb(s: &str) -> std::result::Result<WhiteBalance, String> {
    if s == "gray-world" || s == "gray_world" {
        return Ok(WhiteBalance::GrayWorld);
    }
    let g: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad gain {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    match g[..] {
        [r, gg, b] => Ok(WhiteBalance::Fixed([r, gg, b])),
        _ => Err("white balance must be gray-world or r,g,b".into()),
    }
}

fn parse_gamma(s: &str) -> std::result::Result<Gamma, String> {
    match s {
        "srgb" => Ok(Gamma::Srgb),
        "none" | "linear" => Ok(Gamma::None),
        _ => Err(format!("unknown gamma {s:?}")),
    }
}

/// `*.rawb` files in `dir`, sorted by name.
fn rawb_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.is_file() && p.extension().is_some_and(|e| e == "rawb"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::MissingData(vec![format!("no .rawb files in {}", dir.display())]));
    }
    Ok(paths)
}

fn require_files(paths: &[&Path]) -> Result<()> {
    let missing: Vec<String> = paths.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingData(missing))
    }
}

fn to_normalized(img: PackedImage, clip_hi: f64) -> Result<PackedImage> {
    match img.space {
        ValueSpace::Normalized => Ok(img),
        _ => normalize(&img, clip_hi),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let darks: Vec<RawFrame> = rawb_paths(&a.darks)?.iter().map(rawb::read_frame).collect::<Result<_>>()?;
    let first = &darks[0];
    let camera_id = a.camera.clone().unwrap_or_else(|| first.meta.camera_id.clone());
    let roi = a.roi.unwrap_or_else(|| Roi::full(first.width(), first.height()));
    let mut darks_by_iso: BTreeMap<u32, Vec<RawFrame>> = BTreeMap::new();
    for d in darks {
        darks_by_iso.entry(d.meta.iso).or_default().push(d);
    }
    let isos = if a.isos.is_empty() { darks_by_iso.keys().copied().collect() } else { a.isos.clone() };

    let gains = match &a.flats {
        Some(dir) => {
            let mut groups: BTreeMap<(u32, u64), Vec<PackedImage>> = BTreeMap::new();
            for p in rawb_paths(dir)? {
                let img = rawb::read_packed(&p)?;
                let exposure = img.meta.exposure_s.unwrap_or(0.0).to_bits();
                groups.entry((img.meta.iso, exposure)).or_default().push(img);
            }
            let mut points: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
            for ((iso, _), flats) in &groups {
                for pair in flats.chunks_exact(2) {
                    points.entry(*iso).or_default().push(photon_transfer_point(&pair[0], &pair[1])?);
                }
            }
            GainSource::PhotonTransfer(points)
        }
        None => GainSource::Provided(a.gains.iter().copied().collect()),
    };

    let inputs = ProfileInputs { camera_id, isos, darks_by_iso, gains, roi, band_axis: a.axis, quant_step: a.quant_step };
    let profile = build_profile(&inputs)?;
    save_profile(&profile, &a.out)?;
    for (iso, p) in &profile.isos {
        println!(
            "ISO {iso}: K={:.6} sigma_read={:.4} sigma_row={:.4} darks={}",
            p.params.k,
            p.params.sigma_read,
            p.params.sigma_row,
            p.dark_library.len()
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let profile = load_profile(&a.profile)?;
    let paths = rawb_paths(&a.clean)?;
    let frames: Vec<PackedImage> = paths
        .iter()
        .map(|p| to_normalized(rawb::read_packed(p)?, a.clip_hi))
        .collect::<Result<_>>()?;
    let dgain = match (a.dgain_range, a.dgain_set.is_empty()) {
        (Some((lo, hi)), _) => DgainSpec::Range(lo, hi),
        (None, false) => DgainSpec::Set(a.dgain_set.clone()),
        (None, true) => DgainSpec::Range(10.0, 200.0),
    };
    let mut sampler = PairSampler::new(a.iso_set.clone(), dgain, a.mode);
    sampler.hybrid_rho = a.rho;
    sampler.clip_hi = a.clip_hi;
    let pairs = make_pair_batch(&frames, &profile, &sampler, a.patch, a.per_image, seed)?;

    fs::create_dir_all(&a.out)?;
    let mut index = BufWriter::new(fs::File::create(a.out.join("pairs.csv"))?);
    writeln!(index, "pair,source,patch,iso,dgain,seed")?;
    for p in &pairs {
        let name = format!("{}_p{:03}", stem(&paths[p.image_index]), p.patch_index);
        rawb::write_packed(&p.noisy, a.out.join(format!("{name}_noisy.rawb")))?;
        rawb::write_packed(&p.clean, a.out.join(format!("{name}_clean.rawb")))?;
        writeln!(index, "{name},{},{},{},{},{}", stem(&paths[p.image_index]), p.patch_index, p.iso, p.dgain, p.seed)?;
    }
    index.flush()?;
    println!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

fn denoise(a: &DenoiseArgs) -> Result<()> {
    let profile = load_profile(&a.profile)?;
    let noisy = to_normalized(rawb::read_packed(&a.input)?, 1.0)?;
    let base = PgParams::effective(profile.params(a.iso)?, a.dgain)?;
    let cfg = DenoiseConfig { transform: a.transform, threshold_mult: a.threshold, tile: a.tile, overlap: a.overlap, stride: a.stride };
    for &scale in &a.param_scale {
        if !(scale > 0.0) {
            return Err(Error::Domain(format!("parameter scale must be positive, got {scale}")));
        }
        let params = PgParams::new(base.k * scale, base.sigma * scale)?;
        let out = denoise_raw(&noisy, &ChannelParams::Shared(params), &cfg)?;
        let path = if a.param_scale.len() == 1 {
            a.out.clone()
        } else {
            a.out.with_file_name(format!("{}_x{scale}.rawb", stem(&a.out)))
        };
        rawb::write_packed(&out, &path)?;
        println!("wrote {} (K={:.6}, sigma={:.4})", path.display(), params.k, params.sigma);
    }
    Ok(())
}

fn isp(a: &IspArgs) -> Result<()> {
    let img = to_normalized(rawb::read_packed(&a.input)?, 1.0)?;
    let mut cfg = IspConfig { wb: a.wb, gamma: a.gamma, ..IspConfig::default() };
    if !a.ccm.is_empty() {
        for (i, v) in a.ccm.iter().enumerate() {
            cfg.ccm[i / 3][i % 3] = *v;
        }
    }
    let rgb = run_isp(&img, &cfg)?;
    if a.out.extension().is_some_and(|e| e == "ppm") {
        write_ppm16(&rgb, &a.out)?;
    } else {
        rawb::write_rgb(&rgb, &a.out)?;
    }
    println!("wrote {} ({})", a.out.display(), rgb.description);
    Ok(())
}

fn eval(a: &EvalArgs, strict: bool) -> Result<()> {
    let dgains = match &a.manifest {
        Some(m) => load_manifest(m, None, strict)?.entries.into_iter().map(|e| (e.image_id, e.dgain)).collect(),
        None => BTreeMap::new(),
    };
    let opts = EvalOptions { crop_side: a.crop, ..EvalOptions::default() };
    let scores = evaluate_dirs(&a.pred, &a.gt, a.phase, &opts, &dgains)?;
    let mut w = BufWriter::new(fs::File::create(&a.out)?);
    write_image_scores(&scores, &opts.describe(a.phase), false, &mut w)?;
    w.flush()?;
    let n = scores.len() as f64;
    let mean_psnr = rawbench::stats::sum(scores.iter().map(|s| s.psnr)) / n;
    let mean_ssim = rawbench::stats::sum(scores.iter().map(|s| s.ssim)) / n;
    println!("{} images: mean PSNR {mean_psnr:.4} dB, mean SSIM {mean_ssim:.6}", scores.len());
    Ok(())
}

fn read_any_scores(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path)?;
    let header = text.lines().find(|l| !l.trim().is_empty() && !l.starts_with('#')).unwrap_or("");
    let cols: Vec<String> = header.split(',').map(|c| c.trim().to_ascii_lowercase()).collect();
    if cols == ["team", "metric", "value"] {
        let mut records: BTreeMap<String, MetricRecord> = BTreeMap::new();
        for ((team, metric), v) in ingest_external_scores(path)? {
            records.entry(team.clone()).or_insert_with(|| MetricRecord::new(team)).set(metric, v);
        }
        Ok(records.into_values().collect())
    } else {
        read_records_csv(path)
    }
}

fn rank(a: &RankArgs) -> Result<()> {
    let records = read_any_scores(&a.scores)?;
    let table = final_table(&records)?;
    table.save_csv(&a.out)?;
    for row in &table.rows {
        let pos: Vec<String> = table
            .categories
            .iter()
            .map(|c| format!("{}={}", c.name(), row.positions.get(c).map_or("-".into(), |p| p.to_string())))
            .collect();
        println!("{} {}", row.record.team, pos.join(" "));
    }
    Ok(())
}

fn budget(a: &BudgetArgs) -> Result<bool> {
    let model = load_model(&a.model)?;
    let report = budget_report(&model, CountOptions { count_bias: !a.no_bias })?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for l in &report.layers {
            println!("layer {:>3} {:<12} params {:>12} MACs {:>16} out {:?}", l.index, l.kind.name(), l.params, l.macs, l.output);
        }
        println!("total params {}", report.total_params);
        println!("total MACs {} ({:.4} G), FLOPs {}", report.total_macs, report.total_macs as f64 / 1e9, report.flops());
        for v in &report.violations {
            println!("violation: {v}");
        }
        println!("{}", if report.pass { "PASS" } else { "FAIL" });
    }
    Ok(report.pass)
}

fn bench(a: &BenchArgs, strict: bool) -> Result<()> {
    let known: Option<BTreeSet<u32>> = match &a.profile {
        Some(p) => Some(load_profile(p)?.isos.keys().copied().collect()),
        None => None,
    };
    if strict {
        let mut paths: Vec<&Path> = vec![a.pred.as_path()];
        if let Some(e) = &a.external {
            paths.push(e);
        }
        require_files(&paths)?;
    }
    let manifest = load_manifest(&a.manifest, known.as_ref(), strict)?;
    let opts = EvalOptions { crop_side: a.crop, ..EvalOptions::default() };
    fs::create_dir_all(&a.out)?;
    let out = run_benchmark(&manifest, &a.pred, a.external.as_deref(), &a.out, &opts)?;
    println!(
        "scored {} predictions for {} teams; wrote scores.csv, team_scores.csv, ranktable.csv to {}",
        out.image_scores.len(),
        out.table.rows.len(),
        a.out.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Domain(format!("cannot start {n} worker threads: {e}")))?;
    }
    match &cli.command {
        Command::Calibrate(a) => {
            if cli.strict {
                require_files(&[&a.darks])?;
            }
            calibrate(a)?
        }
        Command::Synth(a) => {
            if cli.strict {
                require_files(&[&a.profile, &a.clean])?;
            }
            synth(a, cli.seed)?
        }
        Command::Denoise(a) => {
            if cli.strict {
                require_files(&[&a.input, &a.profile])?;
            }
            denoise(a)?
        }
        Command::Isp(a) => isp(a)?,
        Command::Eval(a) => {
            if cli.strict {
                require_files(&[&a.pred, &a.gt])?;
            }
            eval(a, cli.strict)?
        }
        Command::Rank(a) => rank(a)?,
        Command::Budget(a) => {
            if !budget(a)? {
                return Ok(ExitCode::from(BUDGET_FAILED));
            }
        }
        Command::Bench(a) => bench(a, cli.strict)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
