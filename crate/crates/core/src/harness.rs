//! Dataset manifests, external score ingestion and the benchmark runner.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate_pair_with, Phase, SsimConfig};
use crate::ranking::{final_table, Metric, MetricRecord, RankTable};
use crate::rawb;
use crate::stats::CompensatedSum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneType {
    Paired,
    Wild,
}

fn unit_gain() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub camera: String,
    pub scene_type: SceneType,
    pub iso: u32,
    #[serde(default = "unit_gain")]
    pub dgain: f64,
    pub noisy_path: PathBuf,
    #[serde(default)]
    pub gt_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub phase: Phase,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn paired(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.scene_type == SceneType::Paired)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parse and validate a manifest. Relative paths are resolved against the
/// manifest's directory. With `strict`, every referenced file must exist.
pub fn load_manifest(path: impl AsRef<Path>, known_isos: Option<&BTreeSet<u32>>, strict: bool) -> Result<Manifest> {
    let path = path.as_ref();
    let mut m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut ids = BTreeSet::new();
    for (index, e) in m.entries.iter_mut().enumerate() {
        let fail = |message: String| Error::Manifest { index, message };
        if !ids.insert(e.image_id.clone()) {
            return Err(fail(format!("duplicate image_id {:?}", e.image_id)));
        }
        if let Some(isos) = known_isos {
            if !isos.contains(&e.iso) {
                return Err(fail(format!("ISO {} not in profile (known: {isos:?})", e.iso)));
            }
        }
        if !(e.dgain > 0.0 && e.dgain.is_finite()) {
            return Err(fail(format!("dgain must be positive, got {}", e.dgain)));
        }
        match (e.scene_type, &e.gt_path) {
            (SceneType::Paired, None) => return Err(fail(format!("paired entry {:?} has no gt_path", e.image_id))),
            (SceneType::Wild, Some(_)) => {
                log::warn!("manifest entry {index}: wild scene {:?} has a gt_path; ignoring it", e.image_id);
                e.gt_path = None;
            }
            _ => {}
        }
        e.noisy_path = resolve(&base, &e.noisy_path);
        e.gt_path = e.gt_path.as_ref().map(|g| resolve(&base, g));
    }
    if strict {
        let missing: Vec<String> = m
            .entries
            .iter()
            .flat_map(|e| std::iter::once(&e.noisy_path).chain(e.gt_path.as_ref()))
            .filter(|p| !p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingData(missing));
        }
    }
    Ok(m)
}

pub type ScoreMap = BTreeMap<(String, Metric), f64>;

/// Read a `team,metric,value` CSV. Later rows override earlier ones.
pub fn ingest_external_scores(path: impl AsRef<Path>) -> Result<ScoreMap> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
    let mut out = ScoreMap::new();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Ok(out);
    }
    if header != ["team", "metric", "value"] {
        return Err(Error::Data(format!("external scores header must be team,metric,value, got {header:?}")));
    }
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != 3 {
            return Err(Error::Data(format!("line {line}: expected 3 fields, got {}", row.len())));
        }
        let team = row[0].to_string();
        let metric: Metric = row[1]
            .parse()
            .map_err(|_| Error::Data(format!("line {line}: unknown metric {:?}", &row[1])))?;
        let value: f64 = row[2]
            .parse()
            .ok()
            .filter(|v: &f64| !v.is_nan())
            .ok_or_else(|| Error::Data(format!("line {line}: value {:?} is not numeric", &row[2])))?;
        if out.insert((team.clone(), metric), value).is_some() {
            log::warn!("line {line}: {team}/{} overrides an earlier value", metric.name());
        }
    }
    Ok(out)
}

pub fn write_score_map<W: Write>(scores: &ScoreMap, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["team", "metric", "value"])?;
    for ((team, metric), v) in scores {
        out.write_record([team.as_str(), metric.name(), &v.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// One prediction scored against its reference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageScore {
    pub team: String,
    pub image_id: String,
    pub camera: String,
    pub iso: u32,
    pub dgain: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn write_image_scores<W: Write>(scores: &[ImageScore], comment: &str, with_team: bool, mut w: W) -> Result<()> {
    for line in comment.lines() {
        writeln!(w, "# {line}")?;
    }
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["image_id", "camera", "iso", "dgain", "psnr_db", "ssim"];
    if with_team {
        header.insert(0, "team");
    }
    out.write_record(&header)?;
    for s in scores {
        let mut rec = vec![
            s.image_id.clone(),
            s.camera.clone(),
            s.iso.to_string(),
            s.dgain.map(|d| d.to_string()).unwrap_or_default(),
            s.psnr.to_string(),
            s.ssim.to_string(),
        ];
        if with_team {
            rec.insert(0, s.team.clone());
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[derive(Default)]
pub struct EvalOptions {
    /// Overrides the phase crop side.
    pub crop_side: Option<usize>,
    pub ssim: SsimConfig,
}


impl EvalOptions {
    fn side(&self, phase: Phase) -> usize {
        self.crop_side.unwrap_or(phase.crop_side())
    }

    pub fn describe(&self, phase: Phase) -> String {
        let s = &self.ssim;
        format!(
            "phase={} crop={} ssim=gaussian(window={},sigma={}) k1={} k2={} L={} psnr_peak=1 psnr_pooling=all-channels",
            match phase {
                Phase::Dev => "dev",
                Phase::Final => "final",
            },
            self.side(phase),
            s.window,
            s.sigma,
            s.k1,
            s.k2,
            s.data_range
        )
    }
}

fn score_one(team: &str, id: &str, pred: &Path, gt: &Path, dgain: Option<f64>, side: usize, opts: &EvalOptions) -> Result<ImageScore> {
    let p = rawb::read_packed(pred)?;
    let g = rawb::read_packed(gt)?;
    let r = evaluate_pair_with(&p, &g, side, &opts.ssim)?;
    Ok(ImageScore {
        team: team.to_string(),
        image_id: id.to_string(),
        camera: g.meta.camera_id.clone(),
        iso: g.meta.iso,
        dgain,
        psnr: r.psnr,
        ssim: r.ssim,
    })
}

fn rawb_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == "rawb") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), p.clone());
            }
        }
    }
    Ok(out)
}

/// Score every `<id>.rawb` in `gt_dir` against the same name in `pred_dir`.
/// `dgains` optionally supplies the digital gain per image id.
pub fn evaluate_dirs(
    pred_dir: &Path,
    gt_dir: &Path,
    phase: Phase,
    opts: &EvalOptions,
    dgains: &BTreeMap<String, f64>,
) -> Result<Vec<ImageScore>> {
    let gts = rawb_files(gt_dir)?;
    if gts.is_empty() {
        return Err(Error::MissingData(vec![format!("no .rawb files in {}", gt_dir.display())]));
    }
    let missing: Vec<String> = gts
        .keys()
        .filter(|id| !pred_dir.join(format!("{id}.rawb")).exists())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingData(missing));
    }
    let side = opts.side(phase);
    gts.par_iter()
        .map(|(id, gt)| score_one("", id, &pred_dir.join(format!("{id}.rawb")), gt, dgains.get(id).copied(), side, opts))
        .collect()
}

/// Team prediction directories: each subdirectory of `pred_dir`, or
/// `pred_dir` itself when it holds `.rawb` files directly.
pub fn discover_teams(pred_dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut teams = BTreeMap::new();
    if !rawb_files(pred_dir)?.is_empty() {
        let name = pred_dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("team")
            .to_string();
        teams.insert(name, pred_dir.to_path_buf());
        return Ok(teams);
    }
    for entry in fs::read_dir(pred_dir)? {
        let p = entry?.path();
        if p.is_dir() {
            if let Some(name) = p.file_name().and_then(|s| s.to_str()) {
                teams.insert(name.to_string(), p.clone());
            }
        }
    }
    Ok(teams)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutputs {
    pub image_scores: Vec<ImageScore>,
    pub team_scores: ScoreMap,
    pub table: RankTable,
}

/// Score every team's predictions, merge external scores, rank, and write
/// `scores.csv`, `team_scores.csv` and `ranktable.csv` into `out_dir`.
pub fn run_benchmark(
    manifest: &Manifest,
    pred_dir: &Path,
    external_scores: Option<&Path>,
    out_dir: &Path,
    opts: &EvalOptions,
) -> Result<BenchOutputs> {
    let teams = discover_teams(pred_dir)?;
    let external = match external_scores {
        Some(p) => ingest_external_scores(p)?,
        None => ScoreMap::new(),
    };
    if teams.is_empty() && external.is_empty() {
        return Err(Error::MissingData(vec![format!("no team predictions under {}", pred_dir.display())]));
    }

    let mut missing = vec![];
    for (team, dir) in &teams {
        for e in &manifest.entries {
            if !dir.join(format!("{}.rawb", e.image_id)).exists() {
                missing.push(format!("{team}/{}", e.image_id));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingData(missing));
    }

    let side = opts.side(manifest.phase);
    let jobs: Vec<(&String, &PathBuf, &ManifestEntry)> = teams
        .iter()
        .flat_map(|(t, d)| manifest.paired().map(move |e| (t, d, e)))
        .collect();
    let image_scores: Vec<ImageScore> = jobs
        .par_iter()
        .map(|(team, dir, e)| {
            let gt = e.gt_path.as_ref().expect("paired entries carry gt");
            score_one(team, &e.image_id, &dir.join(format!("{}.rawb", e.image_id)), gt, Some(e.dgain), side, opts)
        })
        .collect::<Result<_>>()?;

    let mut team_scores = ScoreMap::new();
    for team in teams.keys() {
        let rows: Vec<&ImageScore> = image_scores.iter().filter(|s| &s.team == team).collect();
        if rows.is_empty() {
            continue;
        }
        for (metric, get) in [(Metric::Psnr, (|s: &ImageScore| s.psnr) as fn(&ImageScore) -> f64), (Metric::Ssim, |s| s.ssim)] {
            let mut acc = CompensatedSum::default();
            for s in &rows {
                acc.add(get(s));
            }
            team_scores.insert((team.clone(), metric), acc.value() / rows.len() as f64);
        }
    }
    for (key, v) in &external {
        if let Some(old) = team_scores.insert(key.clone(), *v) {
            log::info!("external {}/{} = {v} replaces computed {old}", key.0, key.1.name());
        }
    }

    let mut records: BTreeMap<String, MetricRecord> = BTreeMap::new();
    for ((team, metric), v) in &team_scores {
        records.entry(team.clone()).or_insert_with(|| MetricRecord::new(team.clone())).set(*metric, *v);
    }
    let records: Vec<MetricRecord> = records.into_values().collect();
    let table = final_table(&records)?;

    fs::create_dir_all(out_dir)?;
    let comment = format!(
        "{}\naggregation=per-image arithmetic mean over paired entries; external scores override computed ones",
        opts.describe(manifest.phase)
    );
    write_image_scores(&image_scores, &comment, true, fs::File::create(out_dir.join("scores.csv"))?)?;
    write_score_map(&team_scores, fs::File::create(out_dir.join("team_scores.csv"))?)?;
    table.save_csv(out_dir.join("ranktable.csv"))?;
    Ok(BenchOutputs { image_scores, team_scores, table })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn minimal_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.json",
            r#"{"phase":"dev","entries":[{"image_id":"a","camera":"c","scene_type":"paired","iso":800,
                "noisy_path":"n/a.rawb","gt_path":"g/a.rawb"}]}"#,
        );
        let m = load_manifest(&p, None, false).unwrap();
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[0].dgain, 1.0);
        assert_eq!(m.entries[0].gt_path.as_ref().unwrap(), &dir.path().join("g/a.rawb"));
        assert!(matches!(load_manifest(&p, None, true), Err(Error::MissingData(v)) if v.len() == 2));
        let isos = BTreeSet::from([1600]);
        assert!(matches!(load_manifest(&p, Some(&isos), false), Err(Error::Manifest { index: 0, .. })));
    }

    #[test]
    fn manifest_rules() {
        let dir = tempfile::tempdir().unwrap();
        let wild = write(
            dir.path(),
            "w.json",
            r#"{"phase":"final","entries":[{"image_id":"w","camera":"c","scene_type":"wild","iso":800,
                "noisy_path":"w.rawb","gt_path":"x.rawb"}]}"#,
        );
        assert_eq!(load_manifest(&wild, None, false).unwrap().entries[0].gt_path, None);
        let dup = write(
            dir.path(),
            "d.json",
            r#"{"phase":"dev","entries":[
                {"image_id":"a","camera":"c","scene_type":"wild","iso":800,"noisy_path":"a"},
                {"image_id":"a","camera":"c","scene_type":"wild","iso":800,"noisy_path":"b"}]}"#,
        );
        assert!(matches!(load_manifest(&dup, None, false), Err(Error::Manifest { index: 1, .. })));
        let nogt = write(
            dir.path(),
            "g.json",
            r#"{"phase":"dev","entries":[{"image_id":"a","camera":"c","scene_type":"paired","iso":800,"noisy_path":"a"}]}"#,
        );
        assert!(matches!(load_manifest(&nogt, None, false), Err(Error::Manifest { index: 0, .. })));
    }

    #[test]
    fn external_scores() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write(dir.path(), "e.csv", "");
        assert!(ingest_external_scores(&empty).unwrap().is_empty());
        let ok = write(dir.path(), "ok.csv", "team,metric,value\n# note\nA,lpips,0.3\nA,LPIPS,0.25\nB,psnr,inf\n");
        let m = ingest_external_scores(&ok).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[&("A".to_string(), Metric::Lpips)], 0.25);
        assert_eq!(m[&("B".to_string(), Metric::Psnr)], f64::INFINITY);
        let bad = write(dir.path(), "bad.csv", "team,metric,value\nA,lpips,0.3\nX,lpips,abc\n");
        let err = ingest_external_scores(&bad).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let unknown = write(dir.path(), "u.csv", "team,metric,value\nA,niqe,3\n");
        assert!(matches!(ingest_external_scores(&unknown), Err(Error::Data(_))));
    }
}
