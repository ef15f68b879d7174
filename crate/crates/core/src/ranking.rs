//! Leaderboard scoring: per-metric ranks, category average ranks and the
//! majority-of-metrics tie-break.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
    Lpips,
    Arniqa,
    Topiq,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Psnr, Metric::Ssim, Metric::Lpips, Metric::Arniqa, Metric::Topiq];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Lpips => "lpips",
            Metric::Arniqa => "arniqa",
            Metric::Topiq => "topiq",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Lpips)
    }

    /// `Less` when `a` is strictly better than `b`.
    fn compare(self, a: f64, b: f64) -> Ordering {
        let ord = a.partial_cmp(&b).unwrap_or(Ordering::Equal);
        if self.higher_is_better() {
            ord.reverse()
        } else {
            ord
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Data(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Overall,
    Fidelity,
    Perceptual,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Overall, Category::Fidelity, Category::Perceptual];

    pub fn name(self) -> &'static str {
        match self {
            Category::Overall => "overall",
            Category::Fidelity => "fidelity",
            Category::Perceptual => "perceptual",
        }
    }

    pub fn metrics(self) -> &'static [Metric] {
        match self {
            Category::Overall => &Metric::ALL,
            Category::Fidelity => &[Metric::Psnr, Metric::Ssim],
            Category::Perceptual => &[Metric::Lpips, Metric::Arniqa, Metric::Topiq],
        }
    }
}

/// One team's metric values. Missing metrics are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub team: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub lpips: Option<f64>,
    pub arniqa: Option<f64>,
    pub topiq: Option<f64>,
}

impl MetricRecord {
    pub fn new(team: impl Into<String>) -> Self {
        Self { team: team.into(), ..Default::default() }
    }

    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Psnr => self.psnr,
            Metric::Ssim => self.ssim,
            Metric::Lpips => self.lpips,
            Metric::Arniqa => self.arniqa,
            Metric::Topiq => self.topiq,
        }
    }

    pub fn set(&mut self, m: Metric, v: f64) {
        let slot = match m {
            Metric::Psnr => &mut self.psnr,
            Metric::Ssim => &mut self.ssim,
            Metric::Lpips => &mut self.lpips,
            Metric::Arniqa => &mut self.arniqa,
            Metric::Topiq => &mut self.topiq,
        };
        *slot = Some(v);
    }

    fn require(&self, m: Metric) -> Result<f64> {
        self.get(m)
            .ok_or_else(|| Error::Data(format!("team {:?} has no {} value", self.team, m.name())))
    }
}

/// Rank values for one metric, 1 = best. Exact ties share the mean of the
/// positions they occupy. Output follows input order.
pub fn rank_metric(values: &[(String, f64)], metric: Metric) -> Result<Vec<(String, f64)>> {
    if values.is_empty() {
        return Err(Error::Data(format!("no values to rank for {}", metric.name())));
    }
    if let Some((team, _)) = values.iter().find(|(_, v)| v.is_nan()) {
        return Err(Error::Data(format!("{} value for team {team:?} is NaN", metric.name())));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| metric.compare(values[a].1, values[b].1));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]].1 == values[order[i]].1 {
            j += 1;
        }
        // Positions i+1 ..= j.
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    Ok(values.iter().zip(ranks).map(|((t, _), r)| (t.clone(), r)).collect())
}

fn metric_ranks(records: &[MetricRecord], metric: Metric) -> Result<Vec<f64>> {
    let values = records
        .iter()
        .map(|r| Ok((r.team.clone(), r.require(metric)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_metric(&values, metric)?.into_iter().map(|(_, r)| r).collect())
}

/// Average ranking score per team for each requested category, in record
/// order.
pub fn category_scores(records: &[MetricRecord], categories: &[Category]) -> Result<Vec<BTreeMap<Category, f64>>> {
    let mut ranks: BTreeMap<Metric, Vec<f64>> = BTreeMap::new();
    for cat in categories {
        for &m in cat.metrics() {
            if let std::collections::btree_map::Entry::Vacant(e) = ranks.entry(m) {
                e.insert(metric_ranks(records, m)?);
            }
        }
    }
    Ok((0..records.len())
        .map(|i| {
            categories
                .iter()
                .map(|&cat| {
                    let ms = cat.metrics();
                    let total: f64 = ms.iter().map(|m| ranks[m][i]).sum();
                    (cat, total / ms.len() as f64)
                })
                .collect()
        })
        .collect())
}

fn pairwise_wins(a: &MetricRecord, b: &MetricRecord, metrics: &[Metric]) -> Result<(usize, usize)> {
    let (mut wa, mut wb) = (0, 0);
    for &m in metrics {
        match m.compare(a.require(m)?, b.require(m)?) {
            Ordering::Less => wa += 1,
            Ordering::Greater => wb += 1,
            Ordering::Equal => {}
        }
    }
    Ok((wa, wb))
}

/// Order two teams by how many metrics each wins head to head. `Less`
/// places `a` first. An exact split falls back to team name with a warning.
pub fn majority_tiebreak(a: &MetricRecord, b: &MetricRecord, metrics: &[Metric]) -> Result<Ordering> {
    let (wa, wb) = pairwise_wins(a, b, metrics)?;
    Ok(match wa.cmp(&wb) {
        Ordering::Greater => Ordering::Less,
        Ordering::Less => Ordering::Greater,
        Ordering::Equal => {
            log::warn!(
                "teams {:?} and {:?} split {wa}-{wb} on {:?}; ordering by name",
                a.team,
                b.team,
                metrics.iter().map(|m| m.name()).collect::<Vec<_>>()
            );
            a.team.cmp(&b.team)
        }
    })
}

/// Order a group of teams with equal scores. Two teams use the head-to-head
/// rule directly; larger groups rank by head-to-head wins within the group,
/// then by name.
fn order_tie_group(group: &mut [usize], records: &[MetricRecord], metrics: &[Metric]) -> Result<()> {
    if group.len() == 2 {
        if majority_tiebreak(&records[group[0]], &records[group[1]], metrics)? == Ordering::Greater {
            group.swap(0, 1);
        }
        return Ok(());
    }
    let mut wins: BTreeMap<usize, usize> = group.iter().map(|&i| (i, 0)).collect();
    for (n, &i) in group.iter().enumerate() {
        for &j in &group[n + 1..] {
            let (wi, wj) = pairwise_wins(&records[i], &records[j], metrics)?;
            match wi.cmp(&wj) {
                Ordering::Greater => *wins.get_mut(&i).expect("member") += 1,
                Ordering::Less => *wins.get_mut(&j).expect("member") += 1,
                Ordering::Equal => {}
            }
        }
    }
    group.sort_by(|&i, &j| wins[&j].cmp(&wins[&i]).then_with(|| records[i].team.cmp(&records[j].team)));
    log::warn!(
        "{}-way tie resolved by head-to-head wins: {:?}",
        group.len(),
        group.iter().map(|&i| records[i].team.as_str()).collect::<Vec<_>>()
    );
    Ok(())
}

/// Final positions (1-based) for one category, in record order.
fn positions(records: &[MetricRecord], scores: &[f64], metrics: &[Metric]) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then_with(|| records[a].team.cmp(&records[b].team)));
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        if j - i > 1 {
            order_tie_group(&mut order[i..j], records, metrics)?;
        }
        i = j;
    }
    let mut pos = vec![0; records.len()];
    for (p, &k) in order.iter().enumerate() {
        pos[k] = p + 1;
    }
    Ok(pos)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankRow {
    pub record: MetricRecord,
    pub ranks: BTreeMap<Metric, f64>,
    pub scores: BTreeMap<Category, f64>,
    pub positions: BTreeMap<Category, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankTable {
    pub categories: Vec<Category>,
    pub rows: Vec<RankRow>,
}

impl RankTable {
    pub fn row(&self, team: &str) -> Option<&RankRow> {
        self.rows.iter().find(|r| r.record.team == team)
    }

    pub fn position(&self, team: &str, cat: Category) -> Option<usize> {
        self.row(team)?.positions.get(&cat).copied()
    }

    pub fn score(&self, team: &str, cat: Category) -> Option<f64> {
        self.row(team)?.scores.get(&cat).copied()
    }

    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["team".to_string()];
        header.extend(Metric::ALL.iter().map(|m| m.name().to_string()));
        header.extend(Metric::ALL.iter().map(|m| format!("rank_{}", m.name())));
        header.extend(Category::ALL.iter().map(|c| format!("score_{}", c.name())));
        header.extend(Category::ALL.iter().map(|c| format!("position_{}", c.name())));
        out.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for row in &self.rows {
            let mut rec = vec![row.record.team.clone()];
            rec.extend(Metric::ALL.iter().map(|&m| opt(row.record.get(m))));
            rec.extend(Metric::ALL.iter().map(|m| opt(row.ranks.get(m).copied())));
            rec.extend(Category::ALL.iter().map(|c| opt(row.scores.get(c).copied())));
            rec.extend(Category::ALL.iter().map(|c| row.positions.get(c).map(|p| p.to_string()).unwrap_or_default()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Categories whose metrics all appear in at least one record.
pub fn available_categories(records: &[MetricRecord]) -> Vec<Category> {
    Category::ALL
        .into_iter()
        .filter(|c| c.metrics().iter().all(|&m| records.iter().any(|r| r.get(m).is_some())))
        .collect()
}

/// Full leaderboard over every category the records support. Rows are
/// ordered by overall position, falling back to the first available
/// category, then team name.
pub fn final_table(records: &[MetricRecord]) -> Result<RankTable> {
    if records.is_empty() {
        return Err(Error::Data("no teams to rank".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in records {
        if !seen.insert(r.team.as_str()) {
            return Err(Error::Data(format!("team {:?} appears twice", r.team)));
        }
        if Metric::ALL.iter().all(|&m| r.get(m).is_none()) {
            return Err(Error::Data(format!("team {:?} has no metric values", r.team)));
        }
    }
    let categories = available_categories(records);
    let scores = category_scores(records, &categories)?;
    let mut positions_by_cat = BTreeMap::new();
    for &cat in &categories {
        let s: Vec<f64> = scores.iter().map(|m| m[&cat]).collect();
        positions_by_cat.insert(cat, positions(records, &s, cat.metrics())?);
    }
    let mut rows: Vec<RankRow> = (0..records.len())
        .map(|i| RankRow {
            record: records[i].clone(),
            ranks: BTreeMap::new(),
            scores: scores[i].clone(),
            positions: positions_by_cat.iter().map(|(&c, p)| (c, p[i])).collect(),
        })
        .collect();
    for m in Metric::ALL {
        if records.iter().all(|r| r.get(m).is_some()) {
            for (row, r) in rows.iter_mut().zip(metric_ranks(records, m)?) {
                row.ranks.insert(m, r);
            }
        }
    }
    let lead = categories.first().copied();
    rows.sort_by(|a, b| {
        let pa = lead.map(|c| a.positions[&c]);
        let pb = lead.map(|c| b.positions[&c]);
        pa.cmp(&pb).then_with(|| a.record.team.cmp(&b.record.team))
    });
    Ok(RankTable { categories, rows })
}

/// Read a wide score table with columns `team,psnr,ssim,lpips,arniqa,topiq`.
/// Metric columns may be absent or blank; `#` lines are comments.
pub fn read_records_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = vec![];
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
