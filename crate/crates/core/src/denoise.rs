//! Classical baseline RAW denoiser: variance-stabilizing transform, sliding
//! 8x8 DCT hard thresholding, inverse transform. Large planes are processed
//! in overlapping tiles that are feathered back together.

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raw::{PackedImage, ValueSpace};
use crate::stats;
use crate::transforms::{Gat, Identity, KSigma, PgParams, Stabilizer};

const BLOCK: usize = 8;

/// Tile-edge band, in pixels, whose output is never used when a neighbouring
/// tile covers it. Equal to the block size, so kept pixels see the same DCT
/// blocks as a single pass would.
const FEATHER_GUARD: usize = BLOCK;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Gat,
    Ksigma,
    None,
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gat" => Ok(TransformKind::Gat),
            "ksigma" => Ok(TransformKind::Ksigma),
            "none" => Ok(TransformKind::None),
            other => Err(Error::Data(format!("unknown transform {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    pub transform: TransformKind,
    pub threshold_mult: f64,
    pub tile: usize,
    pub overlap: usize,
    /// Step between sliding DCT blocks.
    pub stride: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self { transform: TransformKind::Gat, threshold_mult: 3.0, tile: 256, overlap: 32, stride: 4 }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile < BLOCK {
            return Err(Error::Domain(format!("tile {} smaller than the {BLOCK}x{BLOCK} block", self.tile)));
        }
        if self.overlap >= self.tile {
            return Err(Error::Domain(format!("overlap {} must be smaller than tile {}", self.overlap, self.tile)));
        }
        if !(self.threshold_mult >= 0.0) {
            return Err(Error::Domain(format!("threshold_mult must be non-negative, got {}", self.threshold_mult)));
        }
        if self.stride == 0 || self.stride > BLOCK {
            return Err(Error::Domain(format!("stride must be in 1..={BLOCK}, got {}", self.stride)));
        }
        Ok(())
    }
}

/// Orthonormal 8-point DCT-II matrix, `C[u][x]`.
fn dct_matrix() -> [[f64; BLOCK]; BLOCK] {
    let mut c = [[0.0; BLOCK]; BLOCK];
    let n = BLOCK as f64;
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2.0 * x as f64 + 1.0) * u as f64 / (2.0 * n)).cos();
        }
    }
    c
}

type Block = [[f64; BLOCK]; BLOCK];

/// `C * B * C^T`.
fn dct2(c: &Block, b: &Block) -> Block {
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    for u in 0..BLOCK {
        for x in 0..BLOCK {
            tmp[u][x] = (0..BLOCK).map(|y| c[u][y] * b[y][x]).sum();
        }
    }
    let mut out = [[0.0; BLOCK]; BLOCK];
    for u in 0..BLOCK {
        for v in 0..BLOCK {
            out[u][v] = (0..BLOCK).map(|x| tmp[u][x] * c[v][x]).sum();
        }
    }
    out
}

/// `C^T * F * C`.
fn idct2(c: &Block, f: &Block) -> Block {
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    for y in 0..BLOCK {
        for v in 0..BLOCK {
            tmp[y][v] = (0..BLOCK).map(|u| c[u][y] * f[u][v]).sum();
        }
    }
    let mut out = [[0.0; BLOCK]; BLOCK];
    for y in 0..BLOCK {
        for x in 0..BLOCK {
            out[y][x] = (0..BLOCK).map(|v| tmp[y][v] * c[v][x]).sum();
        }
    }
    out
}

/// Block origins along an axis of length `len`: every `stride`, plus one
/// flush with the far edge.
fn block_starts(len: usize, stride: usize) -> Vec<usize> {
    let last = len - BLOCK;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().expect("len >= BLOCK") != last {
        starts.push(last);
    }
    starts
}

/// Sliding 8x8 DCT hard-threshold denoiser with uniform aggregation.
///
/// AC coefficients with magnitude below `threshold_mult * sigma` are zeroed;
/// DC is always kept. A zero threshold returns the input unchanged.
pub fn dct8_shrink(plane: ArrayView2<f64>, sigma: f64, threshold_mult: f64) -> Result<Array2<f64>> {
    dct8_shrink_strided(plane, sigma, threshold_mult, 4)
}

pub fn dct8_shrink_strided(plane: ArrayView2<f64>, sigma: f64, threshold_mult: f64, stride: usize) -> Result<Array2<f64>> {
    let (h, w) = plane.dim();
    if h < BLOCK || w < BLOCK {
        return Err(Error::Dimension(format!("DCT shrink needs at least {BLOCK}x{BLOCK}, got {w}x{h}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("sigma must be non-negative, got {sigma}")));
    }
    if stride == 0 || stride > BLOCK {
        return Err(Error::Domain(format!("stride must be in 1..={BLOCK}, got {stride}")));
    }
    let threshold = threshold_mult * sigma;
    if threshold == 0.0 {
        return Ok(plane.to_owned());
    }
    let c = dct_matrix();
    let mut acc = Array2::<f64>::zeros((h, w));
    let mut count = Array2::<f64>::zeros((h, w));
    let xs = block_starts(w, stride);
    for y0 in block_starts(h, stride) {
        for &x0 in &xs {
            let mut b = [[0.0; BLOCK]; BLOCK];
            for (dy, row) in b.iter_mut().enumerate() {
                for (dx, v) in row.iter_mut().enumerate() {
                    *v = plane[[y0 + dy, x0 + dx]];
                }
            }
            let mut f = dct2(&c, &b);
            for (u, row) in f.iter_mut().enumerate() {
                for (v, coef) in row.iter_mut().enumerate() {
                    if (u, v) != (0, 0) && coef.abs() < threshold {
                        *coef = 0.0;
                    }
                }
            }
            let r = idct2(&c, &f);
            for (dy, row) in r.iter().enumerate() {
                for (dx, v) in row.iter().enumerate() {
                    acc[[y0 + dy, x0 + dx]] += v;
                    count[[y0 + dy, x0 + dx]] += 1.0;
                }
            }
        }
    }
    acc /= &count;
    Ok(acc)
}

/// One tile along an axis: `[start, end)` and the overlaps with its
/// neighbours on each side.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Span {
    start: usize,
    end: usize,
    overlap_before: usize,
    overlap_after: usize,
}

fn tile_spans(len: usize, tile: usize, overlap: usize) -> Vec<Span> {
    if len <= tile {
        return vec![Span { start: 0, end: len, overlap_before: 0, overlap_after: 0 }];
    }
    let step = tile - overlap;
    let mut starts = vec![];
    let mut s = 0;
    while s + tile < len {
        starts.push(s);
        s += step;
    }
    starts.push(len - tile);
    let mut spans: Vec<Span> = starts
        .iter()
        .map(|&s| Span { start: s, end: s + tile, overlap_before: 0, overlap_after: 0 })
        .collect();
    for i in 1..spans.len() {
        let o = spans[i - 1].end - spans[i].start;
        spans[i].overlap_before = o;
        spans[i - 1].overlap_after = o;
    }
    spans
}

/// Feather weight at distance `d` from a tile edge shared with an overlap of
/// width `o`: zero inside the guard band, linear across the middle, one past it.
fn ramp(d: usize, o: usize) -> f64 {
    let g = FEATHER_GUARD.min(o / 2);
    if d < g {
        0.0
    } else if d + g >= o {
        1.0
    } else {
        ((d - g) as f64 + 0.5) / (o - 2 * g) as f64
    }
}

fn span_weights(span: &Span) -> Vec<f64> {
    let n = span.end - span.start;
    (0..n)
        .map(|i| {
            let mut w = 1.0;
            if span.overlap_before > 0 {
                w *= ramp(i, span.overlap_before);
            }
            if span.overlap_after > 0 {
                w *= ramp(n - 1 - i, span.overlap_after);
            }
            w
        })
        .collect()
}

/// Run `f` over overlapping tiles of `plane` and blend the results.
///
/// Tiles are processed in parallel; contributions are summed in a fixed tile
/// order so the output does not depend on the thread count.
pub fn process_tiled<F>(plane: ArrayView2<f64>, tile: usize, overlap: usize, f: F) -> Result<Array2<f64>>
where
    F: Fn(ArrayView2<f64>) -> Result<Array2<f64>> + Sync,
{
    let (h, w) = plane.dim();
    let rows = tile_spans(h, tile, overlap);
    let cols = tile_spans(w, tile, overlap);
    let jobs: Vec<(Span, Span)> = rows.iter().flat_map(|r| cols.iter().map(move |c| (*r, *c))).collect();
    let results: Vec<Array2<f64>> = jobs
        .par_iter()
        .map(|(r, c)| f(plane.slice(s![r.start..r.end, c.start..c.end])))
        .collect::<Result<_>>()?;

    let mut acc = Array2::<f64>::zeros((h, w));
    let mut wsum = Array2::<f64>::zeros((h, w));
    let mut plain = Array2::<f64>::zeros((h, w));
    let mut count = Array2::<f64>::zeros((h, w));
    for ((r, c), out) in jobs.iter().zip(&results) {
        let wy = span_weights(r);
        let wx = span_weights(c);
        for (i, y) in (r.start..r.end).enumerate() {
            for (j, x) in (c.start..c.end).enumerate() {
                let v = out[[i, j]];
                let wt = wy[i] * wx[j];
                acc[[y, x]] += wt * v;
                wsum[[y, x]] += wt;
                plain[[y, x]] += v;
                count[[y, x]] += 1.0;
            }
        }
    }
    ndarray::Zip::from(&mut acc)
        .and(&wsum)
        .and(&plain)
        .and(&count)
        .for_each(|a, &ws, &p, &n| *a = if ws > 0.0 { *a / ws } else { p / n });
    Ok(acc)
}

/// Noise parameters for [`denoise_raw`]: one set for all channels or one per
/// channel (R, Gr, Gb, B). Values must already include the digital gain.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelParams {
    Shared(PgParams),
    PerChannel([PgParams; 4]),
}

impl ChannelParams {
    fn get(&self, c: usize) -> PgParams {
        match self {
            ChannelParams::Shared(p) => *p,
            ChannelParams::PerChannel(ps) => ps[c],
        }
    }

    pub fn from_slice(params: &[PgParams]) -> Result<Self> {
        match params {
            [p] => Ok(ChannelParams::Shared(*p)),
            [a, b, c, d] => Ok(ChannelParams::PerChannel([*a, *b, *c, *d])),
            [] => Err(Error::Profile("no noise parameters supplied".into())),
            other => Err(Error::Profile(format!("expected 1 or 4 parameter sets, got {}", other.len()))),
        }
    }
}

/// Denoise a normalized packed image.
pub fn denoise_raw(noisy: &PackedImage, params: &ChannelParams, cfg: &DenoiseConfig) -> Result<PackedImage> {
    cfg.validate()?;
    let mut stabilizers: Vec<Box<dyn Stabilizer>> = Vec::with_capacity(4);
    let mut sigmas = [0.0; 4];
    for c in 0..4 {
        let p = params.get(c);
        p.validate().map_err(|e| Error::Profile(format!("channel {c}: {e}")))?;
        let range = noisy.meta.range(c);
        match cfg.transform {
            TransformKind::Gat => {
                stabilizers.push(Box::new(Gat(p)));
                sigmas[c] = 1.0;
            }
            TransformKind::Ksigma => {
                let ks = KSigma(p);
                // Unit-gain domain: variance equals mean, so use the plane's mean level.
                let mean = stats::sum(noisy.plane(c).iter().map(|v| ks.forward(v * range))) / noisy.plane(c).len() as f64;
                sigmas[c] = mean.max(f64::MIN_POSITIVE).sqrt();
                stabilizers.push(Box::new(ks));
            }
            TransformKind::None => {
                stabilizers.push(Box::new(Identity));
                sigmas[c] = p.sigma;
            }
        }
    }
    let refs: Vec<&dyn Stabilizer> = stabilizers.iter().map(|b| b.as_ref()).collect();
    denoise_with(noisy, &refs, sigmas, cfg)
}

/// Denoise with caller-supplied transforms and post-transform noise levels,
/// one per channel.
pub fn denoise_with(
    noisy: &PackedImage,
    stabilizers: &[&dyn Stabilizer],
    sigmas: [f64; 4],
    cfg: &DenoiseConfig,
) -> Result<PackedImage> {
    cfg.validate()?;
    if noisy.space != ValueSpace::Normalized {
        return Err(Error::Domain("denoiser expects a normalized image".into()));
    }
    if stabilizers.len() != 4 {
        return Err(Error::Profile(format!("expected 4 channel transforms, got {}", stabilizers.len())));
    }
    if noisy.width() < BLOCK || noisy.height() < BLOCK {
        return Err(Error::Dimension(format!(
            "planes {}x{} smaller than {BLOCK}x{BLOCK}",
            noisy.width(),
            noisy.height()
        )));
    }
    let clip_hi = noisy.clip_hi;
    let planes: Vec<Array2<f64>> = (0..4)
        .into_par_iter()
        .map(|c| {
            let range = noisy.meta.range(c);
            let st = stabilizers[c];
            let t = noisy.plane(c).mapv(|v| st.forward(v * range));
            let shrunk = process_tiled(t.view(), cfg.tile, cfg.overlap, |tile| {
                dct8_shrink_strided(tile, sigmas[c], cfg.threshold_mult, cfg.stride)
            })?;
            Ok(shrunk.mapv(|t| (st.inverse(t) / range).clamp(0.0, clip_hi)))
        })
        .collect::<Result<_>>()?;
    let planes: [Array2<f64>; 4] = planes.try_into().expect("four planes");
    noisy.with_planes(planes)
}
