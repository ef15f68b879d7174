//! Parameter and multiply-accumulate accounting for network descriptions,
//! checked against the submission efficiency limits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_PARAMS: u64 = 15_000_000;
/// Exclusive bound.
pub const MAX_MACS: u64 = 150_000_000_000;
pub const REFERENCE_INPUT: [usize; 4] = [1, 4, 512, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d,
    /// Bayer-group convolution: one independent kernel per CFA phase.
    Bgc,
    Depthwise,
    Pointwise,
    Elementwise,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::Bgc => "bgc",
            LayerKind::Depthwise => "depthwise",
            LayerKind::Pointwise => "pointwise",
            LayerKind::Elementwise => "elementwise",
        }
    }
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_ch: usize,
    /// Defaults to `in_ch`.
    #[serde(default)]
    pub out_ch: Option<usize>,
    #[serde(default = "one")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "yes")]
    pub bias: bool,
    #[serde(default = "two")]
    pub period_n: usize,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self { kind, in_ch, out_ch: Some(out_ch), kernel, stride: 1, bias: true, period_n: 2 }
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch.unwrap_or(self.in_ch)
    }

    pub fn validate(&self) -> Result<()> {
        let out = self.out_channels();
        if self.in_ch == 0 || out == 0 || self.kernel == 0 || self.stride == 0 || self.period_n == 0 {
            return Err(Error::Spec(format!("{}: channels, kernel, stride and period must be >= 1", self.kind.name())));
        }
        match self.kind {
            LayerKind::Depthwise | LayerKind::Elementwise if out != self.in_ch => Err(Error::Spec(format!(
                "{} layer needs in_ch == out_ch, got {} -> {out}",
                self.kind.name(),
                self.in_ch
            ))),
            LayerKind::Pointwise if self.kernel != 1 => {
                Err(Error::Spec(format!("pointwise layer has kernel {}", self.kernel)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub layers: Vec<LayerSpec>,
    /// Declares that the submission combines several models.
    #[serde(default)]
    pub ensemble: bool,
    #[serde(default = "reference_input")]
    pub input: [usize; 4],
}

fn reference_input() -> [usize; 4] {
    REFERENCE_INPUT
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelSpec> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Counting conventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountOptions {
    /// Include bias terms in the parameter count.
    pub count_bias: bool,
}

impl Default for CountOptions {
    fn default() -> Self {
        Self { count_bias: true }
    }
}

pub fn layer_params(layer: &LayerSpec, opts: CountOptions) -> Result<u64> {
    layer.validate()?;
    let (i, o, k) = (layer.in_ch as u64, layer.out_channels() as u64, layer.kernel as u64);
    let b = if layer.bias && opts.count_bias { 1 } else { 0 };
    Ok(match layer.kind {
        LayerKind::Conv2d => i * o * k * k + b * o,
        LayerKind::Bgc => {
            let n = layer.period_n as u64;
            n * n * (i * o * k * k + b * o)
        }
        LayerKind::Depthwise => i * k * k + b * i,
        LayerKind::Pointwise => i * o + b * o,
        LayerKind::Elementwise => 0,
    })
}

pub fn count_params(layers: &[LayerSpec], opts: CountOptions) -> Result<u64> {
    layers.iter().map(|l| layer_params(l, opts)).sum()
}

fn divide(dim: usize, by: usize, what: &str, layer: usize) -> Result<usize> {
    if !dim.is_multiple_of(by) || dim / by == 0 {
        return Err(Error::Spec(format!("layer {layer}: {what} {dim} not divisible by {by}")));
    }
    Ok(dim / by)
}

/// MACs of one layer on a `(channels, h, w)` input, with its output shape.
/// Same padding; bias adds no MACs.
pub fn layer_macs(layer: &LayerSpec, shape: (usize, usize, usize), index: usize) -> Result<(u64, (usize, usize, usize))> {
    layer.validate()?;
    let (c, h, w) = shape;
    if c != layer.in_ch {
        return Err(Error::Spec(format!("layer {index}: expects {} channels, input has {c}", layer.in_ch)));
    }
    let (i, o, k) = (layer.in_ch as u64, layer.out_channels() as u64, layer.kernel as u64);
    let s = layer.stride;
    Ok(match layer.kind {
        LayerKind::Bgc => {
            let n = layer.period_n;
            let (sh, sw) = (divide(h, n, "height", index)?, divide(w, n, "width", index)?);
            let (oh, ow) = (divide(sh, s, "sub-height", index)?, divide(sw, s, "sub-width", index)?);
            let groups = (n * n) as u64;
            (groups * i * o * k * k * (oh * ow) as u64, (layer.out_channels(), oh * n, ow * n))
        }
        _ => {
            let (oh, ow) = (divide(h, s, "height", index)?, divide(w, s, "width", index)?);
            let pos = (oh * ow) as u64;
            let macs = match layer.kind {
                LayerKind::Conv2d => i * o * k * k * pos,
                LayerKind::Depthwise => i * k * k * pos,
                LayerKind::Pointwise => i * o * pos,
                _ => 0,
            };
            (macs, (layer.out_channels(), oh, ow))
        }
    })
}

pub fn count_macs(layers: &[LayerSpec], input: [usize; 4]) -> Result<u64> {
    Ok(breakdown(layers, input, CountOptions::default())?.iter().map(|l| l.macs).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub index: usize,
    pub kind: LayerKind,
    pub params: u64,
    pub macs: u64,
    pub output: (usize, usize, usize),
}

fn breakdown(layers: &[LayerSpec], input: [usize; 4], opts: CountOptions) -> Result<Vec<LayerReport>> {
    let [batch, c, h, w] = input;
    if batch == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Spec(format!("input shape {input:?} has a zero dimension")));
    }
    let mut shape = (c, h, w);
    let mut out = Vec::with_capacity(layers.len());
    for (index, layer) in layers.iter().enumerate() {
        let (macs, next) = layer_macs(layer, shape, index)?;
        out.push(LayerReport {
            index,
            kind: layer.kind,
            params: layer_params(layer, opts)?,
            macs: macs * batch as u64,
            output: next,
        });
        shape = next;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub total_params: u64,
    pub total_macs: u64,
    pub ensemble: bool,
    pub layers: Vec<LayerReport>,
    pub pass: bool,
    pub violations: Vec<String>,
}

impl BudgetReport {
    /// FLOPs under the two-per-MAC convention.
    pub fn flops(&self) -> u64 {
        2 * self.total_macs
    }
}

/// Limits check on raw totals. Returns every violated bound with its margin.
pub fn check_totals(params: u64, macs: u64, ensemble: bool) -> Vec<String> {
    let mut v = vec![];
    if params > MAX_PARAMS {
        v.push(format!("parameters {params} exceed the {MAX_PARAMS} limit by {}", params - MAX_PARAMS));
    }
    if macs >= MAX_MACS {
        v.push(format!("MACs {macs} are not below {MAX_MACS} (over by {})", macs - MAX_MACS));
    }
    if ensemble {
        v.push("ensembles of multiple models are not allowed".to_string());
    }
    v
}

pub fn check_constraints(report: &BudgetReport) -> (bool, Vec<String>) {
    let v = check_totals(report.total_params, report.total_macs, report.ensemble);
    (v.is_empty(), v)
}

pub fn budget_report(model: &ModelSpec, opts: CountOptions) -> Result<BudgetReport> {
    let layers = breakdown(&model.layers, model.input, opts)?;
    let total_params = layers.iter().map(|l| l.params).sum();
    let total_macs = layers.iter().map(|l| l.macs).sum();
    let violations = check_totals(total_params, total_macs, model.ensemble);
    Ok(BudgetReport { total_params, total_macs, ensemble: model.ensemble, layers, pass: violations.is_empty(), violations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Count weights by enumerating every tensor element.
    fn brute_params(l: &LayerSpec) -> u64 {
        let groups = if l.kind == LayerKind::Bgc { l.period_n * l.period_n } else { 1 };
        let (i, o, k) = (l.in_ch, l.out_channels(), l.kernel);
        let mut n = 0u64;
        for _ in 0..groups {
            match l.kind {
                LayerKind::Conv2d | LayerKind::Bgc => {
                    for _ in 0..o {
                        for _ in 0..i {
                            for _ in 0..k * k {
                                n += 1;
                            }
                        }
                        if l.bias {
                            n += 1;
                        }
                    }
                }
                LayerKind::Depthwise => {
                    for _ in 0..i {
                        n += (k * k) as u64 + l.bias as u64;
                    }
                }
                LayerKind::Pointwise => {
                    for _ in 0..o {
                        n += i as u64 + l.bias as u64;
                    }
                }
                LayerKind::Elementwise => {}
            }
        }
        n
    }

    /// Walk every output position and every tap that lands inside the
    /// zero-padded input window.
    fn brute_macs(l: &LayerSpec, h: usize, w: usize) -> u64 {
        let (i, o, k, s) = (l.in_ch, l.out_channels(), l.kernel, l.stride);
        let conv = |hh: usize, ww: usize, per_tap: usize| -> u64 {
            let mut n = 0u64;
            for _oy in (0..hh).step_by(s) {
                for _ox in (0..ww).step_by(s) {
                    for _tap in 0..k * k {
                        n += per_tap as u64;
                    }
                }
            }
            n
        };
        match l.kind {
            LayerKind::Conv2d => conv(h, w, i * o),
            LayerKind::Depthwise => conv(h, w, i),
            LayerKind::Pointwise => conv(h, w, i * o),
            LayerKind::Bgc => {
                let n = l.period_n;
                (0..n * n).map(|_| conv(h / n, w / n, i * o)).sum()
            }
            LayerKind::Elementwise => 0,
        }
    }

    #[test]
    fn parameter_examples() {
        let opts = CountOptions::default();
        let conv = LayerSpec::new(LayerKind::Conv2d, 4, 32, 3);
        assert_eq!(layer_params(&conv, opts).unwrap(), 1184);
        assert_eq!(brute_params(&conv), 1184);
        let bgc = LayerSpec { kind: LayerKind::Bgc, ..conv };
        assert_eq!(layer_params(&bgc, opts).unwrap(), 4736);
        let ew = LayerSpec { kind: LayerKind::Elementwise, out_ch: None, ..conv };
        assert_eq!(layer_params(&ew, opts).unwrap(), 0);
        assert_eq!(layer_params(&conv, CountOptions { count_bias: false }).unwrap(), 1152);
    }

    #[test]
    fn mac_examples() {
        let conv = LayerSpec::new(LayerKind::Conv2d, 4, 32, 3);
        assert_eq!(count_macs(&[conv], REFERENCE_INPUT).unwrap(), 301_989_888);
        assert_eq!(brute_macs(&conv, 8, 8) * (512 * 512 / 64), 301_989_888);
        let bgc = LayerSpec { kind: LayerKind::Bgc, ..conv };
        assert_eq!(count_macs(&[bgc], REFERENCE_INPUT).unwrap(), 301_989_888);
        let strided = LayerSpec { stride: 2, ..conv };
        assert_eq!(count_macs(&[strided], REFERENCE_INPUT).unwrap(), 301_989_888 / 4);
    }

    #[test]
    fn shapes_thread_through_layers() {
        let layers = [
            LayerSpec::new(LayerKind::Conv2d, 4, 16, 3),
            LayerSpec { stride: 2, ..LayerSpec::new(LayerKind::Depthwise, 16, 16, 3) },
            LayerSpec::new(LayerKind::Pointwise, 16, 8, 1),
            LayerSpec::new(LayerKind::Elementwise, 8, 8, 1),
        ];
        let r = budget_report(&ModelSpec { name: None, layers: layers.to_vec(), ensemble: false, input: [1, 4, 16, 16] }, CountOptions::default())
            .unwrap();
        assert_eq!(r.layers[1].output, (16, 8, 8));
        assert_eq!(r.layers[2].macs, 16 * 8 * 64);
        assert_eq!(r.total_macs, r.layers.iter().map(|l| l.macs).sum::<u64>());
        assert!(r.pass);
        let bad = [LayerSpec::new(LayerKind::Conv2d, 3, 16, 3)];
        assert!(matches!(count_macs(&bad, [1, 4, 16, 16]), Err(Error::Spec(_))));
        let odd = [LayerSpec { stride: 2, ..LayerSpec::new(LayerKind::Conv2d, 4, 4, 3) }];
        assert!(matches!(count_macs(&odd, [1, 4, 5, 6]), Err(Error::Spec(_))));
        let dw = LayerSpec::new(LayerKind::Depthwise, 4, 8, 3);
        assert!(matches!(dw.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn constraint_boundaries() {
        assert!(check_totals(15_000_000, 1, false).is_empty());
        assert_eq!(check_totals(15_000_001, 1, false).len(), 1);
        let v = check_totals(1, 150_000_000_000, false);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("over by 0"));
        assert!(check_totals(1, 149_999_999_999, false).is_empty());
        assert!(check_totals(14_920_000, 93_930_000_000, false).is_empty());
        assert_eq!(check_totals(20_000_000, 200_000_000_000, true).len(), 3);
    }

    #[test]
    fn model_json_defaults() {
        let m: ModelSpec = serde_json::from_str(
            r#"{"layers":[{"kind":"bgc","in_ch":4,"out_ch":32,"kernel":3},{"kind":"elementwise","in_ch":32}]}"#,
        )
        .unwrap();
        assert_eq!(m.input, REFERENCE_INPUT);
        assert!(!m.ensemble);
        let r = budget_report(&m, CountOptions::default()).unwrap();
        assert_eq!(r.total_params, 4736);
        assert_eq!(r.total_macs, 301_989_888);
        assert_eq!(r.flops(), 2 * 301_989_888);
    }

    proptest! {
        #[test]
        fn analytic_matches_enumeration(
            kind in prop_oneof![Just(LayerKind::Conv2d), Just(LayerKind::Bgc), Just(LayerKind::Depthwise), Just(LayerKind::Pointwise), Just(LayerKind::Elementwise)],
            i in 1usize..6, o in 1usize..6, k in 1usize..4, s in 1usize..3, bias: bool,
            hh in 0usize..8, ww in 0usize..8,
        ) {
            let o = if matches!(kind, LayerKind::Depthwise | LayerKind::Elementwise) { i } else { o };
            let k = if kind == LayerKind::Pointwise { 1 } else { k };
            let l = LayerSpec { kind, in_ch: i, out_ch: Some(o), kernel: k, stride: s, bias, period_n: 2 };
            // H, W <= 16 and divisible by everything the layer needs.
            let unit = 2 * s;
            let (h, w) = (unit * (1 + hh % (16 / unit)), unit * (1 + ww % (16 / unit)));
            prop_assert_eq!(layer_params(&l, CountOptions::default()).unwrap(), brute_params(&l));
            prop_assert_eq!(count_macs(&[l], [1, i, h, w]).unwrap(), brute_macs(&l, h, w));
        }

        #[test]
        fn bgc_equals_conv(i in 1usize..64, o in 1usize..64, k in 1usize..8, n in 1usize..4, hh in 1usize..64, ww in 1usize..64) {
            let conv = LayerSpec { kind: LayerKind::Conv2d, in_ch: i, out_ch: Some(o), kernel: k, stride: 1, bias: true, period_n: n };
            let bgc = LayerSpec { kind: LayerKind::Bgc, ..conv };
            let input = [1, i, hh * n, ww * n];
            prop_assert_eq!(count_macs(&[bgc], input).unwrap(), count_macs(&[conv], input).unwrap());
            let opts = CountOptions::default();
            prop_assert_eq!(layer_params(&bgc, opts).unwrap(), (n * n) as u64 * layer_params(&conv, opts).unwrap());
        }
    }
}
