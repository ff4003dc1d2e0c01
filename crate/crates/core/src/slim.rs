//! Width-configurable layers.
//!
//! A slimmable layer stores its weights at maximum width and, for a width
//! multiplier α, runs on the leading `ceil(α * c)` channels of each slimmed
//! side. Channels outside that prefix are never read at width α, so they also
//! receive no gradient from a pass at that width.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Graph, NodeId, ParamId};
use crate::ops::{self, Activation, BnParams, ConvGeometry, MacCounter};
use crate::tensor::{Element, Result as TensorResult, Shape, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WidthError {
    #[error("width multiplier must lie in (0, 1], got {0}")]
    OutOfRange(String),
    #[error("cannot parse width multiplier {0:?}")]
    Parse(String),
    #[error("width set is empty")]
    Empty,
    #[error("width {0} appears more than once")]
    Duplicate(WidthMultiplier),
    #[error("largest width must be 1.0, got {0}")]
    MaxNotOne(WidthMultiplier),
    #[error("sandwich sample of {requested} widths from a set of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("sandwich sample needs at least 2 widths, got n={0}")]
    SampleTooSmall(usize),
}

/// Fraction of active channels, held as an exact reduced fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WidthMultiplier {
    num: u32,
    den: u32,
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl WidthMultiplier {
    pub const FULL: WidthMultiplier = WidthMultiplier { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self, WidthError> {
        if num == 0 || den == 0 || num > den {
            return Err(WidthError::OutOfRange(format!("{num}/{den}")));
        }
        let g = gcd(num, den);
        Ok(WidthMultiplier {
            num: num / g,
            den: den / g,
        })
    }

    /// Nearest fraction with denominator 10^6, so decimal literals such as
    /// 0.33 become exactly 33/100.
    pub fn from_f64(alpha: f64) -> Result<Self, WidthError> {
        if !(alpha > 0.0 && alpha <= 1.0 + 1e-9) {
            return Err(WidthError::OutOfRange(alpha.to_string()));
        }
        let num = (alpha * 1e6).round() as u32;
        Self::new(num.min(1_000_000), 1_000_000)
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn numer(self) -> u32 {
        self.num
    }

    pub fn denom(self) -> u32 {
        self.den
    }

    pub fn is_full(self) -> bool {
        self.num == self.den
    }

    /// Active channels for a layer of maximum width `c_max`: `ceil(α * c_max)`
    /// clamped to `[1, c_max]`.
    pub fn resolve(self, c_max: usize) -> usize {
        resolve_width(self, c_max)
    }
}

/// `ceil(α * c_max)`, clamped to `[1, c_max]`.
pub fn resolve_width(alpha: WidthMultiplier, c_max: usize) -> usize {
    let prod = alpha.num as u64 * c_max as u64;
    let n = prod.div_ceil(alpha.den as u64) as usize;
    n.clamp(1, c_max.max(1))
}

impl Ord for WidthMultiplier {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num as u64 * other.den as u64).cmp(&(other.num as u64 * self.den as u64))
    }
}

impl PartialOrd for WidthMultiplier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for WidthMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = format!("{:.6}", self.as_f64());
        let s = s.trim_end_matches('0');
        let s = s.strip_suffix('.').map_or(s.to_string(), |t| format!("{t}.0"));
        f.write_str(&s)
    }
}

impl FromStr for WidthMultiplier {
    type Err = WidthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| WidthError::Parse(s.into()))?;
            let d = d.trim().parse().map_err(|_| WidthError::Parse(s.into()))?;
            return Self::new(n, d);
        }
        let v: f64 = s.parse().map_err(|_| WidthError::Parse(s.into()))?;
        Self::from_f64(v)
    }
}

/// Sorted, duplicate-free set of widths a model is trained to run at.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WidthSet {
    widths: Vec<WidthMultiplier>,
}

impl WidthSet {
    /// Requires the largest width to be 1.0.
    pub fn new(widths: impl IntoIterator<Item = WidthMultiplier>) -> Result<Self, WidthError> {
        let set = Self::with_any_max(widths)?;
        if !set.max().is_full() {
            return Err(WidthError::MaxNotOne(set.max()));
        }
        Ok(set)
    }

    pub fn with_any_max(widths: impl IntoIterator<Item = WidthMultiplier>) -> Result<Self, WidthError> {
        let mut widths: Vec<_> = widths.into_iter().collect();
        if widths.is_empty() {
            return Err(WidthError::Empty);
        }
        widths.sort();
        if let Some(w) = widths.windows(2).find(|p| p[0] == p[1]) {
            return Err(WidthError::Duplicate(w[0]));
        }
        Ok(WidthSet { widths })
    }

    pub fn parse_list(s: &str) -> Result<Self, WidthError> {
        let widths = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<WidthMultiplier>, _>>()?;
        Self::new(widths)
    }

    pub fn min(&self) -> WidthMultiplier {
        self.widths[0]
    }

    pub fn max(&self) -> WidthMultiplier {
        self.widths[self.widths.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn contains(&self, alpha: WidthMultiplier) -> bool {
        self.widths.binary_search(&alpha).is_ok()
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = WidthMultiplier> + '_ {
        self.widths.iter().copied()
    }

    pub fn as_slice(&self) -> &[WidthMultiplier] {
        &self.widths
    }
}

impl Default for WidthSet {
    fn default() -> Self {
        WidthSet::parse_list("0.25,0.33,0.5,0.66,1.0").expect("default width set")
    }
}

impl fmt::Display for WidthSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.widths.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// Sandwich-rule sample: the smallest and largest widths plus `n - 2`
/// distinct interior widths drawn uniformly without replacement, ascending.
pub fn sandwich_sample<R: Rng + ?Sized>(set: &WidthSet, n: usize, rng: &mut R) -> Result<Vec<WidthMultiplier>, WidthError> {
    if n > set.len() {
        return Err(WidthError::SampleTooLarge {
            requested: n,
            available: set.len(),
        });
    }
    if set.len() == 1 && n == 1 {
        return Ok(vec![set.max()]);
    }
    if n < 2 {
        return Err(WidthError::SampleTooSmall(n));
    }
    let interior = &set.as_slice()[1..set.len() - 1];
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, interior.len(), n - 2).into_vec();
    picked.sort_unstable();
    let mut out = Vec::with_capacity(n);
    out.push(set.min());
    out.extend(picked.into_iter().map(|i| interior[i]));
    out.push(set.max());
    Ok(out)
}

/// Convolution stored at maximum width and executed on a channel prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct SlimmableConv {
    /// `[c_out_max, c_in_max, k, k]`
    pub weight: Tensor<f64>,
    /// `(1, c_out_max, 1, 1)`
    pub bias: Tensor<f64>,
    pub slim_in: bool,
    pub slim_out: bool,
    pub geom: ConvGeometry,
}

impl SlimmableConv {
    pub fn new(weight: Tensor<f64>, bias: Tensor<f64>, geom: ConvGeometry, slim_in: bool, slim_out: bool) -> TensorResult<Self> {
        let ws = weight.shape();
        if bias.numel() != ws.n {
            return Err(TensorError::ShapeMismatch {
                op: "slimmable_conv",
                dim: "bias length",
                expected: ws.n,
                actual: bias.numel(),
            });
        }
        Ok(SlimmableConv {
            weight,
            bias,
            slim_in,
            slim_out,
            geom,
        })
    }

    pub fn c_in_max(&self) -> usize {
        self.weight.shape().c
    }

    pub fn c_out_max(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn active_in(&self, alpha: WidthMultiplier) -> usize {
        if self.slim_in {
            resolve_width(alpha, self.c_in_max())
        } else {
            self.c_in_max()
        }
    }

    pub fn active_out(&self, alpha: WidthMultiplier) -> usize {
        if self.slim_out {
            resolve_width(alpha, self.c_out_max())
        } else {
            self.c_out_max()
        }
    }

    /// Active weight and bias slices at width α, cast to `T`.
    pub fn active_params<T: Element>(&self, alpha: WidthMultiplier) -> TensorResult<(Tensor<T>, Vec<T>)> {
        let (ci, co) = (self.active_in(alpha), self.active_out(alpha));
        let w = self.weight.slice_prefix(co, ci)?.cast::<T>();
        let b = self.bias.data()[..co].iter().map(|&v| T::from_f64(v)).collect();
        Ok((w, b))
    }

    fn check_input(&self, x: Shape, alpha: WidthMultiplier) -> TensorResult<()> {
        let expected = self.active_in(alpha);
        if x.c != expected {
            return Err(TensorError::ShapeMismatch {
                op: "slim_forward",
                dim: "input channels",
                expected,
                actual: x.c,
            });
        }
        Ok(())
    }

    /// Convolution on the active prefix slice at width α.
    pub fn forward<T: Element>(&self, x: &Tensor<T>, alpha: WidthMultiplier, counter: Option<&MacCounter>) -> TensorResult<Tensor<T>> {
        self.check_input(x.shape(), alpha)?;
        let (w, b) = self.active_params::<T>(alpha)?;
        ops::conv2d_counted(x, &w, &b, self.geom, counter)
    }

    pub fn out_dims(&self, in_h: usize, in_w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            self.geom.out_dim(in_h, k).unwrap_or(0),
            self.geom.out_dim(in_w, k).unwrap_or(0),
        )
    }

    /// `out_h * out_w * k^2 * n_in * n_out` with active counts per α.
    pub fn mac_count(&self, alpha: WidthMultiplier, out_h: usize, out_w: usize) -> u64 {
        mac_count(self, alpha, out_h, out_w)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

pub fn mac_count(layer: &SlimmableConv, alpha: WidthMultiplier, out_h: usize, out_w: usize) -> u64 {
    let k = layer.kernel() as u64;
    out_h as u64 * out_w as u64 * k * k * layer.active_in(alpha) as u64 * layer.active_out(alpha) as u64
}

/// Batch norm whose single set of per-channel tensors is sliced by prefix to
/// match whatever channel count arrives.
#[derive(Debug, Clone, PartialEq)]
pub struct SlimBatchNorm {
    pub gamma: Tensor<f64>,
    pub beta: Tensor<f64>,
    pub running_mean: Tensor<f64>,
    pub running_var: Tensor<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl SlimBatchNorm {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        SlimBatchNorm {
            gamma: Tensor::vector(vec![1.0; channels]),
            beta: Tensor::vector(vec![0.0; channels]),
            running_mean: Tensor::vector(vec![0.0; channels]),
            running_var: Tensor::vector(vec![1.0; channels]),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn check(&self, c: usize) -> TensorResult<()> {
        if c > self.channels() {
            return Err(TensorError::ShapeMismatch {
                op: "slim_batch_norm",
                dim: "channels",
                expected: self.channels(),
                actual: c,
            });
        }
        Ok(())
    }

    pub fn forward_infer<T: Element>(&self, x: &Tensor<T>) -> TensorResult<Tensor<T>> {
        let c = x.shape().c;
        self.check(c)?;
        let cast = |t: &Tensor<f64>| -> Vec<T> { t.data()[..c].iter().map(|&v| T::from_f64(v)).collect() };
        let (g, b, m, v) = (cast(&self.gamma), cast(&self.beta), cast(&self.running_mean), cast(&self.running_var));
        ops::batch_norm_infer(
            x,
            &BnParams {
                gamma: &g,
                beta: &b,
                running_mean: &m,
                running_var: &v,
                eps: self.eps,
            },
        )
    }

    /// Folds batch statistics into the running prefix.
    pub fn absorb(&mut self, stats: &ops::BatchStats) {
        let c = stats.mean.len();
        ops::update_running(&mut self.running_mean.data_mut()[..c], &stats.mean, self.momentum);
        ops::update_running(&mut self.running_var.data_mut()[..c], &stats.var, self.momentum);
    }
}

/// How batch norm behaves in a graph forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics and update the running estimates.
    Train,
    /// Normalize by the running estimates.
    Infer,
}

/// conv → optional batch norm → optional activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub name: String,
    pub conv: SlimmableConv,
    pub bn: Option<SlimBatchNorm>,
    pub act: Option<Activation>,
}

/// Offsets of a block's tensors inside its parameter-id range.
pub const PARAMS_PER_BLOCK: usize = 4;
const WEIGHT: usize = 0;
const BIAS: usize = 1;
const GAMMA: usize = 2;
const BETA: usize = 3;

impl ConvBlock {
    pub fn forward_infer<T: Element>(&self, x: &Tensor<T>, alpha: WidthMultiplier, counter: Option<&MacCounter>) -> TensorResult<Tensor<T>> {
        let mut y = self.conv.forward(x, alpha, counter)?;
        if let Some(bn) = &self.bn {
            y = bn.forward_infer(&y)?;
        }
        if let Some(act) = self.act {
            y = ops::activation(&y, act);
        }
        Ok(y)
    }

    /// Records the block into `g`. With `trainable`, tensors enter as
    /// parameters `id_base + {0: weight, 1: bias, 2: gamma, 3: beta}`;
    /// otherwise as constants.
    pub fn forward_graph(
        &mut self,
        g: &mut Graph,
        x: NodeId,
        alpha: WidthMultiplier,
        bn_mode: BnMode,
        trainable: bool,
        id_base: ParamId,
    ) -> TensorResult<NodeId> {
        self.conv.check_input(g.value(x).shape(), alpha)?;
        let (ci, co) = (self.conv.active_in(alpha), self.conv.active_out(alpha));
        let leaf = |g: &mut Graph, t: &Tensor<f64>, off: usize| {
            if trainable {
                g.param(id_base + off, t)
            } else {
                g.input(t.clone())
            }
        };
        let w_full = leaf(g, &self.conv.weight, WEIGHT);
        let b_full = leaf(g, &self.conv.bias, BIAS);
        let w = g.slice_prefix(w_full, co, ci)?;
        let b = g.slice_prefix(b_full, 1, co)?;
        let mut y = g.conv2d(x, w, b, self.conv.geom)?;
        if let Some(bn) = &mut self.bn {
            let gm_full = leaf(g, &bn.gamma, GAMMA);
            let bt_full = leaf(g, &bn.beta, BETA);
            let gm = g.slice_prefix(gm_full, 1, co)?;
            let bt = g.slice_prefix(bt_full, 1, co)?;
            y = match bn_mode {
                BnMode::Train => {
                    let (y, stats) = g.batch_norm_train(y, gm, bt, bn.eps)?;
                    bn.absorb(&stats);
                    y
                }
                BnMode::Infer => g.batch_norm_infer(
                    y,
                    gm,
                    bt,
                    &bn.running_mean.data()[..co],
                    &bn.running_var.data()[..co],
                    bn.eps,
                )?,
            };
        }
        if let Some(act) = self.act {
            y = g.activation(y, act)?;
        }
        Ok(y)
    }

    /// Mutable access to the tensor registered as `id_base + offset`.
    pub fn param_mut(&mut self, offset: usize) -> Option<&mut Tensor<f64>> {
        match offset {
            WEIGHT => Some(&mut self.conv.weight),
            BIAS => Some(&mut self.conv.bias),
            GAMMA => self.bn.as_mut().map(|b| &mut b.gamma),
            BETA => self.bn.as_mut().map(|b| &mut b.beta),
            _ => None,
        }
    }

    /// Learnable tensors (conv weight and bias, gamma, beta).
    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.as_ref().map_or(0, |b| 2 * b.channels())
    }

    /// Every stored tensor with its name, statistics included.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<f64>, TensorRole)> {
        let mut out = vec![
            (format!("{}.weight", self.name), &self.conv.weight, TensorRole::Weight),
            (format!("{}.bias", self.name), &self.conv.bias, TensorRole::Weight),
        ];
        if let Some(bn) = &self.bn {
            out.push((format!("{}.bn.gamma", self.name), &bn.gamma, TensorRole::Weight));
            out.push((format!("{}.bn.beta", self.name), &bn.beta, TensorRole::Weight));
            out.push((format!("{}.bn.running_mean", self.name), &bn.running_mean, TensorRole::Statistic));
            out.push((format!("{}.bn.running_var", self.name), &bn.running_var, TensorRole::Statistic));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        let name = self.name.clone();
        let mut out = vec![
            (format!("{name}.weight"), &mut self.conv.weight),
            (format!("{name}.bias"), &mut self.conv.bias),
        ];
        if let Some(bn) = &mut self.bn {
            out.push((format!("{name}.bn.gamma"), &mut bn.gamma));
            out.push((format!("{name}.bn.beta"), &mut bn.beta));
            out.push((format!("{name}.bn.running_mean"), &mut bn.running_mean));
            out.push((format!("{name}.bn.running_var"), &mut bn.running_var));
        }
        out
    }
}

/// Whether a stored tensor is learned or a normalization statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    Statistic,
}

/// Where a layer sits in the split model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    Encoder,
    Compressor,
    Decompressor,
    Decoder,
}

impl Segment {
    /// Runs on the client (before the split).
    pub fn is_client(self) -> bool {
        matches!(self, Segment::Encoder | Segment::Compressor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMacs {
    pub name: String,
    pub segment: Segment,
    pub macs: u64,
}

/// Per-layer multiply-accumulate counts for one forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MacReport {
    pub layers: Vec<LayerMacs>,
}

impl MacReport {
    pub fn segment_total(&self, segment: Segment) -> u64 {
        self.layers.iter().filter(|l| l.segment == segment).map(|l| l.macs).sum()
    }

    /// Encoder plus compressor: what the client spends per inference.
    pub fn client_total(&self) -> u64 {
        self.layers.iter().filter(|l| l.segment.is_client()).map(|l| l.macs).sum()
    }

    pub fn total(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerMacs> {
        self.layers.iter().find(|l| l.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn w(s: &str) -> WidthMultiplier {
        s.parse().unwrap()
    }

    #[test]
    fn resolve_examples() {
        assert_eq!(resolve_width(WidthMultiplier::FULL, 64), 64);
        assert_eq!(resolve_width(w("0.25"), 64), 16);
        assert_eq!(resolve_width(w("0.33"), 48), 16);
        assert_eq!(resolve_width(w("0.01"), 3), 1);
    }

    #[test]
    fn multiplier_parsing_and_range() {
        assert_eq!(w("0.33"), WidthMultiplier::new(33, 100).unwrap());
        assert_eq!(w("1/3"), WidthMultiplier::new(2, 6).unwrap());
        assert!("0".parse::<WidthMultiplier>().is_err());
        assert!("1.5".parse::<WidthMultiplier>().is_err());
        assert!("abc".parse::<WidthMultiplier>().is_err());
        assert_eq!(w("0.5").to_string(), "0.5");
        assert_eq!(WidthMultiplier::FULL.to_string(), "1.0");
    }

    #[test]
    fn width_set_rules() {
        let set = WidthSet::default();
        assert_eq!(set.len(), 5);
        assert_eq!(set.min(), w("0.25"));
        assert_eq!(set.max(), WidthMultiplier::FULL);
        assert_eq!(WidthSet::parse_list("1.0,0.5").unwrap().min(), w("0.5"));
        assert_eq!(WidthSet::parse_list("0.5,0.5,1").unwrap_err(), WidthError::Duplicate(w("0.5")));
        assert_eq!(WidthSet::new([]).unwrap_err(), WidthError::Empty);
        assert!(matches!(WidthSet::parse_list("0.5,0.75"), Err(WidthError::MaxNotOne(_))));
        assert!(WidthSet::with_any_max([w("0.5")]).is_ok());
    }

    #[test]
    fn sandwich_without_interior() {
        let set = WidthSet::parse_list("0.25,1.0").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sandwich_sample(&set, 2, &mut rng).unwrap(), vec![w("0.25"), WidthMultiplier::FULL]);
    }

    #[test]
    fn sandwich_with_one_interior() {
        let set = WidthSet::parse_list("0.25,0.5,0.75,1.0").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = sandwich_sample(&set, 3, &mut rng).unwrap();
            assert_eq!(s.len(), 3);
            assert_eq!(s[0], w("0.25"));
            assert_eq!(s[2], WidthMultiplier::FULL);
            assert!(s[1] == w("0.5") || s[1] == w("0.75"));
        }
    }

    #[test]
    fn sandwich_is_replayable() {
        let set = WidthSet::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sandwich_sample(&set, 4, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn sandwich_contract_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = WidthSet::new([WidthMultiplier::FULL]).unwrap();
        assert_eq!(
            sandwich_sample(&one, 2, &mut rng).unwrap_err(),
            WidthError::SampleTooLarge { requested: 2, available: 1 }
        );
        assert_eq!(
            sandwich_sample(&WidthSet::default(), 1, &mut rng).unwrap_err(),
            WidthError::SampleTooSmall(1)
        );
        assert_eq!(sandwich_sample(&one, 1, &mut rng).unwrap(), vec![WidthMultiplier::FULL]);
    }

    fn conv(cin: usize, cout: usize, k: usize, slim_in: bool, slim_out: bool) -> SlimmableConv {
        let weight = Tensor::from_fn(Shape::new(cout, cin, k, k), |i| ((i * 37 % 101) as f64 - 50.0) / 50.0);
        let bias = Tensor::vector((0..cout).map(|i| i as f64 * 0.1).collect());
        SlimmableConv::new(weight, bias, ConvGeometry::new(1, k / 2), slim_in, slim_out).unwrap()
    }

    #[test]
    fn mac_count_examples() {
        let l = conv(64, 64, 3, true, true);
        assert_eq!(l.mac_count(WidthMultiplier::FULL, 1, 1), 36864);
        assert_eq!(l.mac_count(w("0.5"), 1, 1), 9216);
        let first = conv(3, 64, 3, false, true);
        assert_eq!(first.mac_count(w("0.5"), 1, 1), 864);
    }

    #[test]
    fn full_width_matches_plain_conv() {
        let l = conv(4, 6, 3, true, true);
        let x = Tensor::<f64>::from_fn(Shape::new(2, 4, 5, 5), |i| (i as f64).sin());
        let y = l.forward(&x, WidthMultiplier::FULL, None).unwrap();
        let y_ref = ops::conv2d(&x, &l.weight, l.bias.data(), l.geom).unwrap();
        assert_eq!(y, y_ref);
    }

    #[test]
    fn half_width_matches_dense_slice() {
        let l = conv(8, 8, 3, true, true);
        let x = Tensor::<f64>::from_fn(Shape::new(1, 4, 6, 6), |i| (i as f64 * 0.7).cos());
        let y = l.forward(&x, w("0.5"), None).unwrap();
        let ws = l.weight.slice_prefix(4, 4).unwrap();
        let y_ref = ops::conv2d(&x, &ws, &l.bias.data()[..4], l.geom).unwrap();
        assert_eq!(y.shape().c, 4);
        for (a, b) in y.data().iter().zip(y_ref.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn image_input_is_never_slimmed() {
        let l = conv(3, 8, 3, false, true);
        let x = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        let y = l.forward(&x, w("0.5"), None).unwrap();
        assert_eq!(y.shape().c, 4);
        let bad = Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4));
        assert!(matches!(
            l.forward(&bad, w("0.5"), None),
            Err(TensorError::ShapeMismatch { dim: "input channels", expected: 3, actual: 2, .. })
        ));
    }
}
