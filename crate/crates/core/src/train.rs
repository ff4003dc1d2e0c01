//! Teacher training, sandwich-rule feature distillation, batch-norm
//! recalibration and evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::codec::{self, CodecError};
use crate::data::{DataError, Split};
use crate::metrics::toy_ap;
use crate::ops::{self, BnParams};
use crate::optim::{OptimError, Sgd};
use crate::slim::{sandwich_sample, BnMode, ConvBlock, WidthError, WidthMultiplier, WidthSet};
use crate::tensor::{Shape, Tensor, TensorError};
use crate::zoo::{ModelError, SplitStudent, TeacherNet};

/// Number of distillation taps: decompressor output and decoder block output.
pub const TAPS: usize = 2;
const TAP_NAMES: [&str; TAPS] = ["decompressor", "decoder"];
const EVAL_CHUNK: usize = 50;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Width(#[from] WidthError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("non-finite distillation loss at width {alpha}, batch {batch}")]
    NonFiniteLoss { alpha: WidthMultiplier, batch: usize },
    #[error("tap {tap}: student feature {student} does not match teacher feature {teacher}")]
    TapShape { tap: String, student: Shape, teacher: Shape },
    #[error("expected {expected} taps, got {actual}")]
    TapCount { expected: usize, actual: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    Config(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Widths sampled per batch, including the smallest and largest.
    pub n_sandwich: usize,
    pub width_set: WidthSet,
    pub lr0: f64,
    /// The learning rate halves every this many epochs.
    pub halving_period: usize,
    pub momentum: f64,
    pub post_bn_recalibrate: bool,
    pub tap_weights: [f64; TAPS],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 8,
            n_sandwich: 3,
            width_set: WidthSet::default(),
            lr0: 0.1,
            halving_period: 3,
            momentum: 0.9,
            post_bn_recalibrate: false,
            tap_weights: [1.0; TAPS],
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the halving period of the given mode.
    pub fn for_mode(mode: crate::zoo::ConfigMode) -> Self {
        TrainConfig {
            halving_period: match mode {
                crate::zoo::ConfigMode::BandwidthOnly => 3,
                crate::zoo::ConfigMode::FullConfig => 2,
            },
            ..Self::default()
        }
    }

    /// Defaults for teacher training (cross-entropy needs a smaller step).
    pub fn teacher() -> Self {
        TrainConfig {
            lr0: 0.02,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.n_sandwich == 0 || self.halving_period == 0 {
            return bad("epochs, batch size, sandwich size and halving period must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if self.tap_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("tap weights must be finite and non-negative".into());
        }
        if self.n_sandwich > self.width_set.len() {
            return Err(WidthError::SampleTooLarge {
                requested: self.n_sandwich,
                available: self.width_set.len(),
            }
            .into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * 0.5f64.powi((epoch / self.halving_period) as i32)
    }
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(1 << 20) + epoch as u64);
    rng
}

fn is_non_finite(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Tensor(TensorError::NonFinite { .. }) | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
    )
}

/// Copies the listed samples into one batch.
fn gather(t: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let s = t.shape();
    let per = s.c * s.plane();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    Tensor::new(Shape::new(idx.len(), s.c, s.h, s.w), data).expect("sized")
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn apply_step(opt: &mut Sgd, lr: f64, params: Vec<(usize, &mut Tensor<f64>)>, grads: &Gradients) -> Result<()> {
    let items = params
        .into_iter()
        .filter_map(|(id, t)| grads.param(id).map(|g| (id, t.data_mut(), g)));
    opt.step(lr, items)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherReport {
    /// Mean loss of the first batch before any update.
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Binary cross-entropy training of the objectness head.
pub fn train_teacher(teacher: &mut TeacherNet, data: &Split, cfg: &TrainConfig) -> Result<TeacherReport> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut opt = Sgd::new(cfg.momentum)?;
    let mut step = 0;
    let mut initial_loss = f64::NAN;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = epoch_rng(cfg.seed, epoch, 1);
        let mut sum = 0.0;
        let batches = shuffled_batches(data.len(), cfg.batch_size, &mut rng);
        for idx in &batches {
            let x = gather(&data.images, idx);
            let y = gather(&data.labels, idx);
            let mut g = Graph::new();
            let xn = g.input(x);
            let (_, logits) = match teacher.forward_graph(&mut g, xn, BnMode::Train) {
                Ok(r) => r,
                Err(ModelError::Tensor(TensorError::NonFinite { .. })) => return Err(TrainError::Divergence { step, loss: f64::NAN }),
                Err(e) => return Err(e.into()),
            };
            let loss = g.bce_with_logits(logits, &y);
            let loss = match loss {
                Ok(l) => l,
                Err(TensorError::NonFinite { .. }) => return Err(TrainError::Divergence { step, loss: f64::NAN }),
                Err(e) => return Err(e.into()),
            };
            let lv = g.scalar(loss);
            if !lv.is_finite() {
                return Err(TrainError::Divergence { step, loss: lv });
            }
            if step == 0 {
                initial_loss = lv;
            }
            let grads = g.backward(loss).map_err(|_| TrainError::Divergence { step, loss: lv })?;
            apply_step(&mut opt, lr, teacher.trainable_params_mut(), &grads).map_err(|e| match e {
                TrainError::Optim(OptimError::NonFiniteGradient(_)) => TrainError::Divergence { step, loss: lv },
                e => e,
            })?;
            sum += lv;
            step += 1;
        }
        epoch_losses.push(sum / batches.len() as f64);
    }
    Ok(TeacherReport {
        initial_loss,
        epoch_losses,
    })
}

/// Weighted sum over taps of the mean squared error.
pub fn distill_loss(student: &[&Tensor<f64>], teacher: &[&Tensor<f64>], weights: &[f64]) -> Result<f64> {
    check_taps(student.iter().map(|t| t.shape()), teacher, weights.len())?;
    let mut total = 0.0;
    for ((s, t), w) in student.iter().zip(teacher).zip(weights) {
        total += w * ops::mse(s, t)?;
    }
    Ok(total)
}

fn check_taps(student: impl ExactSizeIterator<Item = Shape>, teacher: &[&Tensor<f64>], n_weights: usize) -> Result<()> {
    if student.len() != teacher.len() || n_weights != teacher.len() {
        return Err(TrainError::TapCount {
            expected: teacher.len(),
            actual: student.len(),
        });
    }
    for (i, (s, t)) in student.zip(teacher).enumerate() {
        if s != t.shape() {
            return Err(TrainError::TapShape {
                tap: TAP_NAMES.get(i).map_or_else(|| i.to_string(), |n| n.to_string()),
                student: s,
                teacher: t.shape(),
            });
        }
    }
    Ok(())
}

/// Records the distillation loss into `g`.
pub fn distill_loss_graph(g: &mut Graph, student: &[NodeId], teacher: &[&Tensor<f64>], weights: &[f64]) -> Result<NodeId> {
    let shapes: Vec<Shape> = student.iter().map(|&n| g.value(n).shape()).collect();
    check_taps(shapes.into_iter(), teacher, weights.len())?;
    let mut terms = Vec::with_capacity(student.len());
    for ((&s, t), &w) in student.iter().zip(teacher).zip(weights) {
        let tn = g.input((*t).clone());
        terms.push((g.mse(s, tn)?, w));
    }
    Ok(g.weighted_sum(&terms)?)
}

/// Teacher tap features for a batch: block 3 and block 4 outputs.
pub fn teacher_taps(teacher: &TeacherNet, images: &Tensor<f64>) -> Result<[Tensor<f64>; TAPS]> {
    let mut out = teacher.forward(images)?;
    let b4 = out.features.pop().expect("four blocks");
    let b3 = out.features.pop().expect("four blocks");
    Ok([b3, b4])
}

/// Loss and gradients of one width on one batch.
pub fn width_gradients(
    student: &mut SplitStudent,
    images: &Tensor<f64>,
    taps: &[Tensor<f64>; TAPS],
    alpha: WidthMultiplier,
    weights: &[f64; TAPS],
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let x = g.input(images.clone());
    let nodes = student.forward_graph(&mut g, x, alpha, BnMode::Train)?;
    let refs = [&taps[0], &taps[1]];
    let loss = distill_loss_graph(&mut g, &[nodes.decompressed, nodes.decoded], &refs, weights)?;
    let lv = g.scalar(loss);
    let grads = g.backward(loss)?;
    Ok((lv, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss per sampled width, ascending by width.
    pub width_loss: Vec<(WidthMultiplier, f64)>,
    /// Widths sampled for each batch, ascending.
    pub samples: Vec<Vec<WidthMultiplier>>,
    pub wall_seconds: f64,
}

impl EpochStats {
    pub fn loss_at(&self, alpha: WidthMultiplier) -> Option<f64> {
        self.width_loss.iter().find(|(a, _)| *a == alpha).map(|(_, l)| *l)
    }
}

/// One sandwich-rule distillation epoch: per batch, every sampled width
/// contributes gradients, followed by a single optimizer step.
pub fn distill_epoch(
    student: &mut SplitStudent,
    teacher: &TeacherNet,
    data: &Split,
    cfg: &TrainConfig,
    epoch: usize,
    opt: &mut Sgd,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let start = Instant::now();
    let lr = cfg.lr_at(epoch);
    let mut order_rng = epoch_rng(cfg.seed, epoch, 2);
    let mut width_rng = epoch_rng(cfg.seed, epoch, 3);
    let mut sums: BTreeMap<WidthMultiplier, (f64, usize)> = BTreeMap::new();
    let mut samples = Vec::new();
    for (b, idx) in shuffled_batches(data.len(), cfg.batch_size, &mut order_rng).iter().enumerate() {
        let widths = sandwich_sample(&cfg.width_set, cfg.n_sandwich, &mut width_rng)?;
        let x = gather(&data.images, idx);
        let taps = teacher_taps(teacher, &x)?;
        let mut acc = Gradients::default();
        for &alpha in &widths {
            let (lv, grads) = match width_gradients(student, &x, &taps, alpha, &cfg.tap_weights) {
                Ok(r) => r,
                Err(e) if is_non_finite(&e) => return Err(TrainError::NonFiniteLoss { alpha, batch: b }),
                Err(e) => return Err(e),
            };
            if !lv.is_finite() {
                return Err(TrainError::NonFiniteLoss { alpha, batch: b });
            }
            acc.accumulate(&grads);
            let e = sums.entry(alpha).or_default();
            e.0 += lv;
            e.1 += 1;
        }
        apply_step(opt, lr, student.trainable_params_mut(), &acc)?;
        samples.push(widths);
    }
    Ok(EpochStats {
        epoch,
        lr,
        width_loss: sums.into_iter().map(|(a, (s, n))| (a, s / n as f64)).collect(),
        samples,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Full distillation run. Calls `on_epoch` after each epoch.
pub fn distill(
    student: &mut SplitStudent,
    teacher: &TeacherNet,
    data: &Split,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let mut opt = Sgd::new(cfg.momentum)?;
    let mut all = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let s = distill_epoch(student, teacher, data, cfg, epoch, &mut opt)?;
        on_epoch(&s);
        all.push(s);
    }
    if cfg.post_bn_recalibrate {
        post_bn_recalibrate(student, data, cfg.width_set.max(), cfg.batch_size)?;
    }
    Ok(all)
}

/// Recomputes running statistics of the trainable segments at width α as
/// the plain average of per-batch statistics over `data`. Only the α-prefix
/// of each statistics tensor changes; weights are untouched.
pub fn post_bn_recalibrate(student: &mut SplitStudent, data: &Split, alpha: WidthMultiplier, batch_size: usize) -> Result<()> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    student.check_alpha(alpha)?;
    let blocks: Vec<&mut ConvBlock> = student.trainable_blocks_mut().collect();
    let mut sums: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; blocks.len()];
    let mut n_batches = 0usize;
    for (x, _) in data.batches(batch_size) {
        let mut h = x;
        for (b, sum) in blocks.iter().zip(sums.iter_mut()) {
            let mut y = b.conv.forward(&h, alpha, None)?;
            if let Some(bn) = &b.bn {
                let c = y.shape().c;
                let p = BnParams {
                    gamma: &bn.gamma.data()[..c],
                    beta: &bn.beta.data()[..c],
                    running_mean: &bn.running_mean.data()[..c],
                    running_var: &bn.running_var.data()[..c],
                    eps: bn.eps,
                };
                let (out, stats) = ops::batch_norm_train(&y, &p)?;
                let (m, v) = sum.get_or_insert_with(|| (vec![0.0; c], vec![0.0; c]));
                m.iter_mut().zip(&stats.mean).for_each(|(a, b)| *a += b);
                v.iter_mut().zip(&stats.var).for_each(|(a, b)| *a += b);
                y = out;
            }
            if let Some(act) = b.act {
                y = ops::activation(&y, act);
            }
            h = y;
        }
        n_batches += 1;
    }
    for (b, sum) in blocks.into_iter().zip(sums) {
        if let (Some(bn), Some((m, v))) = (&mut b.bn, sum) {
            for (i, (mv, vv)) in m.iter().zip(&v).enumerate() {
                bn.running_mean.data_mut()[i] = mv / n_batches as f64;
                bn.running_var.data_mut()[i] = vv / n_batches as f64;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub toy_ap: f64,
    /// Mean squared error against the teacher per tap.
    pub tap_mse: [f64; TAPS],
    /// Population variance of the teacher's tap features.
    pub teacher_var: [f64; TAPS],
}

impl EvalMetrics {
    pub fn feature_mse(&self) -> f64 {
        self.tap_mse.iter().sum::<f64>() / TAPS as f64
    }
}

struct Moments {
    n: f64,
    sum: f64,
    sq: f64,
}

impl Moments {
    fn new() -> Self {
        Moments { n: 0.0, sum: 0.0, sq: 0.0 }
    }

    fn push(&mut self, t: &Tensor<f32>) {
        for &v in t.data() {
            let v = v as f64;
            self.n += 1.0;
            self.sum += v;
            self.sq += v * v;
        }
    }

    fn var(&self) -> f64 {
        let m = self.sum / self.n;
        (self.sq / self.n - m * m).max(0.0)
    }
}

fn sq_err(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// ToyAP of the student at width α and tap MSE against the teacher. With
/// `quant_bits`, the bottleneck goes through quantize/dequantize first.
pub fn evaluate(student: &SplitStudent, teacher: &TeacherNet, data: &Split, alpha: WidthMultiplier, quant_bits: Option<u8>) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut scores = Vec::with_capacity(data.labels.numel());
    let mut err = [0.0; TAPS];
    let mut count = 0.0;
    let mut moments = [Moments::new(), Moments::new()];
    for (x, _) in data.batches(EVAL_CHUNK) {
        let x: Tensor<f32> = x.cast();
        let mut z = student.encode(&x, alpha)?;
        if let Some(bits) = quant_bits {
            z = codec::round_trip(&z, bits)?;
        }
        let out = student.decode_full(&z, alpha)?;
        let t = teacher.forward(&x)?;
        for (i, (s, tf)) in [(&out.decompressed, &t.features[2]), (&out.decoded, &t.features[3])].into_iter().enumerate() {
            err[i] += sq_err(s, tf);
            moments[i].push(tf);
        }
        count += out.decoded.numel() as f64;
        scores.extend(out.head.data().iter().map(|&v| v as f64));
    }
    Ok(EvalMetrics {
        toy_ap: toy_ap(&scores, data.labels.data()),
        tap_mse: err.map(|e| e / count),
        teacher_var: [moments[0].var(), moments[1].var()],
    })
}

/// ToyAP of the student alone, optionally through the quantizer.
pub fn student_toy_ap(student: &SplitStudent, data: &Split, alpha: WidthMultiplier, quant_bits: Option<u8>) -> Result<f64> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut scores = Vec::with_capacity(data.labels.numel());
    for (x, _) in data.batches(EVAL_CHUNK) {
        let mut z = student.encode(&x.cast::<f32>(), alpha)?;
        if let Some(bits) = quant_bits {
            z = codec::round_trip(&z, bits)?;
        }
        scores.extend(student.decode(&z, alpha)?.data().iter().map(|&v| v as f64));
    }
    Ok(toy_ap(&scores, data.labels.data()))
}

pub fn evaluate_teacher(teacher: &TeacherNet, data: &Split) -> Result<f64> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut scores = Vec::with_capacity(data.labels.numel());
    for (x, _) in data.batches(EVAL_CHUNK) {
        let out = teacher.forward(&x.cast::<f32>())?;
        scores.extend(out.head.data().iter().map(|&v| v as f64));
    }
    Ok(toy_ap(&scores, data.labels.data()))
}
