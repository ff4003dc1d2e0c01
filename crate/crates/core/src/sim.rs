//! Client/server split-inference simulation: network and cost models, the
//! budget-driven width controller, and tradeoff sweeps.

use thiserror::Error;

use crate::codec::{self, CodecError, PacketMeta};
use crate::data::Split;
use crate::slim::{WidthMultiplier, WidthSet};
use crate::tensor::Tensor;
use crate::train::{self, TrainError};
use crate::zoo::{ModelError, SplitStudent, GRID};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bandwidth must be positive, got {0}")]
    Bandwidth(f64),
    #[error("round-trip time must be finite and non-negative, got {0}")]
    Rtt(f64),
    #[error("compute rate must be positive, got {0}")]
    ComputeRate(f64),
    #[error("budget sets no bound")]
    EmptyBudget,
    #[error("width set is empty")]
    EmptyWidthSet,
    #[error("no width fits the budget (smallest payload {min_bytes} bytes, smallest encoder cost {min_mac} MAC)")]
    InfeasibleBudget { min_bytes: usize, min_mac: u64 },
    #[error("budget bounds encoder MAC but the cost model has no compute estimate")]
    NoComputeModel,
    #[error("weights changed during the sweep")]
    WeightsMutated,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

/// Deterministic link: fixed bandwidth in bytes per second plus a round trip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkModel {
    pub bandwidth: f64,
    pub rtt: f64,
}

impl NetworkModel {
    /// `bandwidth` may be infinite.
    pub fn new(bandwidth: f64, rtt: f64) -> Result<Self> {
        if !(bandwidth > 0.0) {
            return Err(SimError::Bandwidth(bandwidth));
        }
        if !(rtt >= 0.0 && rtt.is_finite()) {
            return Err(SimError::Rtt(rtt));
        }
        Ok(NetworkModel { bandwidth, rtt })
    }

    pub fn transfer_time(&self, bytes: usize) -> f64 {
        bytes as f64 / self.bandwidth + self.rtt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Budget {
    pub max_bytes: Option<usize>,
    pub max_mac: Option<u64>,
}

impl Budget {
    pub fn new(max_bytes: Option<usize>, max_mac: Option<u64>) -> Result<Self> {
        if max_bytes.is_none() && max_mac.is_none() {
            return Err(SimError::EmptyBudget);
        }
        Ok(Budget { max_bytes, max_mac })
    }
}

/// Per-inference costs of running at width α.
pub trait CostModel {
    fn payload_bytes(&self, alpha: WidthMultiplier, bits: u8) -> usize;
    /// Client-side MAC, if the model knows them.
    fn encoder_mac(&self, alpha: WidthMultiplier) -> Option<u64>;
}

/// Bandwidth-only cost model of a `C x H x W` bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BottleneckCost {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl BottleneckCost {
    pub fn new(channels: usize) -> Self {
        BottleneckCost {
            channels,
            height: GRID,
            width: GRID,
        }
    }
}

impl CostModel for BottleneckCost {
    fn payload_bytes(&self, alpha: WidthMultiplier, bits: u8) -> usize {
        codec::payload_size(alpha.resolve(self.channels), self.height, self.width, 1, bits)
    }

    fn encoder_mac(&self, _alpha: WidthMultiplier) -> Option<u64> {
        None
    }
}

impl CostModel for SplitStudent {
    fn payload_bytes(&self, alpha: WidthMultiplier, bits: u8) -> usize {
        codec::payload_size(self.bottleneck_channels(alpha), GRID, GRID, 1, bits)
    }

    fn encoder_mac(&self, alpha: WidthMultiplier) -> Option<u64> {
        Some(self.mac_report(alpha).client_total())
    }
}

/// Largest width in the set whose costs satisfy every bound of the budget.
pub fn choose_alpha(set: &WidthSet, cost: &impl CostModel, bits: u8, budget: &Budget) -> Result<WidthMultiplier> {
    if set.is_empty() {
        return Err(SimError::EmptyWidthSet);
    }
    if budget.max_bytes.is_none() && budget.max_mac.is_none() {
        return Err(SimError::EmptyBudget);
    }
    let mac_of = |a| -> Result<u64> {
        match budget.max_mac {
            Some(_) => cost.encoder_mac(a).ok_or(SimError::NoComputeModel),
            None => Ok(0),
        }
    };
    for alpha in set.iter().rev() {
        let bytes_ok = budget.max_bytes.is_none_or(|m| cost.payload_bytes(alpha, bits) <= m);
        let mac_ok = match budget.max_mac {
            Some(m) => mac_of(alpha)? <= m,
            None => true,
        };
        if bytes_ok && mac_ok {
            return Ok(alpha);
        }
    }
    let mut min_bytes = usize::MAX;
    let mut min_mac = u64::MAX;
    for alpha in set.iter() {
        min_bytes = min_bytes.min(cost.payload_bytes(alpha, bits));
        min_mac = min_mac.min(cost.encoder_mac(alpha).unwrap_or(0));
    }
    Err(SimError::InfeasibleBudget { min_bytes, min_mac })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyBreakdown {
    pub encoder_mac: u64,
    pub packet_bytes: usize,
    pub encode_time: f64,
    pub transfer_time: f64,
    pub total: f64,
    /// Server-side objectness scores.
    pub output: Tensor<f32>,
}

/// Runs one split inference: encode, packetize, transfer, decode.
pub fn simulate_inference(
    student: &SplitStudent,
    image: &Tensor<f32>,
    alpha: WidthMultiplier,
    bits: u8,
    net: &NetworkModel,
    compute_rate: f64,
) -> Result<LatencyBreakdown> {
    if !(compute_rate > 0.0) {
        return Err(SimError::ComputeRate(compute_rate));
    }
    let extrapolated = student.check_alpha(alpha)?;
    let z = student.encode(image, alpha)?;
    let meta = PacketMeta {
        alpha,
        variant: student.bottleneck.variant,
        c_max: student.bottleneck.channels,
        extrapolated,
    };
    let packet = codec::encode_packet(&z, bits, &meta)?;
    let received = codec::decode_packet(&packet)?;
    let output = student.decode(&received.tensor, alpha)?;
    let encoder_mac = student.mac_report(alpha).client_total() * image.shape().n as u64;
    let encode_time = encoder_mac as f64 / compute_rate;
    let transfer_time = net.transfer_time(packet.len());
    Ok(LatencyBreakdown {
        encoder_mac,
        packet_bytes: packet.len(),
        encode_time,
        transfer_time,
        total: encode_time + transfer_time,
        output,
    })
}

/// One configuration on the bandwidth/computation/accuracy tradeoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeoffPoint {
    pub alpha: WidthMultiplier,
    pub bits: u8,
    pub payload_bytes: usize,
    pub encoder_mac: u64,
    pub toy_ap: f64,
}

/// Evaluates every `(α, bits)` pair once, sorted by bits then α. The weight
/// hash is checked before and after.
pub fn sweep(student: &SplitStudent, data: &Split, widths: &WidthSet, bits_list: &[u8]) -> Result<Vec<TradeoffPoint>> {
    let before = student.weight_hash();
    let mut bits: Vec<u8> = bits_list.to_vec();
    bits.sort_unstable();
    bits.dedup();
    let mut points = Vec::with_capacity(bits.len() * widths.len());
    for &b in &bits {
        for alpha in widths.iter() {
            points.push(TradeoffPoint {
                alpha,
                bits: b,
                payload_bytes: student.payload_bytes(alpha, b),
                encoder_mac: student.mac_report(alpha).client_total(),
                toy_ap: train::student_toy_ap(student, data, alpha, Some(b))?,
            });
        }
    }
    if student.weight_hash() != before {
        return Err(SimError::WeightsMutated);
    }
    Ok(points)
}
