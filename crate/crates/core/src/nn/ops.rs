//! Candidate operations placed on cell edges.

use serde::{Deserialize, Serialize};

use super::params::{Init, ParamId, ParamStore};
use crate::autodiff::ConvSpec;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "zero")]
    Zero,
    #[serde(rename = "skip_connect")]
    SkipConnect,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "dil_conv_3x3")]
    DilConv3x3,
    #[serde(rename = "dil_conv_5x5")]
    DilConv5x5,
}

impl OpKind {
    pub const ALL: [OpKind; 8] = [
        OpKind::Zero,
        OpKind::SkipConnect,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::SkipConnect => "skip_connect",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
        }
    }

    /// Trainable scalars of this op at `c` channels, counted from the
    /// layer recipe in [`CandidateOp::build`].
    pub fn param_count(self, c: usize) -> usize {
        match self {
            OpKind::Zero | OpKind::SkipConnect | OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => 0,
            OpKind::SepConv3x3 | OpKind::DilConv3x3 => c * 9 + c * c + 2 * c,
            OpKind::SepConv5x5 | OpKind::DilConv5x5 => c * 25 + c * c + 2 * c,
        }
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OpKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| crate::Error::Parameter(format!("unknown operation {s:?}")))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNormIds {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize, seed: u64) -> Self {
        BatchNormIds {
            gamma: store.add(&format!("{prefix}.gamma"), &[c], Init::Constant(1.0), true, seed),
            beta: store.add(&format!("{prefix}.beta"), &[c], Init::Constant(0.0), true, seed),
            running_mean: store.add(&format!("{prefix}.running_mean"), &[c], Init::Constant(0.0), false, seed),
            running_var: store.add(&format!("{prefix}.running_var"), &[c], Init::Constant(1.0), false, seed),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Relu,
    Conv { weight: ParamId, spec: ConvSpec },
    BatchNorm(BatchNormIds),
    MaxPool,
    AvgPool,
}

pub(crate) fn register_conv<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    spec: ConvSpec,
    seed: u64,
) -> Layer {
    let per_group = cin / spec.groups;
    let weight = store.add(
        &format!("{name}.weight"),
        &[cout, per_group, k, k],
        Init::Kaiming {
            fan_in: per_group * k * k,
        },
        true,
        seed,
    );
    Layer::Conv { weight, spec }
}

/// One operation on one edge. `Zero` has no layers and produces no tensor;
/// `SkipConnect` has no layers and passes its input through.
#[derive(Clone, Debug)]
pub struct CandidateOp {
    pub kind: OpKind,
    pub layers: Vec<Layer>,
}

impl CandidateOp {
    /// Registers the op's weights under `prefix.{op name}`.
    ///
    /// Separable conv: ReLU, depthwise k×k, pointwise 1×1, batch norm.
    /// Dilated conv: the same with dilation 2 in the depthwise step.
    pub fn build<T: Real>(kind: OpKind, c: usize, prefix: &str, store: &mut ParamStore<T>, seed: u64) -> Self {
        let p = format!("{prefix}.{}", kind.name());
        let sep = |k: usize, dilation: usize, store: &mut ParamStore<T>| {
            let pad = dilation * (k - 1) / 2;
            vec![
                Layer::Relu,
                register_conv(store, &format!("{p}.dw"), c, c, k, ConvSpec::new(1, pad, dilation, c), seed),
                register_conv(store, &format!("{p}.pw"), c, c, 1, ConvSpec::new(1, 0, 1, 1), seed),
                Layer::BatchNorm(BatchNormIds::register(store, &format!("{p}.bn"), c, seed)),
            ]
        };
        let layers = match kind {
            OpKind::Zero | OpKind::SkipConnect => Vec::new(),
            OpKind::MaxPool3x3 => vec![Layer::MaxPool],
            OpKind::AvgPool3x3 => vec![Layer::AvgPool],
            OpKind::SepConv3x3 => sep(3, 1, store),
            OpKind::SepConv5x5 => sep(5, 1, store),
            OpKind::DilConv3x3 => sep(3, 2, store),
            OpKind::DilConv5x5 => sep(5, 2, store),
        };
        CandidateOp { kind, layers }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { weight, .. } => ids.push(*weight),
                Layer::BatchNorm(bn) => {
                    ids.extend([bn.gamma, bn.beta, bn.running_mean, bn.running_var])
                }
                _ => {}
            }
        }
        ids
    }
}
