//! Analytic multiply-accumulate cost model over [`GeneratorArch`].
//!
//! Convolutions cost `k² · in · out` per output pixel (depthwise: `k² · c`).
//! Transposed convolutions are costed the same way at their output
//! resolution, i.e. as a direct convolution over the zero-inserted input.
//! Normalization layers that compute statistics at inference (no tracked
//! running statistics) cost `2 · c · h · w`; tracked ones fold into the
//! preceding convolution and cost nothing. Activations, bias and residual
//! additions cost nothing.

use serde::{Deserialize, Serialize};

use crate::arch::{
    branch_layer_id, head_id, plain_layer_id, tail_id, Block, GeneratorArch, LayerSpec, Shape,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub id: String,
    pub macs: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub total: u64,
    pub layers: Vec<LayerCost>,
}

impl CostBreakdown {
    fn push(&mut self, id: String, macs: u64) {
        self.total += macs;
        self.layers.push(LayerCost { id, macs });
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }
}

/// MACs of a single layer given its input shape.
pub fn layer_macs(layer: &LayerSpec, input: Shape) -> Result<u64> {
    let out = layer
        .output_shape(input)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let px = out.spatial() as u64;
    Ok(match *layer {
        LayerSpec::Conv {
            kernel,
            in_ch,
            out_ch,
            ..
        }
        | LayerSpec::TransposedConv {
            kernel,
            in_ch,
            out_ch,
            ..
        } => (kernel * kernel) as u64 * in_ch as u64 * out_ch as u64 * px,
        LayerSpec::DepthwiseConv {
            kernel, channels, ..
        } => (kernel * kernel) as u64 * channels as u64 * px,
        LayerSpec::Norm {
            tracks_running_stats: false,
            channels,
            ..
        } => 2 * channels as u64 * px,
        LayerSpec::Norm { .. } | LayerSpec::Activation { .. } | LayerSpec::ResidualAdd => 0,
    })
}

fn sequence(
    layers: &[LayerSpec],
    mut shape: Shape,
    id: impl Fn(usize) -> String,
    acc: &mut CostBreakdown,
) -> Result<Shape> {
    for (i, layer) in layers.iter().enumerate() {
        let macs = layer_macs(layer, shape).map_err(|e| match e {
            Error::Shape(m) => Error::Shape(format!("{}: {m}", id(i))),
            other => other,
        })?;
        acc.push(id(i), macs);
        shape = layer.output_shape(shape).expect("checked by layer_macs");
    }
    Ok(shape)
}

/// Per-layer and total MACs for one sample of `input` shape. Dead branches
/// contribute nothing and are not listed.
pub fn arch_macs(arch: &GeneratorArch, input: Shape) -> Result<CostBreakdown> {
    propagate(arch, input).map(|r| r.0)
}

/// Output shape of the generator for one sample of `input` shape.
pub fn output_shape(arch: &GeneratorArch, input: Shape) -> Result<Shape> {
    propagate(arch, input).map(|r| r.1)
}

fn propagate(arch: &GeneratorArch, input: Shape) -> Result<(CostBreakdown, Shape)> {
    let mut acc = CostBreakdown::default();
    let shape = sequence(&arch.head, input, head_id, &mut acc)?;
    for (b, block) in arch.blocks.iter().enumerate() {
        match block {
            Block::IncRes(inc) => {
                for (j, br) in inc.branches.iter().enumerate() {
                    if !br.alive {
                        continue;
                    }
                    let out = sequence(&br.layers, shape, |i| branch_layer_id(b, j, i), &mut acc)?;
                    if out != shape {
                        return Err(Error::Shape(format!(
                            "blocks.{b}.branches.{j}: maps {shape} to {out}"
                        )));
                    }
                }
            }
            Block::Plain(p) => {
                let out = sequence(&p.layers, shape, |i| plain_layer_id(b, i), &mut acc)?;
                if out != shape {
                    return Err(Error::Shape(format!("blocks.{b}: maps {shape} to {out}")));
                }
            }
        }
    }
    let out = sequence(&arch.tail, shape, tail_id, &mut acc)?;
    Ok((acc, out))
}

/// Total MACs at the architecture's own input shape.
pub fn total_macs(arch: &GeneratorArch) -> Result<u64> {
    arch_macs(arch, arch.input()).map(|c| c.total)
}

/// Parses a MAC count such as `56800000000`, `56.8G`, `1.5M` or `250k`.
/// The value must come out as a whole number.
pub fn parse_mac_count(text: &str) -> Result<u64> {
    let bad = || Error::InvalidArgument(format!("cannot parse MAC count {text:?}"));
    let t = text.trim().replace('_', "");
    let (digits, scale) = match t.chars().last() {
        Some('k' | 'K') => (&t[..t.len() - 1], 3),
        Some('M') => (&t[..t.len() - 1], 6),
        Some('G') => (&t[..t.len() - 1], 9),
        _ => (&t[..], 0),
    };
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    if int.is_empty() && frac.is_empty() || !(int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit())) {
        return Err(bad());
    }
    let frac = frac.trim_end_matches('0');
    if frac.len() > scale {
        return Err(bad());
    }
    let mantissa: u64 = format!("{int}{frac}").parse().map_err(|_| bad())?;
    10u64
        .checked_pow((scale - frac.len()) as u32)
        .and_then(|m| mantissa.checked_mul(m))
        .ok_or_else(bad)
}
