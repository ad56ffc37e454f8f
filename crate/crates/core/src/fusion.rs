//! Attention-Mix: a per-pixel, per-channel sigmoid gate computed from the
//! colour stream alone blends colour and depth stage outputs,
//!
//! ```text
//! out = o_c ⊙ σ(conv(o_c)) + o_d ⊙ (1 − σ(conv(o_c)))
//! ```
//!
//! where `conv` is a 1×1 convolution.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// How the two branches' stage outputs are merged before decoding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum FusionMode {
    #[default]
    Sum,
    AttentionMix,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "attention_mix" => Ok(Self::AttentionMix),
            _ => Err(Error::Config(format!("fusion {s:?}, expected sum|attention_mix"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::AttentionMix => "attention_mix",
        })
    }
}

/// Gate convolution of one stage: weight `[C, C]`, bias `[C]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AmStage {
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

/// One gate per encoder stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AmParams {
    pub stages: Vec<AmStage>,
}

impl AmParams {
    /// Zero bias and `N(0, std²)` weights, so the gate starts near 0.5.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Self {
        let stages = channels
            .iter()
            .enumerate()
            .map(|(s, &c)| AmStage {
                weight: store.add(format!("{prefix}.{s}.weight"), Tensor::randn(&[c, c], std, rng)),
                bias: store.add(format!("{prefix}.{s}.bias"), Tensor::zeros(&[c])),
                channels: c,
            })
            .collect();
        Self { stages }
    }

    pub fn num_scalars(&self) -> usize {
        self.stages.iter().map(|s| s.channels * s.channels + s.channels).sum()
    }
}

/// Gated blend of `o_c` and `o_d` (same shape, channels last).
pub fn attention_mix(
    tape: &mut Tape,
    bound: &Bound,
    stage: &AmStage,
    o_c: Var,
    o_d: Var,
) -> Result<Var> {
    let shape = tape.shape(o_c);
    if shape != tape.shape(o_d) || shape.last() != Some(&stage.channels) {
        return Err(TensorError::Shape {
            op: "attention_mix",
            detail: format!(
                "o_c {:?}, o_d {:?}, gate width {}",
                shape,
                tape.shape(o_d),
                stage.channels
            ),
        }
        .into());
    }
    let logits = tape.conv1x1(o_c, bound[stage.weight], bound[stage.bias])?;
    let gate = tape.sigmoid(logits)?;
    Ok(tape.gate_mix(gate, o_c, o_d)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_stage(w: f64, b: f64) -> (ParamStore, AmStage) {
        let mut store = ParamStore::new();
        let weight = store.add("w", Tensor::full(&[1, 1], w));
        let bias = store.add("b", Tensor::full(&[1], b));
        (
            store,
            AmStage {
                weight,
                bias,
                channels: 1,
            },
        )
    }

    #[test]
    fn scalar_case() {
        let (store, stage) = single_stage(1.0, 0.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let oc = tape.constant(Tensor::full(&[1, 1, 1], 2.0));
        let od = tape.constant(Tensor::full(&[1, 1, 1], 4.0));
        let y = attention_mix(&mut tape, &bound, &stage, oc, od).unwrap();
        assert!((tape.value(y).item() - 2.238406).abs() < 1e-5);
    }

    #[test]
    fn saturated_gate_selects_colour() {
        let (store, stage) = single_stage(0.0, 100.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let oc = tape.constant(Tensor::new(vec![3, 1], vec![0.3, -2.0, 7.5]).unwrap());
        let od = tape.constant(Tensor::new(vec![3, 1], vec![9.0, 1.0, -4.0]).unwrap());
        let y = attention_mix(&mut tape, &bound, &stage, oc, od).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(oc)) < 1e-10);
    }

    #[test]
    fn shape_mismatch() {
        let (store, stage) = single_stage(0.0, 0.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let oc = tape.constant(Tensor::zeros(&[2, 1]));
        let od = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(attention_mix(&mut tape, &bound, &stage, oc, od).is_err());
        let wide = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(attention_mix(&mut tape, &bound, &stage, wide, wide).is_err());
    }

    #[test]
    fn fusion_strings() {
        for m in [FusionMode::Sum, FusionMode::AttentionMix] {
            assert_eq!(m.to_string().parse::<FusionMode>().unwrap(), m);
        }
        assert!("max".parse::<FusionMode>().is_err());
    }
}
