//! Scaled dot-product attention, multi-head wrapping, and cross-input
//! attention between a colour branch and a depth branch.
//!
//! Cross-input attention projects both branches with the same weights and
//! then routes the query, key and value sources per [`SwapMode`]:
//!
//! | mode       | colour output      | depth output       |
//! |------------|--------------------|--------------------|
//! | `none`     | `attn(Qc, Kc, Vc)` | `attn(Qd, Kd, Vd)` |
//! | `cross_q`  | `attn(Qd, Kc, Vc)` | `attn(Qc, Kd, Vd)` |
//! | `cross_k`  | `attn(Qc, Kd, Vc)` | `attn(Qd, Kc, Vd)` |
//! | `cross_v`  | `attn(Qc, Kc, Vd)` | `attn(Qd, Kd, Vc)` |
//! | `cross_qk` | `attn(Qd, Kd, Vc)` | `attn(Qc, Kc, Vd)` |

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SwapMode {
    #[default]
    None,
    CrossQ,
    CrossK,
    CrossV,
    CrossQk,
}

impl SwapMode {
    pub const ALL: [SwapMode; 5] = [
        SwapMode::None,
        SwapMode::CrossQ,
        SwapMode::CrossK,
        SwapMode::CrossV,
        SwapMode::CrossQk,
    ];
}

impl FromStr for SwapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "cross_q" => Ok(Self::CrossQ),
            "cross_k" => Ok(Self::CrossK),
            "cross_v" => Ok(Self::CrossV),
            "cross_qk" => Ok(Self::CrossQk),
            _ => Err(Error::Config(format!(
                "swap_mode {s:?}, expected none|cross_q|cross_k|cross_v|cross_qk"
            ))),
        }
    }
}

impl fmt::Display for SwapMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::CrossQ => "cross_q",
            Self::CrossK => "cross_k",
            Self::CrossV => "cross_v",
            Self::CrossQk => "cross_qk",
        })
    }
}

/// Swap-mode selector for one attention layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CiaConfig {
    pub swap_mode: SwapMode,
}

/// Bias-free `C × C` projections shared by both branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub dim: usize,
    pub num_heads: usize,
}

impl AttentionParams {
    /// Registers four `dim × dim` projections drawn from `N(0, std²)`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        num_heads: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(Error::Config(format!(
                "width {dim} not divisible by {num_heads} heads"
            )));
        }
        let mut w = |name: &str| store.add(format!("{prefix}.{name}"), Tensor::randn(&[dim, dim], std, rng));
        Ok(Self {
            w_q: w("w_q"),
            w_k: w("w_k"),
            w_v: w("w_v"),
            w_o: w("w_o"),
            dim,
            num_heads,
        })
    }

    pub fn d_head(&self) -> usize {
        self.dim / self.num_heads
    }
}

/// `softmax(Q·Kᵀ / √d_head) · V`; also returns the attention weights.
pub fn scaled_dot_attention_weights(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
        return Err(TensorError::Shape {
            op: "attention",
            detail: format!("q {sq:?}, k {sk:?}, v {sv:?}"),
        }
        .into());
    }
    let d_head = sq[1] as f64;
    let logits = tape.matmul_t(q, k)?;
    let logits = tape.scale(logits, 1.0 / d_head.sqrt())?;
    let weights = tape.softmax(logits, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    Ok(scaled_dot_attention_weights(tape, q, k, v)?.0)
}

#[derive(Clone, Copy, Debug)]
struct Projected {
    q: Var,
    k: Var,
    v: Var,
}

fn check_input(tape: &Tape, params: &AttentionParams, x: Var) -> Result<()> {
    match *tape.shape(x) {
        [_, c] if c == params.dim => Ok(()),
        ref s => Err(TensorError::Shape {
            op: "multi_head",
            detail: format!("expected [n, {}], got {s:?}", params.dim),
        }
        .into()),
    }
}

fn project(tape: &mut Tape, bound: &Bound, params: &AttentionParams, x: Var) -> Result<Projected> {
    check_input(tape, params, x)?;
    Ok(Projected {
        q: tape.matmul(x, bound[params.w_q])?,
        k: tape.matmul(x, bound[params.w_k])?,
        v: tape.matmul(x, bound[params.w_v])?,
    })
}

/// Splits projected inputs into heads, attends, concatenates, applies `W_o`.
fn attend(
    tape: &mut Tape,
    bound: &Bound,
    params: &AttentionParams,
    q: Var,
    k: Var,
    v: Var,
    mut weights: Option<&mut Vec<Var>>,
) -> Result<Var> {
    if tape.shape(q)[0] != tape.shape(k)[0] {
        return Err(TensorError::Shape {
            op: "multi_head",
            detail: format!("token counts {:?} vs {:?}", tape.shape(q), tape.shape(k)),
        }
        .into());
    }
    let dh = params.d_head();
    let merged = if params.num_heads == 1 {
        let (o, w) = scaled_dot_attention_weights(tape, q, k, v)?;
        if let Some(ws) = weights.as_deref_mut() {
            ws.push(w);
        }
        o
    } else {
        let mut heads = Vec::with_capacity(params.num_heads);
        for h in 0..params.num_heads {
            let qh = tape.narrow(q, 1, h * dh, dh)?;
            let kh = tape.narrow(k, 1, h * dh, dh)?;
            let vh = tape.narrow(v, 1, h * dh, dh)?;
            let (o, w) = scaled_dot_attention_weights(tape, qh, kh, vh)?;
            if let Some(ws) = weights.as_deref_mut() {
                ws.push(w);
            }
            heads.push(o);
        }
        tape.concat(&heads, 1)?
    };
    Ok(tape.matmul(merged, bound[params.w_o])?)
}

/// Multi-head attention whose query, key and value come from possibly
/// different sources of shape `[n, C]`.
pub fn multi_head(
    tape: &mut Tape,
    bound: &Bound,
    params: &AttentionParams,
    x_q: Var,
    x_k: Var,
    x_v: Var,
) -> Result<Var> {
    for x in [x_q, x_k, x_v] {
        check_input(tape, params, x)?;
    }
    let q = tape.matmul(x_q, bound[params.w_q])?;
    let k = tape.matmul(x_k, bound[params.w_k])?;
    let v = tape.matmul(x_v, bound[params.w_v])?;
    attend(tape, bound, params, q, k, v, None)
}

fn cia_impl(
    tape: &mut Tape,
    bound: &Bound,
    params: &AttentionParams,
    x_c: Var,
    x_d: Var,
    config: CiaConfig,
    mut weights: Option<&mut Vec<Var>>,
) -> Result<(Var, Var)> {
    if tape.shape(x_c) != tape.shape(x_d) {
        return Err(TensorError::Shape {
            op: "cia",
            detail: format!("branches {:?} vs {:?}", tape.shape(x_c), tape.shape(x_d)),
        }
        .into());
    }
    let c = project(tape, bound, params, x_c)?;
    let d = project(tape, bound, params, x_d)?;
    let ((qc, kc, vc), (qd, kd, vd)) = match config.swap_mode {
        SwapMode::None => ((c.q, c.k, c.v), (d.q, d.k, d.v)),
        SwapMode::CrossQ => ((d.q, c.k, c.v), (c.q, d.k, d.v)),
        SwapMode::CrossK => ((c.q, d.k, c.v), (d.q, c.k, d.v)),
        SwapMode::CrossV => ((c.q, c.k, d.v), (d.q, d.k, c.v)),
        SwapMode::CrossQk => ((d.q, d.k, c.v), (c.q, c.k, d.v)),
    };
    let out_c = attend(tape, bound, params, qc, kc, vc, weights.as_deref_mut())?;
    let out_d = attend(tape, bound, params, qd, kd, vd, weights.as_deref_mut())?;
    Ok((out_c, out_d))
}

/// Cross-input attention over a colour/depth pair; returns `(out_c, out_d)`.
pub fn cia(
    tape: &mut Tape,
    bound: &Bound,
    params: &AttentionParams,
    x_c: Var,
    x_d: Var,
    config: CiaConfig,
) -> Result<(Var, Var)> {
    cia_impl(tape, bound, params, x_c, x_d, config, None)
}

/// As [`cia`], also returning every head's attention weights (colour
/// branch heads first).
pub fn cia_with_weights(
    tape: &mut Tape,
    bound: &Bound,
    params: &AttentionParams,
    x_c: Var,
    x_d: Var,
    config: CiaConfig,
) -> Result<((Var, Var), Vec<Var>)> {
    let mut weights = Vec::new();
    let out = cia_impl(tape, bound, params, x_c, x_d, config, Some(&mut weights))?;
    Ok((out, weights))
}

/// Self-attention on a single branch.
pub fn self_attention(
    tape: &mut Tape,
    bound: &Bound,
    params: &AttentionParams,
    x: Var,
) -> Result<Var> {
    let p = project(tape, bound, params, x)?;
    attend(tape, bound, params, p.q, p.k, p.v, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn single_token_returns_value() {
        let mut tape = Tape::new();
        let q = tape.constant(t(&[1, 2], &[0.3, -1.0]));
        let k = tape.constant(t(&[1, 2], &[2.0, 0.5]));
        let v = tape.constant(t(&[1, 2], &[7.0, -3.0]));
        let o = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.value(o).data(), &[7.0, -3.0]);
    }

    #[test]
    fn two_token_hand_computation() {
        let mut tape = Tape::new();
        let q = tape.constant(t(&[2, 1], &[1.0, 0.0]));
        let k = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let v = tape.constant(t(&[2, 1], &[10.0, 20.0]));
        let o = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        let d = tape.value(o).data();
        assert!((d[0] - 17.3106).abs() < 1e-4);
        assert!((d[1] - 15.0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[2, 3]));
        let k = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(scaled_dot_attention(&mut tape, q, k, k).is_err());

        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AttentionParams::init(&mut store, "a", 4, 2, 0.5, &mut rng).unwrap();
        let bound = store.bind(&mut tape);
        let a = tape.constant(Tensor::zeros(&[3, 4]));
        let b = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(cia(&mut tape, &bound, &p, a, b, CiaConfig::default()).is_err());
        assert!(AttentionParams::init(&mut store, "b", 6, 4, 0.5, &mut rng).is_err());
    }

    #[test]
    fn swap_mode_strings_round_trip() {
        for m in SwapMode::ALL {
            assert_eq!(m.to_string().parse::<SwapMode>().unwrap(), m);
        }
        assert!("cross_z".parse::<SwapMode>().is_err());
    }
}
