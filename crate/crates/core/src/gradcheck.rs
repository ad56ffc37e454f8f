//! Finite-difference verification of every differentiable operation.
//!
//! Numeric derivatives use the five-point central stencil
//! `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h` with `h = 1e-4`.
//! Its truncation error is O(h⁴); what remains is rounding in the forward
//! pass, about 1e-11 absolute at this step.
//!
//! The error of one parameter (input tensor) is
//! `max|analytic − numeric| / (max|analytic| + 1e-8)` over its coordinates,
//! and a report keeps the worst parameter. Scoring each scalar coordinate on
//! its own would let any coordinate whose true derivative happens to be
//! ~1e-9 fail on rounding noise alone.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionParams, CiaConfig, SwapMode};
use crate::error::{Error, Result};
use crate::fusion::{self, AmParams};
use crate::model::{ModelConfig, SegModel, TableRow};
use crate::params::{Bound, ParamStore};
use crate::tape::{Resize, Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
const FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradReport {
    pub max_rel: f64,
    pub max_abs: f64,
    pub checked: usize,
}

impl GradReport {
    fn merge(&mut self, other: GradReport) {
        self.max_rel = self.max_rel.max(other.max_rel);
        self.max_abs = self.max_abs.max(other.max_abs);
        self.checked += other.checked;
    }
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let v = tape.value(y);
    if v.numel() != 1 {
        return Err(Error::Domain(format!("gradient check needs a scalar, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Analytic and numeric derivative of the scalar `f` for every coordinate
/// of every input; one vector per input, raster order.
pub fn derivatives<F>(inputs: &[Tensor], f: F) -> Result<Vec<Vec<(f64, f64)>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();
    drop(tape);

    let mut work = inputs.to_vec();
    let mut out = Vec::new();
    for (i, grad) in analytic.iter().enumerate() {
        let mut per_input = Vec::with_capacity(grad.numel());
        for j in 0..grad.numel() {
            let x = inputs[i].data()[j];
            let mut at = |dx: f64| -> Result<f64> {
                work[i].set_flat(j, x + dx)?;
                eval(&work, &f)
            };
            let (p1, m1, p2, m2) = (at(STEP)?, at(-STEP)?, at(2.0 * STEP)?, at(-2.0 * STEP)?);
            work[i].set_flat(j, x)?;
            per_input.push((grad.data()[j], (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * STEP)));
        }
        out.push(per_input);
    }
    Ok(out)
}

/// Compares reverse-mode gradients of the scalar `f` with respect to every
/// coordinate of every input against the finite-difference stencil.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut report = GradReport::default();
    for pairs in derivatives(inputs, f)? {
        let err = pairs.iter().map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = pairs.iter().map(|(a, _)| a.abs()).fold(0.0, f64::max);
        report.max_abs = report.max_abs.max(err);
        report.max_rel = report.max_rel.max(err / (scale + FLOOR));
        report.checked += pairs.len();
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    Tensor,
    Attention,
    Fusion,
    Model,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Tensor, Suite::Attention, Suite::Fusion, Suite::Model];

    pub fn tolerance(self) -> f64 {
        match self {
            Suite::Model => MODEL_TOLERANCE,
            _ => OP_TOLERANCE,
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tensor" => Ok(Suite::Tensor),
            "attention" => Ok(Suite::Attention),
            "fusion" => Ok(Suite::Fusion),
            "model" => Ok(Suite::Model),
            _ => Err(Error::Config(format!(
                "module {s:?}, expected all|tensor|attention|fusion|model"
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Tensor => "tensor",
            Suite::Attention => "attention",
            Suite::Fusion => "fusion",
            Suite::Model => "model",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub suite: Suite,
    pub name: String,
    pub seeds: usize,
    pub report: GradReport,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel < self.tolerance
    }
}

type CaseFn = fn(&mut ChaCha8Rng) -> Result<GradReport>;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Values with magnitude at least `gap`, for kinked functions.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = randn(shape, rng);
    t.map_inplace(|x| x.signum() * (gap + x.abs())).expect("finite");
    t
}

/// `sum(y ⊙ r)` for a fixed random `r`, turning any output into a scalar
/// whose gradient exercises every output coordinate.
fn project(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let r = tape.constant(r.clone());
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p)?)
}

/// Checks `op` applied to random inputs of the given shapes, projected with
/// a random weight of shape `out`.
fn unary_case<F>(rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, out: &[usize], op: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, crate::tensor::TensorError>,
{
    let r = randn(out, rng);
    check(&inputs, |t, v| {
        let y = op(t, v)?;
        project(t, y, &r)
    })
}

fn tensor_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("add_broadcast", |rng| {
            let ins = vec![randn(&[3, 4], rng), randn(&[4], rng)];
            unary_case(rng, ins, &[3, 4], |t, v| t.add(v[0], v[1]))
        }),
        ("sub", |rng| {
            let ins = vec![randn(&[2, 5], rng), randn(&[2, 5], rng)];
            unary_case(rng, ins, &[2, 5], |t, v| t.sub(v[0], v[1]))
        }),
        ("mul_broadcast", |rng| {
            let ins = vec![randn(&[2, 3, 4], rng), randn(&[3, 4], rng)];
            unary_case(rng, ins, &[2, 3, 4], |t, v| t.mul(v[0], v[1]))
        }),
        ("scale", |rng| {
            let ins = vec![randn(&[6], rng)];
            unary_case(rng, ins, &[6], |t, v| t.scale(v[0], -1.7))
        }),
        ("matmul", |rng| {
            let ins = vec![randn(&[3, 4], rng), randn(&[4, 2], rng)];
            unary_case(rng, ins, &[3, 2], |t, v| t.matmul(v[0], v[1]))
        }),
        ("matmul_t", |rng| {
            let ins = vec![randn(&[3, 4], rng), randn(&[5, 4], rng)];
            unary_case(rng, ins, &[3, 5], |t, v| t.matmul_t(v[0], v[1]))
        }),
        ("transpose", |rng| {
            let ins = vec![randn(&[3, 5], rng)];
            unary_case(rng, ins, &[5, 3], |t, v| t.transpose(v[0]))
        }),
        ("reshape_narrow_concat", |rng| {
            let ins = vec![randn(&[4, 6], rng), randn(&[2, 4], rng)];
            unary_case(rng, ins, &[4, 5], |t, v| {
                let a = t.narrow(v[0], 1, 1, 3)?;
                let b = t.reshape(v[1], &[4, 2])?;
                t.concat(&[a, b], 1)
            })
        }),
        ("sum_mean", |rng| {
            let ins = vec![randn(&[3, 4], rng)];
            check(&ins, |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let s = t.sum(sq)?;
                let m = t.mean(v[0])?;
                let m = t.scale(m, 3.0)?;
                Ok(t.add(s, m)?)
            })
        }),
        ("softmax", |rng| {
            let ins = vec![randn(&[3, 5], rng)];
            unary_case(rng, ins, &[3, 5], |t, v| t.softmax(v[0], 1))
        }),
        ("softmax_axis0", |rng| {
            let ins = vec![randn(&[4, 3], rng)];
            unary_case(rng, ins, &[4, 3], |t, v| t.softmax(v[0], 0))
        }),
        ("sigmoid", |rng| {
            let ins = vec![randn(&[7], rng)];
            unary_case(rng, ins, &[7], |t, v| t.sigmoid(v[0]))
        }),
        ("relu", |rng| {
            let ins = vec![away_from_zero(&[8], 0.05, rng)];
            unary_case(rng, ins, &[8], |t, v| t.relu(v[0]))
        }),
        ("gelu", |rng| {
            let ins = vec![randn(&[8], rng)];
            unary_case(rng, ins, &[8], |t, v| t.gelu(v[0]))
        }),
        ("layer_norm", |rng| {
            let ins = vec![randn(&[4, 6], rng), randn(&[6], rng), randn(&[6], rng)];
            unary_case(rng, ins, &[4, 6], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))
        }),
        ("linear", |rng| {
            let ins = vec![randn(&[5, 3], rng), randn(&[3, 4], rng), randn(&[4], rng)];
            unary_case(rng, ins, &[5, 4], |t, v| t.linear(v[0], v[1], v[2]))
        }),
        ("conv1x1", |rng| {
            let ins = vec![randn(&[2, 3, 4], rng), randn(&[4, 4], rng), randn(&[4], rng)];
            unary_case(rng, ins, &[2, 3, 4], |t, v| t.conv1x1(v[0], v[1], v[2]))
        }),
        ("avg_pool2x", |rng| {
            let ins = vec![randn(&[4, 6, 3], rng)];
            unary_case(rng, ins, &[2, 3, 3], |t, v| t.avg_pool2x(v[0]))
        }),
        ("upsample_nearest", |rng| {
            let ins = vec![randn(&[2, 3, 2], rng)];
            unary_case(rng, ins, &[4, 6, 2], |t, v| t.upsample(v[0], 4, 6, Resize::Nearest))
        }),
        ("upsample_bilinear", |rng| {
            let ins = vec![randn(&[3, 2, 2], rng)];
            unary_case(rng, ins, &[5, 7, 2], |t, v| t.upsample(v[0], 5, 7, Resize::Bilinear))
        }),
        ("patchify", |rng| {
            let ins = vec![randn(&[4, 4, 3], rng)];
            unary_case(rng, ins, &[4, 12], |t, v| t.patchify(v[0], 2))
        }),
        ("cross_entropy", |rng| {
            let ins = vec![randn(&[5, 4], rng)];
            let targets: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
            check(&ins, |t, v| Ok(t.cross_entropy(v[0], &targets)?))
        }),
        ("gate_mix", |rng| {
            let ins = vec![randn(&[3, 4], rng), randn(&[3, 4], rng), randn(&[3, 4], rng)];
            unary_case(rng, ins, &[3, 4], |t, v| {
                let g = t.sigmoid(v[0])?;
                t.gate_mix(g, v[1], v[2])
            })
        }),
    ]
}

/// Attention parameters bound to leaf vars that follow `extra` inputs.
struct AttnFixture {
    store: ParamStore,
    params: AttentionParams,
}

impl AttnFixture {
    fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let params = AttentionParams::init(&mut store, "attn", dim, heads, 0.5, rng)?;
        Ok(Self { store, params })
    }

    /// Inputs followed by every parameter tensor.
    fn inputs(&self, xs: Vec<Tensor>) -> Vec<Tensor> {
        xs.into_iter().chain(self.store.values().iter().cloned()).collect()
    }

    fn bound(&self, vars: &[Var], n_inputs: usize) -> Bound {
        Bound::from_vars(vars[n_inputs..].to_vec())
    }
}

fn cia_case(rng: &mut ChaCha8Rng, mode: SwapMode) -> Result<GradReport> {
    let fx = AttnFixture::new(4, 2, rng)?;
    let ins = fx.inputs(vec![randn(&[5, 4], rng), randn(&[5, 4], rng)]);
    let (rc, rd) = (randn(&[5, 4], rng), randn(&[5, 4], rng));
    check(&ins, |t, v| {
        let b = fx.bound(v, 2);
        let (oc, od) = attention::cia(t, &b, &fx.params, v[0], v[1], CiaConfig { swap_mode: mode })?;
        let lc = project(t, oc, &rc)?;
        let ld = project(t, od, &rd)?;
        Ok(t.add(lc, ld)?)
    })
}

fn attention_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("scaled_dot_attention", |rng| {
            let ins = vec![randn(&[4, 3], rng), randn(&[4, 3], rng), randn(&[4, 3], rng)];
            let r = randn(&[4, 3], rng);
            check(&ins, |t, v| {
                let y = attention::scaled_dot_attention(t, v[0], v[1], v[2])?;
                project(t, y, &r)
            })
        }),
        ("multi_head", |rng| {
            let fx = AttnFixture::new(4, 2, rng)?;
            let ins = fx.inputs(vec![randn(&[5, 4], rng), randn(&[5, 4], rng), randn(&[5, 4], rng)]);
            let r = randn(&[5, 4], rng);
            check(&ins, |t, v| {
                let b = fx.bound(v, 3);
                let y = attention::multi_head(t, &b, &fx.params, v[0], v[1], v[2])?;
                project(t, y, &r)
            })
        }),
        ("self_attention", |rng| {
            let fx = AttnFixture::new(6, 3, rng)?;
            let ins = fx.inputs(vec![randn(&[4, 6], rng)]);
            let r = randn(&[4, 6], rng);
            check(&ins, |t, v| {
                let b = fx.bound(v, 1);
                let y = attention::self_attention(t, &b, &fx.params, v[0])?;
                project(t, y, &r)
            })
        }),
        ("cia_none", |rng| cia_case(rng, SwapMode::None)),
        ("cia_cross_q", |rng| cia_case(rng, SwapMode::CrossQ)),
        ("cia_cross_k", |rng| cia_case(rng, SwapMode::CrossK)),
        ("cia_cross_v", |rng| cia_case(rng, SwapMode::CrossV)),
        ("cia_cross_qk", |rng| cia_case(rng, SwapMode::CrossQk)),
    ]
}

fn fusion_cases() -> Vec<(&'static str, CaseFn)> {
    vec![("attention_mix", |rng| {
        let mut store = ParamStore::new();
        let am = AmParams::init(&mut store, "am", &[4], 0.5, rng);
        let mut ins = vec![randn(&[2, 3, 4], rng), randn(&[2, 3, 4], rng)];
        ins.extend(store.values().iter().cloned());
        ins[3] = randn(&[4], rng); // non-zero bias
        let r = randn(&[2, 3, 4], rng);
        check(&ins, |t, v| {
            let b = Bound::from_vars(v[2..].to_vec());
            let y = fusion::attention_mix(t, &b, &am.stages[0], v[0], v[1])?;
            project(t, y, &r)
        })
    })]
}

/// Small 16×16 model configuration used by the end-to-end check.
pub fn tiny_model_config(row: TableRow) -> ModelConfig {
    row.apply(&ModelConfig {
        image_side: 16,
        patch_size: 4,
        channels: vec![4, 8],
        blocks: vec![1, 1],
        heads: vec![1, 2],
        num_classes: 3,
        decoder_width: 6,
        mlp_ratio: 2,
        max_disparity: 16.0,
        ..ModelConfig::default()
    })
}

/// End-to-end check of the cross-entropy loss of a randomly parameterised
/// 16×16 model with respect to every parameter. Seed `i` uses table row
/// `i mod 9`, so 9 or more seeds cover every configuration.
pub fn model_case(row: TableRow, rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let config = tiny_model_config(row);
    let mut model = SegModel::new(config.clone(), rng.random())?;
    // replace the (partly zero) initialisation by generic values
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let shape = model.params().get(id).shape().to_vec();
        let gamma = model.params().name(id).ends_with(".gamma");
        let mut t = Tensor::randn(&shape, 0.4, rng);
        if gamma {
            t.map_inplace(|x| 1.0 + 0.25 * x)?;
        }
        *model.params_mut().get_mut(id) = t;
    }
    let side = config.image_side;
    let rgb = Tensor::rand_uniform(&[side, side, 3], 0.0, 1.0, rng);
    let disp: Vec<f64> = (0..side * side)
        .map(|_| rng.random_range(0..=16) as f64)
        .collect();
    let disp = Tensor::new(vec![side, side, 1], disp)?;
    let labels: Vec<usize> = (0..side * side).map(|_| rng.random_range(0..config.num_classes)).collect();
    let ins = model.params().values().to_vec();
    check(&ins, |t, v| {
        let b = Bound::from_vars(v.to_vec());
        let y = model.forward(t, &b, &rgb, &disp)?;
        let y = t.reshape(y, &[side * side, config.num_classes])?;
        Ok(t.cross_entropy(y, &labels)?)
    })
}

fn cases(suite: Suite) -> Vec<(String, CaseFn)> {
    let named = |v: Vec<(&'static str, CaseFn)>| v.into_iter().map(|(n, f)| (n.to_string(), f)).collect();
    match suite {
        Suite::Tensor => named(tensor_cases()),
        Suite::Attention => named(attention_cases()),
        Suite::Fusion => named(fusion_cases()),
        Suite::Model => Vec::new(),
    }
}

fn case_seed(suite: Suite, name: &str, seed: u64) -> ChaCha8Rng {
    // FNV-1a of the case name keeps cases independent of their order
    let h = name
        .bytes()
        .chain(suite.to_string().bytes())
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    rng.set_stream(seed);
    rng
}

/// Runs every case of `suite` over `seeds` random seeds.
pub fn run_suite(suite: Suite, seeds: usize) -> Result<Vec<CaseResult>> {
    if suite == Suite::Model {
        let mut report = GradReport::default();
        for s in 0..seeds {
            let row = TableRow::ALL[s % TableRow::ALL.len()];
            let mut rng = case_seed(suite, "end_to_end", s as u64);
            report.merge(model_case(row, &mut rng)?);
        }
        return Ok(vec![CaseResult {
            suite,
            name: "end_to_end_16x16".into(),
            seeds,
            report,
            tolerance: suite.tolerance(),
        }]);
    }
    cases(suite)
        .into_iter()
        .map(|(name, f)| {
            let mut report = GradReport::default();
            for s in 0..seeds {
                report.merge(f(&mut case_seed(suite, &name, s as u64))?);
            }
            Ok(CaseResult {
                suite,
                name,
                seeds,
                report,
                tolerance: suite.tolerance(),
            })
        })
        .collect()
}
