use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgbdseg::attention::{
    cia, cia_with_weights, multi_head, scaled_dot_attention, self_attention, AttentionParams, CiaConfig,
    SwapMode,
};
use rgbdseg::params::{Bound, ParamStore};
use rgbdseg::{Tape, Tensor, Var};

struct Instance {
    store: ParamStore,
    params: AttentionParams,
    x_c: Tensor,
    x_d: Tensor,
}

fn instance(rng: &mut ChaCha8Rng, n: usize, dim: usize, heads: usize) -> Instance {
    let mut store = ParamStore::new();
    let params = AttentionParams::init(&mut store, "attn", dim, heads, 0.5, rng).unwrap();
    Instance {
        store,
        params,
        x_c: Tensor::randn(&[n, dim], 1.0, rng),
        x_d: Tensor::randn(&[n, dim], 1.0, rng),
    }
}

fn run(inst: &Instance, mode: SwapMode) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let bound = inst.store.bind_frozen(&mut tape);
    let c = tape.constant(inst.x_c.clone());
    let d = tape.constant(inst.x_d.clone());
    let (oc, od) = cia(&mut tape, &bound, &inst.params, c, d, CiaConfig { swap_mode: mode }).unwrap();
    (tape.value(oc).clone(), tape.value(od).clone())
}

#[test]
fn zero_keys_average_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::randn(&[5, 3], 1.0, &mut rng));
    let k = tape.constant(Tensor::zeros(&[5, 3]));
    let v0 = Tensor::randn(&[5, 3], 1.0, &mut rng);
    let v = tape.constant(v0.clone());
    let o = scaled_dot_attention(&mut tape, q, k, v).unwrap();
    for row in 0..5 {
        for col in 0..3 {
            let mean = (0..5).map(|r| v0.get(&[r, col])).sum::<f64>() / 5.0;
            assert!((tape.value(o).get(&[row, col]) - mean).abs() <= 1e-12);
        }
    }
}

#[test]
fn cross_qk_equals_swapped_cross_v() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..100 {
        let heads = [1, 2, 4][trial % 3];
        let n = rng.random_range(1..=9);
        let inst = instance(&mut rng, n, 8, heads);
        let (qk_c, qk_d) = run(&inst, SwapMode::CrossQk);
        let (v_c, v_d) = run(&inst, SwapMode::CrossV);
        assert!(qk_c.max_abs_diff(&v_d) <= 1e-12);
        assert!(qk_d.max_abs_diff(&v_c) <= 1e-12);
    }
}

fn brute_attn(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<Vec<f64>> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    (0..n)
        .map(|i| {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|c| q.get(&[i, c]) * k.get(&[j, c])).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v.shape()[1])
                .map(|c| (0..n).map(|j| e[j] / z * v.get(&[j, c])).sum())
                .collect()
        })
        .collect()
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|c| a.get(&[i, c]) * b.get(&[c, j])).sum();
        }
    }
    Tensor::new(vec![n, m], out).unwrap()
}

#[test]
fn cross_k_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inst = instance(&mut rng, 4, 8, 1);
    let w = |id| inst.store.get(id).clone();
    let (wq, wk, wv, wo) = (w(inst.params.w_q), w(inst.params.w_k), w(inst.params.w_v), w(inst.params.w_o));
    let one = |xq: &Tensor, xk: &Tensor, xv: &Tensor| {
        let rows = brute_attn(&matmul(xq, &wq), &matmul(xk, &wk), &matmul(xv, &wv));
        matmul(&Tensor::new(vec![4, 8], rows.concat()).unwrap(), &wo)
    };
    let want_c = one(&inst.x_c, &inst.x_d, &inst.x_c);
    let want_d = one(&inst.x_d, &inst.x_c, &inst.x_d);
    let (oc, od) = run(&inst, SwapMode::CrossK);
    assert!(oc.max_abs_diff(&want_c) <= 1e-12);
    assert!(od.max_abs_diff(&want_d) <= 1e-12);
}

#[test]
fn identical_branches_make_swaps_no_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut inst = instance(&mut rng, 6, 8, 2);
    inst.x_d = inst.x_c.clone();
    let mut tape = Tape::new();
    let bound = inst.store.bind_frozen(&mut tape);
    let x = tape.constant(inst.x_c.clone());
    let sa = self_attention(&mut tape, &bound, &inst.params, x).unwrap();
    let mh = multi_head(&mut tape, &bound, &inst.params, x, x, x).unwrap();
    assert_eq!(tape.value(sa), tape.value(mh));
    for mode in SwapMode::ALL {
        let (oc, od) = run(&inst, mode);
        assert_eq!(&oc, &od);
        assert_eq!(&oc, tape.value(sa));
    }
}

#[test]
fn weight_rows_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inst = instance(&mut rng, 7, 8, 4);
    for mode in SwapMode::ALL {
        let mut tape = Tape::new();
        let bound = inst.store.bind_frozen(&mut tape);
        let c = tape.constant(inst.x_c.clone());
        let d = tape.constant(inst.x_d.clone());
        let (_, weights) = cia_with_weights(&mut tape, &bound, &inst.params, c, d, CiaConfig { swap_mode: mode }).unwrap();
        assert_eq!(weights.len(), 8);
        for w in weights {
            for row in tape.value(w).data().chunks(7) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let c = x.shape()[1];
    let data = perm.iter().flat_map(|&p| x.data()[p * c..(p + 1) * c].to_vec()).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

#[test]
fn permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inst = instance(&mut rng, 6, 8, 2);
    let perm = [3, 0, 5, 1, 4, 2];
    let permuted = Instance {
        store: inst.store.clone(),
        params: inst.params,
        x_c: permute_rows(&inst.x_c, &perm),
        x_d: permute_rows(&inst.x_d, &perm),
    };
    for mode in SwapMode::ALL {
        let (oc, od) = run(&inst, mode);
        let (pc, pd) = run(&permuted, mode);
        assert!(permute_rows(&oc, &perm).max_abs_diff(&pc) <= 1e-12);
        assert!(permute_rows(&od, &perm).max_abs_diff(&pd) <= 1e-12);
    }
}

/// Gradient of `sum(out_c)` with respect to `x_d`.
fn cross_grad(inst: &Instance, mode: SwapMode) -> Tensor {
    let mut tape = Tape::new();
    let bound: Bound = inst.store.bind_frozen(&mut tape);
    let c = tape.constant(inst.x_c.clone());
    let d: Var = tape.param(inst.x_d.clone());
    let (oc, od) = cia(&mut tape, &bound, &inst.params, c, d, CiaConfig { swap_mode: mode }).unwrap();
    // keep the loss attached to x_d whatever the mode
    let od = tape.scale(od, 0.0).unwrap();
    let both = tape.add(oc, od).unwrap();
    let s = tape.sum(both).unwrap();
    tape.backward(s).unwrap();
    tape.grad(d).unwrap()
}

#[test]
fn cross_k_couples_branches() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inst = instance(&mut rng, 5, 8, 2);
    let g = cross_grad(&inst, SwapMode::CrossK);
    assert!(g.data().iter().map(|x| x.abs()).sum::<f64>() > 1e-6);
    assert!(cross_grad(&inst, SwapMode::None).data().iter().all(|&x| x == 0.0));
}

#[test]
fn mode_none_is_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inst = instance(&mut rng, 5, 8, 2);
    let mut other = Instance {
        store: inst.store.clone(),
        params: inst.params,
        x_c: inst.x_c.clone(),
        x_d: Tensor::randn(&[5, 8], 3.0, &mut rng),
    };
    let (a, _) = run(&inst, SwapMode::None);
    let (b, _) = run(&other, SwapMode::None);
    assert_eq!(a, b);
    other.x_d = inst.x_d.clone();
    let (c, _) = run(&other, SwapMode::CrossK);
    let (d, _) = run(&Instance { x_d: Tensor::randn(&[5, 8], 3.0, &mut rng), ..other }, SwapMode::CrossK);
    assert_ne!(c, d);
}
