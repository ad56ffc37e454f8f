use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rgbdseg::fusion::{attention_mix, AmParams, AmStage};
use rgbdseg::params::ParamStore;
use rgbdseg::{Tape, Tensor};

fn mix(store: &ParamStore, stage: &AmStage, o_c: &Tensor, o_d: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let c = tape.constant(o_c.clone());
    let d = tape.constant(o_d.clone());
    let y = attention_mix(&mut tape, &bound, stage, c, d).unwrap();
    tape.value(y).clone()
}

fn random_stage(rng: &mut ChaCha8Rng, channels: usize, std: f64) -> (ParamStore, AmStage) {
    let mut store = ParamStore::new();
    let p = AmParams::init(&mut store, "am", &[channels], std, rng);
    let stage = p.stages[0];
    // non-zero bias too
    *store.get_mut(stage.bias) = Tensor::randn(&[channels], std, rng);
    (store, stage)
}

#[test]
fn zero_parameters_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut store, stage) = random_stage(&mut rng, 6, 1.0);
    *store.get_mut(stage.weight) = Tensor::zeros(&[6, 6]);
    *store.get_mut(stage.bias) = Tensor::zeros(&[6]);
    for _ in 0..20 {
        let o_c = Tensor::randn(&[4, 5, 6], 2.0, &mut rng);
        let o_d = Tensor::randn(&[4, 5, 6], 2.0, &mut rng);
        let y = mix(&store, &stage, &o_c, &o_d);
        for ((y, c), d) in y.data().iter().zip(o_c.data()).zip(o_d.data()) {
            assert!((y - 0.5 * (c + d)).abs() <= 1e-12);
        }
    }
}

#[test]
fn equal_inputs_pass_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (store, stage) = random_stage(&mut rng, 4, 3.0);
    let o = Tensor::randn(&[3, 3, 4], 5.0, &mut rng);
    assert_eq!(mix(&store, &stage, &o, &o), o);
}

#[test]
fn output_within_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (store, stage) = random_stage(&mut rng, 5, 2.0);
        let o_c = Tensor::randn(&[2, 3, 5], 3.0, &mut rng);
        let o_d = Tensor::randn(&[2, 3, 5], 3.0, &mut rng);
        let y = mix(&store, &stage, &o_c, &o_d);
        for ((y, c), d) in y.data().iter().zip(o_c.data()).zip(o_d.data()) {
            assert!(c.min(*d) <= *y && *y <= c.max(*d));
        }
    }
}

#[test]
fn linear_in_depth_stream() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (store, stage) = random_stage(&mut rng, 4, 1.0);
    let o_c = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let o_d = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let delta = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let shifted = |k: f64| {
        let d: Vec<f64> = o_d.data().iter().zip(delta.data()).map(|(a, b)| a + k * b).collect();
        mix(&store, &stage, &o_c, &Tensor::new(vec![6, 4], d).unwrap())
    };
    let (y0, y1, y2) = (shifted(0.0), shifted(1.0), shifted(2.0));
    for i in 0..y0.numel() {
        let second = y2.data()[i] - 2.0 * y1.data()[i] + y0.data()[i];
        assert!(second.abs() <= 1e-10, "second difference {second}");
    }
}

#[test]
fn gradient_reaches_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (store, stage) = random_stage(&mut rng, 3, 1.0);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let c = tape.param(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let d = tape.param(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let y = attention_mix(&mut tape, &bound, &stage, c, d).unwrap();
    let y = tape.mul(y, y).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    for v in [c, d, bound[stage.weight], bound[stage.bias]] {
        assert!(tape.grad(v).unwrap().data().iter().any(|&g| g != 0.0));
    }
}

#[test]
fn parameter_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let p = AmParams::init(&mut store, "am", &[4, 8], 0.02, &mut rng);
    assert_eq!(p.num_scalars(), 16 + 4 + 64 + 8);
    assert_eq!(store.num_scalars(), p.num_scalars());
    assert!(store.get(p.stages[1].bias).data().iter().all(|&b| b == 0.0));
}
