use rgbdseg::gradcheck::{check, run_suite, Suite};
use rgbdseg::{Result, Tape, Tensor, Var};

#[test]
fn op_suites_pass_on_a_few_seeds() {
    for suite in [Suite::Tensor, Suite::Attention, Suite::Fusion] {
        for case in run_suite(suite, 3).unwrap() {
            assert!(case.passed(), "{}/{}: {:e}", case.suite, case.name, case.report.max_rel);
            assert!(case.report.checked > 0);
        }
    }
}

#[test]
fn model_suite_passes_on_one_seed() {
    let cases = run_suite(Suite::Model, 1).unwrap();
    assert_eq!(cases.len(), 1);
    assert!(cases[0].passed(), "{:e}", cases[0].report.max_rel);
}

#[test]
fn a_wrong_gradient_is_caught() {
    let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let good = check(&[x.clone()], |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        let sq = tape.mul(v[0], v[0])?;
        let cube = tape.mul(sq, v[0])?;
        Ok(tape.sum(cube)?)
    })
    .unwrap();
    assert!(good.max_rel < 1e-8);
    let bad = check(&[x], |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        // forward is x³ but the recorded graph only sees x² · const
        let c = tape.constant(tape.value(v[0]).clone());
        let sq = tape.mul(v[0], v[0])?;
        let cube = tape.mul(sq, c)?;
        Ok(tape.sum(cube)?)
    })
    .unwrap();
    assert!(bad.max_rel > 0.1);
}
