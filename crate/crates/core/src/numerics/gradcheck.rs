//! Central-difference verification of the tape's reverse pass. Runs in f64:
//! the step size is far above roundoff there, so disagreement means a wrong
//! derivative rather than noise.

use super::element::Element;
use super::tape::{Tape, TapeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

/// Worst disagreement found by one check.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub tensor_index: usize,
    pub element_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative disagreement with a floor so near-zero gradients compare against
/// the difference-quotient noise level instead of each other.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Builds the graph twice per perturbed element and compares the analytic
/// adjoints of every input against (f(x+h) - f(x-h)) / 2h. The builder must be
/// a pure function of the supplied inputs.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[TapeId]) -> Result<TapeId>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TapeId> = tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &ids)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::shape("grad_check", format!("output {:?}", tape.shape(out))));
        }
        Ok(tape.value(out).data()[0].as_f64())
    };

    let mut tape = Tape::new();
    let ids: Vec<TapeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &ids)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::shape("grad_check", format!("output {:?}", tape.shape(out))));
    }
    tape.backward(out)?;

    let mut report = GradReport {
        max_rel_err: 0.0,
        tensor_index: 0,
        element_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, id) in ids.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(*id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; inputs[ti].numel()],
        };
        for ei in 0..inputs[ti].numel() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let e = rel_err(analytic[ei], numeric);
            if e > report.max_rel_err {
                report = GradReport {
                    max_rel_err: e,
                    tensor_index: ti,
                    element_index: ei,
                    analytic: analytic[ei],
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn rand_t(shape: Vec<usize>, rng: &mut SplitMix64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn passes_on_a_correct_composite() {
        for seed in 0..5 {
            let mut rng = SplitMix64::new(seed);
            let x = rand_t(vec![3, 4], &mut rng);
            let w = rand_t(vec![4, 2], &mut rng);
            let rep = grad_check(
                |tape, ids| {
                    let y = tape.matmul(ids[0], ids[1])?;
                    let a = tape.gelu(y);
                    tape.mean_all(a)
                },
                &[x, w],
                FD_STEP,
            )
            .unwrap();
            assert!(rep.passes(GRAD_TOL), "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn flags_a_wrong_derivative() {
        let mut rng = SplitMix64::new(11);
        let x = rand_t(vec![2, 3], &mut rng);
        // Scale by 2 in forward only; the analytic path sees plain identity.
        let rep = grad_check(
            |tape, ids| {
                let doubled = tape.scale(ids[0], 2.0);
                let snapshot = tape.value(doubled).clone();
                let detached = tape.leaf(snapshot, false);
                let blend = tape.add(ids[0], detached)?;
                tape.mean_all(blend)
            },
            &[x],
            FD_STEP,
        )
        .unwrap();
        assert!(!rep.passes(GRAD_TOL), "corrupted gradient slipped through: {rep:?}");
    }
}
