//! Central finite-difference gradient oracle.
//!
//! Re-runs a forward closure under elementwise perturbations and compares
//! against tape gradients. Independent of the backward implementation:
//! only the forward path is shared, which is inherent to differencing.

use crate::error::Result;
use crate::tensorcore::tape::{Tape, Var};
use crate::tensorcore::tensor::Tensor;

/// Checks tape gradients of `build` (inputs -> scalar loss) against central
/// finite differences with step `h`. Fails if any element differs by more
/// than `tol * max(1, |analytic|, |numeric|)`.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, h: f64, tol: f64) -> Result<()>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |perturb: Option<(usize, usize, f64)>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(ti, t)| {
                let mut t = t.clone();
                if let Some((pt, pe, delta)) = perturb {
                    if pt == ti {
                        t.data_mut()[pe] += delta;
                    }
                }
                tape.leaf(t, true)
            })
            .collect();
        let loss = build(&mut tape, &vars)?;
        tape.val(loss).item()
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    for (ti, t) in inputs.iter().enumerate() {
        let analytic = grads.of(vars[ti]);
        for e in 0..t.len() {
            let up = run(Some((ti, e, h)))?;
            let down = run(Some((ti, e, -h)))?;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[e];
            let err = (a - numeric).abs();
            let scale = 1.0f64.max(a.abs()).max(numeric.abs());
            if err > tol * scale {
                return Err(crate::error::Error::Numeric(format!(
                    "gradient mismatch: input {ti} elem {e}: analytic {a}, numeric {numeric}, rel err {}",
                    err / scale
                )));
            }
        }
    }
    Ok(())
}

/// Deterministic pseudo-random tensor for gradient-check fixtures.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random linear readout so jacobian-transpose paths see varied upstream
/// gradients: loss = sum(out * r).
pub fn random_readout(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.val(out).shape().to_vec();
    let r = tape.constant(random_tensor(&shape, seed));
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}
