//! Finite-difference gradient oracle shared by unit tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ComplexMat, NumericsError, RealTensor, Tape, Var};

pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> RealTensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    RealTensor::matrix(rows, cols, data).unwrap()
}

pub(crate) fn random_complex(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ComplexMat {
    ComplexMat::new(random_tensor(rng, rows, cols), random_tensor(rng, rows, cols)).unwrap()
}

/// Maximum relative error between tape gradients and central differences
/// (step 1e-5) of the scalar produced by `f`.
pub(crate) fn check_gradients(
    inputs: &[RealTensor],
    f: impl Fn(&Tape, &[Var]) -> Result<Var, NumericsError>,
) -> f64 {
    let eval = |xs: &[RealTensor]| {
        let tape = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&tape, &vs).unwrap();
        tape.item(out)
    };
    let tape = Tape::new();
    let vs: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&tape, &vs).unwrap();
    let grads = tape.backward(out).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vs[i])
            .cloned()
            .unwrap_or_else(|| RealTensor::zeros(x.shape().to_vec()));
        for e in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}
