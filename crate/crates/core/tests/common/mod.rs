#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use robustbf::numerics::{ComplexMat, NumericsError, RealTensor, Tape, Var};

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> RealTensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    RealTensor::matrix(rows, cols, data).unwrap()
}

pub fn complex(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ComplexMat {
    ComplexMat::new(uniform(rng, rows, cols, -1.0, 1.0), uniform(rng, rows, cols, -1.0, 1.0)).unwrap()
}

/// Maximum relative error between tape gradients of the scalar `f` and
/// central differences with step `h`.
pub fn fd_max_rel_err(
    inputs: &[RealTensor],
    h: f64,
    f: impl Fn(&Tape, &[Var]) -> Result<Var, NumericsError>,
) -> f64 {
    let eval = |xs: &[RealTensor]| {
        let tape = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        tape.item(f(&tape, &vs).unwrap())
    };
    let tape = Tape::new();
    let vs: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&tape, &vs).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vs[i]).cloned().unwrap_or_else(|| RealTensor::zeros(x.shape().to_vec()));
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                let mut plus = inputs.to_vec();
                plus[i].set(r, c, x.get(r, c) + h);
                let mut minus = inputs.to_vec();
                minus[i].set(r, c, x.get(r, c) - h);
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.get(r, c);
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
            }
        }
    }
    worst
}

/// Random weighted sum of all entries, turning any output into a scalar loss.
pub fn weighted_sum(tape: &Tape, x: Var, seed: u64) -> Result<Var, NumericsError> {
    let shape = tape.shape(x);
    let mut rng = robustbf::channel::derive_rng(seed, &[0xfeed]);
    let (rows, cols) = (shape[0], shape.get(1).copied().unwrap_or(1));
    let w = tape.constant(RealTensor::new(shape, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())?);
    let prod = tape.mul(x, w)?;
    tape.sum_all(prod)
}
