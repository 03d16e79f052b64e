mod common;

use proptest::prelude::*;
use rand::Rng;
use robustbf::channel::derive_rng;
use robustbf::numerics::{adam_step, Activation, AdamState, ComplexMat, NumericsError, RealTensor, Tape, Var};

use common::{complex, fd_max_rel_err, uniform, weighted_sum};

/// Keeps entries away from zero so relu kinks never fall inside the stencil.
fn away_from_zero(x: RealTensor) -> RealTensor {
    let mut x = x;
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let v = x.get(r, c);
            x.set(r, c, v + 0.05 * v.signum());
        }
    }
    x
}

type Primitive = fn(&Tape, &[Var], usize, usize) -> Result<Var, NumericsError>;

fn primitives() -> Vec<(&'static str, usize, Primitive)> {
    // (name, number of n x m inputs, op)
    vec![
        ("matmul", 2, |t, v, _, _| {
            let bt = t.transpose(v[1])?;
            t.matmul(v[0], bt)
        }),
        ("add", 2, |t, v, _, _| t.add(v[0], v[1])),
        ("sub", 2, |t, v, _, _| t.sub(v[0], v[1])),
        ("mul", 2, |t, v, _, _| t.mul(v[0], v[1])),
        ("div", 2, |t, v, _, _| {
            let sq = t.mul(v[1], v[1])?;
            let d = t.offset(sq, 0.5)?;
            t.div(v[0], d)
        }),
        ("sqrt", 1, |t, v, _, _| {
            let sq = t.mul(v[0], v[0])?;
            let d = t.offset(sq, 0.5)?;
            t.sqrt(d)
        }),
        ("log2_1p", 1, |t, v, _, _| {
            let sq = t.mul(v[0], v[0])?;
            t.log2_1p(sq)
        }),
        ("scale", 1, |t, v, _, _| t.scale(v[0], -2.5)),
        ("relu", 1, |t, v, _, _| t.activation(v[0], Activation::Relu)),
        ("tanh", 1, |t, v, _, _| t.activation(v[0], Activation::Tanh)),
        ("softmax", 1, |t, v, _, _| t.activation(v[0], Activation::Softmax)),
        ("clamp_min", 1, |t, v, _, _| t.clamp_min(v[0], 0.0)),
        ("add_bias", 2, |t, v, _, _| {
            let b = t.slice_rows(v[1], 0, 1)?;
            t.add_bias(v[0], b)
        }),
        ("mul_cols", 2, |t, v, _, _| {
            let b = t.slice_rows(v[1], 0, 1)?;
            t.mul_cols(v[0], b)
        }),
        ("add_diag", 2, |t, v, _, _| {
            let sq = t.matmul(t.transpose(v[0])?, v[0])?;
            let d = t.slice_cols(t.slice_rows(v[1], 0, 1)?, 0, 1)?;
            t.add_diag(sq, d)
        }),
        ("row_sum", 1, |t, v, _, _| t.row_sum(v[0])),
        ("col_sum", 1, |t, v, _, _| t.col_sum(v[0])),
        ("sum_pool", 2, |t, v, _, _| t.sum_pool(&[v[0], v[1], v[0]])),
        ("pool_rows", 1, |t, v, n, _| {
            let groups = vec![(0..n).rev().collect(), vec![], (0..n).step_by(2).collect()];
            t.pool_rows(v[0], groups)
        }),
        ("concat_cols", 2, |t, v, _, _| t.concat_cols(&[v[1], v[0]])),
        ("concat_rows", 2, |t, v, _, _| t.concat_rows(&[v[0], v[1]])),
        ("slice_cols", 1, |t, v, _, m| t.slice_cols(v[0], m / 2, m - m / 2)),
        ("gather_rows", 1, |t, v, n, _| t.gather_rows(v[0], (0..2 * n).map(|i| (i * 7) % n).collect())),
        ("reshape", 1, |t, v, n, m| t.reshape(v[0], vec![m, n])),
        ("diag_blocks", 1, |t, v, _, _| {
            let sq = t.matmul(t.transpose(v[0])?, v[0])?;
            let stacked = t.concat_rows(&[sq, sq])?;
            t.diag_blocks(stacked)
        }),
        ("cmatmul_cabs2", 2, |t, v, _, _| {
            let a = robustbf::numerics::CVar { re: v[0], im: v[1] };
            let ah = t.conj_transpose(a)?;
            let p = t.cmatmul(ah, a)?;
            t.cabs2(p)
        }),
        ("csolve", 2, |t, v, _, m| {
            // A = X^H X + m I is Hermitian positive definite
            let x = robustbf::numerics::CVar { re: v[0], im: v[1] };
            let xh = t.conj_transpose(x)?;
            let g = t.cmatmul(xh, x)?;
            let shift = t.constant(RealTensor::scalar(m as f64)?);
            let a = robustbf::numerics::CVar {
                re: t.add_diag(g.re, shift)?,
                im: g.im,
            };
            let b = t.cslice_cols(xh, 0, 1)?;
            let s = t.csolve(a, b)?;
            t.cabs2(s)
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_primitive_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = derive_rng(seed, &[]);
        let n = rng.random_range(2..=4);
        let m = rng.random_range(2..=4);
        for (name, arity, op) in primitives() {
            let inputs: Vec<RealTensor> =
                (0..arity).map(|_| away_from_zero(uniform(&mut rng, n, m, -1.0, 1.0))).collect();
            let err = fd_max_rel_err(&inputs, 1e-5, |t, v| {
                let out = op(t, v, n, m)?;
                weighted_sum(t, out, seed)
            });
            prop_assert!(err < 1e-4, "{name}: relative error {err:.3e} at n={n}, m={m}");
        }
    }

    #[test]
    fn replay_is_bit_identical(seed in any::<u64>()) {
        let mut rng = derive_rng(seed, &[]);
        let x = uniform(&mut rng, 3, 4, -1.0, 1.0);
        let w = uniform(&mut rng, 4, 5, -1.0, 1.0);
        let run = || {
            let t = Tape::new();
            let (xv, wv) = (t.param(x.clone()), t.param(w.clone()));
            let h = t.activation(t.matmul(xv, wv).unwrap(), Activation::Tanh).unwrap();
            let s = t.activation(h, Activation::Softmax).unwrap();
            let loss = weighted_sum(&t, s, seed).unwrap();
            let g = t.backward(loss).unwrap();
            (t.item(loss).to_bits(), g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0, b.0);
        prop_assert!(a.1.data().iter().zip(b.1.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        prop_assert!(a.2.data().iter().zip(b.2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn csolve_residual_is_small(seed in any::<u64>(), n in 1usize..=6, k in 1usize..=3) {
        let mut rng = derive_rng(seed, &[]);
        // diagonally dominant, so comfortably conditioned
        let mut a = complex(&mut rng, n, n);
        for i in 0..n {
            let (re, im) = a.get(i, i);
            a.set(i, i, (re + 2.0 * n as f64, im));
        }
        let b = complex(&mut rng, n, k);
        let t = Tape::new();
        let x = t.csolve(t.cconstant(&a), t.cconstant(&b)).unwrap();
        let ax = t.cvalue(t.cmatmul(t.cconstant(&a), x).unwrap());
        let scale = (a.frobenius_sqr() * t.cvalue(x).frobenius_sqr()).sqrt().max(1.0);
        prop_assert!(ax.max_abs_diff(&b) <= 1e-12 * scale, "residual {:.3e}", ax.max_abs_diff(&b));
    }

    #[test]
    fn adam_counts_steps_and_keeps_shapes(seed in any::<u64>(), steps in 1usize..6) {
        let mut rng = derive_rng(seed, &[]);
        let mut params = vec![uniform(&mut rng, 2, 3, -1.0, 1.0), uniform(&mut rng, 1, 3, -1.0, 1.0)];
        let mut state = AdamState::new(&params);
        for s in 0..steps {
            let grads = vec![uniform(&mut rng, 2, 3, -1.0, 1.0), uniform(&mut rng, 1, 3, -1.0, 1.0)];
            adam_step(&mut params, &grads, &mut state, 1e-3).unwrap();
            prop_assert_eq!(state.t as usize, s + 1);
        }
        prop_assert_eq!(params[0].shape(), &[2, 3]);
        prop_assert!(params.iter().all(|p| p.is_finite()));
    }
}

/// All vectors of length `len` over `grid`.
fn all_vectors(grid: &[f64], len: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|v| {
                grid.iter().map(move |&g| {
                    let mut w = v.clone();
                    w.push(g);
                    w
                })
            })
            .collect();
    }
    out
}

#[test]
fn order_statistics_match_sorting_exhaustively() {
    let grid = [-1.5, 0.0, 0.25, 2.0];
    let mut checked = 0;
    for len in 1..=6 {
        for v in all_vectors(&grid, len) {
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            for rank in 1..=len {
                let t = Tape::new();
                let x = t.param(RealTensor::column(v.clone()).unwrap());
                let sel = t.order_select(x, rank).unwrap();
                let want = sorted[rank - 1];
                assert_eq!(t.item(sel), want, "{v:?} rank {rank}");
                // the gradient lands on the lowest index holding the value
                let g = t.backward(sel).unwrap();
                let gx = g.get(x).unwrap().data().to_vec();
                let first = v.iter().position(|&e| e == want).unwrap();
                let expected: Vec<f64> = (0..len).map(|i| if i == first { 1.0 } else { 0.0 }).collect();
                assert_eq!(gx, expected, "{v:?} rank {rank}");
                checked += 1;
            }
            let t = Tape::new();
            let x = t.param(RealTensor::column(v.clone()).unwrap());
            let mn = t.min_reduce(x).unwrap();
            assert_eq!(t.item(mn), sorted[0]);
            let gx = t.backward(mn).unwrap().get(x).unwrap().data().to_vec();
            let first = v.iter().position(|&e| e == sorted[0]).unwrap();
            assert_eq!(gx.iter().position(|&g| g == 1.0), Some(first));
            assert_eq!(gx.iter().filter(|&&g| g != 0.0).count(), 1);
        }
    }
    assert!(checked > 20_000);
}

#[test]
fn min_rows_matches_row_minima() {
    let grid = [0.0, 1.0, -1.0];
    for v in all_vectors(&grid, 6) {
        let t = Tape::new();
        let x = t.param(RealTensor::matrix(2, 3, v.clone()).unwrap());
        let m = t.min_rows(x).unwrap();
        let got = t.value(m).data().to_vec();
        let want: Vec<f64> = v.chunks(3).map(|r| r.iter().cloned().fold(f64::INFINITY, f64::min)).collect();
        assert_eq!(got, want);
    }
}

#[test]
fn complex_identity_solve_returns_rhs() {
    let mut rng = derive_rng(3, &[]);
    let b = complex(&mut rng, 3, 2);
    let eye = ComplexMat::new(RealTensor::identity(3), RealTensor::zeros(vec![3, 3])).unwrap();
    let t = Tape::new();
    let x = t.cvalue(t.csolve(t.cconstant(&eye), t.cconstant(&b)).unwrap());
    assert!(x.max_abs_diff(&b) < 1e-15);
}
