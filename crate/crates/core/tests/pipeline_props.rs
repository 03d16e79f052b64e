mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use robustbf::beamform::{mrt, normalize_features, recover_perfect, recover_robust, rzf, BeamFeatures, BeamMatrix};
use robustbf::bgnn::{BgnnConfig, BgnnParams, MessagesState};
use robustbf::channel::{dbm_to_mw, derive_rng, gen_channel, gen_errors, stream, Dataset, SystemConfig};
use robustbf::metrics::{daqe, empirical_outage, min_rates, sinr};
use robustbf::numerics::{Activation, ComplexMat, RealTensor, Tape};
use robustbf::powermin::{bisect_monotone, BisectConfig, BisectStatus};
use robustbf::training::{sample_loss, Mode, Model};

fn channel(rng: &mut ChaCha8Rng, n: usize, k: usize) -> ComplexMat {
    let cfg = SystemConfig {
        n_antennas: n,
        n_users: k,
        ..SystemConfig::default()
    };
    gen_channel(rng, &cfg).unwrap().h_est
}

fn positive(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.random_range(0.05..1.0)).collect()
}

fn random_features(rng: &mut ChaCha8Rng, k: usize, p_mw: f64) -> BeamFeatures {
    let raw_s: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..20.0)).collect();
    let (pt, qt) = (positive(rng, k), positive(rng, k));
    normalize_features(&raw_s, &pt, &qt, p_mw).unwrap().0
}

fn tiny(head_dim: usize, head_activation: Activation) -> BgnnConfig {
    BgnnConfig {
        layers: 2,
        message_dim: 2,
        hidden: 8,
        head_dim,
        head_activation,
        power_input: true,
    }
}

fn decisions(net: &BgnnParams, h: &ComplexMat, p_dbm: f64, init: &MessagesState) -> RealTensor {
    let tape = Tape::new();
    let out = net.bind(&tape, false).forward(&tape, h, p_dbm, init).unwrap();
    tape.value(out)
}

fn permute_rows(x: &RealTensor, order: &[usize]) -> RealTensor {
    let rows = x.to_rows();
    RealTensor::from_rows(&order.iter().map(|&r| rows[r].clone()).collect::<Vec<_>>()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn seeded_generation_reproduces(seed in any::<u64>()) {
        let cfg = SystemConfig::default();
        let a = Dataset::generate(&cfg, seed, 5, 2, 2).unwrap();
        let b = Dataset::generate(&cfg, seed, 5, 2, 2).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn every_recovery_path_is_power_tight(seed in any::<u64>(), n in 1usize..=6, k in 1usize..=4, p_dbm in 0.0f64..35.0) {
        let mut rng = derive_rng(seed, &[]);
        let h = channel(&mut rng, n, k);
        let p = dbm_to_mw(p_dbm);
        let noise = vec![SystemConfig::default().noise_power_mw(); k];
        let feats = random_features(&mut rng, k, p);
        let paths = [
            recover_robust(&h, &feats, &noise).unwrap(),
            recover_perfect(&h, &feats.p, &feats.q, &noise).unwrap(),
            rzf(&h, &feats.p, &noise).unwrap(),
            mrt(&h, &feats.p).unwrap(),
        ];
        for w in paths {
            prop_assert!((w.total_power() - p).abs() <= 1e-9 * p);
        }
    }

    #[test]
    fn user_phase_rotation_rotates_its_beam(seed in any::<u64>(), theta in 0.0f64..std::f64::consts::TAU) {
        let mut rng = derive_rng(seed, &[]);
        let (n, k) = (4, 3);
        let h = channel(&mut rng, n, k);
        let noise = vec![0.3; k];
        let feats = random_features(&mut rng, k, 100.0);
        let user = rng.random_range(0..k);
        let (c, s) = (theta.cos(), theta.sin());
        let mut rotated = h.clone();
        for i in 0..n {
            let (a, b) = h.get(i, user);
            rotated.set(i, user, (a * c - b * s, a * s + b * c));
        }
        let w0 = recover_robust(&h, &feats, &noise).unwrap().w;
        let w1 = recover_robust(&rotated, &feats, &noise).unwrap().w;
        for i in 0..n {
            let (a, b) = w0.get(i, user);
            let (x, y) = w1.get(i, user);
            prop_assert!((x - (a * c - b * s)).abs() < 1e-9 && (y - (a * s + b * c)).abs() < 1e-9);
        }
        // all gains |h_j^H w_k| unchanged
        let g0 = sinr(&h, &BeamMatrix { w: w0 }, &noise).unwrap();
        let g1 = sinr(&rotated, &BeamMatrix { w: w1 }, &noise).unwrap();
        for (a, b) in g0.iter().zip(&g1) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn power_weight_scaling_is_ignored(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut rng = derive_rng(seed, &[]);
        let k = 4;
        let (pt, qt) = (positive(&mut rng, k), positive(&mut rng, k));
        let scaled: Vec<f64> = pt.iter().map(|v| v * c).collect();
        let a = normalize_features(&vec![0.0; k], &pt, &qt, 50.0).unwrap().0;
        let b = normalize_features(&vec![0.0; k], &scaled, &qt, 50.0).unwrap().0;
        for (x, y) in a.p.iter().zip(&b.p) {
            prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
        }
        prop_assert!((a.p.iter().sum::<f64>() - 50.0).abs() < 1e-9);
        prop_assert!((a.q.iter().sum::<f64>() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn quantile_sits_between_its_order_statistics(seed in any::<u64>(), u in 20usize..300, pct in 5usize..60) {
        let mut rng = derive_rng(seed, &[]);
        let (n, k) = (3, 2);
        let h = channel(&mut rng, n, k);
        let rho = pct as f64 / 100.0;
        let w = mrt(&h, &positive(&mut rng, k)).unwrap();
        let noise = vec![0.3; k];
        let errs = gen_errors(&mut rng, 0.075, n, k, u).unwrap();
        let q = daqe(&h, &w, &errs, rho, 10.0, &noise).unwrap();
        prop_assert!((0.0..1.0).contains(&q.beta));
        let mut mins = min_rates(&h, &w, &errs, 10.0, &noise).unwrap();
        mins.sort_by(f64::total_cmp);
        let (lo, hi) = (mins[q.lower - 1], mins[q.upper - 1]);
        prop_assert!(lo <= q.r_hat + 1e-12 && q.r_hat <= hi + 1e-12);
        // outage on the same batch is pinned by the two ranks
        // (slack absorbs last-bit differences between the two rate paths)
        let above = empirical_outage(&h, &w, &errs, q.r_hat + 1e-9, 10.0, &noise).unwrap();
        let below = empirical_outage(&h, &w, &errs, q.r_hat - 1e-9, 10.0, &noise).unwrap();
        let idx = u as f64 * rho;
        prop_assert!(above >= idx.floor() / u as f64 - 1e-12 && below <= idx.ceil() / u as f64 + 1e-12,
            "outage [{below}, {above}] vs ranks [{}, {}]", idx.floor() / u as f64, idx.ceil() / u as f64);
    }

    #[test]
    fn bgnn_decisions_are_permutation_equivariant(seed in any::<u64>(), n in 1usize..=5, k in 1usize..=5) {
        let mut rng = derive_rng(seed, &[]);
        let nets = [
            BgnnParams::init(&mut rng, &tiny(1, Activation::Linear)).unwrap(),
            BgnnParams::init(&mut rng, &tiny(2, Activation::Softmax)).unwrap(),
        ];
        let h = channel(&mut rng, n, k);
        let p_dbm = rng.random_range(0.0..35.0);
        let mut ant: Vec<usize> = (0..n).collect();
        let mut users: Vec<usize> = (0..k).collect();
        ant.shuffle(&mut rng);
        users.shuffle(&mut rng);
        let mut hp = ComplexMat::zeros(n, k);
        for (i, &a) in ant.iter().enumerate() {
            for (j, &u) in users.iter().enumerate() {
                hp.set(i, j, h.get(a, u));
            }
        }
        let edges: Vec<usize> = ant.iter().flat_map(|&a| users.iter().map(move |&u| a * k + u)).collect();
        for net in &nets {
            let c = &net.config;
            let init = robustbf::bgnn::init_messages(&mut rng, n, k, c.message_dim, c.head_dim);
            let permuted = MessagesState {
                g: permute_rows(&init.g, &users),
                b: permute_rows(&init.b, &users),
                m: permute_rows(&init.m, &edges),
            };
            let base = decisions(net, &h, p_dbm, &init);
            let got = decisions(net, &hp, p_dbm, &permuted);
            let want = permute_rows(&base, &users);
            prop_assert_eq!(got.data(), want.data());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bisection_inverts_increasing_functions(a in 0.2f64..5.0, b in -20.0f64..20.0, curv in 0.0f64..0.05, frac in 0.0f64..1.0) {
        // strictly increasing r(P) = b + a P + curv P^2 on [0, 35] dBm
        let f = |p: f64| b + a * p + curv * p * p;
        let target = f(0.0) + frac * (f(35.0) - f(0.0));
        let cfg = BisectConfig { target_mbps: target, ..BisectConfig::default() };
        let res = bisect_monotone(&cfg, |p| Ok(f(p))).unwrap();
        prop_assert!(res.iterations <= cfg.iteration_bound());
        let BisectStatus::Feasible { p_dbm, rate_mbps } = res.status else {
            return Err(TestCaseError::fail("target inside the range reported infeasible"));
        };
        prop_assert!(rate_mbps >= target - cfg.tolerance_mbps);
        // exact inverse
        let p_star = if curv == 0.0 {
            (target - b) / a
        } else {
            (-a + (a * a + 4.0 * curv * (target - b)).sqrt()) / (2.0 * curv)
        };
        let slope = a + 2.0 * curv * p_star;
        prop_assert!((p_dbm - p_star).abs() <= cfg.power_tol_db.max(cfg.tolerance_mbps / slope) + 1e-9,
            "P {p_dbm} vs exact {p_star}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn end_to_end_gradient_matches_finite_differences(seed in any::<u64>()) {
        let sys = SystemConfig { n_antennas: 2, n_users: 2, outage_target: 0.3, ..SystemConfig::default() };
        let mut rng = derive_rng(seed, &[stream::INIT]);
        let mut model = Model::init(&mut rng, Mode::Proposed, &tiny(1, Activation::Linear), &tiny(2, Activation::Softmax), 2, 2).unwrap();
        let sample = gen_channel(&mut rng, &sys).unwrap();
        let errs = gen_errors(&mut rng, sys.error_variance, 2, 2, 8).unwrap();
        let msgs = model.messages(seed, &[0], 2, 2);
        let noise = sys.noise_powers_mw();
        let p_dbm = rng.random_range(0.0..35.0);
        let value = |m: &Model| {
            let w = m.beams(&sample.h_est, dbm_to_mw(p_dbm), &noise, &msgs).unwrap();
            -daqe(&sample.h_est, &w, &errs, 0.3, sys.bandwidth_mhz(), &noise).unwrap().r_hat
        };
        // skip instances whose sorted min-rates nearly tie
        let w = model.beams(&sample.h_est, dbm_to_mw(p_dbm), &noise, &msgs).unwrap();
        let mut mins = min_rates(&sample.h_est, &w, &errs, sys.bandwidth_mhz(), &noise).unwrap();
        mins.sort_by(f64::total_cmp);
        prop_assume!(mins.windows(2).all(|p| p[1] - p[0] > 1e-3));
        let analytic = sample_loss(&model, &sys, &sample, p_dbm, &errs, &msgs).unwrap();
        // purity: recomputing the loss gives the identical value
        prop_assert_eq!(analytic.loss.to_bits(), sample_loss(&model, &sys, &sample, p_dbm, &errs, &msgs).unwrap().loss.to_bits());
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut at = (0, 0, 0, 0.0, 0.0);
        let floor = 1e-4 * analytic.grads.iter().flat_map(|g| g.data()).fold(0.0f64, |m, v| m.max(v.abs()));
        for t in 0..analytic.grads.len() {
            let (rows, cols) = (analytic.grads[t].rows(), analytic.grads[t].cols());
            for r in 0..rows {
                for c in 0..cols {
                    let orig = model.tensors()[t].get(r, c);
                    model.tensors_mut()[t].set(r, c, orig + h);
                    let plus = value(&model);
                    model.tensors_mut()[t].set(r, c, orig - h);
                    let minus = value(&model);
                    model.tensors_mut()[t].set(r, c, orig);
                    let fd = (plus - minus) / (2.0 * h);
                    let a = analytic.grads[t].get(r, c);
                    // roundoff in the differenced loss swamps entries far
                    // below the gradient's scale, hence the scaled floor
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
                    if rel > worst {
                        worst = rel;
                        at = (t, r, c, a, fd);
                    }
                }
            }
        }
        prop_assert!(worst < 1e-4, "relative error {worst:.3e} at {at:?}");
    }
}

#[test]
fn parameter_count_independent_of_graph_size() {
    let counts: Vec<usize> = [(2, 2), (4, 4), (8, 3), (3, 8)]
        .iter()
        .map(|&(n, k)| {
            Model::init(&mut derive_rng(1, &[]), Mode::Proposed, &BgnnConfig::snet(), &BgnnConfig::pnet(), n, k)
                .unwrap()
                .parameter_count()
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
}

#[test]
fn model_trained_at_one_size_runs_at_another() {
    let sys = SystemConfig { n_antennas: 6, n_users: 3, ..SystemConfig::default() };
    let model = Model::init(&mut derive_rng(5, &[]), Mode::Proposed, &BgnnConfig::snet(), &BgnnConfig::pnet(), 4, 4).unwrap();
    let h = gen_channel(&mut derive_rng(6, &[]), &sys).unwrap().h_est;
    let msgs = model.messages(1, &[0], 6, 3);
    let w = model.beams(&h, 100.0, &sys.noise_powers_mw(), &msgs).unwrap();
    assert_eq!((w.w.rows(), w.w.cols()), (6, 3));
    assert!((w.total_power() - 100.0).abs() < 1e-9 * 100.0);
}
