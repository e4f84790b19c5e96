mod common;

use advlab_core::data::two_moons;
use advlab_core::flow::{fit_mle, merge_levels, split_levels, FlowConfig, FlowModel, FlowTrainConfig};
use advlab_core::rng::seeded;
use common::*;
use ndarray::{Array2, ArrayD, IxDyn};
use proptest::prelude::*;

#[test]
fn random_flow_round_trips_in_both_precisions() {
    let flow = random_flow([3, 8, 8], 2, 3, 16, 1);
    let x = images(32, [3, 8, 8], 0.0, 1.0, 2);
    let (z, _) = flow.forward_transform(&x).unwrap();
    let back = flow.inverse_transform(&z).unwrap();
    assert!(max_abs_diff(&back, &x) < 1e-8);

    let flow32 = flow.cast::<f32>();
    let x32 = x.mapv(|v| v as f32);
    let (z32, _) = flow32.forward_transform(&x32).unwrap();
    let back32 = flow32.inverse_transform(&z32).unwrap();
    assert!(max_abs_diff(&back32, &x32) < 1e-4);
}

#[test]
fn inverse_log_det_cancels_forward_log_det() {
    let flow = random_flow([2, 4, 4], 2, 2, 8, 3);
    let x = images(8, [2, 4, 4], 0.0, 1.0, 4);
    let (z, fwd) = flow.forward_transform(&x).unwrap();
    let (_, inv) = flow.inverse_with_log_det(&z).unwrap();
    for (a, b) in fwd.iter().zip(inv.iter()) {
        assert!((a + b).abs() < 1e-5);
    }
}

#[test]
fn log_prob_matches_numeric_jacobian_in_two_dimensions() {
    let flow = random_flow([2, 1, 1], 1, 3, 8, 5);
    let x = images(50, [2, 1, 1], 0.05, 0.95, 6);
    let lp = flow.log_prob(&x).unwrap();
    for (i, row) in x.outer_iter().enumerate() {
        let flat: Vec<f64> = row.iter().copied().collect();
        let (log_det, z) = numeric_log_det(&flow, &flat, 1e-5);
        let oracle = standard_normal_log_density(&z) + log_det;
        assert!(scalar_rel_err(lp.log_prob[i], oracle) < 1e-3, "sample {i}");
        assert!((lp.log_det_jacobian[i] - log_det).abs() < 1e-3 * log_det.abs().max(1.0));
        assert!((lp.log_prob[i] - lp.prior_log_prob[i] - lp.log_det_jacobian[i]).abs() < 1e-12);
    }
}

#[test]
fn multiscale_log_prob_matches_numeric_jacobian() {
    for (shape, levels) in [([4, 1, 1], 2), ([2, 2, 2], 2), ([5, 1, 1], 1)] {
        let flow = random_flow(shape, levels, 2, 8, 7);
        let x = images(10, shape, 0.05, 0.95, 8);
        let lp = flow.log_prob(&x).unwrap();
        for (i, row) in x.outer_iter().enumerate() {
            let flat: Vec<f64> = row.iter().copied().collect();
            let (log_det, z) = numeric_log_det(&flow, &flat, 1e-5);
            let oracle = standard_normal_log_density(&z) + log_det;
            assert!(scalar_rel_err(lp.log_prob[i], oracle) < 1e-3, "{shape:?} sample {i}");
        }
    }
}

#[test]
fn log_prob_input_gradient_matches_finite_differences() {
    let shape = [2, 2, 2];
    let flow = random_flow(shape, 2, 2, 8, 9);
    let x = images(3, shape, 0.1, 0.9, 10);
    let g = flow.log_prob_input_gradient(&x).unwrap();
    for (i, row) in x.outer_iter().enumerate() {
        let flat: Vec<f64> = row.iter().copied().collect();
        let f = |v: &[f64]| {
            let xi = ArrayD::from_shape_vec(IxDyn(&[1, 2, 2, 2]), v.to_vec()).unwrap();
            flow.log_prob(&xi).unwrap().log_prob[0]
        };
        let numeric = numeric_gradient(f, &flat, 1e-5);
        let analytic: Vec<f64> = g.index_axis(ndarray::Axis(0), i).iter().copied().collect();
        assert!(rel_err(&analytic, &numeric) < 1e-3, "sample {i}");
    }
}

#[test]
fn level_sizes_follow_squeeze_split_schedule() {
    let cfg = FlowConfig::new([3, 32, 32]).with_levels(4).with_steps(8);
    // independent bookkeeping: squeeze, then split half the channels off
    let (mut c, mut h, mut w) = (3usize, 32usize, 32usize);
    let mut expected = Vec::new();
    for level in 0..4 {
        c *= 4;
        h /= 2;
        w /= 2;
        if level < 3 {
            expected.push(c / 2 * h * w);
            c /= 2;
        } else {
            expected.push(c * h * w);
        }
    }
    assert_eq!(expected, vec![1536, 768, 384, 384]);
    assert_eq!(cfg.level_sizes().unwrap(), expected);
    assert_eq!(cfg.level_sizes().unwrap().iter().sum::<usize>(), 3 * 32 * 32);
}

#[test]
fn two_level_split_sizes_sum_to_dimension() {
    let cfg = FlowConfig::new([2, 4, 4]).with_levels(2);
    let sizes = cfg.level_sizes().unwrap();
    assert_eq!(sizes.len(), 2);
    assert_eq!(sizes.iter().sum::<usize>(), 32);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn merge_of_split_is_bit_exact(values in proptest::collection::vec(-1e6f64..1e6, 128)) {
        let shapes = FlowConfig::new([4, 4, 4]).with_levels(2).level_shapes().unwrap();
        let flat = Array2::from_shape_vec((2, 64), values).unwrap();
        let z = split_levels(&flat, &shapes).unwrap();
        prop_assert_eq!(merge_levels(&z), flat);
    }

    #[test]
    fn bijection_holds_for_random_flows(seed in 0u64..1000, steps in 1usize..4) {
        let flow = random_flow([2, 4, 4], 2, steps, 8, seed);
        let x = images(4, [2, 4, 4], 0.0, 1.0, seed + 1);
        let (z, _) = flow.forward_transform(&x).unwrap();
        prop_assert!(max_abs_diff(&flow.inverse_transform(&z).unwrap(), &x) < 1e-8);
        prop_assert_eq!(z.total_dim(), 32);
    }
}

fn moons_flow_config() -> (FlowConfig, FlowTrainConfig) {
    let cfg = FlowConfig::new([2, 1, 1]).with_levels(1).with_steps(6).with_hidden_width(32);
    let train = FlowTrainConfig {
        epochs: 50,
        batch_size: 64,
        learning_rate: 5e-3,
        ..FlowTrainConfig::default()
    };
    (cfg, train)
}

#[test]
fn one_epoch_fit_has_one_trace_entry() {
    let data = two_moons(64, 0.05, 0).unwrap();
    let (cfg, mut train) = moons_flow_config();
    train.epochs = 1;
    let fit = fit_mle(data.images(), cfg, &train).unwrap();
    assert_eq!(fit.nll_trace.len(), 1);
}

/// Gaussian kernel density on 2-D points with Scott's bandwidth.
struct Kde {
    points: Vec<[f64; 2]>,
    bw: [f64; 2],
}

impl Kde {
    fn fit(points: Vec<[f64; 2]>) -> Self {
        let n = points.len() as f64;
        let factor = n.powf(-1.0 / 6.0);
        let mut bw = [0.0; 2];
        for (k, b) in bw.iter_mut().enumerate() {
            let mean = points.iter().map(|p| p[k]).sum::<f64>() / n;
            let var = points.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            *b = var.sqrt() * factor;
        }
        Kde { points, bw }
    }

    fn density(&self, q: [f64; 2]) -> f64 {
        let norm = 2.0 * std::f64::consts::PI * self.bw[0] * self.bw[1] * self.points.len() as f64;
        self.points
            .iter()
            .map(|p| {
                let a = (q[0] - p[0]) / self.bw[0];
                let b = (q[1] - p[1]) / self.bw[1];
                (-0.5 * (a * a + b * b)).exp()
            })
            .sum::<f64>()
            / norm
    }

    /// Density level above which 99% of the KDE's own mass lies, estimated
    /// from samples of the KDE.
    fn level_99(&self, seed: u64) -> f64 {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = seeded(seed);
        let mut dens: Vec<f64> = (0..4000)
            .map(|_| {
                let p = self.points[rng.random_range(0..self.points.len())];
                let q = [
                    p[0] + self.bw[0] * rng.sample::<f64, _>(StandardNormal),
                    p[1] + self.bw[1] * rng.sample::<f64, _>(StandardNormal),
                ];
                self.density(q)
            })
            .collect();
        dens.sort_by(f64::total_cmp);
        dens[dens.len() / 100]
    }
}

fn points(x: &ArrayD<f64>) -> Vec<[f64; 2]> {
    x.outer_iter().map(|r| [r[[0, 0, 0]], r[[1, 0, 0]]]).collect()
}

#[test]
fn two_moons_fit_improves_likelihood_and_samples_land_on_the_moons() {
    let train = two_moons(1000, 0.05, 0).unwrap();
    let held = two_moons(500, 0.05, 1).unwrap();
    let (cfg, tc) = moons_flow_config();

    let mut untrained = FlowModel::<f64>::new(cfg.clone(), &mut advlab_core::rng::rng_for(0, "flow-init", 0)).unwrap();
    untrained.initialize(train.images()).unwrap();
    let before = untrained.log_prob(held.images()).unwrap().log_prob.mean().unwrap();

    let fit = fit_mle(train.images(), cfg, &tc).unwrap();
    assert_eq!(fit.nll_trace.len(), 50);
    assert!(*fit.nll_trace.last().unwrap() < fit.initial_nll);
    let after = fit.model.log_prob(held.images()).unwrap().log_prob.mean().unwrap();
    assert!(after > before, "held-out log-likelihood {before} -> {after}");

    let samples = fit.model.sample(1000, 1.0, &mut seeded(11)).unwrap();
    assert!(samples.iter().all(|v| v.is_finite()));
    let kde = Kde::fit(points(train.images()));
    let level = kde.level_99(12);
    let inside = points(&samples).iter().filter(|&&q| kde.density(q) >= level).count();
    assert!(inside >= 900, "{inside} of 1000 samples in the 99% region");
}

#[test]
fn round_trip_survives_training_on_small_images() {
    let x = images(64, [3, 8, 8], 0.0, 1.0, 13);
    let cfg = FlowConfig::new([3, 8, 8]).with_levels(2).with_steps(2).with_hidden_width(16);
    let tc = FlowTrainConfig {
        epochs: 20,
        batch_size: 32,
        ..FlowTrainConfig::default()
    };
    let fit = fit_mle(&x, cfg, &tc).unwrap();
    let (z, _) = fit.model.forward_transform(&x).unwrap();
    assert!(max_abs_diff(&fit.model.inverse_transform(&z).unwrap(), &x) < 1e-4);
    assert!(*fit.nll_trace.last().unwrap() <= fit.initial_nll);
}
