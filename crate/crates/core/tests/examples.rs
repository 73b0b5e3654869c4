use rflow_core::estimator::{count_params, EstimatorConfig};
use rflow_core::graph::Graph;
use rflow_core::metrics::{alignment_accuracy, fit_gaussian, frechet_w2};
use rflow_core::rfm::logit_normal_weight;
use rflow_core::rng::{self, Purpose};
use rflow_core::toydata::{gen_events, gen_gauss, EventTaskSpec, GaussTaskSpec};
use rflow_core::{Estimator, Tensor};

#[test]
fn conv_of_ramp_with_box_kernel() {
    let mut g: Graph<'_, f64> = Graph::new();
    let x = g.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
    let w = g.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap());
    let y = g.conv1d(x, w, None, 1).unwrap();
    assert_eq!(g.value(y), &[3.0, 6.0, 5.0]);
}

#[test]
fn softmax_of_zero_and_ln3() {
    let mut g: Graph<'_, f64> = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap());
    let y = g.softmax_lastdim(x).unwrap();
    assert!((g.value(y)[0] - 0.25).abs() < 1e-15);
    assert!((g.value(y)[1] - 0.75).abs() < 1e-15);
}

#[test]
fn square_gradient_at_three() {
    let mut g: Graph<'_, f64> = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let y = g.mul(x, x).unwrap();
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
}

#[test]
fn matmul_sum_gradient_is_row_sums_of_b() {
    let mut r = rng::stream(5, Purpose::Probe, 0, 0);
    let a = rng::normal_tensor::<f64>(&mut r, &[3, 4]);
    let b = rng::normal_tensor::<f64>(&mut r, &[4, 2]);
    let mut g: Graph<'_, f64> = Graph::new();
    let av = g.leaf(a, true);
    let bv = g.constant(b.clone());
    let y = g.matmul(av, bv).unwrap();
    let l = g.sum(y).unwrap();
    let grad = g.backward(l).unwrap();
    let ga = grad.wrt(av).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            assert!((ga[i * 4 + k] - b.row(k).iter().sum::<f64>()).abs() < 1e-12);
        }
    }
}

#[test]
fn tiny_parameter_count_is_frozen() {
    let cfg = EstimatorConfig::tiny(4, 8, 2, 64);
    assert_eq!(count_params(&cfg), 120_516);
    assert_eq!(Estimator::new(cfg.clone(), 0).unwrap().params.numel(), 120_516);
    let zero = EstimatorConfig { layers: 0, ..cfg };
    assert_eq!(count_params(&zero), 20_804);
}

#[test]
fn weight_integrates_to_one() {
    // Substituting t = sigmoid(s) turns the integral into that of a standard
    // normal density over s, so trapezoid sums in s converge fast.
    let (lo, hi, n) = (-12.0f64, 12.0f64, 24_000);
    let ds = (hi - lo) / n as f64;
    let mut total = 0.0;
    for i in 0..=n {
        let s = lo + ds * i as f64;
        let t = 1.0 / (1.0 + (-s).exp());
        let w = logit_normal_weight(t).unwrap() * t * (1.0 - t);
        total += if i == 0 || i == n { 0.5 * w } else { w };
    }
    assert!((total * ds - 1.0).abs() < 1e-6, "{}", total * ds);
}

#[test]
fn gauss_class_means_converge() {
    let spec = GaussTaskSpec {
        samples_per_class: 10_000,
        num_classes: 2,
        ..GaussTaskSpec::default()
    };
    let items = gen_gauss(&spec).unwrap();
    let means = spec.class_means();
    for k in 0..2 {
        let xs: Vec<Vec<f64>> = items
            .iter()
            .enumerate()
            .filter(|(i, _)| spec.class_of(*i) == k)
            .map(|(_, it)| it.x1.data().iter().map(|&v| v as f64).collect())
            .collect();
        let fit = fit_gaussian(&xs).unwrap();
        let tol = 4.0 * spec.std / (xs.len() as f64).sqrt();
        for d in 0..2 {
            assert!((fit.mean[d] - means[k][d]).abs() < tol);
        }
    }
}

#[test]
fn gauss_unit_covariance_converges() {
    let spec = GaussTaskSpec {
        std: 1.0,
        num_classes: 1,
        samples_per_class: 10_000,
        ..GaussTaskSpec::default()
    };
    let xs: Vec<Vec<f64>> = gen_gauss(&spec)
        .unwrap()
        .iter()
        .map(|it| it.x1.data().iter().map(|&v| v as f64).collect())
        .collect();
    let fit = fit_gaussian(&xs).unwrap();
    let frob: f64 = fit
        .cov
        .iter()
        .zip([1.0, 0.0, 0.0, 1.0])
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    assert!(frob < 0.1, "{frob}");
}

#[test]
fn gauss_headroom_between_ground_truth_batches() {
    let spec = GaussTaskSpec::default();
    for k in 0..spec.num_classes {
        let a = rflow_core::metrics::flatten(&spec.class_batch(k, 512, 1));
        let b = rflow_core::metrics::flatten(&spec.class_batch(k, 512, 2));
        let w = frechet_w2(&fit_gaussian(&a).unwrap(), &fit_gaussian(&b).unwrap()).unwrap();
        assert!(w < 0.02, "class {k}: {w}");
    }
}

#[test]
fn clean_events_are_fully_aligned() {
    let spec = EventTaskSpec {
        num_items: 100,
        ..EventTaskSpec::default()
    };
    let items = gen_events(&spec).unwrap();
    let xs: Vec<_> = items.iter().map(|i| i.x1.clone()).collect();
    let cs: Vec<_> = items.iter().map(|i| i.c.clone()).collect();
    let r = alignment_accuracy(&xs, &cs, &spec).unwrap();
    assert_eq!(r.accuracy, 1.0);
    let scaled: Vec<_> = xs.iter().map(|x| x.map(|v| 7.5 * v)).collect();
    assert_eq!(alignment_accuracy(&scaled, &cs, &spec).unwrap(), r);
}

#[test]
fn pure_noise_scores_at_chance() {
    let spec = EventTaskSpec {
        num_items: 400,
        ..EventTaskSpec::default()
    };
    let items = gen_events(&spec).unwrap();
    let cs: Vec<_> = items.iter().map(|i| i.c.clone()).collect();
    let xs: Vec<_> = (0..cs.len())
        .map(|i| rng::normal_tensor(&mut rng::stream(3, Purpose::Sample, i as u64, 0), &[64, 4]))
        .collect();
    let r = alignment_accuracy(&xs, &cs, &spec).unwrap();
    assert!(
        (r.accuracy - r.chance).abs() < 3.0 * r.chance_sigma(),
        "{} vs chance {} ± {}",
        r.accuracy,
        r.chance,
        r.chance_sigma()
    );
}

#[test]
fn alignment_shape_mismatch() {
    let spec = EventTaskSpec::default();
    let items = gen_events(&EventTaskSpec {
        num_items: 1,
        ..spec.clone()
    })
    .unwrap();
    let bad = vec![Tensor::zeros(&[32, 4])];
    assert!(alignment_accuracy(&bad, &[items[0].c.clone()], &spec).is_err());
}
