use snlab::conv::ConvGeometry;
use snlab::init::InitScheme;
use snlab::nn::{self, hessian_sigma_estimate, hvp, Activation, Layer, Network};
use snlab::power::IterMode;
use snlab::specnorm::{apply_normalization, normalize_strict, raw_gradients, NormKind, NormMode, NormStates};
use snlab::theorems::{check_hessian_bounds, setd_ratio_scan};
use snlab::{Rng, Tensor};

fn sigmoid_second(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 - s) * (1.0 - 2.0 * s)
}

#[test]
fn single_sigmoid_layer_hessian_is_rank_one() {
    let mut rng = Rng::new(0);
    for _ in 0..10 {
        let w = Tensor::from_fn(&[1, 6], || rng.gaussian());
        let net = Network::new(vec![Layer::dense(w.clone(), Activation::Sigmoid).unwrap()], NormMode::default()).unwrap();
        let x = rng.gaussian_vec(6);
        let z = snlab::tensor::dot(w.data(), &x);
        let xsq = snlab::tensor::norm(&x).powi(2);

        // H = σ''(z)·x xᵀ
        let v = Tensor::from_fn(&[1, 6], || rng.gaussian());
        let hv = hvp(&net, &x, 0, &v, 1e-4).unwrap();
        let coef = sigmoid_second(z) * snlab::tensor::dot(&x, v.data());
        for (h, xi) in hv.data().iter().zip(&x) {
            assert!((h - coef * xi).abs() < 1e-6 * (1.0 + coef.abs()));
        }
        let est = hessian_sigma_estimate(&net, &x, 0, 200).unwrap();
        assert!((est.sigma - sigmoid_second(z).abs() * xsq).abs() < 1e-5 * xsq);
    }
}

#[test]
fn hessian_bound_general_form_holds_for_unnormalized_nets() {
    let mut rng = Rng::new(1);
    let net = Network::dense(&[4, 6, 6, 1], Activation::ReLU, Activation::Sigmoid, &InitScheme::lecun(), &mut rng).unwrap();
    let xs: Vec<Vec<f64>> = (0..10).map(|_| rng.gaussian_vec(4)).collect();
    let r = check_hessian_bounds(&net, &xs, 200).unwrap();
    assert!(r.samples.iter().all(|s| s.estimate <= s.bound * (1.0 + 1e-3) + 1e-5 * s.x_norm_sq));
}

/// Finite differences of `D(x; s·w/σ(w))` with respect to the raw weights.
fn normalized_output(net: &Network, x: &[f64]) -> f64 {
    nn::output(&normalize_strict(net, net.norm).unwrap(), x).unwrap()
}

fn check_raw_gradients(net: Network, x: &[f64]) {
    let mut states = NormStates::for_network(&net, 3);
    let normalized = apply_normalization(&net, &mut states, IterMode::EXACT).unwrap();
    let grads = raw_gradients(&net, &normalized, &states, x).unwrap();
    let h = 1e-6;
    for t in 0..net.depth() {
        let base: Vec<Tensor> = net.weights().into_iter().cloned().collect();
        let mut num = vec![0.0; base[t].len()];
        for (i, slot) in num.iter_mut().enumerate() {
            let eval = |d: f64| {
                let mut ws = base.clone();
                ws[t].data_mut()[i] += d;
                normalized_output(&net.with_weights(ws).unwrap(), x)
            };
            *slot = (eval(h) - eval(-h)) / (2.0 * h);
        }
        let ana = grads[t].data();
        let err: f64 = num.iter().zip(ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-4 * snlab::tensor::norm(ana).max(1e-8), "layer {t}: err {err}");
    }
}

#[test]
fn raw_weight_gradients_match_finite_differences() {
    let mut rng = Rng::new(4);
    let net = Network::dense(&[3, 5, 4, 1], Activation::LeakyReLU(0.2), Activation::Sigmoid, &InitScheme::lecun(), &mut rng)
        .unwrap()
        .with_norm(NormMode::scaled(NormKind::SNw, 1.5))
        .unwrap();
    check_raw_gradients(net, &rng.gaussian_vec(3));

    for kind in [NormKind::SNw, NormKind::SNConv, NormKind::BSN] {
        let geom = ConvGeometry::new([2, 5, 5], 1, 1);
        let conv = Layer::conv(Tensor::from_fn(&[2, 2, 3, 3], || rng.gaussian()), geom, Activation::LeakyReLU(0.2)).unwrap();
        let dense = Layer::dense(Tensor::from_fn(&[1, 50], || rng.gaussian()), Activation::Identity).unwrap();
        let net = Network::new(vec![conv, dense], NormMode::new(kind)).unwrap();
        check_raw_gradients(net, &rng.gaussian_vec(50));
    }
}

#[test]
fn ratio_scan_is_exact_on_diagonal_paths() {
    // Scaled permutation layers, positive last layer and positive inputs
    // make every ReLU active: gradient norms are exactly inversely
    // proportional to the layer σs.
    let mut rng = Rng::new(5);
    let perm = |n: usize, s: f64| {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + (i + 1) % n] = s;
        }
        t
    };
    let layers = vec![
        Layer::dense(perm(4, 2.0), Activation::ReLU).unwrap(),
        Layer::dense(perm(4, 0.5), Activation::ReLU).unwrap(),
        Layer::dense(Tensor::new(vec![1, 4], vec![0.5; 4]).unwrap(), Activation::Identity).unwrap(),
    ];
    let net = Network::new(layers, NormMode::default()).unwrap();
    let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.uniform_in(0.5, 1.5)).collect()).collect();
    let scan = setd_ratio_scan(&[net], 5, &xs, 1.0, &mut rng).unwrap();
    assert_eq!(scan.points.len(), 5 * 3);
    assert!(scan.max_log_gap < 1e-12, "gap {}", scan.max_log_gap);
}

#[test]
fn ratio_scan_single_layer_is_trivial() {
    let mut rng = Rng::new(6);
    let net = Network::dense(&[3, 1], Activation::ReLU, Activation::Identity, &InitScheme::lecun(), &mut rng).unwrap();
    let xs = vec![rng.gaussian_vec(3)];
    let scan = setd_ratio_scan(&[net], 2, &xs, 1.0, &mut rng).unwrap();
    assert!(scan.points.iter().all(|p| p.grad_norm_ratio == 1.0 && p.inverse_sigma_ratio == 1.0));
}
