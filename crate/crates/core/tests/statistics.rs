use chanfuse::bayesopt::{GpModel, Matern52, DEFAULT_JITTER};
use chanfuse::dirichlet::{fit_mle, DirichletParams};
use chanfuse::rng::{stream, Domain};
use chanfuse::WeightVector;
use rand::Rng;

fn params(a: &[f64]) -> DirichletParams {
    DirichletParams::new(a.to_vec()).unwrap()
}

fn point(w: &[f64]) -> WeightVector {
    WeightVector::new(w.to_vec()).unwrap()
}

#[test]
fn density_integrates_to_one_for_two_channels() {
    let n = 10_000;
    for alpha in [[1.0, 1.0], [2.0, 3.0], [1.5, 4.0], [5.0, 5.0]] {
        let p = params(&alpha);
        let f = |x: f64| p.log_pdf(&point(&[x, 1.0 - x])).exp();
        let h = 1.0 / n as f64;
        let mut total = 0.5 * (f(0.0) + f(1.0));
        for i in 1..n {
            total += f(i as f64 * h);
        }
        total *= h;
        assert!((total - 1.0).abs() < 1e-3, "{alpha:?}: {total}");
    }
}

#[test]
fn uniform_density_is_flat() {
    let p = params(&[1.0, 1.0]);
    for x in [1e-6, 0.1, 0.37, 0.5, 0.99] {
        assert!(p.log_pdf(&point(&[x, 1.0 - x])).abs() < 1e-12);
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = stream(0, Domain::Test, 30);
    for _ in 0..1000 {
        let k = rng.random_range(2..=6);
        let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..20.0)).collect();
        let draw = params(&alpha).sample(&mut rng);
        let w: Vec<f64> = draw.as_slice().iter().map(|x| x.max(1e-6)).collect();
        let w = WeightVector::normalized(&w).unwrap();
        let grad = params(&alpha).log_pdf_grad_alpha(&w);
        for i in 0..k {
            let h = 1e-5 * alpha[i];
            let mut up = alpha.clone();
            up[i] += h;
            let mut down = alpha.clone();
            down[i] -= h;
            let fd = (params(&up).log_pdf(&w) - params(&down).log_pdf(&w)) / (2.0 * h);
            let err = (grad[i] - fd).abs() / grad[i].abs().max(1.0);
            assert!(err < 1e-4, "α {alpha:?} w {:?} i {i}: {} vs {fd}", w.as_slice(), grad[i]);
        }
    }
}

#[test]
fn mle_recovers_known_parameters() {
    let truth = [5.0, 2.0, 3.0];
    let p = params(&truth);
    let mut rng = stream(1, Domain::Test, 31);
    let draws: Vec<WeightVector> = (0..50_000).map(|_| p.sample(&mut rng)).collect();
    let fit = fit_mle(&draws).unwrap();
    assert!(fit.converged);
    for (a, t) in fit.params.as_slice().iter().zip(truth) {
        assert!((a - t).abs() / t < 0.05, "{:?}", fit.params);
    }
}

#[test]
fn sample_mean_within_three_standard_errors() {
    let n = 100_000;
    for alpha in [vec![5.0, 2.0, 3.0], vec![0.3, 0.3, 0.3, 0.1], vec![50.0, 1.0]] {
        let p = params(&alpha);
        let mut rng = stream(2, Domain::Test, 32);
        let mut sum = vec![0.0; alpha.len()];
        for _ in 0..n {
            for (s, x) in sum.iter_mut().zip(p.sample(&mut rng).as_slice()) {
                *s += x;
            }
        }
        let a0: f64 = alpha.iter().sum();
        let mean = p.mean_weights();
        for (k, m) in mean.as_slice().iter().enumerate() {
            let se = (m * (1.0 - m) / (a0 + 1.0) / n as f64).sqrt();
            assert!((sum[k] / n as f64 - m).abs() < 3.0 * se, "{alpha:?} component {k}");
        }
    }
}

#[test]
fn gp_interpolates_training_targets() {
    let mut rng = stream(3, Domain::Test, 33);
    let xs: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x[0]).sin() + x[1] * x[1]).collect();
    let m = ys.iter().sum::<f64>() / ys.len() as f64;
    let sd = (ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / ys.len() as f64).sqrt();
    let std_ys: Vec<f64> = ys.iter().map(|y| (y - m) / sd).collect();
    let mut gp = GpModel::new(Matern52::median_heuristic(&xs, 2, DEFAULT_JITTER));
    gp.fit(&xs, &std_ys).unwrap();
    for (x, y) in xs.iter().zip(&ys) {
        let (mu, var) = gp.posterior(x).unwrap();
        assert!((mu * sd + m - y).abs() <= 10.0 * DEFAULT_JITTER, "{mu} vs {y}");
        assert!(var < 1e-4);
    }
}
