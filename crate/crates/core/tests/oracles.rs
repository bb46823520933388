//! Library results checked against independently computed reference values.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use ual_core::acquisition::{count_not_confident, entropy, predictive_variance};
use ual_core::bayes::{
    train, BayesianClassifier, ClassifierSpec, GaussianParam, PosteriorKind,
    PredictiveDistribution, PriorSpec, TrainConfig,
};
use ual_core::data::{gen_toy1, gen_toy2, gen_two_moons, pca_fit, pca_transform, Dataset};
use ual_core::engine::{
    classification_metrics, run_experiment, ExperimentConfig, NoObserver, Run, SimulatedOracle,
};
use ual_core::numeric::kernels::softplus_inv;
use ual_core::numeric::{ops, Activation, Rng, Tape, Tensor};
use ual_core::vit::{patchify, VitConfig, VitModel};

fn random(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_in(lo, hi)).collect()).unwrap()
}

fn random_simplex(rng: &mut Rng, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| -rng.uniform().max(1e-300).ln()).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

// Numeric core.

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::seed_from(1);
    for _ in 0..20 {
        let a = random(&mut rng, &[7, 5], -2.0, 2.0);
        let b = random(&mut rng, &[5, 3], -2.0, 2.0);
        let mut expected = [0.0; 21];
        for i in 0..7 {
            for j in 0..3 {
                for k in 0..5 {
                    expected[i * 3 + j] += a.data()[i * 5 + k] * b.data()[k * 3 + j];
                }
            }
        }
        let eager = ops::matmul(&a, &b).unwrap();
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf(&a), tape.leaf(&b));
        let c = tape.matmul(av, bv).unwrap();
        for got in [eager.data(), tape.value(c).data()] {
            for (g, e) in got.iter().zip(&expected) {
                assert!((g - e).abs() < 1e-12, "{g} vs {e}");
            }
        }
    }
}

#[test]
fn layer_norm_matches_direct_statistics() {
    let mut rng = Rng::seed_from(2);
    let eps = 1e-5;
    let x = random(&mut rng, &[4, 8], -3.0, 3.0);
    let gain = random(&mut rng, &[8], 0.5, 2.0);
    let bias = random(&mut rng, &[8], -1.0, 1.0);
    let y = ops::layer_norm(&x, &gain, &bias, eps).unwrap();
    let unit = ops::layer_norm(&x, &Tensor::filled(&[8], 1.0), &Tensor::zeros(&[8]), eps).unwrap();
    for i in 0..4 {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        for j in 0..8 {
            let z = (row[j] - mean) / (var + eps).sqrt();
            assert!((y.row(i)[j] - (gain.data()[j] * z + bias.data()[j])).abs() < 1e-12);
        }
        let u = unit.row(i);
        let um = u.iter().sum::<f64>() / 8.0;
        let uv = u.iter().map(|v| (v - um).powi(2)).sum::<f64>() / 8.0;
        assert!(um.abs() < 1e-9);
        assert!((uv - var / (var + eps)).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_matches_log_sum_exp() {
    let mut rng = Rng::seed_from(3);
    for _ in 0..20 {
        let logits = random(&mut rng, &[6, 4], -30.0, 30.0);
        let labels: Vec<usize> = (0..6).map(|_| rng.below(4)).collect();
        let mut expected = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            expected += lse - row[l];
        }
        expected /= 6.0;
        let mut tape = Tape::new();
        let lv = tape.leaf(&logits);
        let loss = tape.cross_entropy(lv, &labels).unwrap();
        assert!((ops::cross_entropy(&logits, &labels).unwrap() - expected).abs() < 1e-10);
        assert!((tape.value(loss).item() - expected).abs() < 1e-10);
    }
}

// Variational layers.

#[test]
fn weight_draws_have_std_lambda_times_softplus_rho() {
    let mu = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    let mut p = GaussianParam::new(mu, 1.0, None);
    p.rho.data_mut().copy_from_slice(&[-1.0, 0.0, 1.5]);
    let sigma = p.sigma();
    for lambda in [0.3, 1.0, 2.0] {
        let mut rng = Rng::seed_from(4);
        let n = 100_000;
        let mut sums = [[0.0; 2]; 3];
        for _ in 0..n {
            let w = p.sample(&mut rng, lambda);
            for (s, v) in sums.iter_mut().zip(w.data()) {
                s[0] += v;
                s[1] += v * v;
            }
        }
        for (j, s) in sums.iter().enumerate() {
            let mean = s[0] / n as f64;
            let std = (s[1] / n as f64 - mean * mean).sqrt();
            let want = lambda * sigma[j];
            assert!(
                (std / want - 1.0).abs() < 0.03,
                "lambda {lambda} weight {j}: {std} vs {want}"
            );
        }
    }
}

/// Two-sample Kolmogorov-Smirnov statistic.
fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Asymptotic Kolmogorov survival function.
fn ks_p_value(d: f64, n: usize, m: usize) -> f64 {
    let ne = (n * m) as f64 / (n + m) as f64;
    let t = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    let p: f64 = (1..=100)
        .map(|k| {
            let k = k as f64;
            2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * t * t).exp()
        })
        .sum();
    p.clamp(0.0, 1.0)
}

#[test]
fn zero_factor_draws_match_mean_field() {
    let mu = Tensor::new(&[4], vec![0.0, 1.0, -2.0, 0.5]).unwrap();
    let mean_field = GaussianParam::new(mu.clone(), 0.7, None);
    let low_rank = GaussianParam::new(mu, 0.7, Some(2));
    assert_eq!(low_rank.rank(), 2);
    let n = 10_000;
    let mut ra = Rng::seed_from(5);
    let mut rb = Rng::seed_from(6);
    let a: Vec<Tensor> = (0..n).map(|_| mean_field.sample(&mut ra, 1.0)).collect();
    let b: Vec<Tensor> = (0..n).map(|_| low_rank.sample(&mut rb, 1.0)).collect();
    for j in 0..4 {
        let d = ks_statistic(
            a.iter().map(|t| t.data()[j]).collect(),
            b.iter().map(|t| t.data()[j]).collect(),
        );
        let p = ks_p_value(d, n, n);
        assert!(p > 0.01, "weight {j}: D = {d}, p = {p}");
    }
}

// Empirical Bayes.

fn per_layer(sigmas: Vec<f64>) -> PriorSpec {
    PriorSpec::PerLayer {
        layer_sigmas: sigmas,
        learn_layer_sigmas: true,
    }
}

#[test]
fn empirical_bayes_is_stationary_at_the_prior() {
    let mut spec = ClassifierSpec::mlp(vec![3, 4, 2], Activation::Relu);
    spec.prior = per_layer(vec![0.8, 1.7]);
    let mut c = BayesianClassifier::init(&spec, 7).unwrap();
    for (l, s) in [0.8, 1.7].into_iter().enumerate() {
        let layer = &mut c.layers[l];
        for p in [&mut layer.weight, &mut layer.bias] {
            p.mu.data_mut().fill(0.0);
            p.rho.data_mut().fill(softplus_inv(s));
        }
    }
    assert!(c.kl().abs() < 1e-9);
    let PriorSpec::PerLayer { layer_sigmas, .. } = c.empirical_bayes_update(20, 1.0).unwrap()
    else {
        unreachable!()
    };
    assert!((layer_sigmas[0] - 0.8).abs() < 1e-6);
    assert!((layer_sigmas[1] - 1.7).abs() < 1e-6);
}

#[test]
fn empirical_bayes_clamps_to_upper_bound() {
    let mut spec = ClassifierSpec::mlp(vec![2, 2], Activation::Identity);
    spec.prior = per_layer(vec![1.0]);
    let mut c = BayesianClassifier::init(&spec, 8).unwrap();
    // The KL-optimal prior σ here is 10⁴.
    c.layers[0].weight.mu.data_mut().fill(1e4);
    c.layers[0].bias.mu.data_mut().fill(1e4);
    let PriorSpec::PerLayer { layer_sigmas, .. } = c.empirical_bayes_update(200, 1.0).unwrap()
    else {
        unreachable!()
    };
    assert_eq!(layer_sigmas, vec![10.0]);
}

#[test]
fn empirical_bayes_on_toy1_keeps_sigma_finite_and_elbo_no_worse() {
    let data = gen_toy1(100, 9);
    let mut spec = ClassifierSpec::mlp(vec![2, 8, 2], Activation::Relu);
    spec.prior = PriorSpec::PerLayer {
        layer_sigmas: vec![1.0, 1.0],
        learn_layer_sigmas: false,
    };
    let mut c = BayesianClassifier::init(&spec, 9).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 50,
        ..TrainConfig::default()
    };
    train(&mut c, &data, &cfg, &mut Rng::seed_from(9)).unwrap();
    c.prior = per_layer(vec![1.0, 1.0]);
    let weight = 1.0 / data.len() as f64;
    let before = c
        .elbo_loss(
            &data.features,
            &data.labels,
            8,
            weight,
            &mut Rng::seed_from(10),
        )
        .unwrap();
    let PriorSpec::PerLayer { layer_sigmas, .. } = c.empirical_bayes_update(50, 1.0).unwrap()
    else {
        unreachable!()
    };
    let after = c
        .elbo_loss(
            &data.features,
            &data.labels,
            8,
            weight,
            &mut Rng::seed_from(10),
        )
        .unwrap();
    assert!(
        layer_sigmas
            .iter()
            .all(|s| s.is_finite() && (1e-3..=10.0).contains(s)),
        "{layer_sigmas:?}"
    );
    assert_eq!(before.nll, after.nll);
    assert!(after.kl <= before.kl, "{} > {}", after.kl, before.kl);
    assert!(after.total <= before.total);

    // Learning σ during training also stays finite.
    spec.prior = per_layer(vec![1.0, 1.0]);
    let mut learned = BayesianClassifier::init(&spec, 9).unwrap();
    let trace = train(&mut learned, &data, &cfg, &mut Rng::seed_from(9)).unwrap();
    assert!(trace.epochs.iter().all(|e| e.total.is_finite()));
    let PriorSpec::PerLayer { layer_sigmas, .. } = &learned.prior else {
        unreachable!()
    };
    assert!(layer_sigmas.iter().all(|s| s.is_finite() && *s > 0.0));
}

// Training.

#[test]
fn toy1_trains_to_high_accuracy() {
    let train_set = gen_toy1(500, 11);
    let test = gen_toy1(1000, 12);
    // The nearest-mean rule is near Bayes-optimal here.
    let nearest_mean = (0..test.len())
        .filter(|&i| {
            let r = test.features.row(i);
            usize::from(r[0] + r[1] > 0.0) == test.labels[i]
        })
        .count() as f64
        / test.len() as f64;
    assert!(nearest_mean >= 0.99, "{nearest_mean}");

    let mut c =
        BayesianClassifier::init(&ClassifierSpec::mlp(vec![2, 16, 2], Activation::Relu), 11)
            .unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    train(&mut c, &train_set, &cfg, &mut Rng::seed_from(11)).unwrap();
    let dists = c
        .predict_mc(&test.features, 16, 1.0, &mut Rng::seed_from(13))
        .unwrap();
    let correct = dists
        .iter()
        .zip(&test.labels)
        .filter(|(d, &l)| d.argmax() == l)
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn two_moons_loss_decreases() {
    let data = gen_two_moons(200, 0.1, 14);
    let mut c =
        BayesianClassifier::init(&ClassifierSpec::mlp(vec![2, 16, 2], Activation::Tanh), 14)
            .unwrap();
    let cfg = TrainConfig {
        epochs: 100,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let trace = train(&mut c, &data, &cfg, &mut Rng::seed_from(14)).unwrap();
    let first = trace.epochs[0].total;
    let last = trace.last().unwrap().total;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn predictive_mean_stabilises_with_more_draws() {
    let mut spec = ClassifierSpec::mlp(vec![2, 8, 3], Activation::Tanh);
    spec.posterior = PosteriorKind::LowRank { rank: 2 };
    let mut c = BayesianClassifier::init(&spec, 15).unwrap();
    c.set_sigma(0.5);
    let x = random(&mut Rng::seed_from(15), &[10, 2], -3.0, 3.0);
    let small = c
        .predict_mc(&x, 1024, 1.0, &mut Rng::seed_from(16))
        .unwrap();
    let large = c
        .predict_mc(&x, 4096, 1.0, &mut Rng::seed_from(17))
        .unwrap();
    for (a, b) in small.iter().zip(&large) {
        for (p, q) in a.mean.data().iter().zip(b.mean.data()) {
            assert!((p - q).abs() < 0.02, "{p} vs {q}");
        }
    }
}

// Datasets.

#[test]
fn toy2_nearest_mean_accuracy_is_below_toy1() {
    let accuracy = |d: &Dataset| {
        let hits = (0..d.len())
            .filter(|&i| {
                let r = d.features.row(i);
                usize::from(r[0] + r[1] > 0.0) == d.labels[i]
            })
            .count();
        hits as f64 / d.len() as f64
    };
    let a1 = accuracy(&gen_toy1(5000, 18));
    let a2 = accuracy(&gen_toy2(5000, 18));
    assert!(a2 < a1, "{a2} vs {a1}");
    assert!(a2 < 0.9 && a1 > 0.99);
}

fn correlated(rng: &mut Rng, n: usize, d: usize) -> Tensor {
    let mix = random(rng, &[d, d], -1.0, 1.0);
    let z = random(rng, &[n, d], -2.0, 2.0);
    ops::matmul(&z, &mix).unwrap()
}

#[test]
fn pca_matches_covariance_eigendecomposition() {
    let mut rng = Rng::seed_from(19);
    let (n, d) = (50, 5);
    let x = correlated(&mut rng, n, d);
    let model = pca_fit(&x, 1.0).unwrap();
    assert_eq!(model.k(), 5);

    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean();
    let centred = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    for (c, &e) in order.iter().enumerate() {
        let want = eig.eigenvalues[e];
        assert!(
            (model.explained_variance[c] - want).abs() < 1e-9 * want.max(1.0),
            "{c}"
        );
        let v = eig.eigenvectors.column(e);
        let dot: f64 = (0..d).map(|j| v[j] * model.components.row(c)[j]).sum();
        assert!(
            (dot.abs() - 1.0).abs() < 1e-8,
            "component {c}: |dot| = {dot}"
        );
    }
    assert!((model.total_variance - cov.trace()).abs() < 1e-9);

    // Projection oracle.
    let z = pca_transform(&model, &x).unwrap();
    for i in 0..n {
        for c in 0..5 {
            let want: f64 = (0..d)
                .map(|j| (m[(i, j)] - mean[j]) * model.components.row(c)[j])
                .sum();
            assert!((z.row(i)[c] - want).abs() < 1e-10);
        }
    }
    let back = model.inverse_transform(&z).unwrap();
    let err = back
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-9, "{err}");
}

// Acquisition.

#[test]
fn entropy_ranking_matches_compensated_oracle() {
    let mut rng = Rng::seed_from(20);
    let dists: Vec<Vec<f64>> = (0..300).map(|_| random_simplex(&mut rng, 4)).collect();
    // H = ln S − Σ w ln w / S on unnormalised weights, Neumaier-summed.
    let oracle = |p: &[f64]| {
        let w: Vec<f64> = p.iter().map(|v| v * 1024.0).collect();
        let (mut s, mut c) = (0.0f64, 0.0f64);
        let (mut t, mut ct) = (0.0f64, 0.0f64);
        for &v in &w {
            let y = s + v;
            c += if s.abs() >= v.abs() {
                (s - y) + v
            } else {
                (v - y) + s
            };
            s = y;
            let term = if v > 0.0 { v * v.ln() } else { 0.0 };
            let y = t + term;
            ct += if t.abs() >= term.abs() {
                (t - y) + term
            } else {
                (term - y) + t
            };
            t = y;
        }
        let s = s + c;
        s.ln() - (t + ct) / s
    };
    let ours: Vec<f64> = dists.iter().map(|p| entropy(p).unwrap()).collect();
    let reference: Vec<f64> = dists.iter().map(|p| oracle(p)).collect();
    for i in 0..dists.len() {
        assert!((ours[i] - reference[i]).abs() < 1e-12);
        for j in 0..dists.len() {
            if (reference[i] - reference[j]).abs() > 1e-12 {
                assert_eq!(
                    ours[i] < ours[j],
                    reference[i] < reference[j],
                    "pair {i}, {j}"
                );
            }
        }
    }
}

#[test]
fn predictive_variance_matches_two_pass_oracle() {
    let mut rng = Rng::seed_from(21);
    for _ in 0..50 {
        let (m, k) = (2 + rng.below(30), 2 + rng.below(4));
        let rows: Vec<Vec<f64>> = (0..m).map(|_| random_simplex(&mut rng, k)).collect();
        let dist = PredictiveDistribution::from_samples(Tensor::from_rows(&rows).unwrap(), 1.0);
        let mut total = 0.0;
        for c in 0..k {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / m as f64;
            total += rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / m as f64;
        }
        let want = total / k as f64;
        assert!((predictive_variance(&dist).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn not_confident_count_matches_linear_scan() {
    let mut rng = Rng::seed_from(22);
    let dists: Vec<PredictiveDistribution> = (0..200)
        .map(|i| {
            let k = 2 + i % 4;
            let p = if i % 7 == 0 {
                let mut one_hot = vec![0.0; k];
                one_hot[i % k] = 1.0;
                one_hot
            } else {
                random_simplex(&mut rng, k)
            };
            PredictiveDistribution::from_samples(Tensor::from_rows(&[p]).unwrap(), 1.0)
        })
        .collect();
    for tau in [0.3, 0.5, 0.7, 0.9, 0.99] {
        let mut want = 0;
        for d in &dists {
            let mut max = 0.0;
            for &p in d.mean.data() {
                if p > max {
                    max = p;
                }
            }
            if max < tau {
                want += 1;
            }
        }
        assert_eq!(count_not_confident(&dists, tau).unwrap(), want, "tau {tau}");
    }
}

// Metrics.

#[test]
fn metrics_match_direct_counting() {
    let mut rng = Rng::seed_from(23);
    for classes in 2..6 {
        let n = 300;
        let truth: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let predicted: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let m = classification_metrics(&predicted, &truth, classes).unwrap();
        let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
        for k in 0..classes {
            let tp = (0..n)
                .filter(|&i| predicted[i] == k && truth[i] == k)
                .count() as f64;
            let fp = (0..n)
                .filter(|&i| predicted[i] == k && truth[i] != k)
                .count() as f64;
            let fn_ = (0..n)
                .filter(|&i| predicted[i] != k && truth[i] == k)
                .count() as f64;
            let pk = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rk = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            p += pk;
            r += rk;
            f += if pk + rk > 0.0 {
                2.0 * pk * rk / (pk + rk)
            } else {
                0.0
            };
        }
        let c = classes as f64;
        let acc = (0..n).filter(|&i| predicted[i] == truth[i]).count() as f64 / n as f64;
        assert!((m.accuracy - acc).abs() < 1e-12);
        assert!((m.precision - p / c).abs() < 1e-12);
        assert!((m.recall - r / c).abs() < 1e-12);
        assert!((m.f1 - f / c).abs() < 1e-12);
    }
}

// Engine.

fn engine_config(budget: usize, cycles: usize) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!(
        r#"
schema_version = 1
seeds = [1]
cycles = {cycles}
per_cycle_pool = 20
budget = {budget}
acquisition = "entropy"
m_predict = 8

[dataset]
kind = "toy2"
n_per_class = 40
seed = 2

[train]
epochs = 10
batch_size = 16
"#
    ))
    .unwrap()
}

fn start(cfg: &ExperimentConfig) -> (Run, SimulatedOracle) {
    let loaded = cfg.dataset.load(std::path::Path::new(".")).unwrap();
    let run = Run::start(cfg, &loaded.dataset, cfg.seeds[0], &loaded.input_hash).unwrap();
    let oracle = SimulatedOracle::new(&run.ctx.pool);
    (run, oracle)
}

#[test]
fn zero_budget_keeps_the_labeled_set() {
    let cfg = engine_config(0, 2);
    let (mut run, mut oracle) = start(&cfg);
    let labeled = run.state.labeled.clone();
    run.run_to_end(&mut oracle, &NoObserver).unwrap();
    assert_eq!(run.state.labeled, labeled);
    assert_eq!(run.reports.len(), 2);
    for r in &run.reports {
        assert!(r.queried_ids.is_empty());
        assert_eq!(r.labeled_count, labeled.len());
        assert!((0.0..=1.0).contains(&r.accuracy) && r.ece.is_finite());
    }
}

#[test]
fn labeled_set_grows_by_budget_without_touching_the_test_split() {
    let cfg = engine_config(3, 4);
    let (mut run, mut oracle) = start(&cfg);
    let test_ids: BTreeSet<u64> = run.ctx.test.sample_ids.iter().copied().collect();
    let pool_ids: BTreeSet<u64> = run.ctx.pool.sample_ids.iter().copied().collect();
    assert!(test_ids.is_disjoint(&pool_ids));
    let mut previous = run.state.labeled.len();
    while !run.is_done() {
        let r = run.step(&mut oracle, &NoObserver).unwrap().clone();
        assert_eq!(r.labeled_count, previous + 3);
        assert!(r.queried_ids.iter().all(|id| pool_ids.contains(id)));
        previous = r.labeled_count;
        for set in [&run.state.labeled, &run.state.unlabeled, &run.state.pending] {
            assert!(set.is_disjoint(&test_ids));
        }
        assert_eq!(run.state.total(), pool_ids.len());
    }
}

#[test]
fn one_seed_one_cycle_gives_one_report() {
    let cfg = engine_config(2, 1);
    let loaded = cfg.dataset.load(std::path::Path::new(".")).unwrap();
    let (result, runs) =
        run_experiment(&cfg, &loaded.dataset, &loaded.input_hash, &NoObserver).unwrap();
    assert_eq!(result.runs.len(), 1);
    assert_eq!(result.runs[0].reports.len(), 1);
    assert_eq!(result.aggregate.len(), 1);
    assert_eq!(runs.len(), 1);
}

// ViT.

fn small_vit(seed: u64) -> VitModel {
    let config = VitConfig {
        image_size: [8, 8, 1],
        patch_size: 4,
        embed_dim: 8,
        heads: 2,
        depth: 1,
        mlp_ratio: 2.0,
        head: ClassifierSpec::mlp(vec![8, 3], Activation::Identity),
    };
    VitModel::init(&config, seed).unwrap()
}

#[test]
fn doubling_a_patch_doubles_its_projection() {
    let model = small_vit(24);
    let img = random(&mut Rng::seed_from(24), &[8, 8, 1], -1.0, 1.0);
    let mut doubled = img.clone();
    // Patch 1 covers rows 0..4, columns 4..8.
    for r in 0..4 {
        for c in 4..8 {
            doubled.data_mut()[r * 8 + c] *= 2.0;
        }
    }
    assert_eq!(
        patchify(&doubled, 4).unwrap().row(1)[0],
        2.0 * patchify(&img, 4).unwrap().row(1)[0]
    );
    let a = model.embed(&img).unwrap();
    let b = model.embed(&doubled).unwrap();
    for t in 0..5 {
        for j in 0..8 {
            let pos = model.positional.row(t)[j];
            let (pa, pb) = (a.row(t)[j] - pos, b.row(t)[j] - pos);
            let want = if t == 2 { 2.0 * pa } else { pa };
            assert!((pb - want).abs() < 1e-12, "token {t}");
        }
    }
}

#[test]
fn zero_output_projections_make_a_block_the_identity() {
    let mut model = small_vit(25);
    let block = &mut model.blocks[0];
    block.w_o.data_mut().fill(0.0);
    block.w_mlp2.data_mut().fill(0.0);
    block.b_mlp2.data_mut().fill(0.0);
    let x = random(&mut Rng::seed_from(25), &[5, 8], -2.0, 2.0);
    let (y, _) = model.encoder_block(0, &x).unwrap();
    assert_eq!(y, x);
}

#[test]
fn single_token_attention_returns_the_value_projection() {
    let model = small_vit(26);
    let x = random(&mut Rng::seed_from(26), &[1, 8], -2.0, 2.0);
    let out = model.raw_attention(0, &x).unwrap();
    let v = ops::matmul(&x, &model.blocks[0].w_v).unwrap();
    for (a, b) in out.data().iter().zip(v.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn vit_head_without_spread_gives_identical_rows() {
    let mut model = small_vit(27);
    model.head.set_sigma(0.0);
    let img = random(&mut Rng::seed_from(27), &[8, 8, 1], -1.0, 1.0);
    let d = model
        .forward_features(&img, &mut Rng::seed_from(28), 6, 1.0)
        .unwrap();
    for i in 1..6 {
        assert_eq!(d.samples.row(i), d.samples.row(0));
    }
    let logits = model
        .logits_mean(&img.clone().reshape(&[1, 8, 8, 1]).unwrap())
        .unwrap();
    let probs = ops::activate(&logits, Activation::SoftmaxLastdim);
    for (a, b) in d.mean.data().iter().zip(probs.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}
