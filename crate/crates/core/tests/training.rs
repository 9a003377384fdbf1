mod common;

use meshsva::geometry::rasterize;
use meshsva::inference::InferenceOptions;
use meshsva::synth::{generate_source, generate_target, shift_model, DomainSpec};
use meshsva::seed::rng_from;
use meshsva::training::{
    evaluate, metrics_from_errors, ratio_histogram, robust_vertex_ratio, source_objective, train_source, Model, TrainingConfig,
};
use meshsva::vmf::{dot, log_norm_const, normalized};

use common::{exact_scenes, small_world, standard_world};

fn frozen(lambda: f64, mu: f64, epochs: usize) -> TrainingConfig {
    TrainingConfig { lambda, mu, epochs, learning_rate: 0.0, ..TrainingConfig::default() }
}

#[test]
fn noise_free_training_recovers_true_features() {
    let w = small_world(6, 1);
    let scenes = exact_scenes(&w, 40, 2);
    let out = train_source(&scenes, w.geo.clone(), &w.cam, &TrainingConfig::default()).unwrap();
    let observed: Vec<usize> = (0..w.geo.vertex_count()).filter(|r| !out.never_observed.contains(r)).collect();
    assert!(!observed.is_empty());
    for &r in &observed {
        let c = dot(out.model.mesh.feature(r), w.model.mesh.feature(r));
        assert!(c >= 0.999, "vertex {r}: cosine {c}");
    }
}

#[test]
fn noise_free_neural_loss_hits_its_analytic_minimum() {
    let w = small_world(6, 3);
    let scenes = exact_scenes(&w, 30, 4);
    let out = train_source(&scenes, w.geo.clone(), &w.cam, &frozen(0.0, 0.0, 1)).unwrap();
    let kappa = 20.0;
    let minimum = -(log_norm_const(kappa, 6) + kappa);
    let neural = out.curve.last().unwrap().loss.neural;
    assert!((neural - minimum).abs() < 1e-6, "{neural} vs {minimum}");
}

#[test]
fn zero_contrast_vertex_step_is_the_plain_mean() {
    let w = small_world(5, 5);
    let scenes = generate_source(&w.model, &w.grid, &w.cam, 20, 20.0, 6).unwrap();
    let out = train_source(&scenes, w.geo.clone(), &w.cam, &frozen(0.0, 0.0, 0)).unwrap();
    let mut sums = vec![vec![0.0; 5]; w.geo.vertex_count()];
    for s in &scenes {
        let raster = rasterize(&w.geo, &s.pose, &w.cam).unwrap();
        for (i, r) in raster.foreground() {
            for (a, b) in sums[r].iter_mut().zip(s.features.pixel_f64(i)) {
                *a += b;
            }
        }
    }
    for (r, sum) in sums.iter().enumerate() {
        if out.never_observed.contains(&r) {
            continue;
        }
        let oracle = normalized(sum);
        let got = out.model.mesh.feature(r);
        for (a, b) in oracle.iter().zip(got) {
            assert!((a - b).abs() < 1e-10, "vertex {r}");
        }
    }
}

/// The closed-form vertex step minimizes the source objective in each `C_r`:
/// no small rotation of any trained feature lowers it.
#[test]
fn contrastive_vertex_step_is_a_minimizer() {
    let w = small_world(4, 7);
    let scenes = generate_source(&w.model, &w.grid, &w.cam, 12, 20.0, 8).unwrap();
    let out = train_source(&scenes, w.geo.clone(), &w.cam, &frozen(0.3, 0.0, 0)).unwrap();
    let base = source_objective(&out.model, &scenes, &w.cam, 0.3, 0.0).unwrap().total();
    let mut rng = rng_from(9);
    for r in [0, 5, 11, 20] {
        if out.never_observed.contains(&r) {
            continue;
        }
        for _ in 0..4 {
            let dir = meshsva::vmf::sample_uniform_sphere(4, &mut rng);
            let c: Vec<f64> = out.model.mesh.feature(r).iter().zip(&dir).map(|(c, d)| c + 0.05 * d).collect();
            let mut feats: Vec<Vec<f64>> = (0..w.geo.vertex_count()).map(|l| out.model.mesh.feature(l).to_vec()).collect();
            feats[r] = normalized(&c);
            let model = Model { mesh: out.model.mesh.with_features(feats).unwrap(), ..out.model.clone() };
            let l = source_objective(&model, &scenes, &w.cam, 0.3, 0.0).unwrap().total();
            assert!(l >= base - 1e-12, "vertex {r}: {l} < {base}");
        }
    }
}

#[test]
fn training_loss_never_increases() {
    let w = small_world(6, 11);
    let scenes = generate_source(&w.model, &w.grid, &w.cam, 24, 20.0, 12).unwrap();
    let cfg = TrainingConfig { epochs: 4, batch_size: 8, ..TrainingConfig::default() };
    let out = train_source(&scenes, w.geo.clone(), &w.cam, &cfg).unwrap();
    for pair in out.curve.windows(2) {
        assert!(pair[1].loss.total() <= pair[0].loss.total() + 1e-12, "{:?}", pair);
    }
    let estimated_kappas = TrainingConfig { fixed_kappa: None, epochs: 2, ..cfg };
    let out = train_source(&scenes, w.geo.clone(), &w.cam, &estimated_kappas).unwrap();
    for pair in out.curve.windows(2) {
        assert!(pair[1].loss.total() <= pair[0].loss.total() + 1e-12);
    }
    assert!(out.model.mesh.kappas().iter().any(|&k| k != 20.0));
}

#[test]
fn unseen_vertices_are_flagged() {
    let w = small_world(4, 13);
    let scenes = exact_scenes(&w, 10, 14);
    let out = train_source(&scenes, w.geo.clone(), &w.cam, &frozen(0.1, 0.1, 0)).unwrap();
    let mut seen = vec![false; w.geo.vertex_count()];
    for s in &scenes {
        let raster = rasterize(&w.geo, &s.pose, &w.cam).unwrap();
        for (_, r) in raster.foreground() {
            seen[r] = true;
        }
    }
    let expect: Vec<usize> = (0..seen.len()).filter(|&r| !seen[r]).collect();
    assert!(!expect.is_empty(), "the grid never shows the bottom face");
    assert_eq!(out.never_observed, expect);
}

#[test]
fn metrics_threshold_arithmetic() {
    let m = metrics_from_errors(&[0.0; 7]);
    assert_eq!((m.acc_pi6, m.acc_pi18, m.median_error), (1.0, 1.0, 0.0));
    let m = metrics_from_errors(&[20f64.to_radians(); 5]);
    assert_eq!((m.acc_pi6, m.acc_pi18), (1.0, 0.0));
    // Hand count: below 10 deg: 2 of 6; below 30 deg: 4 of 6; median of sorted (5, 8, 12, 25, 40, 180).
    let degs = [12.0, 5.0, 180.0, 25.0, 8.0, 40.0];
    let m = metrics_from_errors(&degs.map(f64::to_radians));
    assert!((m.acc_pi18 - 2.0 / 6.0).abs() < 1e-15);
    assert!((m.acc_pi6 - 4.0 / 6.0).abs() < 1e-15);
    assert!((m.median_error.to_degrees() - 18.5).abs() < 1e-9);
    assert!(m.acc_pi18 <= m.acc_pi6);
}

fn true_model(w: &common::World) -> Model {
    Model {
        mesh: w.model.mesh.clone(),
        clutter: w.model.clutter.clone(),
        extractor: meshsva::training::FeatureExtractor::identity(w.model.mesh.dim()),
    }
}

#[test]
fn exact_in_domain_ratio_is_one() {
    let w = small_world(8, 15);
    let scenes = exact_scenes(&w, 12, 16);
    let bins = robust_vertex_ratio(&true_model(&w), &scenes, &w.cam, &w.bank(), &InferenceOptions::default(), 0.9, 6).unwrap();
    assert_eq!(bins.len(), 6);
    assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 12);
    for b in bins {
        if let Some(r) = b.ratio {
            // Sub-degree pose error can move a few vertex pixels onto a neighbour.
            assert!(r > 0.9, "{b:?}");
        } else {
            assert_eq!(b.count, 0);
        }
    }
}

#[test]
fn evaluation_on_exact_scenes_is_perfect() {
    let w = small_world(8, 17);
    let scenes = exact_scenes(&w, 10, 18);
    let ev = evaluate(&true_model(&w), &scenes, &w.cam, &w.bank(), &InferenceOptions::default(), 0.8).unwrap();
    assert_eq!(ev.metrics.acc_pi18, 1.0);
    assert!(ev.metrics.median_error < 1f64.to_radians());
    let errors: Vec<f64> = ev.scenes.iter().map(|s| s.error).collect();
    assert_eq!(metrics_from_errors(&errors), ev.metrics);
    // Sparse scenes leave some of many bins empty.
    let hist = ratio_histogram(&ev, 40);
    assert!(hist.iter().any(|b| b.ratio.is_none() && b.count == 0));
}

#[test]
fn shifted_target_ratio_sits_near_the_robust_fraction() {
    let w = standard_world(8, 19);
    let spec = DomainSpec {
        robust_fraction: 0.3,
        perturb_min: 60f64.to_radians(),
        perturb_max: 90f64.to_radians(),
        ..DomainSpec::identity(20.0)
    };
    let shifted = shift_model(&w.model, &spec, &mut rng_from(20)).unwrap();
    let target = generate_target(&shifted.model, &spec, &w.grid, &w.cam, 40, 21).unwrap();
    let bins = robust_vertex_ratio(&true_model(&w), &target.labeled(), &w.cam, &w.bank(), &InferenceOptions::default(), 0.8, 8).unwrap();
    let (sum, n) = bins.iter().fold((0.0, 0), |(s, n), b| (s + b.ratio.unwrap_or(0.0) * b.count as f64, n + b.count));
    let mean = sum / n as f64;
    assert!((0.2..=0.45).contains(&mean), "mean ratio {mean}");
    for b in &bins {
        assert!(b.ratio.is_none_or(|r| (0.0..=1.0).contains(&r)));
    }
}
