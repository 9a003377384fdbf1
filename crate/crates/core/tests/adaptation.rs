mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use meshsva::adaptation::{
    adapt, backbone_loss, backbone_objective, calibrate_thresholds, collect_matches, drop_low_similarity, recompute_kappas,
    sva_update, update_extractor, AdaptationConfig, Match, MatchMode, MatchTable, Observation,
};
use meshsva::geometry::{make_cuboid_mesh, rasterize, Camera, Pose};
use meshsva::inference::{InferenceOptions, MultiPoseEstimate, PoseEstimate};
use meshsva::meshmodel::{ClutterModel, FeatureMap, NeuralMesh};
use meshsva::seed::rng_from;
use meshsva::synth::{generate_source, generate_target, shift_model, strip_labels, DomainSpec};
use meshsva::training::{FeatureExtractor, Model};
use meshsva::vmf::{dot, log_norm_const, normalized, sample_uniform_sphere, sample_vmf, VmfParams};
use meshsva::Error;

use common::{exact_scene, exact_scenes, small_world, standard_world, World};

fn basis(d: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[k] = 1.0;
    v
}

fn true_model(w: &World) -> Model {
    Model {
        mesh: w.model.mesh.clone(),
        clutter: w.model.clutter.clone(),
        extractor: FeatureExtractor::identity(w.model.mesh.dim()),
    }
}

fn at_truth(w: &World, pose: Pose) -> MultiPoseEstimate {
    let raster = rasterize(&w.geo, &pose, &w.cam).unwrap();
    MultiPoseEstimate {
        candidates: vec![PoseEstimate { pose, loss: 0.0, init_pose: pose, raster, iterations: 0, loss_history: vec![] }],
        best: 0,
    }
}

fn single_match_table(r_count: usize, entries: &[(usize, Vec<f64>)]) -> MatchTable {
    let mut t = MatchTable { per_vertex: vec![Vec::new(); r_count] };
    for (r, f) in entries {
        t.per_vertex[*r].push(Match { scene: 0, feature: f.clone(), similarity: 1.0 });
    }
    t
}

#[test]
fn ema_algebra() {
    let w = small_world(5, 1);
    let mesh = &w.model.mesh;
    let r_count = mesh.vertex_count();
    let mut rng = rng_from(2);
    let f1 = sample_uniform_sphere(5, &mut rng);
    let f2 = sample_uniform_sphere(5, &mut rng);

    let t = single_match_table(r_count, &[(3, f1.clone())]);
    assert_eq!(&sva_update(mesh, &t, 1.0).unwrap(), mesh);
    let replaced = sva_update(mesh, &t, 0.0).unwrap();
    for (a, b) in replaced.feature(3).iter().zip(&f1) {
        assert!((a - b).abs() < 1e-12);
    }

    let t = single_match_table(r_count, &[(3, f1.clone()), (3, f2.clone())]);
    let got = sva_update(mesh, &t, 0.5).unwrap();
    let c = mesh.feature(3);
    let raw: Vec<f64> = (0..5).map(|k| 0.5 * c[k] + 0.5 * (f1[k] + f2[k]) / 2.0).collect();
    let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    for k in 0..5 {
        assert!((got.feature(3)[k] - raw[k] / n).abs() < 1e-12);
    }
    for r in (0..r_count).filter(|&r| r != 3) {
        assert_eq!(got.feature(r), mesh.feature(r), "unmatched vertex {r} must be bit-identical");
    }
}

#[test]
fn matched_features_equal_to_the_vertex_are_a_fixed_point() {
    let w = small_world(4, 3);
    let mesh = &w.model.mesh;
    let entries: Vec<(usize, Vec<f64>)> = (0..mesh.vertex_count()).map(|r| (r, mesh.feature(r).to_vec())).collect();
    let t = single_match_table(mesh.vertex_count(), &entries);
    let got = sva_update(mesh, &t, 0.3).unwrap();
    for r in 0..mesh.vertex_count() {
        assert!(dot(got.feature(r), mesh.feature(r)) > 1.0 - 1e-12);
    }
}

#[test]
fn impossible_threshold_collects_nothing() {
    let w = small_world(6, 4);
    let scenes = exact_scenes(&w, 4, 5);
    let ests: Vec<_> = scenes.iter().map(|s| at_truth(&w, s.pose)).collect();
    let obs: Vec<Observation> = scenes
        .iter()
        .zip(&ests)
        .enumerate()
        .map(|(k, (s, e))| Observation { scene: k, features: &s.features, estimate: e })
        .collect();
    let t = collect_matches(&obs, &w.model.mesh, &vec![1.01; w.geo.vertex_count()], MatchMode::AllCandidates);
    assert_eq!(t.total(), 0);
    let t = collect_matches(&obs, &w.model.mesh, &vec![0.99; w.geo.vertex_count()], MatchMode::AllCandidates);
    for ms in &t.per_vertex {
        for m in ms {
            assert!(m.similarity > 0.99);
            assert!((dot(&m.feature, &m.feature) - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn duplicate_candidates_count_once() {
    let w = small_world(6, 6);
    let s = exact_scene(&w, Pose::from_degrees(40.0, 20.0, 0.0, 5.0));
    let mut est = at_truth(&w, s.pose);
    est.candidates.push(est.candidates[0].clone());
    let obs = [Observation { scene: 0, features: &s.features, estimate: &est }];
    let delta = vec![0.5; w.geo.vertex_count()];
    let all = collect_matches(&obs, &w.model.mesh, &delta, MatchMode::AllCandidates);
    let best = collect_matches(&obs, &w.model.mesh, &delta, MatchMode::BestOnly);
    assert_eq!(all, best);
    assert!(all.per_vertex.iter().all(|m| m.len() <= 1));
}

#[test]
fn calibration_examples() {
    let w = small_world(8, 7);
    let exact = exact_scenes(&w, 60, 8);
    let model = true_model(&w);
    let delta = calibrate_thresholds(&model, &exact, &w.cam, 0.95).unwrap();
    let mut observed = 0;
    for (r, d) in delta.iter().enumerate() {
        if *d != 0.8 {
            observed += 1;
            assert!(*d >= 0.999, "vertex {r}: {d}");
        }
    }
    assert!(observed > 0);

    // quantile 1 puts the threshold at the smallest observed cosine.
    let noisy = generate_source(&w.model, &w.grid, &w.cam, 80, 20.0, 9).unwrap();
    let lo = calibrate_thresholds(&model, &noisy, &w.cam, 1.0).unwrap();
    let mut mins = vec![f64::INFINITY; w.geo.vertex_count()];
    let mut counts = vec![0; w.geo.vertex_count()];
    for s in &noisy {
        let raster = rasterize(&w.geo, &s.pose, &w.cam).unwrap();
        for (i, r) in raster.foreground() {
            mins[r] = mins[r].min(s.features.dot_pixel(i, w.model.mesh.feature(r)));
            counts[r] += 1;
        }
    }
    for r in 0..mins.len() {
        if counts[r] >= 10 {
            assert_eq!(lo[r], mins[r]);
        } else {
            assert_eq!(lo[r], 0.8);
        }
    }
}

#[test]
fn calibrated_acceptance_rate_holds_out_of_sample() {
    let w = standard_world(8, 10);
    let model = true_model(&w);
    let calib = generate_source(&w.model, &w.grid, &w.cam, 200, 20.0, 11).unwrap();
    let delta = calibrate_thresholds(&model, &calib, &w.cam, 0.95).unwrap();
    let held = generate_source(&w.model, &w.grid, &w.cam, 200, 20.0, 12).unwrap();
    let (mut acc, mut n) = (0usize, 0usize);
    for s in &held {
        let raster = rasterize(&w.geo, &s.pose, &w.cam).unwrap();
        for (i, r) in raster.foreground() {
            n += 1;
            if s.features.dot_pixel(i, w.model.mesh.feature(r)) > delta[r] {
                acc += 1;
            }
        }
    }
    let rate = acc as f64 / n as f64;
    assert!((rate - 0.95).abs() <= 0.02, "acceptance {rate}");
}

#[test]
fn accepted_vertices_track_the_robust_subset() {
    let w = standard_world(8, 13);
    let model = true_model(&w);
    let source = generate_source(&w.model, &w.grid, &w.cam, 150, 20.0, 14).unwrap();
    let delta = calibrate_thresholds(&model, &source, &w.cam, 0.95).unwrap();
    let spec = DomainSpec { robust_fraction: 0.3, perturb_min: 60f64.to_radians(), perturb_max: 90f64.to_radians(), ..DomainSpec::identity(20.0) };
    let shifted = shift_model(&w.model, &spec, &mut rng_from(15)).unwrap();
    let target = generate_target(&shifted.model, &spec, &w.grid, &w.cam, 64, 16).unwrap().labeled();
    let ests: Vec<_> = target.iter().map(|s| at_truth(&w, s.pose)).collect();
    let obs: Vec<Observation> = target
        .iter()
        .zip(&ests)
        .enumerate()
        .map(|(k, (s, e))| Observation { scene: k, features: &s.features, estimate: e })
        .collect();
    let table = collect_matches(&obs, &model.mesh, &delta, MatchMode::BestOnly);
    let mut seen = vec![0usize; w.geo.vertex_count()];
    for e in &ests {
        for r in e.best().raster.visible_vertices() {
            seen[r] += 1;
        }
    }
    // A vertex counts as accepted when most of its observations clear the threshold.
    let accepted: BTreeSet<usize> = (0..seen.len())
        .filter(|&r| seen[r] > 0 && table.per_vertex[r].len() * 2 > seen[r])
        .collect();
    let robust: BTreeSet<usize> = shifted.robust.iter().copied().filter(|&r| seen[r] > 0).collect();
    let jaccard = accepted.intersection(&robust).count() as f64 / accepted.union(&robust).count() as f64;
    assert!(jaccard >= 0.8, "jaccard {jaccard}");
}

/// Orthonormal 8-vertex instance: every vertex and prototype on its own axis.
fn orthonormal_instance(d: usize) -> (NeuralMesh, ClutterModel) {
    let geo = Arc::new(make_cuboid_mesh([1.0, 1.0, 1.0], 2).unwrap());
    let feats = (0..8).map(|k| basis(d, k)).collect();
    let mesh = NeuralMesh::new(geo, feats, vec![20.0; 8]).unwrap();
    let clutter = ClutterModel::new(vec![basis(d, 8)], 20.0).unwrap();
    (mesh, clutter)
}

fn raster_for(mesh: &NeuralMesh) -> (meshsva::geometry::RasterMap, Camera) {
    let cam = Camera::new(120.0, 48, 48).unwrap();
    (rasterize(mesh.geometry(), &Pose::from_degrees(35.0, 25.0, 0.0, 5.0), &cam).unwrap(), cam)
}

#[test]
fn backbone_loss_closed_form_on_orthonormal_features() {
    let d = 12;
    let (mesh, clutter) = orthonormal_instance(d);
    let (raster, _) = raster_for(&mesh);
    let mut f = FeatureMap::zeros(48, 48, d);
    for r in raster.visible_vertices() {
        f.set_pixel(raster.vertex_pixel(r).unwrap(), mesh.feature(r));
    }
    let kappa: f64 = 20.0;
    let geo = mesh.geometry();
    let expected: f64 = raster
        .visible_vertices()
        .map(|r| {
            // Non-neighbours include r itself; the other non-neighbours and the clutter prototype score zero.
            let m = (0..8).filter(|&l| !geo.is_neighbor(r, l)).count() as f64;
            -(kappa - (kappa.exp() + (m - 1.0) + 1.0).ln())
        })
        .sum();
    let got = backbone_loss(&f, &raster, &mesh, &clutter, kappa);
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
}

#[test]
fn backbone_loss_matches_brute_force_and_excludes_neighbours() {
    let d = 5;
    let geo = Arc::new(make_cuboid_mesh([1.0, 1.0, 1.0], 2).unwrap());
    let mut rng = rng_from(17);
    let feats: Vec<Vec<f64>> = (0..8).map(|_| sample_uniform_sphere(d, &mut rng)).collect();
    let mesh = NeuralMesh::new(geo.clone(), feats.clone(), vec![20.0; 8]).unwrap();
    let beta = sample_uniform_sphere(d, &mut rng);
    let clutter = ClutterModel::new(vec![beta.clone()], 7.0).unwrap();
    let (raster, _) = raster_for(&mesh);
    let mut f = FeatureMap::zeros(48, 48, d);
    for i in 0..f.pixel_count() {
        f.set_pixel(i, &sample_uniform_sphere(d, &mut rng));
    }
    let kappa = 20.0;
    let brute = |nbr: &dyn Fn(usize, usize) -> bool| -> f64 {
        let (lz, lzb) = (log_norm_const(kappa, d), log_norm_const(7.0, d));
        raster
            .visible_vertices()
            .map(|r| {
                let x = f.pixel_f64(raster.vertex_pixel(r).unwrap());
                let num = (lz + kappa * dot(&x, &feats[r])).exp();
                let den: f64 = (0..8).filter(|&l| !nbr(r, l)).map(|l| (lz + kappa * dot(&x, &feats[l])).exp()).sum::<f64>()
                    + (lzb + 7.0 * dot(&x, &beta)).exp();
                -(num / den).ln()
            })
            .sum()
    };
    let got = backbone_loss(&f, &raster, &mesh, &clutter, kappa);
    let want = brute(&|r, l| geo.is_neighbor(r, l));
    assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{got} vs {want}");

    let bare = Arc::new((*geo).clone().with_neighbors(vec![Vec::new(); 8]).unwrap());
    let mesh_bare = NeuralMesh::new(bare, feats.clone(), vec![20.0; 8]).unwrap();
    let changed = backbone_loss(&f, &raster, &mesh_bare, &clutter, kappa);
    assert!((changed - brute(&|_, _| false)).abs() < 1e-9 * changed.abs().max(1.0));
    assert!(changed > got, "a larger denominator must raise the loss");
}

fn random_extractor(d: usize, seed: u64) -> FeatureExtractor {
    let mut rng = rng_from(seed);
    let w: Vec<f64> = (0..d * d)
        .map(|k| if k % (d + 1) == 0 { 1.0 } else { 0.0 } + 0.4 * (sample_uniform_sphere(1, &mut rng)[0]) * 0.5)
        .collect();
    FeatureExtractor::new(d, w).unwrap()
}

#[test]
fn backbone_gradient_matches_central_differences() {
    let w = small_world(5, 18);
    let scenes = generate_source(&w.model, &w.grid, &w.cam, 3, 20.0, 19).unwrap();
    let rasters: Vec<_> = scenes.iter().map(|s| rasterize(&w.geo, &s.pose, &w.cam).unwrap()).collect();
    let kept: Vec<_> = scenes.iter().zip(&rasters).map(|(s, r)| (&s.features, r)).collect();
    let ext = random_extractor(5, 20);
    let (_, g) = backbone_objective(&ext, &kept, &w.model.mesh, &w.model.clutter, 20.0, true);
    let g = g.unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..25 {
        let mut p = ext.matrix().to_vec();
        let mut m = p.clone();
        p[k] += h;
        m[k] -= h;
        let lp = backbone_objective(&FeatureExtractor::new(5, p).unwrap(), &kept, &w.model.mesh, &w.model.clutter, 20.0, false).0;
        let lm = backbone_objective(&FeatureExtractor::new(5, m).unwrap(), &kept, &w.model.mesh, &w.model.clutter, 20.0, false).0;
        let fd = (lp - lm) / (2.0 * h);
        let scale = g.iter().map(|x| x.abs()).fold(0.0, f64::max);
        worst = worst.max((fd - g[k]).abs() / scale);
    }
    assert!(worst < 0.01, "max relative deviation {worst}");
}

#[test]
fn extractor_steps_descend_and_freeze_at_zero_rate() {
    let w = small_world(5, 21);
    let scenes = generate_source(&w.model, &w.grid, &w.cam, 6, 20.0, 22).unwrap();
    let rasters: Vec<_> = scenes.iter().map(|s| rasterize(&w.geo, &s.pose, &w.cam).unwrap()).collect();
    let kept: Vec<_> = scenes.iter().zip(&rasters).map(|(s, r)| (&s.features, r)).collect();
    let ext = random_extractor(5, 23);
    let (same, b, a) = update_extractor(&ext, &kept, &w.model.mesh, &w.model.clutter, 20.0, 0.0);
    assert_eq!(same, ext);
    assert_eq!(a, b);
    let mut cur = ext;
    let mut last = f64::INFINITY;
    for _ in 0..15 {
        let (next, before, after) = update_extractor(&cur, &kept, &w.model.mesh, &w.model.clutter, 20.0, 0.5);
        assert!(after <= before);
        assert!(before <= last + 1e-12);
        last = after;
        cur = next;
    }
}

#[test]
fn drop_rule_examples() {
    let w = small_world(8, 24);
    let mut scenes = generate_source(&w.model, &w.grid, &w.cam, 8, 20.0, 25).unwrap();
    let model = true_model(&w);
    let delta = calibrate_thresholds(&model, &generate_source(&w.model, &w.grid, &w.cam, 60, 20.0, 26).unwrap(), &w.cam, 0.95).unwrap();
    // Fully occlude the last scene with a feature orthogonal-ish to everything.
    let occ = normalized(&(0..8).map(|k| if k == 0 { 1.0 } else { -0.01 * k as f64 }).collect::<Vec<_>>());
    let last = scenes.last_mut().unwrap();
    let raster = rasterize(&w.geo, &last.pose, &w.cam).unwrap();
    let flip: Vec<f64> = occ.iter().map(|x| -x).collect();
    for (i, r) in raster.foreground() {
        let c = w.model.mesh.feature(r);
        let v = if dot(c, &occ) < 0.0 { &occ } else { &flip };
        last.features.set_pixel(i, v);
    }
    let ests: Vec<_> = scenes.iter().map(|s| at_truth(&w, s.pose)).collect();
    let obs: Vec<Observation> = scenes
        .iter()
        .zip(&ests)
        .enumerate()
        .map(|(k, (s, e))| Observation { scene: k, features: &s.features, estimate: e })
        .collect();
    let kept = drop_low_similarity(&obs, &model.mesh, &delta, 0.5, 0.075);
    assert_eq!(kept, (0..7).collect::<Vec<_>>());
    let all = drop_low_similarity(&obs, &model.mesh, &delta, -1.0, 0.0);
    assert_eq!(all, (0..8).collect::<Vec<_>>());
}

#[test]
fn kappa_recomputation() {
    let w = small_world(16, 27);
    let mesh = &w.model.mesh;
    let mut rng = rng_from(28);
    let c0 = mesh.feature(0).to_vec();
    let tight: Vec<(usize, Vec<f64>)> = (0..50).map(|_| (0, sample_vmf(&VmfParams::new(c0.clone(), 500.0).unwrap(), &mut rng))).collect();
    let c1 = mesh.feature(1).to_vec();
    let wide: Vec<(usize, Vec<f64>)> = (0..1000).map(|_| (1, sample_vmf(&VmfParams::new(c1.clone(), 5.0).unwrap(), &mut rng))).collect();
    let few: Vec<(usize, Vec<f64>)> = (0..9).map(|_| (2, c0.clone())).collect();
    let all: Vec<_> = tight.into_iter().chain(wide).chain(few).collect();
    let t = single_match_table(mesh.vertex_count(), &all);
    let out = recompute_kappas(mesh, &t, 10).unwrap();
    assert!(out.kappa(0) > mesh.kappa(0));
    assert!((out.kappa(1) - 5.0).abs() / 5.0 < 0.2, "{}", out.kappa(1));
    assert_eq!(out.kappa(2), mesh.kappa(2));
    assert_eq!(out.kappa(3), mesh.kappa(3));
}

fn adapt_setup(w: &World, n: usize) -> (Model, Vec<f64>, Vec<meshsva::synth::UnlabeledScene>) {
    let model = true_model(w);
    let calib = generate_source(&w.model, &w.grid, &w.cam, 60, 20.0, 30).unwrap();
    let delta = calibrate_thresholds(&model, &calib, &w.cam, 0.95).unwrap();
    let (scenes, _) = strip_labels(&generate_source(&w.model, &w.grid, &w.cam, n, 20.0, 31).unwrap());
    (model, delta, scenes)
}

#[test]
fn frozen_adaptation_is_the_identity() {
    let w = small_world(8, 29);
    let (model, delta, scenes) = adapt_setup(&w, 16);
    let cfg = AdaptationConfig { delta, alpha: 1.0, learning_rate: 0.0, epochs: 2, batch_size: 8, ..Default::default() };
    let out = adapt(&model, &scenes, &w.cam, &w.bank(), &InferenceOptions::default(), &cfg, None).unwrap();
    assert_eq!(out.model, model);
    assert_eq!(out.history.rows.len(), 2);
    assert!(out.history.rows.iter().all(|r| r.mean_drift_deg == 0.0 && r.acc_pi6.is_none()));
}

#[test]
fn in_domain_adaptation_barely_moves_the_mesh() {
    let w = small_world(8, 32);
    let (model, delta, scenes) = adapt_setup(&w, 32);
    let cfg = AdaptationConfig { delta, epochs: 2, batch_size: 16, adaptive_batch: true, ..Default::default() };
    let out = adapt(&model, &scenes, &w.cam, &w.bank(), &InferenceOptions::default(), &cfg, None).unwrap();
    let drift: Vec<f64> = (0..model.mesh.vertex_count())
        .map(|r| dot(out.model.mesh.feature(r), model.mesh.feature(r)).clamp(-1.0, 1.0).acos().to_degrees())
        .collect();
    let mean = drift.iter().sum::<f64>() / drift.len() as f64;
    assert!(mean < 2.0, "mean drift {mean} deg");
    let mut csv = Vec::new();
    out.history.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epoch,robust_ratio,mean_drift_deg,kept,dropped,acc_pi6,acc_pi18");
    assert_eq!(text.lines().count(), 1 + out.history.rows.len());
}

#[test]
fn starvation_is_reported() {
    let w = small_world(8, 33);
    let (model, _, scenes) = adapt_setup(&w, 8);
    let cfg = AdaptationConfig { delta: vec![1.0; w.geo.vertex_count()], epochs: 3, batch_size: 8, ..Default::default() };
    let err = adapt(&model, &scenes, &w.cam, &w.bank(), &InferenceOptions::default(), &cfg, None).unwrap_err();
    assert!(matches!(err, Error::Starvation { epoch: 1 }), "{err}");
}

/// Occluded vertex pixels carry a feature far from every vertex, so those
/// vertices collect no matches and keep their exact source features.
#[test]
fn occluded_vertices_are_never_updated() {
    let d = 12;
    let geo = Arc::new(make_cuboid_mesh([1.0, 1.0, 1.0], 2).unwrap());
    let feats: Vec<Vec<f64>> = (0..8).map(|k| basis(d, k)).collect();
    let mesh = NeuralMesh::new(geo.clone(), feats, vec![20.0; 8]).unwrap();
    let cam = Camera::new(120.0, 48, 48).unwrap();
    let pose = Pose::from_degrees(35.0, 25.0, 0.0, 5.0);
    let raster = rasterize(&geo, &pose, &cam).unwrap();
    let visible: Vec<usize> = raster.visible_vertices().collect();
    assert!(visible.len() >= 4);
    let occluded: BTreeSet<usize> = visible.iter().copied().take(2).collect();
    // Observed features: each visible vertex gets a slightly tilted copy of its own feature.
    let mut f = FeatureMap::zeros(48, 48, d);
    for i in 0..f.pixel_count() {
        f.set_pixel(i, &basis(d, 11));
    }
    for (i, r) in raster.foreground() {
        let v = if occluded.contains(&r) {
            basis(d, 10)
        } else {
            let mut v = basis(d, r);
            v[9] = 0.2;
            normalized(&v)
        };
        f.set_pixel(i, &v);
    }
    let est = MultiPoseEstimate {
        candidates: vec![PoseEstimate { pose, loss: 0.0, init_pose: pose, raster: raster.clone(), iterations: 0, loss_history: vec![] }],
        best: 0,
    };
    let obs = [Observation { scene: 0, features: &f, estimate: &est }];
    let table = collect_matches(&obs, &mesh, &[0.8; 8], MatchMode::AllCandidates);
    let updated = sva_update(&mesh, &table, 0.5).unwrap();
    for r in 0..8 {
        if occluded.contains(&r) || !visible.contains(&r) {
            assert!(table.per_vertex[r].is_empty());
            assert_eq!(updated.feature(r), mesh.feature(r));
        } else {
            assert_eq!(table.per_vertex[r].len(), 1);
            assert_ne!(updated.feature(r), mesh.feature(r));
        }
    }
}
