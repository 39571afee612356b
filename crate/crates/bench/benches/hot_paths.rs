use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use datbev_core::attention::{da_sca_forward_with, da_sca_vjp, AttentionConfig, BevQuery, DaScaParams, ImageFeatureMap, QueryGeometry};
use datbev_core::encoding::{NormalizedUvd, PeMode, SineEncoder, DEFAULT_TEMPERATURE};
use datbev_core::harness::evaluate::scene_ground_truth;
use datbev_core::metrics::{compute_map, Detection, SceneEval, DIST_THRESHOLDS};
use datbev_core::scene_sim::{generate_scene, render_scene, SimConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sine_pe(c: &mut Criterion) {
    let enc = SineEncoder::new(32, DEFAULT_TEMPERATURE, PeMode::Uvd).unwrap();
    let mut out = vec![0.0; 32];
    c.bench_function("sine_pe_32", |b| {
        b.iter(|| enc.encode_into(black_box(NormalizedUvd::new(0.3, 0.6, 0.25)), &mut out))
    });
}

fn da_sca(c: &mut Criterion) {
    let sim = SimConfig::default();
    let scene = generate_scene(&sim, 3).unwrap();
    let views = render_scene(&scene, &sim).unwrap();
    let grid = sim.grid(20).unwrap();
    let enc = SineEncoder::new(sim.feature_dim, DEFAULT_TEMPERATURE, PeMode::Uvd).unwrap();
    let cfg = AttentionConfig::new(1, enc).unwrap();
    let maps: Vec<ImageFeatureMap> = views
        .iter()
        .zip(&scene.cameras)
        .map(|(v, cam)| {
            ImageFeatureMap::new(cam.height(), cam.width(), v.features.clone(), ndarray::Array1::from_elem(cam.height() * cam.width(), 0.3))
                .unwrap()
        })
        .collect();
    let queries: Vec<BevQuery> = (0..grid.num_cells())
        .map(|i| BevQuery::new(vec![0.0; 32], grid.cell_center_index(i), vec![-1.5, -0.5, 0.5, 1.5], &grid).unwrap())
        .collect();
    let geometry = QueryGeometry::build(&queries, &scene.cameras, &grid, &enc);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = DaScaParams::random(32, &mut rng);
    let contents = Array2::from_shape_fn((queries.len(), 32), |_| rng.random_range(-0.1..0.1));
    c.bench_function("da_sca_forward_400q", |b| {
        b.iter(|| da_sca_forward_with(black_box(&contents), &geometry, &maps, &params, &cfg).unwrap())
    });
    let state = da_sca_forward_with(&contents, &geometry, &maps, &params, &cfg).unwrap();
    let d_out = Array2::from_elem((queries.len(), 32), 0.01);
    c.bench_function("da_sca_vjp_400q", |b| {
        b.iter(|| da_sca_vjp(black_box(&d_out), &state, &geometry, &maps, &params, &cfg).unwrap())
    });
}

fn map(c: &mut Criterion) {
    let sim = SimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scenes: Vec<SceneEval> = (0..100)
        .map(|s| {
            let gts = scene_ground_truth(&generate_scene(&sim, s).unwrap());
            let dets = (0..50)
                .map(|_| {
                    Detection::new(
                        rng.random_range(-50.0..50.0),
                        rng.random_range(-50.0..50.0),
                        rng.random_range(0..sim.classes),
                        rng.random(),
                    )
                })
                .collect();
            SceneEval { id: s.to_string(), gts, dets }
        })
        .collect();
    c.bench_function("compute_map_100_scenes", |b| b.iter(|| compute_map(black_box(&scenes), &DIST_THRESHOLDS)));
}

criterion_group!(benches, sine_pe, da_sca, map);
criterion_main!(benches);
