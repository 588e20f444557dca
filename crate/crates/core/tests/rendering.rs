use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nerfcam::autodiff::{gradient_check, AutodiffError, GradCheckOptions, ParamId, ParamStore, Tape, Tensor};
use nerfcam::camera::{CameraRig, CameraVars, RigOptions};
use nerfcam::renderer::{render_image, render_pixels, RenderConfig, RenderError};
use nerfcam::synthscene::{oracle_render, ring_cameras, AnalyticField, AnalyticScene};
use nerfcam::training::photometric_loss;

fn cfg(samples: usize) -> RenderConfig {
    RenderConfig { samples, jitter: false, near: 2.0, far: 6.0, ..RenderConfig::default() }
}

#[test]
fn camera_gradients_through_the_analytic_scene() {
    let scene = AnalyticScene::three_blobs();
    let truth = ring_cameras(1, 4.0, 0.3, scene.center(), 10, 10, 12.0, 0.2)[0];
    let target = oracle_render(&scene, &truth, 2.0, 6.0, 32, 0.0);
    let mut start = truth;
    start.intrinsics.fx *= 1.05;
    start.intrinsics.s = 0.3;
    start.extrinsics.rotation[1] += 0.02;
    start.extrinsics.translation[0] += 0.05;

    let mut store = ParamStore::<f64>::new();
    let rig = CameraRig::register(&mut store, &[start], RigOptions { learn_skew: true, ..Default::default() }).unwrap();
    let field = AnalyticField { scene };
    let pixels: Vec<(u32, u32)> = (0..10).flat_map(|v| (0..10).map(move |u| (u, v))).collect();
    let gt: Vec<f64> = pixels.iter().flat_map(|&(u, v)| target.pixel(u, v)).collect();
    let ids: Vec<ParamId> = store.ids().collect();
    let report = gradient_check(&mut store, &ids, GradCheckOptions { step: 1e-6, ..Default::default() }, |tape, store| {
        let cam = CameraVars::from_params(tape, store, &rig.views[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = render_pixels(tape, store, &field, &cam, &pixels, 10, 10, 0.0, &cfg(24), &mut rng).map_err(|e| match e {
            RenderError::Autodiff(e) => e,
            e => AutodiffError::InvalidArgument(e.to_string()),
        })?;
        let gt = tape.constant(Tensor::new(vec![100, 3], gt.clone())?);
        photometric_loss(tape, out.rgb, gt)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert_eq!(report.checked, 2 + 2 + 1 + 3 + 3);
}

#[test]
fn single_and_double_precision_agree() {
    let scene = AnalyticScene::moving_blobs();
    let cam = ring_cameras(1, 4.0, 0.3, scene.center(), 16, 12, 18.0, 0.7)[0];
    let field = AnalyticField { scene };
    let a = render_image(&ParamStore::<f64>::new(), &field, &cam, 0.6, &cfg(64), 50).unwrap();
    let b = render_image(&ParamStore::<f32>::new(), &field, &cam, 0.6, &cfg(64), 7).unwrap();
    let worst = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn full_image_matches_pixel_batches() {
    let scene = AnalyticScene::three_blobs();
    let cam = ring_cameras(1, 4.0, 0.3, scene.center(), 9, 7, 10.0, 1.1)[0];
    let field = AnalyticField { scene };
    let store = ParamStore::<f64>::new();
    let img = render_image(&store, &field, &cam, 0.0, &cfg(16), 5).unwrap();
    let pixels = [(0, 0), (8, 6), (4, 3), (2, 5)];
    let mut tape = Tape::no_grad();
    let vars = CameraVars::constant(&mut tape, &cam);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = render_pixels(&mut tape, &store, &field, &vars, &pixels, 9, 7, 0.0, &cfg(16), &mut rng).unwrap();
    let rgb = tape.value(out.rgb).data();
    for (i, &(u, v)) in pixels.iter().enumerate() {
        assert_eq!(&rgb[3 * i..3 * i + 3], &img.pixel(u, v));
    }
}
