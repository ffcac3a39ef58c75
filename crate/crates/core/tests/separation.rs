use indexmap::IndexMap;
use mmdense::arch::{ArchSpec, Model};
use mmdense::separate::{
    mwf, run_segmented, separate_clip, soft_mask, spatial_covariances, Method, ModelSet, SegmentOptions,
    SeparateOptions, SourceEstimateSet,
};
use mmdense::signal::{istft, stft, AudioClip};
use mmdense::train::synth_dataset;
use mmdense::Tensor;
use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
    a.max_abs_diff(b) / b.max_abs().max(f32::MIN_POSITIVE)
}

#[test]
fn segmented_inference_matches_single_pass() {
    let spec = ArchSpec::mmdensenet_table1().scaled_widths(0.5).with_seed(4);
    let model = Model::<f32>::build(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // 300 frames padded up to the pooling multiple.
    let x = Tensor::from_fn(&[1, 2, 304, 1024], |_| rng.random_range(0.0..2.0f32));
    let whole = run_segmented(&model, &x, SegmentOptions::single_pass()).unwrap();
    let seg = run_segmented(&model, &x, SegmentOptions::default()).unwrap();
    assert!(rel_diff(&seg, &whole) < 1e-4, "{}", rel_diff(&seg, &whole));
    let small = SegmentOptions { frames: 64, overlap: 16 };
    let seg = run_segmented(&model, &x, small).unwrap();
    assert!(rel_diff(&seg, &whole) < 1e-4, "{}", rel_diff(&seg, &whole));
}

#[test]
fn stft_round_trip_on_scene_mixture() {
    let scene = &synth_dataset(5, 1, 2.0)[0];
    let back = istft(&stft(&scene.mixture).unwrap()).unwrap();
    for c in 0..2 {
        let (x, y) = (scene.mixture.channel(c), back.channel(c));
        let sig: f64 = x.iter().map(|&v| (v as f64).powi(2)).sum();
        let err: f64 = x.iter().zip(y).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
        assert!(10.0 * (sig / err).log10() > 60.0);
    }
}

fn widen(z: Complex32) -> Complex64 {
    Complex64::new(z.re as f64, z.im as f64)
}

fn two_source_estimates(mix: &AudioClip, rng: &mut ChaCha8Rng) -> SourceEstimateSet {
    let spec = stft(mix).unwrap();
    let mag = spec.magnitude();
    let mut est = IndexMap::new();
    for name in ["a", "b"] {
        let data: Vec<f32> = mag.data().iter().map(|&m| m * rng.random_range(0.0..1.0f32)).collect();
        let (c, t, f) = mag.shape();
        est.insert(name.to_string(), mmdense::signal::MagSpectrogram::new(data, c, t, f, mag.framing.clone()).unwrap());
    }
    SourceEstimateSet::new(est).unwrap()
}

#[test]
fn mask_and_mwf_conserve_the_mixture() {
    let scene = &synth_dataset(6, 1, 1.0)[0];
    let mix = stft(&scene.mixture).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let est = two_source_estimates(&scene.mixture, &mut rng);
    for images in [soft_mask(&est, &mix, 2.0).unwrap(), mwf(&est, &mix, 1).unwrap()] {
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for (i, m) in mix.data().iter().enumerate() {
            let s: Complex64 = images.values().map(|im| widen(im.data()[i])).sum();
            let m64 = widen(*m);
            worst = worst.max((s - m64).norm());
            scale = scale.max(m64.norm());
        }
        assert!(worst <= 1e-5 * scale, "{worst} vs {scale}");
    }
    for cov in spatial_covariances(&est, &mix).unwrap() {
        let (herm, min_eig) = cov.hermitian_psd_report();
        assert!(herm < 1e-6 && min_eig >= -1e-9, "{herm} {min_eig}");
    }
}

#[test]
fn separation_is_deterministic() {
    let spec = ArchSpec::mmdensenet_table1().scaled_widths(0.25).with_seed(9);
    let models: ModelSet = ["tonal", "bass"]
        .into_iter()
        .map(|n| (n.to_string(), Model::<f32>::build(&spec).unwrap()))
        .collect();
    let scene = &synth_dataset(1, 1, 1.0)[0];
    for method in [Method::Mask, Method::Mwf] {
        let opts = SeparateOptions { method, ..Default::default() };
        let a = separate_clip(&scene.mixture, &models, &spec.fingerprint(), &opts).unwrap();
        let b = separate_clip(&scene.mixture, &models, &spec.fingerprint(), &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.values().all(|c| c.len() == scene.mixture.len()));
    }
}

#[test]
fn separation_rejects_mismatched_fingerprint() {
    let spec = ArchSpec::mmdensenet_table1().scaled_widths(0.25);
    let models: ModelSet = [("tonal".to_string(), Model::<f32>::build(&spec).unwrap())].into_iter().collect();
    let scene = &synth_dataset(1, 1, 0.5)[0];
    let other = ArchSpec::mdensenet_table1().fingerprint();
    assert!(separate_clip(&scene.mixture, &models, &other, &SeparateOptions::default()).is_err());
}
