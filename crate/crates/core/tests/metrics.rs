use cascade_sr::metrics::{psnr, self_ssim, ssim};
use cascade_sr::resample::bicubic_resize;
use cascade_sr::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn psnr_closed_form() {
    let a = ImageTensor::filled(3, 8, 8, 0.5);
    let b = ImageTensor::filled(3, 8, 8, 0.6);
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
}

#[test]
fn ssim_identity_symmetry_and_anticorrelation() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = ImageTensor::gaussian(3, 24, 24, &mut rng).scale(0.3);
    let b = ImageTensor::gaussian(3, 24, 24, &mut rng).scale(0.3);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    assert!(ssim(&a, &a.scale(-1.0)).unwrap() < 0.0);
}

#[test]
fn self_ssim_of_independent_noise_is_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let mut noise = |side: usize| ImageTensor::from_fn(3, side, side, |_| rng.random_range(-1.0..=1.0));
        let low = noise(24);
        let high = noise(48);
        let m = self_ssim(&[(2.0, low), (4.0, high)]).unwrap();
        assert_eq!(m.get(2.0, 2.0), Some(1.0));
        assert!(m.get(2.0, 4.0).unwrap().abs() < 0.1);
    }
}

#[test]
fn bicubic_outputs_are_mutually_consistent() {
    let lr = cascade_sr::data::make_synthetic_dataset(1, (24, 24), 4).unwrap().images.remove(0);
    let outputs = [2.0, 4.0].map(|s| (s, bicubic_resize(&lr, (24 * s as usize, 24 * s as usize)).unwrap()));
    let m = self_ssim(&outputs).unwrap();
    assert!(m.get(2.0, 4.0).unwrap() > 0.95);
}
