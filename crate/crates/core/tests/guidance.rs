use cascade_sr::guidance::{scg_gradient, scg_loss, scg_update, BicubicDown, MeanPool};
use cascade_sr::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (h, w) = (rng.random_range(6..12usize), rng.random_range(6..12usize));
        let x = ImageTensor::gaussian(3, h, w, &mut rng);
        let down = BicubicDown::new((h / 2, w / 2));
        let reference = ImageTensor::gaussian(3, h / 2, w / 2, &mut rng);
        let grad = scg_gradient(&x, &reference, &down).unwrap();
        let eps = 1e-5;
        let mut num = 0.0;
        let mut den = 0.0;
        for _ in 0..12 {
            let idx = (rng.random_range(0..3), rng.random_range(0..h), rng.random_range(0..w));
            let mut plus = x.clone();
            plus.data_mut()[[idx.0, idx.1, idx.2]] += eps;
            let mut minus = x.clone();
            minus.data_mut()[[idx.0, idx.1, idx.2]] -= eps;
            let fd = (scg_loss(&plus, &reference, &down).unwrap() - scg_loss(&minus, &reference, &down).unwrap())
                / (2.0 * eps);
            let g = grad.data()[[idx.0, idx.1, idx.2]];
            num += (fd - g).powi(2);
            den += g.powi(2);
        }
        assert!((num / den).sqrt() < 1e-4, "relative error {}", (num / den).sqrt());
    }
}

#[test]
fn small_step_never_increases_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let x = ImageTensor::gaussian(3, 16, 16, &mut rng);
        let reference = ImageTensor::gaussian(3, 8, 8, &mut rng);
        let down = BicubicDown::new((8, 8));
        let before = scg_loss(&x, &reference, &down).unwrap();
        let after = scg_loss(&scg_update(&x, &reference, 1e-3, &down).unwrap(), &reference, &down).unwrap();
        assert!(after <= before);
    }
}

#[test]
fn mean_pool_update_by_hand() {
    let x = ImageTensor::filled(1, 2, 2, 1.0);
    let reference = ImageTensor::filled(1, 1, 1, 2.0);
    let down = MeanPool { factor: 2 };
    assert_eq!(scg_loss(&x, &reference, &down).unwrap(), 1.0);
    let grad = scg_gradient(&x, &reference, &down).unwrap();
    assert!(grad.data().iter().all(|&g| g == -0.5));
    assert!(scg_update(&x, &reference, 0.5, &down).unwrap().data().iter().all(|&v| v == 1.25));
}
