//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) because the criteria share a
//! toy-trained model and report measured values rather than bare booleans.
//! Set `ACCEPTANCE_ONLY=1,3,8` to run a subset; criteria 5-7 and 9 train the
//! toy model on demand.
//!
//! Criteria 6 and 7 compare two toy models or two sampler settings and only
//! check a direction; their FAIL lines are reported but do not change the exit
//! status unless `ACCEPTANCE_STRICT=1` is set. Every other FAIL is fatal.

use std::cell::OnceCell;
use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use candle_core::{DType, Device};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cascade_sr::base_sr::BaseSRModel;
use cascade_sr::checkpoint::{load_checkpoint, save_checkpoint};
use cascade_sr::data::make_synthetic_dataset;
use cascade_sr::denoiser::{Denoiser, DenoiserConfig, DenoiserParams};
use cascade_sr::diffusion::{forward_marginal, reverse_step, DiffusionSchedule};
use cascade_sr::guidance::{scg_gradient, scg_loss, scg_update, BicubicDown, MeanPool};
use cascade_sr::image::stack_images;
use cascade_sr::metrics::{psnr, psnr_unit, self_ssim, ssim};
use cascade_sr::plan::{plan_scales, stage_count, Strategy};
use cascade_sr::resample::bicubic_resize;
use cascade_sr::sampler::{self_consistency_residual, super_resolve, SamplerConfig, ScgReference};
use cascade_sr::trainer::{run_training, sample_batch, train_step, TrainConfig, TrainState};
use cascade_sr::ImageTensor;

type Check = Result<(bool, String), String>;

const TRAIN_IMAGES: usize = 200;
const TRAIN_SIZE: usize = 64;
const TOY_STEPS: u64 = 2000;
const VAL_IMAGES: usize = 8;
const VAL_SIZE: usize = 128;
const LR_SIDE: usize = 16;
const SEEDS: u64 = 20;
const ZETA_ON: f64 = 0.1;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn toy_train_config(fixed_scale: f64, max_scale: f64) -> TrainConfig {
    TrainConfig {
        steps: TOY_STEPS,
        lr: 1e-3,
        lr_final: 1e-4,
        fixed_scale,
        max_scale,
        seed: 0,
        ..Default::default()
    }
}

struct Toy {
    params: DenoiserParams,
    schedule: DiffusionSchedule,
    seconds: f64,
    first_loss: f64,
    last_loss: f64,
}

/// Trains a toy denoiser on the synthetic training set and reloads it from
/// a checkpoint, so everything downstream goes through the saved format.
fn train_toy(model: DenoiserConfig, cfg: TrainConfig) -> Result<Toy, String> {
    let schedule = DiffusionSchedule::default();
    let data = make_synthetic_dataset(TRAIN_IMAGES, (TRAIN_SIZE, TRAIN_SIZE), 0).and_then(|s| s.dataset()).map_err(err)?;
    let mut state = TrainState::new(&model, &cfg).map_err(err)?;
    let start = Instant::now();
    let rows = run_training(&mut state, &data, &schedule, &BaseSRModel::Bicubic, None).map_err(err)?;
    let seconds = start.elapsed().as_secs_f64();
    let mean = |r: &[cascade_sr::trainer::LogRow]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    let window = rows.len().min(100);
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("toy.safetensors");
    save_checkpoint(&path, &state.params, &schedule, &BaseSRModel::Bicubic, None).map_err(err)?;
    let ckpt = load_checkpoint(&path).map_err(err)?;
    Ok(Toy {
        params: ckpt.params,
        schedule: ckpt.schedule,
        seconds,
        first_loss: mean(&rows[..window]),
        last_loss: mean(&rows[rows.len() - window..]),
    })
}

/// Held-out pairs: 128×128 ground truth and its 16×16 bicubic reduction.
fn validation() -> Result<Vec<(ImageTensor, ImageTensor)>, String> {
    let set = make_synthetic_dataset(VAL_IMAGES, (VAL_SIZE, VAL_SIZE), 1000).map_err(err)?;
    set.images
        .into_iter()
        .map(|gt| {
            let lr = bicubic_resize(&gt, (LR_SIDE, LR_SIDE)).map_err(err)?;
            Ok((gt, lr))
        })
        .collect()
}

fn sr(lr: &ImageTensor, scale: f64, toy: &Toy, cfg: &SamplerConfig) -> Result<ImageTensor, String> {
    super_resolve(lr, scale, &toy.params, &BaseSRModel::Bicubic, &toy.schedule, cfg)
        .map(|o| o.image)
        .map_err(err)
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let reference: [(f64, &[f64]); 5] = [
        (5.3, &[2.0, 2.0, 1.325]),
        (7.0, &[2.0, 2.0, 1.75]),
        (10.0, &[2.0, 2.0, 2.0, 1.25]),
        (10.7, &[2.0, 2.0, 2.0, 1.3375]),
        (12.0, &[2.0, 2.0, 2.0, 1.5]),
    ];
    for (s, want) in reference {
        let plan = plan_scales(s, 2.0, (48, 48), Strategy::RemainderLast).map_err(err)?;
        // Direct evaluation: n = ceil(log S / log 2), remainder S / 2^(n-1).
        let n = (s.ln() / 2f64.ln()).ceil() as usize;
        let direct: Vec<f64> = (0..n).map(|i| if i + 1 < n { 2.0 } else { s / 2f64.powi(n as i32 - 1) }).collect();
        let agree = plan.stage_scales.len() == n
            && plan.stage_scales.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12)
            && plan.stage_scales.iter().zip(&direct).all(|(a, b)| (a - b).abs() < 1e-12);
        if !agree {
            return Ok((false, format!("S={s}: got {:?}, want {want:?}", plan.stage_scales)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut exact = 0;
    let mut refused = 0;
    for _ in 0..1000 {
        let s = 1.0 + (1.0 - rng.random::<f64>()) * 19.0;
        let (h, w) = (rng.random_range(16..128usize), rng.random_range(16..128usize));
        let want = ((h as f64 * s).round() as usize, (w as f64 * s).round() as usize);
        match plan_scales(s, 2.0, (h, w), Strategy::RemainderLast) {
            Ok(p) if p.output_resolution() == want && p.n_stages() == stage_count(s, 2.0) => exact += 1,
            Err(_) if want.0 <= h || want.1 <= w => refused += 1,
            _ => return Ok((false, format!("S={s} on {h}x{w} missed {want:?}"))),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        secs < 5.0,
        format!("5 reference plans match; {exact}/1000 exact, {refused} refused as non-enlarging; {secs:.2} s"),
    ))
}

fn variance(img: &ImageTensor) -> (f64, f64) {
    let n = img.numel() as f64;
    let mean = img.mean();
    (mean, img.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let s = DiffusionSchedule::default();
    let draws = (100, 1000);
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for t in 1..=s.n_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let noise = ImageTensor::gaussian(1, draws.0, draws.1, &mut rng);
        let x0 = ImageTensor::filled(1, draws.0, draws.1, 0.4);
        let y0 = ImageTensor::filled(1, draws.0, draws.1, -0.6);
        let (mean, var) = variance(&forward_marginal(&x0, &y0, t, &s, &noise).map_err(err)?);
        let want_mean = 0.4 + s.eta(t) * (-1.0);
        let want_var = s.kappa().powi(2) * s.eta(t);
        // The mean is judged against max(|mean|, std) so near-zero means are not ill-posed.
        worst_mean = worst_mean.max((mean - want_mean).abs() / want_mean.abs().max(want_var.sqrt()));
        worst_var = worst_var.max((var / want_var - 1.0).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x0 = ImageTensor::gaussian(3, 16, 16, &mut rng);
    let y0 = ImageTensor::gaussian(3, 16, 16, &mut rng);
    let zero = ImageTensor::zeros(3, 16, 16);
    let mut x = forward_marginal(&x0, &y0, s.n_steps(), &s, &zero).map_err(err)?;
    for t in (1..=s.n_steps()).rev() {
        x = reverse_step(&x, &x0, t, &s, &zero).map_err(err)?;
    }
    let chain = x.max_abs_diff(&x0).map_err(err)?;
    let mut worst_rev: f64 = 0.0;
    for t in 2..=s.n_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + t as u64);
        let noise = ImageTensor::gaussian(1, draws.0, draws.1, &mut rng);
        let xt = ImageTensor::filled(1, draws.0, draws.1, 0.3);
        let x0 = ImageTensor::filled(1, draws.0, draws.1, -0.2);
        let (_, var) = variance(&reverse_step(&xt, &x0, t, &s, &noise).map_err(err)?);
        let want = s.kappa().powi(2) * s.eta(t - 1) / s.eta(t) * s.alpha(t);
        worst_rev = worst_rev.max((var / want - 1.0).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_mean < 0.02 && worst_var < 0.02 && chain < 1e-9 && worst_rev < 0.02 && secs < 60.0;
    Ok((
        pass,
        format!(
            "1e5 draws per t: forward mean err {:.2}%, var err {:.2}%; oracle chain err {chain:.1e}; reverse var err {:.2}%; {secs:.2} s",
            100.0 * worst_mean,
            100.0 * worst_var,
            100.0 * worst_rev
        ),
    ))
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut increased = 0;
    for _ in 0..20 {
        let x = ImageTensor::gaussian(3, 8, 8, &mut rng);
        let reference = ImageTensor::gaussian(3, 4, 4, &mut rng);
        let down = BicubicDown::new((4, 4));
        let grad = scg_gradient(&x, &reference, &down).map_err(err)?;
        let eps = 1e-5;
        let mut fd = ImageTensor::zeros(3, 8, 8);
        for idx in ndarray::indices((3, 8, 8)) {
            let (c, y, xx) = idx;
            let mut plus = x.clone();
            plus.data_mut()[[c, y, xx]] += eps;
            let mut minus = x.clone();
            minus.data_mut()[[c, y, xx]] -= eps;
            fd.data_mut()[[c, y, xx]] = (scg_loss(&plus, &reference, &down).map_err(err)?
                - scg_loss(&minus, &reference, &down).map_err(err)?)
                / (2.0 * eps);
        }
        let rel = fd.squared_distance(&grad).map_err(err)?.sqrt() / grad.squared_distance(&ImageTensor::zeros(3, 8, 8)).map_err(err)?.sqrt();
        worst = worst.max(rel);
        let before = scg_loss(&x, &reference, &down).map_err(err)?;
        let after = scg_loss(&scg_update(&x, &reference, 1e-3, &down).map_err(err)?, &reference, &down).map_err(err)?;
        if after > before {
            increased += 1;
        }
    }
    let pool = scg_update(&ImageTensor::filled(1, 2, 2, 1.0), &ImageTensor::filled(1, 1, 1, 2.0), 0.5, &MeanPool { factor: 2 })
        .map_err(err)?;
    let pool_ok = pool.data().iter().all(|&v| v == 1.25);
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst < 1e-4 && increased == 0 && pool_ok && secs < 30.0,
        format!(
            "worst finite-difference rel err {worst:.1e} over 20 instances; loss increased {increased}/20 at zeta=1e-3; mean-pool example {}; {secs:.2} s",
            if pool_ok { "gives 1.25" } else { "wrong" }
        ),
    ))
}

/// Parameters whose gradient is exactly zero for an L1 loss on one batch.
fn unreached_parameters(params: &DenoiserParams, seed: u64) -> Result<Vec<String>, String> {
    let data = make_synthetic_dataset(8, (TRAIN_SIZE, TRAIN_SIZE), 77).and_then(|s| s.dataset()).map_err(err)?;
    let cfg = TrainConfig { batch_size: 4, ..toy_train_config(2.0, 8.0) };
    let sched = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = sample_batch(&data, &cfg, &mut rng).map_err(err)?;
    let dev = Device::Cpu;
    let mut x_t = Vec::new();
    let mut cond = Vec::new();
    let mut base = Vec::new();
    let mut target = Vec::new();
    let mut ts = Vec::new();
    for s in &batch {
        let g = bicubic_resize(&s.x_init, s.x_hr.resolution()).map_err(err)?;
        let x0 = s.x_hr.sub(&g).map_err(err)?;
        let y0 = s.x_lr_up.sub(&g).map_err(err)?;
        let t = rng.random_range(1..=sched.n_steps());
        let eps = x0.gaussian_like(&mut rng);
        x_t.push(forward_marginal(&x0, &y0, t, &sched, &eps).map_err(err)?);
        cond.push(y0);
        base.push(g);
        target.push(x0);
        ts.push(t);
    }
    let stack = |v: &[ImageTensor]| stack_images(&v.iter().collect::<Vec<_>>(), DType::F32, &dev).map_err(err);
    let scales: Vec<f64> = batch.iter().map(|s| s.scale).collect();
    let net = Denoiser::new(params).map_err(err)?;
    let pred = net
        .forward(&stack(&x_t)?, &ts, &scales, &stack(&cond)?, &stack(&base)?, &batch[0].cmap)
        .map_err(err)?;
    let loss = (pred - stack(&target)?).and_then(|d| d.abs()).and_then(|d| d.mean_all()).map_err(err)?;
    let grads = loss.backward().map_err(err)?;
    let mut missing = Vec::new();
    for (name, var) in params.store.iter() {
        let size = grads
            .get(var.as_tensor())
            .map(|g| g.abs().and_then(|a| a.sum_all()).and_then(|a| a.to_scalar::<f32>()))
            .transpose()
            .map_err(err)?;
        if !size.is_some_and(|v| v > 0.0) {
            missing.push(name.clone());
        }
    }
    Ok(missing)
}

fn criterion_4(toy: &Result<Toy, String>) -> Check {
    // Single-batch overfit: 16 fixed images with fixed timesteps and noise.
    let start = Instant::now();
    let sched = DiffusionSchedule::default();
    let data = make_synthetic_dataset(TRAIN_IMAGES, (TRAIN_SIZE, TRAIN_SIZE), 0).and_then(|s| s.dataset()).map_err(err)?;
    let cfg = TrainConfig { batch_size: 16, steps: 2000, lr_drop_step: Some(2000), ..toy_train_config(2.0, 8.0) };
    let mut state = TrainState::new(&DenoiserConfig::default(), &cfg).map_err(err)?;
    let batch = sample_batch(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(16)).map_err(err)?;
    let mut losses = Vec::new();
    while state.step < cfg.steps {
        let loss = train_step(&mut state, &batch, &sched, &BaseSRModel::Bicubic, &mut ChaCha8Rng::seed_from_u64(17))
            .map_err(err)?;
        losses.push(loss);
        if loss < 0.1 * losses[0] {
            break;
        }
    }
    let overfit_secs = start.elapsed().as_secs_f64();
    let ratio = losses.last().unwrap() / losses[0];
    // 100-step moving average, checked every 10 steps.
    let ma: Vec<f64> = losses.windows(100.min(losses.len())).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    let monotone = ma.iter().step_by(10).collect::<Vec<_>>().windows(2).all(|p| p[1] < p[0]);

    let toy = toy.as_ref().map_err(|e| format!("toy training failed: {e}"))?;
    let missing = unreached_parameters(&toy.params, 4)?;
    let pass = ratio < 0.1 && toy.seconds < 1800.0 && missing.is_empty() && toy.last_loss.is_finite();
    Ok((
        pass,
        format!(
            "overfit: {:.4} -> {:.4} ({:.1}%) in {} steps, {overfit_secs:.0} s, 100-step moving average {}; toy run: {TRAIN_IMAGES} images, {TOY_STEPS} steps in {:.0} s, mean loss {:.4} -> {:.4}; {} of {} parameter tensors without gradient{}",
            losses[0],
            losses.last().unwrap(),
            100.0 * ratio,
            losses.len(),
            if monotone { "decreasing" } else { "not monotone" },
            toy.seconds,
            toy.first_loss,
            toy.last_loss,
            missing.len(),
            toy.params.store.len(),
            if missing.is_empty() { String::new() } else { format!(" ({missing:?})") }
        ),
    ))
}

fn criterion_5(toy: &Toy) -> Check {
    let start = Instant::now();
    let images = make_synthetic_dataset(10, (48, 48), 2000).map_err(err)?.images;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = toy.schedule.n_steps();
    let (mut exact, mut refused, mut repro) = (0, 0, 0);
    for k in 0..50 {
        let img = &images[rng.random_range(0..images.len())];
        let (h, w) = (rng.random_range(16..=20usize), rng.random_range(16..=20usize));
        let input = img.crop(0, 0, h, w).map_err(err)?;
        let s = 1.0 + (1.0 - rng.random::<f64>()) * 11.0;
        let cfg = SamplerConfig { seed: k, ..Default::default() };
        let want = ((h as f64 * s).round() as usize, (w as f64 * s).round() as usize);
        let out = match super_resolve(&input, s, &toy.params, &BaseSRModel::Bicubic, &toy.schedule, &cfg) {
            Ok(out) => out,
            Err(_) if want.0 <= h || want.1 <= w => {
                refused += 1;
                continue;
            }
            Err(e) => return Ok((false, format!("S={s} on {h}x{w}: {e}"))),
        };
        if out.image.resolution() != want || out.denoiser_calls != out.plan.n_stages() * t {
            return Ok((
                false,
                format!("S={s} on {h}x{w}: {:?} with {} calls", out.image.resolution(), out.denoiser_calls),
            ));
        }
        exact += 1;
        if k < 5 {
            let again = super_resolve(&input, s, &toy.params, &BaseSRModel::Bicubic, &toy.schedule, &cfg).map_err(err)?;
            if again.image != out.image {
                return Ok((false, format!("S={s}: repeated run differs")));
            }
            repro += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        exact + refused == 50,
        format!("{exact}/50 exact resolution with n*T denoiser calls, {refused} refused as non-enlarging; {repro}/{repro} repeated runs bitwise identical; {secs:.0} s"),
    ))
}

/// Per seed: outputs at ×4 and ×8 with guidance on and off.
struct Trend {
    residual: [[f64; 2]; 2],
    selfssim: [f64; 2],
    /// ×8 outputs with guidance on, for images `0..VAL_IMAGES`.
    x8_on: Vec<ImageTensor>,
}

fn scg_trend(toy: &Toy, val: &[(ImageTensor, ImageTensor)]) -> Result<Trend, String> {
    let mut residual = [[0.0; 2]; 2];
    let mut selfssim = [0.0; 2];
    let mut x8_on = Vec::new();
    for seed in 0..SEEDS {
        let lr = &val[seed as usize % val.len()].1;
        let down = BicubicDown::new(lr.resolution());
        for (m, reference) in [ScgReference::PreviousStage, ScgReference::Off].into_iter().enumerate() {
            let cfg = SamplerConfig { zeta: vec![ZETA_ON], seed, reference, ..Default::default() };
            let x4 = sr(lr, 4.0, toy, &cfg)?;
            let x8 = sr(lr, 8.0, toy, &cfg)?;
            for (i, out) in [&x4, &x8].into_iter().enumerate() {
                residual[m][i] += self_consistency_residual(out, lr, &down).map_err(err)? / SEEDS as f64;
            }
            let matrix = self_ssim(&[(4.0, x4), (8.0, x8.clone())]).map_err(err)?;
            selfssim[m] += matrix.get(4.0, 8.0).unwrap_or(f64::NAN) / SEEDS as f64;
            if m == 0 && (seed as usize) < val.len() {
                x8_on.push(x8);
            }
        }
    }
    Ok(Trend { residual, selfssim, x8_on })
}

fn criterion_6(trend: &Trend) -> Check {
    let r = trend.residual;
    let on = (r[0][0] + r[0][1]) / 2.0;
    let off = (r[1][0] + r[1][1]) / 2.0;
    let scale_wise = r[0][0] <= r[1][0] && r[0][1] <= r[1][1];
    let pass = scale_wise && trend.selfssim[0] >= trend.selfssim[1];
    Ok((
        pass,
        format!(
            "{SEEDS} seeds, zeta {ZETA_ON}: residual x4 on {:.5} / off {:.5}, x8 on {:.5} / off {:.5} (mean {on:.5} vs {off:.5}); SelfSSIM(x4, x8) on {:.6} / off {:.6}",
            r[0][0], r[1][0], r[0][1], r[1][1], trend.selfssim[0], trend.selfssim[1]
        ),
    ))
}

fn criterion_7(toy: &Toy, single: &Result<Toy, String>, trend: &Trend, val: &[(ImageTensor, ImageTensor)]) -> Check {
    let single = single.as_ref().map_err(|e| format!("single-stage training failed: {e}"))?;
    let n = val.len() as f64;
    let (mut cascade, mut one, mut bicubic) = (0.0, 0.0, 0.0);
    for (i, (gt, lr)) in val.iter().enumerate() {
        let cfg = SamplerConfig {
            zeta: vec![ZETA_ON],
            seed: i as u64,
            fixed_scale: single.params.config.max_scale,
            ..Default::default()
        };
        let out = sr(lr, 8.0, single, &cfg)?;
        one += psnr_unit(&out, gt).map_err(err)? / n;
        cascade += psnr_unit(&trend.x8_on[i], gt).map_err(err)? / n;
        bicubic += psnr_unit(&bicubic_resize(lr, gt.resolution()).map_err(err)?.clamp(-1.0, 1.0), gt).map_err(err)? / n;
    }
    let stages = plan_scales(8.0, toy.params.config.max_scale, (LR_SIDE, LR_SIDE), Strategy::RemainderLast)
        .map_err(err)?
        .n_stages();
    Ok((
        cascade >= one,
        format!(
            "x8 on {} held-out {VAL_SIZE}px images: cascade ({stages} stages) {cascade:.3} dB, single stage {one:.3} dB, margin {:+.3} dB (bicubic {bicubic:.3} dB); both trained {TOY_STEPS} steps",
            val.len(),
            cascade - one
        ),
    ))
}

fn criterion_8() -> Check {
    let start = Instant::now();
    let a = ImageTensor::filled(3, 32, 32, 0.3);
    let b = ImageTensor::filled(3, 32, 32, 0.4);
    let p = psnr(&a, &b, 1.0).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = ImageTensor::gaussian(3, 48, 48, &mut rng).scale(0.4).clamp(-1.0, 1.0);
    let s = ssim(&img, &img).map_err(err)?;
    let lr = make_synthetic_dataset(1, (32, 32), 8).map_err(err)?.images.remove(0);
    let outputs: Vec<(f64, ImageTensor)> = [2.0, 3.0, 4.0]
        .into_iter()
        .map(|k| Ok((k, bicubic_resize(&lr, ((32.0 * k) as usize, (32.0 * k) as usize)).map_err(err)?)))
        .collect::<Result<_, String>>()?;
    let m = self_ssim(&outputs).map_err(err)?;
    let diag = (0..3).all(|i| m.values[[i, i]] == 1.0);
    let off = (0..3)
        .flat_map(|i| (0..3).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| m.values[[i, j]])
        .fold(f64::INFINITY, f64::min);
    let secs = start.elapsed().as_secs_f64();
    Ok((
        (p - 20.0).abs() < 1e-9 && (s - 1.0).abs() < 1e-12 && diag && off > 0.95 && secs < 30.0,
        format!(
            "PSNR(0.1 offset) {p:.6} dB; SSIM(a,a) {s:.12}; SelfSSIM diagonal {}; bicubic x2/x3/x4 off-diagonal min {off:.4}; {secs:.2} s",
            if diag { "1.000" } else { "not 1" }
        ),
    ))
}

fn criterion_9(toy: &Toy) -> Check {
    let mut lines = Vec::new();
    for name in ["rl", "rf", "us"] {
        let strategy: Strategy = name.parse().map_err(err)?;
        for s in [3.7, 5.3, 10.7, 17.0] {
            let plan = plan_scales(s, 2.0, (23, 31), strategy).map_err(err)?;
            let want = ((23.0 * s).round() as usize, (31.0 * s).round() as usize);
            if plan.output_resolution() != want {
                return Ok((false, format!("{name} S={s}: {:?}", plan.output_resolution())));
            }
        }
        let input = make_synthetic_dataset(1, (16, 18), 9).map_err(err)?.images.remove(0);
        let cfg = SamplerConfig { strategy, ..Default::default() };
        let out = super_resolve(&input, 3.7, &toy.params, &BaseSRModel::Bicubic, &toy.schedule, &cfg).map_err(err)?;
        if out.image.resolution() != (59, 67) || out.plan.strategy != strategy {
            return Ok((false, format!("{name}: end-to-end output {:?}", out.image.resolution())));
        }
        let scales: Vec<String> = out.plan.stage_scales.iter().map(|v| format!("{v:.3}")).collect();
        lines.push(format!("{name} [{}]", scales.join(", ")));
    }
    Ok((true, format!("all plans exact at S in {{3.7, 5.3, 10.7, 17}}; x3.7 end-to-end 16x18 -> 59x67: {}", lines.join("; "))))
}

fn main() -> ExitCode {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|set| set.contains(&n));
    let needs_toy = (4..=7).chain([9]).any(wanted);

    let mut failed = Vec::new();
    let mut report = |n: u32, name: &str, check: Check| {
        let (pass, detail) = check.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("{} criterion {n} ({name}): {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failed.push(n);
        }
    };

    if wanted(1) {
        report(1, "scale plans", criterion_1());
    }
    if wanted(2) {
        report(2, "diffusion core", criterion_2());
    }
    if wanted(3) {
        report(3, "self-consistency guidance", criterion_3());
    }
    let toy = OnceCell::new();
    let toy = || toy.get_or_init(|| train_toy(DenoiserConfig::default(), toy_train_config(2.0, 8.0)));
    if needs_toy {
        eprintln!("training the toy cascade model ({TOY_STEPS} steps)...");
        toy();
    }
    if wanted(4) {
        report(4, "toy training", criterion_4(toy()));
    }
    let val = validation();
    let trend = OnceCell::new();
    let trend = || {
        trend.get_or_init(|| {
            let toy = toy().as_ref().map_err(|e| format!("toy training failed: {e}"))?;
            scg_trend(toy, val.as_ref().map_err(|e| e.clone())?)
        })
    };
    let with_toy = |f: &dyn Fn(&Toy) -> Check| match toy() {
        Ok(t) => f(t),
        Err(e) => Err(format!("toy training failed: {e}")),
    };
    if wanted(5) {
        report(5, "end-to-end inference", with_toy(&criterion_5));
    }
    if wanted(6) {
        report(6, "guidance trend", trend().as_ref().map_err(|e| e.clone()).and_then(criterion_6));
    }
    if wanted(7) {
        eprintln!("training the single-stage variant ({TOY_STEPS} steps)...");
        let single = train_toy(DenoiserConfig { max_scale: 8.0, ..Default::default() }, toy_train_config(8.0, 8.0));
        let check = with_toy(&|t| {
            let trend = trend().as_ref().map_err(|e| e.clone())?;
            criterion_7(t, &single, trend, val.as_ref().map_err(|e| e.clone())?)
        });
        report(7, "cascade vs single stage", check);
    }
    if wanted(9) {
        report(9, "upsampling strategies", with_toy(&criterion_9));
    }
    if wanted(8) {
        report(8, "metrics", criterion_8());
    }
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let fatal: Vec<u32> = failed.iter().copied().filter(|n| strict || ![6, 7].contains(n)).collect();
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
    }
    if fatal.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
