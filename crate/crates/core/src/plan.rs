//! Decomposition of a target magnification into cascade stages, and the
//! mixed scale distribution used to draw per-stage training scales.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed per-stage factor used for both face and general-scene data.
pub const DEFAULT_FIXED_SCALE: f64 = 2.0;

/// Where the non-fixed remainder factor sits in the stage sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// `[s_fix, …, s_fix, s_arbi]`
    #[default]
    #[serde(alias = "rl")]
    RemainderLast,
    /// `[s_arbi, s_fix, …, s_fix]`
    #[serde(alias = "rf")]
    RemainderFirst,
    /// `n` equal factors `S^(1/n)`.
    #[serde(alias = "us")]
    Uniform,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::RemainderLast,
        Strategy::RemainderFirst,
        Strategy::Uniform,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Strategy::RemainderLast => "rl",
            Strategy::RemainderFirst => "rf",
            Strategy::Uniform => "us",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rl" | "remainder_last" => Ok(Strategy::RemainderLast),
            "rf" | "remainder_first" => Ok(Strategy::RemainderFirst),
            "us" | "uniform" => Ok(Strategy::Uniform),
            other => Err(Error::invalid(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalePlan {
    pub target_scale: f64,
    pub fixed_scale: f64,
    pub strategy: Strategy,
    pub input_resolution: (usize, usize),
    /// Nominal per-stage factors; their product is `target_scale`.
    pub stage_scales: Vec<f64>,
    /// Integer output resolution of every stage.
    pub stage_resolutions: Vec<(usize, usize)>,
}

impl ScalePlan {
    pub fn n_stages(&self) -> usize {
        self.stage_scales.len()
    }

    pub fn output_resolution(&self) -> (usize, usize) {
        *self.stage_resolutions.last().expect("plans have at least one stage")
    }

    /// Input resolution of stage `i` (0-based).
    pub fn stage_input(&self, i: usize) -> (usize, usize) {
        if i == 0 {
            self.input_resolution
        } else {
            self.stage_resolutions[i - 1]
        }
    }

    /// Per-axis scale actually realized by stage `i` after rounding.
    pub fn effective_scale(&self, i: usize) -> (f64, f64) {
        let (ih, iw) = self.stage_input(i);
        let (oh, ow) = self.stage_resolutions[i];
        (oh as f64 / ih as f64, ow as f64 / iw as f64)
    }
}

/// Smallest `n` with `fixed^n >= target`, i.e. `ceil(log target / log fixed)`
/// without the floating-point hazard at exact powers.
pub fn stage_count(target: f64, fixed: f64) -> usize {
    let raw = (target.ln() / fixed.ln()).ceil().max(1.0) as usize;
    // ln(8)/ln(2) can land a hair above 3.
    if raw > 1 && fixed.powi(raw as i32 - 1) >= target * (1.0 - 1e-12) {
        raw - 1
    } else {
        raw
    }
}

pub fn plan_scales(
    target: f64,
    fixed: f64,
    input: (usize, usize),
    strategy: Strategy,
) -> Result<ScalePlan> {
    if !(target > 1.0) || !target.is_finite() {
        return Err(Error::invalid(format!("target scale {target} must be > 1")));
    }
    if !(fixed > 1.0) || !fixed.is_finite() {
        return Err(Error::invalid(format!("fixed scale {fixed} must be > 1")));
    }
    if input.0 == 0 || input.1 == 0 {
        return Err(Error::invalid("input resolution must be positive"));
    }
    let n = stage_count(target, fixed);
    let stage_scales = match strategy {
        Strategy::RemainderLast | Strategy::RemainderFirst => {
            let remainder = target / fixed.powi(n as i32 - 1);
            let mut scales = vec![fixed; n];
            let idx = if strategy == Strategy::RemainderLast { n - 1 } else { 0 };
            scales[idx] = remainder;
            scales
        }
        Strategy::Uniform => vec![target.powf(1.0 / n as f64); n],
    };

    let final_res = (
        (input.0 as f64 * target).round() as usize,
        (input.1 as f64 * target).round() as usize,
    );
    if final_res.0 <= input.0 || final_res.1 <= input.1 {
        return Err(Error::invalid(format!(
            "scale {target} does not enlarge a {}x{} input",
            input.0, input.1
        )));
    }

    // Round the running real-valued resolution. Every stage grows by at least
    // a pixel and leaves a pixel for each later stage, so a tiny remainder
    // still lands exactly on round(h·S).
    let mut stage_resolutions = Vec::with_capacity(n);
    let mut cumulative = 1.0;
    let mut prev = input;
    for (i, s) in stage_scales.iter().enumerate() {
        let res = if i + 1 == n {
            final_res
        } else {
            cumulative *= s;
            let left = n - 1 - i;
            let fit = |side: usize, prev: usize, last: usize| {
                ((side as f64 * cumulative).round() as usize).min(last.saturating_sub(left)).max(prev + 1)
            };
            (fit(input.0, prev.0, final_res.0), fit(input.1, prev.1, final_res.1))
        };
        if res.0 <= prev.0 || res.1 <= prev.1 {
            return Err(Error::invalid(format!(
                "scale {target} with {n} stages cannot grow a {}x{} input at every stage",
                input.0, input.1
            )));
        }
        stage_resolutions.push(res);
        prev = res;
    }

    Ok(ScalePlan {
        target_scale: target,
        fixed_scale: fixed,
        strategy,
        input_resolution: input,
        stage_scales,
        stage_resolutions,
    })
}

/// Mixed training distribution over per-stage scales: mass `p_fixed` on the
/// fixed factor, the rest uniform on `[1, fixed_scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleDistribution {
    pub p_fixed: f64,
    pub fixed_scale: f64,
}

impl ScaleDistribution {
    pub fn new(p_fixed: f64, fixed_scale: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_fixed) {
            return Err(Error::invalid(format!("p_fixed {p_fixed} outside [0, 1]")));
        }
        if !(fixed_scale > 1.0) {
            return Err(Error::invalid(format!("fixed scale {fixed_scale} must be > 1")));
        }
        Ok(Self { p_fixed, fixed_scale })
    }

    /// 0.5 on faces.
    pub fn face() -> Self {
        Self { p_fixed: 0.5, fixed_scale: DEFAULT_FIXED_SCALE }
    }

    /// 0.8 on general scenes.
    pub fn general() -> Self {
        Self { p_fixed: 0.8, fixed_scale: DEFAULT_FIXED_SCALE }
    }
}

pub fn sample_train_scale<R: Rng + ?Sized>(dist: &ScaleDistribution, rng: &mut R) -> f64 {
    if rng.random::<f64>() < dist.p_fixed {
        dist.fixed_scale
    } else {
        rng.random_range(1.0..dist.fixed_scale)
    }
}

/// Renders the stage table as aligned text.
pub fn format_plan(plan: &ScalePlan) -> String {
    let mut out = format!(
        "target x{} from {}x{} (fixed x{}, strategy {})\n",
        plan.target_scale, plan.input_resolution.0, plan.input_resolution.1, plan.fixed_scale, plan.strategy
    );
    out.push_str(&format!(
        "{:>5}  {:>10}  {:>10}  {:>12}\n",
        "stage", "scale", "effective", "resolution"
    ));
    for i in 0..plan.n_stages() {
        let (h, w) = plan.stage_resolutions[i];
        let (eh, _) = plan.effective_scale(i);
        out.push_str(&format!(
            "{:>5}  {:>10.6}  {:>10.6}  {:>12}\n",
            i + 1,
            plan.stage_scales[i],
            eh,
            format!("{h}x{w}")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn twelve_splits_into_three_doublings_and_a_remainder() {
        let p = plan_scales(12.0, 2.0, (16, 16), Strategy::RemainderLast).unwrap();
        assert_eq!(p.n_stages(), 4);
        assert!(close(&p.stage_scales, &[2.0, 2.0, 2.0, 1.5]));
        assert_eq!(p.stage_resolutions, vec![(32, 32), (64, 64), (128, 128), (192, 192)]);
    }

    #[test]
    fn exact_fixed_scale_is_one_stage() {
        let p = plan_scales(2.0, 2.0, (10, 12), Strategy::RemainderLast).unwrap();
        assert_eq!(p.n_stages(), 1);
        assert_eq!(p.stage_scales, vec![2.0]);
        assert_eq!(p.output_resolution(), (20, 24));
    }

    #[test]
    fn fractional_target() {
        let p = plan_scales(5.3, 2.0, (20, 20), Strategy::RemainderLast).unwrap();
        assert!(close(&p.stage_scales, &[2.0, 2.0, 1.325]));
        assert_eq!(p.output_resolution(), (106, 106));
    }

    #[test]
    fn powers_of_the_fixed_scale_have_no_unit_stage() {
        for (s, n) in [(4.0, 2), (8.0, 3), (16.0, 4)] {
            let p = plan_scales(s, 2.0, (16, 16), Strategy::RemainderLast).unwrap();
            assert_eq!(p.n_stages(), n, "S={s}");
            assert!(p.stage_scales.iter().all(|&x| (x - 2.0).abs() < 1e-12));
        }
    }

    #[test]
    fn strategies_place_the_remainder() {
        let rf = plan_scales(12.0, 2.0, (16, 16), Strategy::RemainderFirst).unwrap();
        assert!(close(&rf.stage_scales, &[1.5, 2.0, 2.0, 2.0]));
        let us = plan_scales(12.0, 2.0, (16, 16), Strategy::Uniform).unwrap();
        let each = 12f64.powf(0.25);
        assert!(close(&us.stage_scales, &[each; 4]));
        assert_eq!(rf.output_resolution(), (192, 192));
        assert_eq!(us.output_resolution(), (192, 192));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(plan_scales(1.0, 2.0, (16, 16), Strategy::RemainderLast).is_err());
        assert!(plan_scales(0.5, 2.0, (16, 16), Strategy::RemainderLast).is_err());
        assert!(plan_scales(3.0, 1.0, (16, 16), Strategy::RemainderLast).is_err());
        assert!(plan_scales(3.0, 2.0, (0, 16), Strategy::RemainderLast).is_err());
        // round(16 * 1.01) == 16: nothing to upsample.
        assert!(plan_scales(1.01, 2.0, (16, 16), Strategy::RemainderLast).is_err());
    }

    #[test]
    fn degenerate_distribution_always_returns_fixed() {
        let dist = ScaleDistribution::new(1.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..1000).all(|_| sample_train_scale(&dist, &mut rng) == 2.0));
    }

    #[test]
    fn distribution_validation() {
        assert!(ScaleDistribution::new(1.5, 2.0).is_err());
        assert!(ScaleDistribution::new(0.5, 1.0).is_err());
    }

    #[test]
    fn parse_strategy() {
        assert_eq!("rf".parse::<Strategy>().unwrap(), Strategy::RemainderFirst);
        assert_eq!("uniform".parse::<Strategy>().unwrap(), Strategy::Uniform);
        assert!("zz".parse::<Strategy>().is_err());
    }

    proptest! {
        #[test]
        fn plan_invariants(s in 1.0f64..20.0, h in 8usize..64, w in 8usize..64, k in 0usize..3) {
            prop_assume!((h as f64 * s).round() as usize > h && (w as f64 * s).round() as usize > w);
            let strategy = Strategy::ALL[k];
            let p = plan_scales(s, 2.0, (h, w), strategy).unwrap();
            let product: f64 = p.stage_scales.iter().product();
            prop_assert!((product - s).abs() / s < 1e-9);
            for &x in &p.stage_scales {
                prop_assert!(x > 1.0 && x <= 2.0 + 1e-12);
            }
            // Smallest n with 2^n >= S, by counting.
            let mut n = 1;
            while 2f64.powi(n as i32) < s {
                n += 1;
            }
            prop_assert_eq!(p.n_stages(), n);
            let mut prev = (h, w);
            for &r in &p.stage_resolutions {
                prop_assert!(r.0 > prev.0 && r.1 > prev.1);
                prev = r;
            }
            prop_assert_eq!(p.output_resolution(), ((h as f64 * s).round() as usize, (w as f64 * s).round() as usize));
        }

        #[test]
        fn stage_count_is_monotone(a in 1.0001f64..30.0, b in 1.0001f64..30.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(stage_count(lo, 2.0) <= stage_count(hi, 2.0));
        }

        #[test]
        fn small_targets_are_single_stage(s in 1.0001f64..=2.0) {
            prop_assert_eq!(stage_count(s, 2.0), 1);
        }
    }
}
