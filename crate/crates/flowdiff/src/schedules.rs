//! Non-learned diffusion numerics: noise schedules, the stage partition of
//! the timestep axis, forward re-noising, and deterministic/stochastic
//! reverse steps.
//!
//! Denoising runs coarse-to-fine: the timestep axis `[0, T)` is split into
//! contiguous stages, one per pyramid level, with the coarsest level owning
//! the highest timesteps. Within a stage the sampler takes DDIM steps; at a
//! stage boundary the clean-flow estimate is upsampled 2x and re-noised
//! with the forward process at the target timestep.
//!
//! Scheduler algebra runs in `f64` ([`Field`]): the round-trip identities
//! (`q_sample` then `estimate_noise`, DDIM with a perfect estimate) involve
//! near-cancelling terms whose error would sit around 1e-5 in `f32` at
//! small `t`, an order of magnitude above the tolerances this module
//! guarantees. Model training still runs in `f32`; conversion happens at
//! the module edge.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense `f64` array used for diffusion-state algebra. Same row-major
/// layout conventions as [`Tensor`].
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(shape: &[usize]) -> Self {
        Field {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Field {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let len = shape.iter().product();
        Field {
            shape: shape.to_vec(),
            data: (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        }
    }

    pub fn from_f32(t: &Tensor) -> Self {
        Field {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_f32(&self) -> Tensor {
        Tensor::from_vec(
            &self.shape,
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scale(&self, s: f64) -> Field {
        Field {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }
}

/// Families for [`make_noise_schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Linear beta ramp, the DDPM default (1e-4 to 2e-2).
    LinearBeta,
    /// Squared-cosine cumulative schedule, clipped away from zero.
    Cosine,
}

/// Cumulative signal coefficients `alpha_bar[0..=T]` with the convention
/// `alpha_bar[0] == 1`, so `t = 0` is the clean sample.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    alpha_bar: Vec<f64>,
}

const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 2e-2;
const COSINE_FLOOR: f64 = 1e-5;

pub fn make_noise_schedule(t_max: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::invalid("noise schedule needs T >= 1"));
    }
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    match kind {
        ScheduleKind::LinearBeta => {
            let mut acc = 1.0f64;
            for t in 1..=t_max {
                let frac = if t_max == 1 {
                    0.0
                } else {
                    (t - 1) as f64 / (t_max - 1) as f64
                };
                let beta = LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * frac;
                acc *= 1.0 - beta;
                alpha_bar.push(acc);
            }
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| ((t / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2);
            let f0 = f(0.0);
            let mut prev = 1.0f64;
            for t in 1..=t_max {
                let v = (f(t as f64) / f0).clamp(COSINE_FLOOR, 1.0).min(prev);
                // Keep strictly below 1 so estimate_noise is defined at t>=1.
                let v = v.min(1.0 - 1e-9);
                alpha_bar.push(v);
                prev = v;
            }
        }
    }
    Ok(NoiseSchedule { t_max, alpha_bar })
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    pub fn q_coeffs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Coefficients `(coef_x0, coef_xt)` so that the DDIM update is
    /// `coef_x0 * x0_pred + coef_xt * x_t + sigma * eps`.
    pub fn ddim_coeffs(&self, t: usize, t_prev: usize, sigma: f64) -> Result<(f64, f64)> {
        if !(t_prev < t && t <= self.t_max) {
            return Err(Error::invalid(format!(
                "ddim step needs 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}, T={}",
                self.t_max
            )));
        }
        if sigma < 0.0 {
            return Err(Error::invalid("sigma must be non-negative"));
        }
        let ab_t = self.alpha_bar[t];
        let ab_p = self.alpha_bar[t_prev];
        let var_p = 1.0 - ab_p;
        if sigma * sigma > var_p + 1e-12 {
            return Err(Error::invalid(format!(
                "sigma^2 = {} exceeds 1 - alpha_bar[t_prev] = {var_p}",
                sigma * sigma
            )));
        }
        let dir = (var_p - sigma * sigma).max(0.0).sqrt();
        let coef_xt = dir / (1.0 - ab_t).sqrt();
        let coef_x0 = ab_p.sqrt() - coef_xt * ab_t.sqrt();
        Ok((coef_x0, coef_xt))
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.t_max {
            return Err(Error::invalid(format!(
                "timestep {t} outside [{lo}, {}]",
                self.t_max
            )));
        }
        Ok(())
    }
}

fn check_same_shape(a: &Field, b: &Field, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::invalid(format!(
            "{what}: shape {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// Forward process: `sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps`.
pub fn q_sample(x0: &Field, t: usize, eps: &Field, sched: &NoiseSchedule) -> Result<Field> {
    sched.check_t(t, 0)?;
    check_same_shape(x0, eps, "q_sample")?;
    let (a, b) = sched.q_coeffs(t);
    let data = x0
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    Ok(Field {
        shape: x0.shape.clone(),
        data,
    })
}

/// Noise implied by a clean-sample estimate:
/// `(x_t - sqrt(ab_t) * x0_pred) / sqrt(1 - ab_t)`.
pub fn estimate_noise(
    x_t: &Field,
    x0_pred: &Field,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Field> {
    sched.check_t(t, 1)?;
    check_same_shape(x_t, x0_pred, "estimate_noise")?;
    let (a, b) = sched.q_coeffs(t);
    if b == 0.0 {
        return Err(Error::invalid(format!(
            "estimate_noise undefined at t={t}: no noise component"
        )));
    }
    let data = x_t
        .data
        .iter()
        .zip(&x0_pred.data)
        .map(|(&xt, &x0)| (xt - a * x0) / b)
        .collect();
    Ok(Field {
        shape: x_t.shape.clone(),
        data,
    })
}

/// One reverse step from `t` to `t_prev`:
/// `sqrt(ab_p) * x0_pred + sqrt(1 - ab_p - sigma^2) * eps_est + sigma * eps_draw`.
///
/// With `sigma = 0` (the deterministic DDIM setting used at inference)
/// `eps_draw` may be `None`.
pub fn ddim_step(
    x_t: &Field,
    x0_pred: &Field,
    t: usize,
    t_prev: usize,
    sigma: f64,
    eps_draw: Option<&Field>,
    sched: &NoiseSchedule,
) -> Result<Field> {
    check_same_shape(x_t, x0_pred, "ddim_step")?;
    let (c0, ct) = sched.ddim_coeffs(t, t_prev, sigma)?;
    let mut out: Vec<f64> = x_t
        .data
        .iter()
        .zip(&x0_pred.data)
        .map(|(&xt, &x0)| c0 * x0 + ct * xt)
        .collect();
    if sigma > 0.0 {
        let eps = eps_draw.ok_or_else(|| {
            Error::invalid("ddim_step with sigma > 0 requires an eps_draw")
        })?;
        check_same_shape(x_t, eps, "ddim_step eps_draw")?;
        for (o, &e) in out.iter_mut().zip(&eps.data) {
            *o += sigma * e;
        }
    }
    Ok(Field {
        shape: x_t.shape.clone(),
        data: out,
    })
}

/// 2x bilinear upsample of a flow-valued field with values doubled, since
/// pixel units double with resolution. Accepts `[c, h, w]`.
pub fn upsample_flow_2x(flow: &Field) -> Field {
    assert_eq!(flow.shape.len(), 3, "expected [c, h, w] field");
    let (c, h, w) = (flow.shape[0], flow.shape[1], flow.shape[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Field::zeros(&[c, oh, ow]);
    for oy in 0..oh {
        let (y0, y1, fy) = resize_axis64(oy, 0.5, h);
        for ox in 0..ow {
            let (x0, x1, fx) = resize_axis64(ox, 0.5, w);
            for ci in 0..c {
                let sb = ci * h * w;
                let v = (1.0 - fy) * (1.0 - fx) * flow.data[sb + y0 * w + x0]
                    + (1.0 - fy) * fx * flow.data[sb + y0 * w + x1]
                    + fy * (1.0 - fx) * flow.data[sb + y1 * w + x0]
                    + fy * fx * flow.data[sb + y1 * w + x1];
                out.data[ci * oh * ow + oy * ow + ox] = 2.0 * v;
            }
        }
    }
    out
}

fn resize_axis64(out_i: usize, scale: f64, extent: usize) -> (usize, usize, f64) {
    let coord = (out_i as f64 + 0.5) * scale - 0.5;
    let max = (extent - 1) as f64;
    let c = coord.clamp(0.0, max);
    let i0 = c.floor();
    let frac = c - i0;
    let i0 = i0 as usize;
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, frac)
}

/// Stage-boundary transition: upsample the clean-flow estimate to the next
/// finer level and re-noise it at `t_prev` with the forward process.
pub fn stage_transition(
    x0_pred: &Field,
    t_prev: usize,
    eps_draw: &Field,
    sched: &NoiseSchedule,
) -> Result<Field> {
    let up = upsample_flow_2x(x0_pred);
    q_sample(&up, t_prev, eps_draw, sched)
}

/// The level-interval partition of `[0, T)`: level `levels[i]` owns the
/// half-open interval `bounds[i]`, listed coarse to fine. The coarsest
/// level owns the highest timesteps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    levels: Vec<usize>,
    bounds: Vec<(usize, usize)>,
    t_max: usize,
}

pub fn make_stage_plan(t_max: usize, k0: usize, k1: usize) -> Result<StagePlan> {
    if k0 > k1 {
        return Err(Error::invalid(format!("k0 = {k0} must be <= k1 = {k1}")));
    }
    let n_levels = k1 - k0 + 1;
    if t_max < n_levels {
        return Err(Error::invalid(format!(
            "need at least one timestep per level: T = {t_max}, levels = {n_levels}"
        )));
    }
    let base = t_max / n_levels;
    let rem = t_max % n_levels;
    // Uniform split; the remainder timesteps go to the finest levels, which
    // pins level k1's interval to [T - floor(T/L), T).
    let mut levels = Vec::with_capacity(n_levels);
    let mut bounds = Vec::with_capacity(n_levels);
    let mut hi = t_max;
    for (idx, level) in (k0..=k1).rev().enumerate() {
        let fine_rank = n_levels - 1 - idx; // 0 for finest
        let len = base + usize::from(fine_rank < rem);
        levels.push(level);
        bounds.push((hi - len, hi));
        hi -= len;
    }
    debug_assert_eq!(hi, 0);
    Ok(StagePlan {
        levels,
        bounds,
        t_max,
    })
}

impl StagePlan {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Pyramid levels, coarsest first.
    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn coarsest(&self) -> usize {
        self.levels[0]
    }

    pub fn finest(&self) -> usize {
        *self.levels.last().unwrap()
    }

    /// `[t0, t1)` interval owned by `level`.
    pub fn interval(&self, level: usize) -> Option<(usize, usize)> {
        self.levels
            .iter()
            .position(|&l| l == level)
            .map(|i| self.bounds[i])
    }

    /// The level whose interval contains `t`; `t = T` maps to the coarsest
    /// level, where sampling starts.
    pub fn stage_of(&self, t: usize) -> usize {
        if t >= self.t_max {
            return self.coarsest();
        }
        for (level, &(lo, hi)) in self.levels.iter().zip(&self.bounds) {
            if t >= lo && t < hi {
                return *level;
            }
        }
        unreachable!("partition covers [0, T)")
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.levels
            .iter()
            .zip(&self.bounds)
            .map(|(&l, &(lo, hi))| (l, lo, hi))
    }
}

/// One denoiser evaluation point on the sampling trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathEntry {
    pub t: usize,
    pub level: usize,
    /// True when the step after this evaluation crosses into a finer stage
    /// and therefore runs a stage transition instead of a DDIM step.
    pub boundary_after: bool,
}

/// Descending timestep subsequence walked by the sampler, with per-step
/// stage labels. Step counts per stage differ by at most one, with the
/// extra steps given to the coarsest stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingPath {
    entries: Vec<PathEntry>,
}

pub fn make_sampling_path(plan: &StagePlan, n_steps: usize) -> Result<SamplingPath> {
    let n_levels = plan.num_levels();
    if n_steps < n_levels {
        return Err(Error::invalid(format!(
            "n_steps = {n_steps} must be >= number of levels = {n_levels}"
        )));
    }
    if n_steps > plan.t_max() {
        return Err(Error::invalid(format!(
            "n_steps = {n_steps} exceeds T = {}",
            plan.t_max()
        )));
    }
    let base = n_steps / n_levels;
    let rem = n_steps % n_levels;
    let mut entries: Vec<PathEntry> = Vec::with_capacity(n_steps);
    for (idx, (level, lo, hi)) in plan.rows().enumerate() {
        let count = base + usize::from(idx < rem);
        // Evenly spaced from the stage's topmost usable timestep; the
        // coarsest stage starts at T itself, where the initial noise lives.
        let top = if idx == 0 { plan.t_max() } else { hi - 1 };
        let lo = lo.max(1);
        for j in 0..count {
            let span = (top - lo) as f64;
            let mut t = top - (j as f64 * span / count as f64).round() as usize;
            // Guard against collisions in degenerate tiny-stage configs.
            if let Some(prev) = entries.last() {
                t = t.min(prev.t.saturating_sub(1));
            }
            t = t.max(lo);
            entries.push(PathEntry {
                t,
                level,
                boundary_after: false,
            });
        }
    }
    for i in 0..entries.len() {
        let is_last = i + 1 == entries.len();
        if !is_last && entries[i + 1].level < entries[i].level {
            entries[i].boundary_after = true;
        }
    }
    let path = SamplingPath { entries };
    debug_assert!(path
        .entries
        .windows(2)
        .all(|w| w[0].t > w[1].t && w[0].level >= w[1].level));
    Ok(path)
}

impl SamplingPath {
    pub fn entries(&self) -> &[PathEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_for_level(&self, level: usize) -> usize {
        self.entries.iter().filter(|e| e.level == level).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randf(shape: &[usize], seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::randn(shape, &mut rng)
    }

    #[test]
    fn schedule_invariants_hold() {
        for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
            for t_max in [1, 2, 10, 100, 1000] {
                let s = make_noise_schedule(t_max, kind).unwrap();
                assert_eq!(s.alpha_bar(0), 1.0, "{kind:?} T={t_max}");
                for t in 1..=t_max {
                    let ab = s.alpha_bar(t);
                    assert!(ab > 0.0 && ab < 1.0, "{kind:?} T={t_max} t={t}: {ab}");
                    assert!(ab <= s.alpha_bar(t - 1));
                    let (a, b) = s.q_coeffs(t);
                    assert!((a * a + b * b - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn schedule_rejects_t_zero() {
        assert!(make_noise_schedule(0, ScheduleKind::LinearBeta).is_err());
    }

    #[test]
    fn linear_beta_regression_fixtures() {
        // Oracle: independent cumulative product over the linear beta ramp.
        let oracle = |t_max: usize| -> f64 {
            let mut acc = 0.0;
            for t in 1..=t_max {
                let frac = if t_max == 1 {
                    0.0
                } else {
                    (t - 1) as f64 / (t_max - 1) as f64
                };
                acc += (1.0 - (1e-4 + (2e-2 - 1e-4) * frac)).ln();
            }
            acc.exp()
        };
        let s = make_noise_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        assert!(s.alpha_bar(1000) < 0.01);
        assert!((s.alpha_bar(1000) - oracle(1000)).abs() / oracle(1000) < 1e-10);
        assert!((s.alpha_bar(1000) - 4.035829765375694e-05).abs() < 1e-12);

        let s10 = make_noise_schedule(10, ScheduleKind::LinearBeta).unwrap();
        assert!((s10.alpha_bar(10) - 0.903739416151237).abs() < 1e-12);
    }

    #[test]
    fn degenerate_t_one() {
        for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
            let s = make_noise_schedule(1, kind).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            let a = s.alpha_bar(1);
            assert!(a > 0.0 && a < 1.0);
        }
    }

    #[test]
    fn stage_plan_paper_constants() {
        let plan = make_stage_plan(1000, 2, 4).unwrap();
        assert_eq!(plan.levels(), &[4, 3, 2]);
        assert_eq!(plan.interval(4), Some((667, 1000)));
        assert_eq!(plan.interval(3), Some((334, 667)));
        assert_eq!(plan.interval(2), Some((0, 334)));
        let mut lens: Vec<usize> = plan.rows().map(|(_, lo, hi)| hi - lo).collect();
        lens.sort_unstable();
        assert_eq!(lens, vec![333, 333, 334]);
        assert_eq!(plan.stage_of(999), 4);
    }

    #[test]
    fn stage_plan_one_step_per_level() {
        let plan = make_stage_plan(3, 2, 4).unwrap();
        for (_, lo, hi) in plan.rows() {
            assert_eq!(hi - lo, 1);
        }
    }

    #[test]
    fn stage_plan_single_level_identity() {
        let plan = make_stage_plan(6, 2, 2).unwrap();
        assert_eq!(plan.levels(), &[2]);
        assert_eq!(plan.interval(2), Some((0, 6)));
    }

    #[test]
    fn stage_plan_rejects_too_few_timesteps() {
        assert!(make_stage_plan(2, 2, 4).is_err());
        assert!(make_stage_plan(5, 4, 2).is_err());
    }

    #[test]
    fn sampling_path_paper_constants() {
        let plan = make_stage_plan(1000, 2, 4).unwrap();
        let path = make_sampling_path(&plan, 6).unwrap();
        assert_eq!(path.len(), 6);
        for level in [2, 3, 4] {
            assert_eq!(path.count_for_level(level), 2, "level {level}");
        }
        let ts: Vec<usize> = path.entries().iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![1000, 833, 666, 500, 333, 167]);
        let boundaries: Vec<bool> = path.entries().iter().map(|e| e.boundary_after).collect();
        assert_eq!(boundaries, vec![false, true, false, true, false, false]);
    }

    #[test]
    fn sampling_path_step_counts_balance() {
        let plan = make_stage_plan(1000, 2, 4).unwrap();
        for n in [3usize, 6, 7, 8, 12] {
            let path = make_sampling_path(&plan, n).unwrap();
            assert_eq!(path.len(), n);
            let lo = n / 3;
            let hi = lo + usize::from(n % 3 != 0);
            for level in [2, 3, 4] {
                let c = path.count_for_level(level);
                assert!(c == lo || c == hi, "n={n} level={level} count={c}");
            }
            assert!(path.entries().windows(2).all(|w| w[0].t > w[1].t));
        }
        assert!(make_sampling_path(&plan, 2).is_err());
    }

    #[test]
    fn q_sample_identity_at_zero() {
        let s = make_noise_schedule(100, ScheduleKind::LinearBeta).unwrap();
        let x0 = randf(&[2, 4, 4], 1);
        let eps = randf(&[2, 4, 4], 2);
        let out = q_sample(&x0, 0, &eps, &s).unwrap();
        assert_eq!(out, x0);
    }

    #[test]
    fn q_sample_pure_noise_from_zero_signal() {
        let s = make_noise_schedule(100, ScheduleKind::LinearBeta).unwrap();
        let x0 = Field::zeros(&[3, 3]);
        let eps = randf(&[3, 3], 3);
        let t = 40;
        let out = q_sample(&x0, t, &eps, &s).unwrap();
        let (_, b) = s.q_coeffs(t);
        for (o, e) in out.data().iter().zip(eps.data()) {
            assert!((o - b * e).abs() < 1e-12);
        }
    }

    #[test]
    fn q_sample_shape_mismatch_errors() {
        let s = make_noise_schedule(10, ScheduleKind::LinearBeta).unwrap();
        let x0 = Field::zeros(&[2, 2]);
        let eps = Field::zeros(&[2, 3]);
        assert!(q_sample(&x0, 1, &eps, &s).is_err());
        assert!(q_sample(&x0, 11, &Field::zeros(&[2, 2]), &s).is_err());
    }

    #[test]
    fn estimate_noise_inverts_q_sample() {
        let s = make_noise_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        let x0 = randf(&[2, 8, 8], 4);
        let eps = randf(&[2, 8, 8], 5);
        for t in [1, 2, 17, 500, 1000] {
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let rec = estimate_noise(&xt, &x0, t, &s).unwrap();
            for (r, e) in rec.data().iter().zip(eps.data()) {
                let denom = e.abs().max(1e-9);
                assert!((r - e).abs() / denom <= 1e-6, "t={t}: {r} vs {e}");
            }
        }
    }

    #[test]
    fn estimate_noise_zero_when_pred_matches_signal() {
        let s = make_noise_schedule(100, ScheduleKind::LinearBeta).unwrap();
        let xt = randf(&[4, 4], 6);
        let t = 30;
        let (a, _) = s.q_coeffs(t);
        let x0 = xt.scale(1.0 / a);
        let out = estimate_noise(&xt, &x0, t, &s).unwrap();
        for &v in out.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn estimate_noise_rejects_t_zero() {
        let s = make_noise_schedule(10, ScheduleKind::LinearBeta).unwrap();
        let x = Field::zeros(&[2]);
        assert!(estimate_noise(&x, &x, 0, &s).is_err());
    }

    #[test]
    fn estimate_noise_matches_independent_formula() {
        // Duplicate-implementation oracle for the noise-estimate formula.
        let s = make_noise_schedule(200, ScheduleKind::Cosine).unwrap();
        let xt = randf(&[3, 5], 7);
        let x0 = randf(&[3, 5], 8);
        let t = 123;
        let out = estimate_noise(&xt, &x0, t, &s).unwrap();
        let ab = s.alpha_bar(t);
        for i in 0..xt.len() {
            let expect = (xt.data()[i] - ab.sqrt() * x0.data()[i]) / (1.0 - ab).sqrt();
            assert!((out.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_with_perfect_estimate_renotes_to_t_prev() {
        let s = make_noise_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        let x0 = randf(&[2, 6, 6], 9);
        let eps = randf(&[2, 6, 6], 10);
        for (t, tp) in [(1000, 833), (500, 167), (10, 1), (700, 0)] {
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let stepped = ddim_step(&xt, &x0, t, tp, 0.0, None, &s).unwrap();
            let expect = q_sample(&x0, tp, &eps, &s).unwrap();
            for (a, b) in stepped.data().iter().zip(expect.data()) {
                assert!((a - b).abs() <= 1e-6, "t={t}->{tp}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ddim_to_zero_recovers_clean_sample() {
        let s = make_noise_schedule(100, ScheduleKind::LinearBeta).unwrap();
        let x0 = randf(&[4, 4], 11);
        let eps = randf(&[4, 4], 12);
        let xt = q_sample(&x0, 60, &eps, &s).unwrap();
        let out = ddim_step(&xt, &x0, 60, 0, 0.0, None, &s).unwrap();
        for (a, b) in out.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ddim_deterministic_at_sigma_zero() {
        let s = make_noise_schedule(100, ScheduleKind::LinearBeta).unwrap();
        let xt = randf(&[3, 3], 13);
        let x0 = randf(&[3, 3], 14);
        let a = ddim_step(&xt, &x0, 50, 25, 0.0, None, &s).unwrap();
        let b = ddim_step(&xt, &x0, 50, 25, 0.0, None, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ddim_rejects_oversized_sigma() {
        let s = make_noise_schedule(100, ScheduleKind::LinearBeta).unwrap();
        let x = Field::zeros(&[2, 2]);
        // 1 - alpha_bar[0] = 0, so any positive sigma is too large.
        assert!(ddim_step(&x, &x, 10, 0, 0.1, Some(&x), &s).is_err());
        assert!(ddim_step(&x, &x, 10, 10, 0.0, None, &s).is_err());
    }

    #[test]
    fn stage_transition_shape_and_value_scaling() {
        let s = make_noise_schedule(100, ScheduleKind::LinearBeta).unwrap();
        let mut flow = Field::zeros(&[2, 8, 8]);
        for p in 0..64 {
            flow.data_mut()[p] = 1.0;
            flow.data_mut()[64 + p] = 0.5;
        }
        let up = upsample_flow_2x(&flow);
        assert_eq!(up.shape(), &[2, 16, 16]);
        for p in 0..256 {
            assert!((up.data()[p] - 2.0).abs() < 1e-12);
            assert!((up.data()[256 + p] - 1.0).abs() < 1e-12);
        }
        // eps = 0 leaves sqrt(alpha_bar) times the upsampled flow.
        let t_prev = 42;
        let eps = Field::zeros(&[2, 16, 16]);
        let out = stage_transition(&flow, t_prev, &eps, &s).unwrap();
        let (a, _) = s.q_coeffs(t_prev);
        for (o, u) in out.data().iter().zip(up.data()) {
            assert!((o - a * u).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_oracle_iteration_recovers_signal() {
        // Single level, no stage transitions: walking any descending path
        // with exact x0 estimates from pure noise must land on x0.
        let s = make_noise_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        let plan = make_stage_plan(1000, 2, 2).unwrap();
        let x0 = randf(&[2, 8, 8], 15);
        for n_steps in [1usize, 4, 6, 13] {
            let path = make_sampling_path(&plan, n_steps).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut x = Field::randn(&[2, 8, 8], &mut rng);
            let entries = path.entries();
            for (i, e) in entries.iter().enumerate() {
                let t_prev = entries.get(i + 1).map_or(0, |n| n.t);
                x = ddim_step(&x, &x0, e.t, t_prev, 0.0, None, &s).unwrap();
            }
            for (a, b) in x.data().iter().zip(x0.data()) {
                assert!((a - b).abs() <= 1e-5, "n={n_steps}: {a} vs {b}");
            }
        }
    }

    proptest! {
        #[test]
        fn partition_covers_every_timestep(t_max in 3usize..200, k0 in 0usize..5, span in 0usize..4) {
            let k1 = k0 + span;
            prop_assume!(t_max >= span + 1);
            let plan = make_stage_plan(t_max, k0, k1).unwrap();
            for t in 0..t_max {
                let owners: Vec<usize> = plan
                    .rows()
                    .filter(|&(_, lo, hi)| t >= lo && t < hi)
                    .map(|(l, _, _)| l)
                    .collect();
                prop_assert_eq!(owners.len(), 1, "t = {} has owners {:?}", t, owners);
                prop_assert_eq!(owners[0], plan.stage_of(t));
            }
            let lens: Vec<usize> = plan.rows().map(|(_, lo, hi)| hi - lo).collect();
            let min = lens.iter().min().unwrap();
            let max = lens.iter().max().unwrap();
            prop_assert!(max - min <= 1);
            prop_assert_eq!(plan.stage_of(t_max - 1), k1);
        }

        #[test]
        fn round_trip_recovers_noise(seed in 0u64..500, t in 1usize..=100, h in 1usize..6, w in 1usize..6) {
            let s = make_noise_schedule(100, ScheduleKind::LinearBeta).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = Field::randn(&[2, h, w], &mut rng);
            let eps = Field::randn(&[2, h, w], &mut rng);
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let rec = estimate_noise(&xt, &x0, t, &s).unwrap();
            for (r, e) in rec.data().iter().zip(eps.data()) {
                let denom = e.abs().max(1e-9);
                prop_assert!((r - e).abs() / denom <= 1e-6);
            }
        }
    }
}
