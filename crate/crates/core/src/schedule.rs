//! Diffusion noise schedule and inference step grids.

use crate::error::{Error, Result};

/// Per-step noise rates and their cumulative products. Index convention:
/// `alpha_bar(0) == 1` is the clean signal; steps run `1..=total`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    betas: Vec<f32>,
    alpha_bars: Vec<f32>, // len total+1, [0] = 1.0
}

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f32 = 1e-4;
pub const DEFAULT_BETA_END: f32 = 2e-2;

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` over `total` steps.
    pub fn linear(total: usize, beta_start: f32, beta_end: f32) -> Result<Self> {
        if total < 2 {
            return Err(Error::Config(format!("schedule needs >= 2 steps, got {total}")));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f32> = (0..total)
            .map(|i| beta_start + (beta_end - beta_start) * i as f32 / (total - 1) as f32)
            .collect();
        let mut alpha_bars = Vec::with_capacity(total + 1);
        alpha_bars.push(1.0f32);
        let mut prod = 1.0f64;
        for &b in &betas {
            prod *= 1.0 - b as f64;
            alpha_bars.push(prod as f32);
        }
        let s = NoiseSchedule { betas, alpha_bars };
        s.validate()?;
        Ok(s)
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }

    fn validate(&self) -> Result<()> {
        let ab = &self.alpha_bars;
        if ab[0] != 1.0 {
            return Err(Error::Config("alpha_bar(0) must be 1".into()));
        }
        let last = ab[ab.len() - 1];
        if !(0.0 < last && last < 1.0) {
            return Err(Error::Config(format!("alpha_bar(T) = {last} out of (0, 1)")));
        }
        if ab.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("alpha_bar must be strictly decreasing".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f32 {
        self.betas[t - 1]
    }

    /// Cumulative signal rate at step `t` (0 = clean).
    pub fn alpha_bar(&self, t: usize) -> f32 {
        self.alpha_bars[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.total_steps() {
            return Err(Error::Config(format!(
                "step {t} out of schedule range 1..={}",
                self.total_steps()
            )));
        }
        Ok(())
    }

    /// Descending grid of `n + 1` timesteps from T down to 0, a uniform
    /// subset of the training grid.
    pub fn inference_grid(&self, n: usize) -> Result<Vec<usize>> {
        let total = self.total_steps();
        if n < 1 || n > total {
            return Err(Error::Config(format!("inference steps {n} out of range 1..={total}")));
        }
        let grid: Vec<usize> = (0..=n)
            .rev()
            .map(|k| ((k as f64 * total as f64) / n as f64).round() as usize)
            .collect();
        if grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!("degenerate inference grid for {n} steps")));
        }
        Ok(grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_satisfies_invariants() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.total_steps(), 1000);
        assert_eq!(s.alpha_bar(0), 1.0);
        let last = s.alpha_bar(1000);
        assert!(0.0 < last && last < 1.0, "alpha_bar(T) = {last}");
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn arbitrary_schedules_keep_monotonicity() {
        for (total, b0, b1) in [(2, 1e-4, 1e-3), (50, 1e-3, 0.5e-1), (777, 2e-4, 3e-2)] {
            let s = NoiseSchedule::linear(total, b0, b1).unwrap();
            for t in 1..=total {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(NoiseSchedule::linear(1, 1e-4, 2e-2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 2e-2).is_err());
        assert!(NoiseSchedule::linear(10, 2e-2, 1e-4).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn inference_grid_covers_full_range() {
        let s = NoiseSchedule::default_linear();
        let g = s.inference_grid(100).unwrap();
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], 1000);
        assert_eq!(g[100], 0);
        assert_eq!(g[1], 990);
        let g300 = s.inference_grid(300).unwrap();
        assert_eq!(g300.len(), 301);
        for w in g300.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn step_range_is_enforced() {
        let s = NoiseSchedule::default_linear();
        assert!(s.check_step(0).is_err());
        assert!(s.check_step(1).is_ok());
        assert!(s.check_step(1000).is_ok());
        assert!(s.check_step(1001).is_err());
    }
}
