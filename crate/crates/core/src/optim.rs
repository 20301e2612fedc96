//! Adam over grid values and the coarse-to-fine training schedule.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::grid::{Aabb, FieldGrid, GradSink};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.03,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one [`FieldGrid`].
#[derive(Clone, Debug)]
pub struct AdamState {
    m1: Vec<f64>,
    m2: Vec<f64>,
    step_count: u64,
    config: AdamConfig,
}

impl AdamState {
    pub fn new(grid: &FieldGrid, config: AdamConfig) -> Result<Self> {
        Self::with_len(grid.values().len(), config)
    }

    pub fn with_len(len: usize, config: AdamConfig) -> Result<Self> {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = config;
        if !(lr > 0.0 && eps > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2))
            || beta1 == 0.0
            || beta2 == 0.0
        {
            return Err(Error::invalid(format!("bad Adam hyperparameters {config:?}")));
        }
        Ok(AdamState {
            m1: vec![0.0; len],
            m2: vec![0.0; len],
            step_count: 0,
            config,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m1
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.m2
    }

    /// Bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m1.len() || grads.len() != self.m1.len() {
            return Err(Error::invalid(format!(
                "Adam state holds {} entries, got {} params and {} grads",
                self.m1.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), m1), m2) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m1.iter_mut())
            .zip(self.m2.iter_mut())
        {
            *m1 = beta1 * *m1 + (1.0 - beta1) * g;
            *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
            let m_hat = *m1 / bc1;
            let v_hat = *m2 / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// One Adam step on the grid values. The sink is left untouched.
pub fn adam_step(grid: &mut FieldGrid, grads: &GradSink, state: &mut AdamState) -> Result<()> {
    grads.check_matches(grid)?;
    state.update(grid.values_mut(), grads.values())
}

/// Coarse-to-fine resolution schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgressiveSchedule {
    pub start_shrink_exponent: u32,
    pub iters_per_stage: usize,
    pub final_dims: Vec<usize>,
}

impl ProgressiveSchedule {
    pub fn new(start_shrink_exponent: u32, iters_per_stage: usize, final_dims: Vec<usize>) -> Result<Self> {
        if iters_per_stage == 0 {
            return Err(Error::invalid("iterations per stage must be positive"));
        }
        let shrink = 1usize
            .checked_shl(start_shrink_exponent)
            .ok_or_else(|| Error::invalid("shrink exponent too large"))?;
        for &d in &final_dims {
            if d % shrink != 0 {
                return Err(Error::invalid(format!(
                    "final dims {final_dims:?} not divisible by 2^{start_shrink_exponent}"
                )));
            }
            if d / shrink < 2 {
                return Err(Error::invalid(format!(
                    "start dims {} < 2 for final dims {final_dims:?} and exponent {start_shrink_exponent}",
                    d / shrink
                )));
            }
        }
        Ok(ProgressiveSchedule {
            start_shrink_exponent,
            iters_per_stage,
            final_dims,
        })
    }

    /// Per-stage dims, coarsest first.
    pub fn stage_dims(&self) -> Vec<Vec<usize>> {
        (0..=self.start_shrink_exponent)
            .rev()
            .map(|e| self.final_dims.iter().map(|d| d >> e).collect())
            .collect()
    }

    pub fn total_iterations(&self) -> usize {
        self.iters_per_stage * (self.start_shrink_exponent as usize + 1)
    }
}

#[derive(Clone, Debug)]
pub struct StageContext {
    pub stage: usize,
    pub stage_count: usize,
    pub iteration: usize,
    pub global_iteration: usize,
    pub dims: Vec<usize>,
    pub final_dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: usize,
    pub dims: Vec<usize>,
    pub iterations: usize,
    pub last_loss: f64,
    /// Mean loss over the last tenth of the stage.
    pub tail_loss: f64,
    pub wall_seconds: f64,
}

/// A fitting problem that can evaluate its loss gradient at any resolution.
pub trait ProgressiveTask {
    /// Accumulates one iteration's loss gradient into the (zeroed) `sink`
    /// and returns the loss.
    fn step(&mut self, grid: &FieldGrid, sink: &mut GradSink, ctx: &StageContext) -> Result<f64>;

    /// Projects grid values onto their feasible set after each update.
    fn project(&self, _grid: &mut FieldGrid) {}

    fn stage_finished(&mut self, _grid: &FieldGrid, _report: &StageReport) -> Result<()> {
        Ok(())
    }
}

/// Initial-value distribution of the coarsest grid.
#[derive(Clone, Debug)]
pub struct GridInit {
    pub channels: usize,
    pub aabb: Aabb,
    pub range: (f64, f64),
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct ProgressiveOutcome {
    pub grid: FieldGrid,
    pub stages: Vec<StageReport>,
    pub upsample_calls: usize,
    pub iterations: usize,
}

/// Optimizes `task` stage by stage, doubling the grid between stages and
/// starting each stage with fresh Adam moments.
pub fn run_progressive<T: ProgressiveTask + ?Sized>(
    task: &mut T,
    schedule: &ProgressiveSchedule,
    init: &GridInit,
    adam: AdamConfig,
) -> Result<ProgressiveOutcome> {
    let stage_dims = schedule.stage_dims();
    let stage_count = stage_dims.len();
    let mut grid = FieldGrid::init_uniform(
        &stage_dims[0],
        init.channels,
        init.aabb.clone(),
        init.range,
        init.seed,
    )?;
    task.project(&mut grid);

    let mut stages = Vec::with_capacity(stage_count);
    let mut upsample_calls = 0;
    let mut global_iteration = 0;
    for (stage, dims) in stage_dims.iter().enumerate() {
        if stage > 0 {
            grid = grid.upsample_trilinear(2)?;
            upsample_calls += 1;
            task.project(&mut grid);
        }
        debug_assert_eq!(grid.dims(), dims.as_slice());
        let started = Instant::now();
        let mut state = AdamState::new(&grid, adam)?;
        let mut sink = GradSink::for_grid(&grid);
        let tail_start = schedule.iters_per_stage - (schedule.iters_per_stage / 10).max(1);
        let mut tail_sum = 0.0;
        let mut last_loss = f64::NAN;
        for iteration in 0..schedule.iters_per_stage {
            let ctx = StageContext {
                stage,
                stage_count,
                iteration,
                global_iteration,
                dims: dims.clone(),
                final_dims: schedule.final_dims.clone(),
            };
            sink.zero();
            last_loss = task.step(&grid, &mut sink, &ctx)?;
            if !last_loss.is_finite() {
                return Err(Error::NumericalDegeneracy(format!(
                    "non-finite loss at stage {stage}, iteration {iteration}"
                )));
            }
            if iteration >= tail_start {
                tail_sum += last_loss;
            }
            adam_step(&mut grid, &sink, &mut state)?;
            task.project(&mut grid);
            global_iteration += 1;
        }
        let report = StageReport {
            stage,
            dims: dims.clone(),
            iterations: schedule.iters_per_stage,
            last_loss,
            tail_loss: tail_sum / (schedule.iters_per_stage - tail_start) as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        task.stage_finished(&grid, &report)?;
        stages.push(report);
    }
    Ok(ProgressiveOutcome {
        grid,
        stages,
        upsample_calls,
        iterations: global_iteration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::FetchMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook scalar Adam, written out independently of [`AdamState`].
    struct ScalarAdam {
        m: f64,
        v: f64,
        t: i32,
    }

    impl ScalarAdam {
        fn step(&mut self, x: f64, g: f64, lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
            self.t += 1;
            self.m = b1 * self.m + (1.0 - b1) * g;
            self.v = b2 * self.v + (1.0 - b2) * g * g;
            let mh = self.m / (1.0 - b1.powi(self.t));
            let vh = self.v / (1.0 - b2.powi(self.t));
            x - lr * mh / (vh.sqrt() + eps)
        }
    }

    fn small_grid(seed: u64) -> FieldGrid {
        FieldGrid::init_uniform(&[3, 3], 2, Aabb::cube(0.0, 1.0, 2).unwrap(), (-1.0, 1.0), seed).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_grid_unchanged() {
        let mut grid = small_grid(1);
        let before = grid.clone();
        let sink = GradSink::for_grid(&grid);
        let mut state = AdamState::new(&grid, AdamConfig::default()).unwrap();
        adam_step(&mut grid, &sink, &mut state).unwrap();
        assert_eq!(grid, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn constant_gradient_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let mut state = AdamState::with_len(1, cfg).unwrap();
        let mut x = [0.5];
        for _ in 0..200 {
            let before = x[0];
            state.update(&mut x, &[2.5]).unwrap();
            let moved = before - x[0];
            assert!(moved > 0.0);
            assert!((moved - cfg.lr).abs() < 1e-8);
        }
    }

    #[test]
    fn matches_scalar_reference_on_random_trajectories() {
        let cfg = AdamConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let n = 16;
            let mut params: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut refs: Vec<(f64, ScalarAdam)> = params
                .iter()
                .map(|&p| (p, ScalarAdam { m: 0.0, v: 0.0, t: 0 }))
                .collect();
            let mut state = AdamState::with_len(n, cfg).unwrap();
            for _ in 0..1000 {
                let grads: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                state.update(&mut params, &grads).unwrap();
                for ((x, adam), g) in refs.iter_mut().zip(&grads) {
                    *x = adam.step(*x, *g, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
                }
            }
            for (p, (r, _)) in params.iter().zip(&refs) {
                assert!((p - r).abs() < 1e-10);
            }
            assert!(state.second_moment().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut grid = small_grid(1);
        let other = FieldGrid::zeros(&[3, 4], 2, Aabb::cube(0.0, 1.0, 2).unwrap()).unwrap();
        let sink = GradSink::for_grid(&other);
        let mut state = AdamState::new(&grid, AdamConfig::default()).unwrap();
        assert!(matches!(
            adam_step(&mut grid, &sink, &mut state),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn stage_resolutions_double_up_to_final() {
        let s = ProgressiveSchedule::new(4, 10, vec![128; 3]).unwrap();
        let per_axis: Vec<usize> = s.stage_dims().iter().map(|d| d[0]).collect();
        assert_eq!(per_axis, vec![8, 16, 32, 64, 128]);
        let s = ProgressiveSchedule::new(0, 10, vec![128; 3]).unwrap();
        assert_eq!(s.stage_dims(), vec![vec![128; 3]]);
        let s = ProgressiveSchedule::new(4, 2000, vec![128; 3]).unwrap();
        assert_eq!(s.total_iterations(), 10000);
    }

    #[test]
    fn schedule_rejects_tiny_or_indivisible_starts() {
        assert!(ProgressiveSchedule::new(4, 10, vec![16, 16]).is_err());
        assert!(ProgressiveSchedule::new(2, 10, vec![30, 32]).is_err());
        assert!(ProgressiveSchedule::new(1, 0, vec![8, 8]).is_err());
    }

    /// Least-squares fit of a smooth 2D function sampled at fixed points.
    struct Regression {
        points: Vec<[f64; 2]>,
        targets: Vec<f64>,
        calls: usize,
        stage_dims_seen: Vec<Vec<usize>>,
    }

    impl Regression {
        fn new() -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let points: Vec<[f64; 2]> = (0..400).map(|_| [rng.gen(), rng.gen()]).collect();
            let targets = points
                .iter()
                .map(|p| (3.0 * p[0]).sin() * p[1] + 0.2)
                .collect();
            Regression {
                points,
                targets,
                calls: 0,
                stage_dims_seen: vec![],
            }
        }
    }

    impl ProgressiveTask for Regression {
        fn step(&mut self, grid: &FieldGrid, sink: &mut GradSink, _ctx: &StageContext) -> Result<f64> {
            self.calls += 1;
            let n = self.points.len() as f64;
            let mut loss = 0.0;
            for (p, t) in self.points.iter().zip(&self.targets) {
                let x = grid.world_to_grid(p);
                let y = grid.fetch(FetchMode::None, &x)?[0];
                loss += (y - t) * (y - t) / n;
                grid.fetch_backward(FetchMode::None, &x, &[2.0 * (y - t) / n], sink)?;
            }
            Ok(loss)
        }

        fn stage_finished(&mut self, grid: &FieldGrid, _report: &StageReport) -> Result<()> {
            self.stage_dims_seen.push(grid.dims().to_vec());
            Ok(())
        }
    }

    fn init() -> GridInit {
        GridInit {
            channels: 1,
            aabb: Aabb::cube(0.0, 1.0, 2).unwrap(),
            range: (-0.1, 0.1),
            seed: 3,
        }
    }

    #[test]
    fn progressive_run_visits_every_stage_and_converges() {
        let mut task = Regression::new();
        let schedule = ProgressiveSchedule::new(2, 150, vec![16, 16]).unwrap();
        let out = run_progressive(&mut task, &schedule, &init(), AdamConfig::default()).unwrap();
        assert_eq!(task.calls, 450);
        assert_eq!(out.iterations, 450);
        assert_eq!(out.upsample_calls, 2);
        assert_eq!(task.stage_dims_seen, vec![vec![4, 4], vec![8, 8], vec![16, 16]]);
        assert!(out.stages[2].last_loss < 1e-3, "{:?}", out.stages);
    }

    #[test]
    fn single_stage_never_upsamples() {
        let mut task = Regression::new();
        let schedule = ProgressiveSchedule::new(0, 20, vec![8, 8]).unwrap();
        let out = run_progressive(&mut task, &schedule, &init(), AdamConfig::default()).unwrap();
        assert_eq!(out.upsample_calls, 0);
        assert_eq!(out.stages.len(), 1);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let schedule = ProgressiveSchedule::new(1, 30, vec![8, 8]).unwrap();
        let a = run_progressive(&mut Regression::new(), &schedule, &init(), AdamConfig::default()).unwrap();
        let b = run_progressive(&mut Regression::new(), &schedule, &init(), AdamConfig::default()).unwrap();
        assert!(a
            .grid
            .values()
            .iter()
            .zip(b.grid.values())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
