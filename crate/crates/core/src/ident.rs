//! Model identification: trajectory-mismatch loss, analytic gradients,
//! the per-step gradient descent loop, and the sampling/finite-difference
//! baselines.
//!
//! The loss is teacher forced: each one-step prediction starts from the
//! observed state and velocity at step `t`, and the per-step cost is the
//! Euclidean norm of the stacked cell position residuals at `t+1`. On
//! noiseless engine-generated data the loss is exactly zero at the true
//! parameters.
//!
//! The analytic gradient exploits the solved multipliers: while a cell
//! spends its whole friction budget, its friction impulse scales linearly
//! with the budget, so the position sensitivity is the impulse direction
//! times `dt^2 / m`; sticking cells have exactly zero sensitivity. The mass
//! channel uses the velocity change the same way. Per-cell signals are the
//! residuals projected onto these directions; remaining constants are
//! absorbed by the learning rate, with the mass channel stepped at the
//! square root of the friction rate.

use std::time::Instant;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{self, effective_action};
use crate::lcp::{LcpSolution, SolveOptions};
use crate::model::{
    pose_error, square_cell_inertia, CellGrid, ObjectParams, Trajectory, Velocity,
};
use crate::par;
use crate::{Error, Result};

/// Descent and search configuration.
#[derive(Debug, Clone)]
pub struct IdentConfig {
    /// Friction-channel learning rate; the mass channel steps at its square
    /// root.
    pub learning_rate: f64,
    /// Stop when the epoch loss falls to or below this threshold.
    pub loss_threshold: f64,
    pub max_epochs: usize,
    /// Positivity projection floor for friction magnitudes (N).
    pub param_floor: f64,
    pub friction_ceiling: f64,
    pub mass_floor: f64,
    pub mass_ceiling: f64,
    /// Update the mass channel alongside friction. Cell inertia always
    /// follows the mass through the uniform square cell formula.
    pub update_mass: bool,
    pub seed: u64,
    /// Range of the random friction initialization (N per cell).
    pub init_friction: (f64, f64),
    /// Initial per-cell mass (kg).
    pub init_mass: f64,
    /// Hard cap on forward trajectory simulations; `None` leaves only
    /// `max_epochs` in charge.
    pub sim_budget: Option<u64>,
    /// Evaluate held-out test error every this many epochs (or samples, for
    /// the sampling searches). Final test error is always evaluated when a
    /// test set is supplied.
    pub eval_every: Option<usize>,
    /// Abort when the epoch loss exceeds this multiple of the initial loss.
    pub divergence_factor: f64,
    /// Initial standard deviation of the weighted sampling search.
    pub weighted_sigma0: f64,
    /// Per-sample decay of the weighted sampling deviation.
    pub weighted_decay: f64,
}

impl Default for IdentConfig {
    fn default() -> Self {
        IdentConfig {
            learning_rate: 0.5,
            loss_threshold: 1e-4,
            max_epochs: 200,
            param_floor: 1e-3,
            friction_ceiling: 10.0,
            mass_floor: 0.01,
            mass_ceiling: 10.0,
            update_mass: true,
            seed: 0,
            init_friction: (0.01, 0.5),
            init_mass: 0.05,
            sim_budget: None,
            eval_every: None,
            divergence_factor: 10.0,
            weighted_sigma0: 1.0,
            weighted_decay: 0.96,
        }
    }
}

impl IdentConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if !(self.loss_threshold >= 0.0) {
            return Err(Error::invalid("loss_threshold", "must be non-negative"));
        }
        if !(self.param_floor > 0.0) {
            return Err(Error::invalid("param_floor", "must be positive"));
        }
        Ok(())
    }
}

/// One recorded point of an identification run.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Cumulative forward trajectory simulations.
    pub sim_count: u64,
    /// Cumulative identification work time (test evaluation excluded).
    pub wall_time_s: f64,
    pub test_error: Option<f64>,
}

/// Outcome of an identification run.
#[derive(Debug, Clone)]
pub struct IdentReport {
    pub method: String,
    pub final_params: ObjectParams,
    pub history: Vec<EpochRecord>,
    pub sim_count: u64,
    pub wall_time_s: f64,
    /// Mean final-state cell position error over the test set (m).
    pub test_error: Option<f64>,
    pub diverged: bool,
}

impl IdentReport {
    pub fn loss_history(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }

    pub fn final_loss(&self) -> f64 {
        self.history.last().map(|r| r.loss).unwrap_or(f64::NAN)
    }
}

fn check_training(grid: &CellGrid, training: &[Trajectory]) -> Result<()> {
    if training.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    for traj in training {
        if traj.is_empty() {
            return Err(Error::invalid("training", "trajectory with no steps"));
        }
        for s in &traj.states {
            if s.k() != grid.k() {
                return Err(Error::DimensionMismatch(format!(
                    "trajectory state has {} poses for grid k={}",
                    s.k(),
                    grid.k()
                )));
            }
        }
    }
    Ok(())
}

/// Cone budget slack below which a cell counts as spending its whole
/// friction budget (N·s).
const CAP_ACTIVE_TOL: f64 = 1e-9;

/// Residual norms below this carry no usable gradient direction.
const RESIDUAL_EPS: f64 = 1e-14;

struct StepTerms {
    loss: f64,
    /// Per-cell friction-channel gradient.
    grad_mu: Vec<f64>,
    /// Per-cell mass-channel gradient.
    grad_mass: Vec<f64>,
}

/// One teacher-forced step at time `t`: simulate from the observed state and
/// velocity, compare predicted against observed next positions, and form the
/// per-cell gradient signals.
fn step_terms(
    grid: &CellGrid,
    params: &ObjectParams,
    traj: &Trajectory,
    vels: &[Velocity],
    t: usize,
    warm: Option<&LcpSolution>,
    opts: &SolveOptions,
    want_grad: bool,
) -> Result<(StepTerms, LcpSolution)> {
    let k = grid.k();
    let out = dynamics::step_full(
        grid,
        params,
        &traj.states[t],
        &vels[t],
        effective_action(&traj.actions[t]),
        traj.dt,
        opts,
        warm,
    )?;
    let observed = &traj.states[t + 1];
    let mut residuals: Vec<Vector2<f64>> = Vec::with_capacity(k);
    let mut sq = 0.0;
    for i in 0..k {
        let r = out.state.poses[i].pos() - observed.poses[i].pos();
        sq += r.norm_squared();
        residuals.push(r);
    }
    let nr = sq.sqrt();
    let mut terms = StepTerms {
        loss: nr,
        grad_mu: vec![0.0; k],
        grad_mass: vec![0.0; k],
    };
    if want_grad && nr > RESIDUAL_EPS {
        let dt = traj.dt;
        for i in 0..k {
            if !out.solution.cap_active(i, CAP_ACTIVE_TOL) {
                // Robust stick: the step does not respond to small parameter
                // changes on this cell.
                continue;
            }
            let m = params.masses[i];
            let r = residuals[i];
            let mu = params.frictions[i];
            if mu > 1e-9 {
                // Impulse at the cap scales with it: d(impulse)/d(mu) = p/mu.
                let p = out.solution.friction_impulse(i);
                terms.grad_mu[i] = dt * r.dot(&p) / (nr * m * mu);
            } else {
                // Zero-budget cell: the nascent impulse opposes the dominant
                // slip component.
                let vx = out.solution.v_next[3 * i + 1];
                let vy = out.solution.v_next[3 * i + 2];
                let d = if vx.abs() >= vy.abs() {
                    Vector2::new(-vx.signum(), 0.0)
                } else {
                    Vector2::new(0.0, -vy.signum())
                };
                terms.grad_mu[i] = dt * dt * r.dot(&d) / (nr * m);
            }
            let dv = Vector2::new(
                out.solution.v_next[3 * i + 1] - vels[t].twists[i].vx,
                out.solution.v_next[3 * i + 2] - vels[t].twists[i].vy,
            );
            terms.grad_mass[i] = -dt * r.dot(&dv) / (nr * m);
        }
    }
    Ok((terms, out.solution))
}

fn hot_opts() -> SolveOptions {
    SolveOptions {
        equality_multipliers: false,
        ..SolveOptions::default()
    }
}

fn trajectory_terms(
    grid: &CellGrid,
    params: &ObjectParams,
    traj: &Trajectory,
    want_grad: bool,
) -> Result<StepTerms> {
    let k = grid.k();
    let vels = traj.observed_velocities();
    let opts = hot_opts();
    let mut warm: Option<LcpSolution> = None;
    let mut total = StepTerms {
        loss: 0.0,
        grad_mu: vec![0.0; k],
        grad_mass: vec![0.0; k],
    };
    for t in 0..traj.len() {
        let (terms, sol) = step_terms(grid, params, traj, &vels, t, warm.as_ref(), &opts, want_grad)?;
        total.loss += terms.loss;
        if want_grad {
            for i in 0..k {
                total.grad_mu[i] += terms.grad_mu[i];
                total.grad_mass[i] += terms.grad_mass[i];
            }
        }
        warm = Some(sol);
    }
    Ok(total)
}

/// Teacher-forced simulation error of `params` on the training trajectories:
/// the summed per-step Euclidean norms of the cell position residuals.
pub fn loss(params: &ObjectParams, training: &[Trajectory], grid: &CellGrid) -> Result<f64> {
    check_training(grid, training)?;
    params.validate(grid.k())?;
    let results = par::map_collect(training, |traj| {
        trajectory_terms(grid, params, traj, false).map(|t| t.loss)
    });
    let mut total = 0.0;
    for r in results {
        total += r?;
    }
    Ok(total)
}

/// Analytic loss gradient with respect to the per-cell friction magnitudes
/// and masses.
pub fn grad_analytic(
    params: &ObjectParams,
    training: &[Trajectory],
    grid: &CellGrid,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_training(grid, training)?;
    params.validate(grid.k())?;
    let k = grid.k();
    let results = par::map_collect(training, |traj| trajectory_terms(grid, params, traj, true));
    let mut gmu = vec![0.0; k];
    let mut gmass = vec![0.0; k];
    for r in results {
        let t = r?;
        for i in 0..k {
            gmu[i] += t.grad_mu[i];
            gmass[i] += t.grad_mass[i];
        }
    }
    Ok((gmu, gmass))
}

/// Mean final-state cell position error of closed-loop replays of the test
/// trajectories under `params`.
pub fn test_error(grid: &CellGrid, params: &ObjectParams, test: &[Trajectory]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid("test", "empty test set"));
    }
    let errs = par::map_collect(test, |traj| -> Result<f64> {
        let pred = dynamics::replay(grid, params, traj)?;
        pose_error(pred.states.last().unwrap(), traj.states.last().unwrap())
    });
    let mut total = 0.0;
    for e in errs {
        total += e?;
    }
    Ok(total / test.len() as f64)
}

fn random_initial_params(grid: &CellGrid, config: &IdentConfig) -> ObjectParams {
    let k = grid.k();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let frictions: Vec<f64> = (0..k)
        .map(|_| rng.gen_range(config.init_friction.0..=config.init_friction.1))
        .collect();
    let masses = vec![config.init_mass; k];
    let inertias = masses
        .iter()
        .map(|&m| square_cell_inertia(m, grid.cell_size))
        .collect();
    ObjectParams {
        masses,
        inertias,
        frictions,
    }
}

fn project_params(params: &mut ObjectParams, grid: &CellGrid, config: &IdentConfig) {
    for f in &mut params.frictions {
        *f = f.clamp(config.param_floor, config.friction_ceiling);
    }
    for i in 0..params.masses.len() {
        params.masses[i] = params.masses[i].clamp(config.mass_floor, config.mass_ceiling);
        params.inertias[i] = square_cell_inertia(params.masses[i], grid.cell_size);
    }
}

/// Work-time stopwatch that can be paused around test evaluation.
struct WorkTimer {
    accumulated: f64,
    since: Option<Instant>,
}

impl WorkTimer {
    fn start() -> Self {
        WorkTimer {
            accumulated: 0.0,
            since: Some(Instant::now()),
        }
    }

    fn pause(&mut self) {
        if let Some(s) = self.since.take() {
            self.accumulated += s.elapsed().as_secs_f64();
        }
    }

    fn resume(&mut self) {
        if self.since.is_none() {
            self.since = Some(Instant::now());
        }
    }

    fn elapsed(&self) -> f64 {
        self.accumulated
            + self
                .since
                .map(|s| s.elapsed().as_secs_f64())
                .unwrap_or(0.0)
    }
}

struct RunState<'a> {
    grid: &'a CellGrid,
    test: Option<&'a [Trajectory]>,
    timer: WorkTimer,
    history: Vec<EpochRecord>,
    sim_count: u64,
}

impl<'a> RunState<'a> {
    fn new(grid: &'a CellGrid, test: Option<&'a [Trajectory]>) -> Self {
        RunState {
            grid,
            test,
            timer: WorkTimer::start(),
            history: Vec::new(),
            sim_count: 0,
        }
    }

    fn eval_test(&mut self, params: &ObjectParams) -> Option<f64> {
        let test = self.test?;
        self.timer.pause();
        let err = test_error(self.grid, params, test).ok();
        self.timer.resume();
        err
    }

    fn record(&mut self, epoch: usize, loss_value: f64, test_err: Option<f64>) {
        self.history.push(EpochRecord {
            epoch,
            loss: loss_value,
            sim_count: self.sim_count,
            wall_time_s: self.timer.elapsed(),
            test_error: test_err,
        });
    }

    fn finish(
        mut self,
        method: &str,
        params: ObjectParams,
        diverged: bool,
    ) -> IdentReport {
        let test_err = self.eval_test(&params);
        self.timer.pause();
        IdentReport {
            method: method.to_string(),
            final_params: params,
            sim_count: self.sim_count,
            wall_time_s: self.timer.elapsed(),
            test_error: test_err,
            history: self.history,
            diverged,
        }
    }
}

fn should_eval(config: &IdentConfig, index: usize) -> bool {
    config.eval_every.map(|n| n > 0 && index % n == 0).unwrap_or(false)
}

/// Gradient descent on the analytic gradient, updating after every
/// teacher-forced step: friction at the learning rate, mass (when enabled)
/// at its square root, both projected into the parameter box. Terminates on
/// the loss threshold, the epoch limit, or the simulation budget; reports
/// divergence instead of returning a silently broken model.
pub fn identify_gradient(
    grid: &CellGrid,
    training: &[Trajectory],
    config: &IdentConfig,
    test: Option<&[Trajectory]>,
) -> Result<IdentReport> {
    config.validate()?;
    check_training(grid, training)?;
    let mut params = random_initial_params(grid, config);
    let mut run = RunState::new(grid, test);
    let n_traj = training.len() as u64;
    let opts = hot_opts();
    let vels: Vec<Vec<Velocity>> = training.iter().map(|t| t.observed_velocities()).collect();
    let rate_mu = config.learning_rate;
    let rate_mass = config.learning_rate.sqrt();
    let mut initial_loss: Option<f64> = None;
    let mut diverged = false;

    for epoch in 0..config.max_epochs {
        if let Some(budget) = config.sim_budget {
            if run.sim_count + n_traj > budget {
                break;
            }
        }
        let mut epoch_loss = 0.0;
        for (traj, tvels) in training.iter().zip(&vels) {
            let mut warm: Option<LcpSolution> = None;
            for t in 0..traj.len() {
                let (terms, sol) =
                    step_terms(grid, &params, traj, tvels, t, warm.as_ref(), &opts, true)?;
                epoch_loss += terms.loss;
                for i in 0..grid.k() {
                    params.frictions[i] -= rate_mu * terms.grad_mu[i];
                    if config.update_mass {
                        params.masses[i] -= rate_mass * terms.grad_mass[i];
                    }
                }
                project_params(&mut params, grid, config);
                warm = Some(sol);
            }
        }
        run.sim_count += n_traj;

        let test_err = if should_eval(config, epoch) {
            run.eval_test(&params)
        } else {
            None
        };
        run.record(epoch, epoch_loss, test_err);

        match initial_loss {
            None => initial_loss = Some(epoch_loss.max(f64::MIN_POSITIVE)),
            Some(init) => {
                if epoch_loss > config.divergence_factor * init {
                    diverged = true;
                    break;
                }
            }
        }
        if epoch_loss <= config.loss_threshold {
            break;
        }
    }

    let report = run.finish("gradient", params, diverged);
    if diverged {
        let init = initial_loss.unwrap_or(f64::NAN);
        return Err(Error::Diverged {
            epoch: report.history.len() - 1,
            loss: report.final_loss(),
            initial: init,
            factor: config.divergence_factor,
            report: Box::new(report),
        });
    }
    Ok(report)
}

/// Finite-difference baseline: central differences over every identified
/// parameter (two loss evaluations each), then one descent update per epoch
/// with the same rates as the analytic method. The recorded epoch loss is
/// the mean of the probe evaluations, which matches the center loss to
/// second order in the probe step.
pub fn identify_finite_diff(
    grid: &CellGrid,
    training: &[Trajectory],
    config: &IdentConfig,
    h: f64,
    test: Option<&[Trajectory]>,
) -> Result<IdentReport> {
    config.validate()?;
    check_training(grid, training)?;
    if !(h > 0.0) {
        return Err(Error::invalid("h", "finite-difference step must be positive"));
    }
    let k = grid.k();
    let mut params = random_initial_params(grid, config);
    let mut run = RunState::new(grid, test);
    let n_traj = training.len() as u64;
    let n_params = if config.update_mass { 2 * k } else { k };
    let epoch_cost = 2 * n_params as u64 * n_traj;
    let rate_mu = config.learning_rate;
    let rate_mass = config.learning_rate.sqrt();
    let mut initial_loss: Option<f64> = None;
    let mut diverged = false;

    for epoch in 0..config.max_epochs {
        if let Some(budget) = config.sim_budget {
            if run.sim_count + epoch_cost > budget {
                break;
            }
        }
        // Probe evaluations: parameter j, then +h / -h.
        let evals = par::map_indices(2 * n_params, |idx| -> Result<f64> {
            let j = idx / 2;
            let sign = if idx % 2 == 0 { 1.0 } else { -1.0 };
            let mut probe = params.clone();
            if j < k {
                probe.frictions[j] += sign * h;
            } else {
                probe.masses[j - k] += sign * h;
                probe.inertias[j - k] = square_cell_inertia(probe.masses[j - k], grid.cell_size);
            }
            loss(&probe, training, grid)
        });
        let mut flat = Vec::with_capacity(2 * n_params);
        for e in evals {
            flat.push(e?);
        }
        let mut grad = vec![0.0; n_params];
        let mut mean_loss = 0.0;
        for j in 0..n_params {
            grad[j] = (flat[2 * j] - flat[2 * j + 1]) / (2.0 * h);
            mean_loss += flat[2 * j] + flat[2 * j + 1];
        }
        mean_loss /= (2 * n_params) as f64;
        run.sim_count += epoch_cost;

        for j in 0..n_params {
            if j < k {
                params.frictions[j] -= rate_mu * grad[j];
            } else {
                params.masses[j - k] -= rate_mass * grad[j];
            }
        }
        project_params(&mut params, grid, config);

        let test_err = if should_eval(config, epoch) {
            run.eval_test(&params)
        } else {
            None
        };
        run.record(epoch, mean_loss, test_err);

        match initial_loss {
            None => initial_loss = Some(mean_loss.max(f64::MIN_POSITIVE)),
            Some(init) => {
                if mean_loss > config.divergence_factor * init {
                    diverged = true;
                    break;
                }
            }
        }
        if mean_loss <= config.loss_threshold {
            break;
        }
    }

    let report = run.finish("finitediff", params, diverged);
    if diverged {
        let init = initial_loss.unwrap_or(f64::NAN);
        return Err(Error::Diverged {
            epoch: report.history.len() - 1,
            loss: report.final_loss(),
            initial: init,
            factor: config.divergence_factor,
            report: Box::new(report),
        });
    }
    Ok(report)
}

fn sample_uniform(grid: &CellGrid, config: &IdentConfig, rng: &mut ChaCha8Rng) -> ObjectParams {
    let k = grid.k();
    let frictions: Vec<f64> = (0..k)
        .map(|_| rng.gen_range(config.param_floor..=config.friction_ceiling))
        .collect();
    let masses: Vec<f64> = if config.update_mass {
        (0..k)
            .map(|_| rng.gen_range(config.mass_floor..=config.mass_ceiling))
            .collect()
    } else {
        vec![config.init_mass; k]
    };
    let inertias = masses
        .iter()
        .map(|&m| square_cell_inertia(m, grid.cell_size))
        .collect();
    ObjectParams {
        masses,
        inertias,
        frictions,
    }
}

/// Number of box samples a budget affords: each sample costs one forward
/// simulation per training trajectory.
fn budget_samples(budget: u64, n_traj: u64) -> u64 {
    (budget / n_traj).max(1)
}

/// Random search: uniform samples in the parameter box, best loss kept.
pub fn identify_random(
    grid: &CellGrid,
    training: &[Trajectory],
    config: &IdentConfig,
    budget: u64,
    test: Option<&[Trajectory]>,
) -> Result<IdentReport> {
    config.validate()?;
    check_training(grid, training)?;
    if budget == 0 {
        return Err(Error::ZeroBudget);
    }
    let n_traj = training.len() as u64;
    let samples = budget_samples(budget, n_traj);
    let mut run = RunState::new(grid, test);

    // Independent per-sample RNG streams keep the evaluation order free.
    let evaluated: Vec<(ObjectParams, Result<f64>)> = par::map_indices(samples as usize, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1 + i as u64);
        let params = sample_uniform(grid, config, &mut rng);
        let l = loss(&params, training, grid);
        (params, l)
    });

    let mut best: Option<(f64, ObjectParams)> = None;
    let mut first_error: Option<Error> = None;
    for (i, (params, l)) in evaluated.into_iter().enumerate() {
        run.sim_count += n_traj;
        match l {
            Ok(l) => {
                if best.as_ref().map(|(b, _)| l < *b).unwrap_or(true) {
                    best = Some((l, params));
                }
            }
            Err(e) => {
                // A wild sample can stall the solver; it simply never wins.
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
        let running = best.as_ref().map(|(b, _)| *b).unwrap_or(f64::INFINITY);
        let test_err = if should_eval(config, i) {
            best.as_ref().and_then(|(_, p)| {
                let p = p.clone();
                run.eval_test(&p)
            })
        } else {
            None
        };
        run.record(i, running, test_err);
    }

    match best {
        Some((_, params)) => Ok(run.finish("random", params, false)),
        None => Err(first_error.unwrap_or(Error::ZeroBudget)),
    }
}

/// Weighted sampling: uniform first draw, then Gaussian proposals around the
/// incumbent with deviation `sigma0 * decay^n`, clamped to the box; the
/// incumbent moves on improvement.
pub fn identify_weighted(
    grid: &CellGrid,
    training: &[Trajectory],
    config: &IdentConfig,
    budget: u64,
    test: Option<&[Trajectory]>,
) -> Result<IdentReport> {
    config.validate()?;
    check_training(grid, training)?;
    if budget == 0 {
        return Err(Error::ZeroBudget);
    }
    let k = grid.k();
    let n_traj = training.len() as u64;
    let samples = budget_samples(budget, n_traj);
    let mut run = RunState::new(grid, test);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX); // distinct from the per-sample streams above

    let mut best: Option<(f64, ObjectParams)> = None;
    let mut first_error: Option<Error> = None;
    for n in 0..samples {
        let sigma = config.weighted_sigma0 * config.weighted_decay.powi(n as i32);
        let candidate = match &best {
            None => sample_uniform(grid, config, &mut rng),
            Some((_, incumbent)) => {
                let mut c = incumbent.clone();
                for f in &mut c.frictions {
                    *f = (*f + sigma * normal(&mut rng))
                        .clamp(config.param_floor, config.friction_ceiling);
                }
                if config.update_mass {
                    for i in 0..k {
                        c.masses[i] = (c.masses[i] + sigma * normal(&mut rng))
                            .clamp(config.mass_floor, config.mass_ceiling);
                        c.inertias[i] = square_cell_inertia(c.masses[i], grid.cell_size);
                    }
                }
                c
            }
        };
        run.sim_count += n_traj;
        match loss(&candidate, training, grid) {
            Ok(l) => {
                if best.as_ref().map(|(b, _)| l < *b).unwrap_or(true) {
                    best = Some((l, candidate));
                }
            }
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
        let running = best.as_ref().map(|(b, _)| *b).unwrap_or(f64::INFINITY);
        let test_err = if should_eval(config, n as usize) {
            best.as_ref().and_then(|(_, p)| {
                let p = p.clone();
                run.eval_test(&p)
            })
        } else {
            None
        };
        run.record(n as usize, running, test_err);
    }

    match best {
        Some((_, params)) => Ok(run.finish("weighted", params, false)),
        None => Err(first_error.unwrap_or(Error::ZeroBudget)),
    }
}

/// Standard normal via Box-Muller; keeps the dependency surface small.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
