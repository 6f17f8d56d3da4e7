//! Constraint Jacobians, single-step state advance, and trajectory rollout.
//!
//! The joint rows weld adjacent cells into one rigid body; the friction rows
//! map each cell's velocity onto four tangential rays against the support
//! surface; the contact rows are unilateral (pusher against the contacted
//! cell, plus any explicit cell-cell pairs). A step solves the assembled
//! complementarity problem for the next velocity, integrates poses
//! symplectically, and re-projects the cells onto an exact rigid placement to
//! keep integration drift out of the loss.

use nalgebra::{DMatrix, DVector, Matrix4x3, Vector2};

use crate::lcp::{self, LcpSolution, SolveOptions};
use crate::model::{
    cross2, rotate2, wrap_angle, CellGrid, ObjectParams, Pose, PushAction, State, Trajectory,
    Velocity,
};
use crate::{Error, Result};

/// Default timestep (s).
pub const DEFAULT_DT: f64 = 0.01;

/// Velocity below which a coasting object counts as at rest.
pub const REST_SPEED: f64 = 1e-7;

/// Cap on zero-force steps appended after a push while waiting for rest.
pub const MAX_COAST_STEPS: usize = 600;

/// Friction constraint blocks for the whole object.
///
/// `d` is the per-cell ray matrix: four tangential rays (±x, ±y) with a zero
/// rotation column, since pushes slide cells without rolling them. `jf`
/// repeats it along the block diagonal; `e` aggregates each cell's four ray
/// multipliers; `mu_f` holds the per-cell friction force magnitudes.
#[derive(Debug, Clone)]
pub struct FrictionBlocks {
    pub d: Matrix4x3<f64>,
    pub jf: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub mu_f: DVector<f64>,
}

/// The per-cell tangential ray matrix.
pub fn ray_matrix() -> Matrix4x3<f64> {
    Matrix4x3::new(
        0.0, 1.0, 0.0, //
        0.0, -1.0, 0.0, //
        0.0, 0.0, 1.0, //
        0.0, 0.0, -1.0,
    )
}

/// Equality Jacobian of the rigid joints: three rows per adjacency pair,
/// constraining relative angular velocity and the relative linear velocity at
/// the shared edge midpoint to zero. Rows annihilate exactly the velocities
/// where every cell shares one planar twist.
pub fn joint_jacobian(grid: &CellGrid, state: &State) -> DMatrix<f64> {
    let k = grid.k();
    let ne = 3 * grid.adjacency.len();
    let mut je = DMatrix::zeros(ne, 3 * k);
    for (row3, &(i, j)) in grid.adjacency.iter().enumerate() {
        let pi = state.poses[i].pos();
        let pj = state.poses[j].pos();
        let mid = (pi + pj) * 0.5;
        let ri = mid - pi;
        let rj = mid - pj;
        let r = 3 * row3;
        // Relative angular velocity.
        je[(r, 3 * i)] = 1.0;
        je[(r, 3 * j)] = -1.0;
        // Relative linear velocity of the midpoint, x then y.
        je[(r + 1, 3 * i)] = -ri.y;
        je[(r + 1, 3 * i + 1)] = 1.0;
        je[(r + 1, 3 * j)] = rj.y;
        je[(r + 1, 3 * j + 1)] = -1.0;
        je[(r + 2, 3 * i)] = ri.x;
        je[(r + 2, 3 * i + 2)] = 1.0;
        je[(r + 2, 3 * j)] = -rj.x;
        je[(r + 2, 3 * j + 2)] = -1.0;
    }
    je
}

/// Friction Jacobian blocks; see [`FrictionBlocks`].
pub fn friction_jacobian(grid: &CellGrid, params: &ObjectParams) -> FrictionBlocks {
    let k = grid.k();
    let d = ray_matrix();
    let mut jf = DMatrix::zeros(4 * k, 3 * k);
    let mut e = DMatrix::zeros(4 * k, k);
    for i in 0..k {
        jf.view_mut((4 * i, 3 * i), (4, 3)).copy_from(&d);
        for j in 0..4 {
            e[(4 * i + j, i)] = 1.0;
        }
    }
    FrictionBlocks {
        d,
        jf,
        e,
        mu_f: DVector::from_vec(params.frictions.clone()),
    }
}

/// Pusher contact row: maps the contacted cell's twist to the normal
/// separation velocity at the contact point. Empty when there is no action.
pub fn contact_jacobian(
    grid: &CellGrid,
    state: &State,
    action: Option<&PushAction>,
) -> Result<DMatrix<f64>> {
    let k = grid.k();
    let Some(a) = action else {
        return Ok(DMatrix::zeros(0, 3 * k));
    };
    a.validate(k)?;
    if state.k() != k {
        return Err(Error::DimensionMismatch(format!(
            "state k={} for grid k={k}",
            state.k()
        )));
    }
    let i = a.contact_cell;
    let n = a.direction_vec();
    let lever = rotate2(a.contact_point_vec(), state.poses[i].phi);
    let mut jc = DMatrix::zeros(1, 3 * k);
    jc[(0, 3 * i)] = cross2(lever, n);
    jc[(0, 3 * i + 1)] = n.x;
    jc[(0, 3 * i + 2)] = n.y;
    Ok(jc)
}

/// Non-penetration rows for the grid's explicit `contact_pairs`: relative
/// normal velocity between the two cell centers.
pub fn contact_pair_jacobian(grid: &CellGrid, state: &State) -> DMatrix<f64> {
    let k = grid.k();
    let mut jc = DMatrix::zeros(grid.contact_pairs.len(), 3 * k);
    for (r, &(i, j)) in grid.contact_pairs.iter().enumerate() {
        let d = state.poses[j].pos() - state.poses[i].pos();
        let norm = d.norm();
        if norm < 1e-12 {
            continue;
        }
        let n = d / norm;
        jc[(r, 3 * i + 1)] = -n.x;
        jc[(r, 3 * i + 2)] = -n.y;
        jc[(r, 3 * j + 1)] = n.x;
        jc[(r, 3 * j + 2)] = n.y;
    }
    jc
}

/// Result of one step, keeping the solver internals for gradient use and
/// warm starting.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: State,
    pub velocity: Velocity,
    pub solution: LcpSolution,
}

/// Treat zero-magnitude per-step entries (coasting) as "no pusher": no
/// force and no contact row. Generation and replay share this rule.
pub fn effective_action(action: &PushAction) -> Option<&PushAction> {
    (action.force_magnitude > 0.0).then_some(action)
}

/// Advance one step: solve the complementarity problem for the next
/// velocity, integrate poses (new velocity, then `x += v dt` with per-cell
/// angle wrap), and re-project onto an exact rigid placement.
pub fn step(
    grid: &CellGrid,
    params: &ObjectParams,
    state: &State,
    velocity: &Velocity,
    action: Option<&PushAction>,
    dt: f64,
) -> Result<(State, Velocity)> {
    let out = step_full(
        grid,
        params,
        state,
        velocity,
        action,
        dt,
        &SolveOptions::default(),
        None,
    )?;
    Ok((out.state, out.velocity))
}

/// [`step`] with explicit solver options and warm start.
#[allow(clippy::too_many_arguments)]
pub fn step_full(
    grid: &CellGrid,
    params: &ObjectParams,
    state: &State,
    velocity: &Velocity,
    action: Option<&PushAction>,
    dt: f64,
    opts: &SolveOptions,
    warm: Option<&LcpSolution>,
) -> Result<StepOutcome> {
    let problem = lcp::assemble_push(grid, params, state, velocity, action, dt)?;
    let solution = lcp::solve_warm(&problem, opts, warm)?;
    let next_velocity = solution.velocity();

    let integrated = State {
        poses: state
            .poses
            .iter()
            .zip(&next_velocity.twists)
            .map(|(p, t)| {
                Pose::new(
                    p.x + t.vx * dt,
                    p.y + t.vy * dt,
                    wrap_angle(p.phi + t.omega * dt),
                )
            })
            .collect(),
    };
    // Kill the second-order dilation of per-cell integration: refit the body
    // pose and place cells rigidly.
    let (trans, theta) = integrated.fit_body_pose(grid);
    let state = State::from_body_pose(grid, trans, theta);

    Ok(StepOutcome {
        state,
        velocity: next_velocity,
        solution,
    })
}

fn solve_opts_hot() -> SolveOptions {
    SolveOptions {
        equality_multipliers: false,
        ..SolveOptions::default()
    }
}

/// Roll out a push sequence from rest: each push applies its constant force
/// for `duration` steps, then the object coasts under friction until it
/// rests (bounded by [`MAX_COAST_STEPS`]). The recorded trajectory holds one
/// action entry per step; coast entries carry zero force.
pub fn rollout(
    grid: &CellGrid,
    params: &ObjectParams,
    initial_state: &State,
    pushes: &[PushAction],
    dt: f64,
) -> Result<Trajectory> {
    if pushes.is_empty() {
        return Err(Error::invalid("pushes", "rollout needs at least one action"));
    }
    let opts = solve_opts_hot();
    let mut states = vec![initial_state.clone()];
    let mut velocities = vec![Velocity::zero(grid.k())];
    let mut actions: Vec<PushAction> = Vec::new();
    let mut state = initial_state.clone();
    let mut velocity = Velocity::zero(grid.k());
    let mut warm: Option<LcpSolution> = None;

    let advance = |state: &mut State,
                       velocity: &mut Velocity,
                       warm: &mut Option<LcpSolution>,
                       states: &mut Vec<State>,
                       velocities: &mut Vec<Velocity>,
                       actions: &mut Vec<PushAction>,
                       act: PushAction,
                       action_index: usize|
     -> Result<()> {
        let out = step_full(
            grid,
            params,
            state,
            velocity,
            effective_action(&act),
            dt,
            &opts,
            warm.as_ref(),
        )
        .map_err(|e| Error::SimulationFailed {
            action_index,
            step: actions.len(),
            source: Box::new(e),
        })?;
        *state = out.state;
        *velocity = out.velocity;
        *warm = Some(out.solution);
        states.push(state.clone());
        velocities.push(velocity.clone());
        actions.push(act);
        Ok(())
    };

    for (ai, push) in pushes.iter().enumerate() {
        push.validate(grid.k())?;
        let mut per_step = push.clone();
        per_step.duration = 1;
        for _ in 0..push.duration {
            advance(
                &mut state,
                &mut velocity,
                &mut warm,
                &mut states,
                &mut velocities,
                &mut actions,
                per_step.clone(),
                ai,
            )?;
        }
        // Coast to rest so the recorded final pose is the resting pose.
        let coast = PushAction::new(0, Vector2::zeros(), Vector2::new(1.0, 0.0), 0.0, 1);
        let mut coasted = 0;
        while velocity.max_speed() > REST_SPEED && coasted < MAX_COAST_STEPS {
            advance(
                &mut state,
                &mut velocity,
                &mut warm,
                &mut states,
                &mut velocities,
                &mut actions,
                coast.clone(),
                ai,
            )?;
            coasted += 1;
        }
    }

    Ok(Trajectory {
        states,
        actions,
        dt,
        velocities: Some(velocities),
    })
}

/// Closed-loop replay of a recorded per-step action sequence under different
/// parameters: same initial state, same actions, same step count.
pub fn replay(grid: &CellGrid, params: &ObjectParams, traj: &Trajectory) -> Result<Trajectory> {
    let opts = solve_opts_hot();
    let mut states = vec![traj.states[0].clone()];
    let mut velocities = vec![Velocity::zero(grid.k())];
    let mut state = traj.states[0].clone();
    let mut velocity = Velocity::zero(grid.k());
    let mut warm: Option<LcpSolution> = None;
    for (t, act) in traj.actions.iter().enumerate() {
        let out = step_full(
            grid,
            params,
            &state,
            &velocity,
            effective_action(act),
            traj.dt,
            &opts,
            warm.as_ref(),
        )
        .map_err(|e| Error::SimulationFailed {
            action_index: 0,
            step: t,
            source: Box::new(e),
        })?;
        state = out.state;
        velocity = out.velocity;
        warm = Some(out.solution);
        states.push(state.clone());
        velocities.push(velocity.clone());
    }
    Ok(Trajectory {
        states,
        actions: traj.actions.clone(),
        dt: traj.dt,
        velocities: Some(velocities),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{square_cell_inertia, Twist};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn joint_jacobian_empty_for_single_cell() {
        let grid = CellGrid::rect(1, 1, 0.05).unwrap();
        let je = joint_jacobian(&grid, &State::identity(&grid));
        assert_eq!(je.nrows(), 0);
    }

    #[test]
    fn rigid_twists_are_in_the_nullspace() {
        let grid = CellGrid::rect(3, 3, 0.04).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let state = State::from_body_pose(
                &grid,
                Vector2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
                rng.gen_range(-3.0..3.0),
            );
            let je = joint_jacobian(&grid, &state);
            // Random rigid twist about a random reference point.
            let omega: f64 = rng.gen_range(-2.0..2.0);
            let vref = Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let refp = Vector2::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
            let mut v = DVector::zeros(3 * grid.k());
            for i in 0..grid.k() {
                let r = state.poses[i].pos() - refp;
                v[3 * i] = omega;
                v[3 * i + 1] = vref.x - omega * r.y;
                v[3 * i + 2] = vref.y + omega * r.x;
            }
            assert!((je * v).amax() < 1e-12);
        }
    }

    #[test]
    fn two_cell_weld_has_rank_three() {
        let grid = CellGrid::rect(2, 1, 0.05).unwrap();
        let je = joint_jacobian(&grid, &State::identity(&grid));
        assert_eq!(je.nrows(), 3);
        assert_eq!(je.svd(false, false).rank(1e-10), 3);
    }

    #[test]
    fn friction_blocks_shapes_and_structure() {
        let grid = CellGrid::rect(3, 1, 0.05).unwrap();
        let params = ObjectParams::uniform(3, 0.1, 0.5, 0.05).unwrap();
        let fb = friction_jacobian(&grid, &params);
        assert_eq!(fb.jf.shape(), (12, 9));
        assert_eq!(fb.e.shape(), (12, 3));
        // Zero rotation column, +-x and +-y rows.
        let d = ray_matrix();
        assert_eq!(d.column(0).iter().copied().collect::<Vec<_>>(), vec![0.0; 4]);
        // Off-diagonal blocks are zero.
        for i in 0..3 {
            for j in 0..3 {
                let block = fb.jf.view((4 * i, 3 * j), (4, 3));
                if i == j {
                    assert_eq!(block, d);
                } else {
                    assert_eq!(block.amax(), 0.0);
                }
            }
        }
        // Every aggregator column sums to four rays.
        for c in 0..3 {
            assert_eq!(fb.e.column(c).sum(), 4.0);
        }
        assert_eq!(fb.mu_f.as_slice(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn single_cell_friction_block_is_d_matrix() {
        let grid = CellGrid::rect(1, 1, 0.05).unwrap();
        let params = ObjectParams::uniform(1, 0.1, 0.5, 0.05).unwrap();
        let fb = friction_jacobian(&grid, &params);
        let d = ray_matrix();
        let expected = DMatrix::from_fn(4, 3, |r, c| d[(r, c)]);
        assert_eq!(fb.jf, expected);
        assert_eq!(fb.mu_f.as_slice(), &[0.5]);
    }

    #[test]
    fn contact_row_selects_pushed_velocity() {
        let grid = CellGrid::rect(1, 1, 0.05).unwrap();
        let state = State::identity(&grid);
        let a = PushAction::new(0, Vector2::zeros(), Vector2::new(1.0, 0.0), 1.0, 1);
        let jc = contact_jacobian(&grid, &state, Some(&a)).unwrap();
        assert_eq!(jc.nrows(), 1);
        assert_eq!(jc[(0, 0)], 0.0);
        assert_eq!(jc[(0, 1)], 1.0);
        assert_eq!(jc[(0, 2)], 0.0);
    }

    #[test]
    fn contact_row_lever_arm_term() {
        let grid = CellGrid::rect(1, 1, 0.2).unwrap();
        let state = State::identity(&grid);
        let a = PushAction::new(0, Vector2::new(0.0, 0.05), Vector2::new(1.0, 0.0), 1.0, 1);
        let jc = contact_jacobian(&grid, &state, Some(&a)).unwrap();
        // v_p = v + omega x r: normal rate picks up cross(r, n) = -0.05.
        assert_relative_eq!(jc[(0, 0)], -0.05, epsilon = 1e-15);
    }

    #[test]
    fn no_action_no_contact_rows() {
        let grid = CellGrid::rect(2, 2, 0.05).unwrap();
        let jc = contact_jacobian(&grid, &State::identity(&grid), None).unwrap();
        assert_eq!(jc.nrows(), 0);
    }

    #[test]
    fn zero_force_zero_velocity_keeps_state() {
        let grid = CellGrid::rect(2, 2, 0.05).unwrap();
        let params = ObjectParams::uniform(4, 0.1, 0.2, 0.05).unwrap();
        let s0 = State::identity(&grid);
        let (s1, v1) = step(&grid, &params, &s0, &Velocity::zero(4), None, 0.01).unwrap();
        assert_eq!(s1, s0);
        assert!(v1.max_speed() < 1e-12);
    }

    #[test]
    fn frictionless_impulse_accumulation() {
        let grid = CellGrid::rect(1, 1, 0.05).unwrap();
        let mass = 0.7;
        let params = ObjectParams::new(
            vec![mass],
            vec![square_cell_inertia(mass, 0.05)],
            vec![0.0],
        )
        .unwrap();
        let push = PushAction::new(0, Vector2::zeros(), Vector2::new(1.0, 0.0), 2.0, 1);
        let dt = 0.01;
        let mut state = State::identity(&grid);
        let mut vel = Velocity::zero(1);
        let n = 25;
        for _ in 0..n {
            let (s, v) = step(&grid, &params, &state, &vel, Some(&push), dt).unwrap();
            state = s;
            vel = v;
        }
        assert_relative_eq!(
            vel.twists[0].vx,
            n as f64 * dt * 2.0 / mass,
            epsilon = 1e-9
        );
    }

    #[test]
    fn coulomb_stop_matches_scalar_closed_form() {
        let grid = CellGrid::rect(1, 1, 0.05).unwrap();
        let (mass, mu, dt) = (0.8, 0.6, 0.01);
        let params =
            ObjectParams::new(vec![mass], vec![square_cell_inertia(mass, 0.05)], vec![mu]).unwrap();
        let mut state = State::identity(&grid);
        let mut vel = Velocity {
            twists: vec![Twist::new(0.0, 0.0, 0.137)],
        };
        // Scalar sliding block: v <- max(0, v - dt*mu/m) each step.
        let mut v_ref = 0.137;
        let mut stop_ref = None;
        let mut stop_sim = None;
        for t in 0..60 {
            v_ref = (v_ref - dt * mu / mass).max(0.0);
            if v_ref == 0.0 && stop_ref.is_none() {
                stop_ref = Some(t);
            }
            let (s, v) = step(&grid, &params, &state, &vel, None, dt).unwrap();
            state = s;
            vel = v;
            assert_relative_eq!(vel.twists[0].vy, v_ref, epsilon = 1e-9);
            if vel.max_speed() < REST_SPEED && stop_sim.is_none() {
                stop_sim = Some(t);
            }
        }
        assert_eq!(stop_sim, stop_ref);
    }

    #[test]
    fn rollout_zero_duration_is_initial_state_only() {
        let grid = CellGrid::rect(2, 2, 0.05).unwrap();
        let params = ObjectParams::uniform(4, 0.1, 0.2, 0.05).unwrap();
        let s0 = State::identity(&grid);
        let push = PushAction::new(0, Vector2::zeros(), Vector2::new(1.0, 0.0), 2.0, 0);
        let traj = rollout(&grid, &params, &s0, &[push], 0.01).unwrap();
        assert_eq!(traj.states.len(), 1);
        assert!(traj.actions.is_empty());
    }

    #[test]
    fn rollout_is_deterministic() {
        let grid = CellGrid::rect(3, 3, 0.04).unwrap();
        let params = ObjectParams::uniform(9, 0.09, 0.25, 0.04).unwrap();
        let s0 = State::identity(&grid);
        let push = PushAction::new(
            1,
            Vector2::new(0.0, -0.02),
            Vector2::new(0.2, 1.0).normalize(),
            3.0,
            30,
        );
        let a = rollout(&grid, &params, &s0, &[push.clone()], 0.01).unwrap();
        let b = rollout(&grid, &params, &s0, &[push], 0.01).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn centroid_push_on_uniform_square_does_not_rotate() {
        let grid = CellGrid::rect(3, 3, 0.04).unwrap();
        let params = ObjectParams::uniform(9, 0.08, 0.2, 0.04).unwrap();
        let s0 = State::identity(&grid);
        // Contact on the left edge cell, aimed through the centroid.
        let left_mid = grid
            .boundary_cells()
            .into_iter()
            .find(|&i| {
                let c = grid.center(i);
                c.x < -0.03 && c.y.abs() < 1e-9
            })
            .unwrap();
        let push = PushAction::new(
            left_mid,
            Vector2::new(-0.02, 0.0),
            Vector2::new(1.0, 0.0),
            3.0,
            40,
        );
        let traj = rollout(&grid, &params, &s0, &[push], 0.01).unwrap();
        let last = traj.states.last().unwrap();
        assert!(last.poses[0].phi.abs() <= 1e-3);
        // And it does translate.
        assert!(last.poses[0].x > 0.01);
    }

    #[test]
    fn rigidity_preserved_over_rollout() {
        let grid = CellGrid::rect(3, 2, 0.04).unwrap();
        let params = ObjectParams::uniform(6, 0.1, 0.15, 0.04).unwrap();
        let s0 = State::identity(&grid);
        let push = PushAction::new(
            0,
            Vector2::new(0.0, -0.02),
            Vector2::new(0.3, 1.0).normalize(),
            2.5,
            50,
        );
        let traj = rollout(&grid, &params, &s0, &[push], 0.01).unwrap();
        for s in &traj.states {
            s.validate(&grid, 1e-6 * grid.cell_size).unwrap();
        }
    }

    #[test]
    fn doubling_friction_never_travels_farther() {
        let grid = CellGrid::rect(2, 2, 0.05).unwrap();
        let s0 = State::identity(&grid);
        let push = PushAction::new(
            0,
            Vector2::new(-0.025, 0.0),
            Vector2::new(1.0, 0.0),
            2.0,
            30,
        );
        let lo = ObjectParams::uniform(4, 0.1, 0.1, 0.05).unwrap();
        let hi = ObjectParams::uniform(4, 0.1, 0.2, 0.05).unwrap();
        let t_lo = rollout(&grid, &lo, &s0, &[push.clone()], 0.01).unwrap();
        let t_hi = rollout(&grid, &hi, &s0, &[push], 0.01).unwrap();
        let dist = |t: &Trajectory| {
            (t.states.last().unwrap().poses[0].pos() - t.states[0].poses[0].pos()).norm()
        };
        assert!(dist(&t_hi) <= dist(&t_lo) + 1e-9);
    }

    #[test]
    fn world_rotation_equivariance() {
        let grid = CellGrid::rect(2, 3, 0.04).unwrap();
        let params = ObjectParams::uniform(6, 0.12, 0.18, 0.04).unwrap();
        let rot = 0.9_f64;
        let s0 = State::identity(&grid);
        let s0_rot = State::from_body_pose(&grid, Vector2::zeros(), rot);
        let dir = Vector2::new(1.0, 0.4).normalize();
        let push = PushAction::new(1, Vector2::new(0.0, -0.02), dir, 2.0, 20);
        let mut push_rot = push.clone();
        let d = rotate2(dir, rot);
        push_rot.direction = [d.x, d.y];
        let a = rollout(&grid, &params, &s0, &[push], 0.01).unwrap();
        let b = rollout(&grid, &params, &s0_rot, &[push_rot], 0.01).unwrap();
        assert_eq!(a.states.len(), b.states.len());
        let fa = a.states.last().unwrap();
        let fb = b.states.last().unwrap();
        for i in 0..grid.k() {
            let rotated = rotate2(fa.poses[i].pos(), rot);
            assert_relative_eq!(rotated.x, fb.poses[i].x, epsilon = 1e-7);
            assert_relative_eq!(rotated.y, fb.poses[i].y, epsilon = 1e-7);
        }
    }

    #[test]
    fn immovable_object_stays_put() {
        let grid = CellGrid::rect(2, 2, 0.05).unwrap();
        // 40 N of friction against a 3 N push.
        let params = ObjectParams::uniform(4, 0.5, 10.0, 0.05).unwrap();
        let s0 = State::identity(&grid);
        let push = PushAction::new(0, Vector2::new(-0.025, 0.0), Vector2::new(1.0, 0.0), 3.0, 50);
        let traj = rollout(&grid, &params, &s0, &[push], 0.01).unwrap();
        let last = traj.states.last().unwrap();
        assert!(pose_error_of(last, &s0) < 1e-6);
    }

    fn pose_error_of(a: &State, b: &State) -> f64 {
        crate::model::pose_error(a, b).unwrap()
    }

    #[test]
    fn energy_never_increases_without_force() {
        let grid = CellGrid::rect(2, 2, 0.05).unwrap();
        let params = ObjectParams::uniform(4, 0.1, 0.12, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let md = params.mass_diagonal();
        for _ in 0..20 {
            let state = State::identity(&grid);
            // Random rigid twist.
            let basis = crate::lcp::rigid_twist_basis(&state);
            let w = nalgebra::Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let v0 = &basis * w;
            let vel = Velocity::from_vector(&v0);
            let ke0: f64 = (0..12).map(|r| 0.5 * md[r] * v0[r] * v0[r]).sum();
            let (_, v1) = step(&grid, &params, &state, &vel, None, 0.01).unwrap();
            let v1 = v1.to_vector();
            let ke1: f64 = (0..12).map(|r| 0.5 * md[r] * v1[r] * v1[r]).sum();
            assert!(ke1 <= ke0 + 1e-12, "kinetic energy grew: {ke0} -> {ke1}");
        }
    }
}
