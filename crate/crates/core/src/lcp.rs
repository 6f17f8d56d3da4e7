//! Mixed linear complementarity problem for one dynamics step.
//!
//! Unknowns are the next generalized velocity `v` (3k), equality multipliers
//! `lambda_e` (rigid joints), contact multipliers `lambda_c`, friction ray
//! multipliers `lambda_f` (four tangential rays per cell), and per-cell slip
//! variables `eta`. With `kappa = M v_t + dt u` the system is
//!
//! ```text
//! M v = kappa + Je' lambda_e + Jc' lambda_c + Jf' lambda_f
//! Je v = 0
//! a  = Jc v - c        >= 0,  lambda_c >= 0,  a  . lambda_c = 0
//! rho = Jf v + E eta   >= 0,  lambda_f >= 0,  rho . lambda_f = 0
//! xi = dt mu_f - E' lambda_f >= 0,  eta >= 0,  xi . eta = 0
//! ```
//!
//! Multipliers are impulses over the step, so the per-cell friction budget is
//! the force magnitude `mu_f` times `dt`. Restitution is zero (`c = 0`): the
//! pusher stays in contact through the whole action.
//!
//! The solver eliminates the equality rows through the rigid-twist basis of
//! `null(Je)` (three columns for a connected object), then runs a projected
//! Gauss-Seidel sweep over the remaining complementarity blocks: scalar
//! projection for contact rows, and an exact 2D projection onto the friction
//! diamond (the 1-norm impulse ball) for each cell's ray block. The per-cell
//! projection solves the cell's complementarity conditions exactly given the
//! other blocks, which keeps stick states exact and convergence monotone.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix2, Matrix3, Matrix3x2, Vector2, Vector3, U2, U3};

use crate::dynamics;
use crate::model::{generalized_force, CellGrid, ObjectParams, PushAction, State, Velocity};
use crate::{Error, Result};

/// Assembled block matrices for one step.
#[derive(Debug, Clone)]
pub struct LcpProblem {
    pub k: usize,
    pub dt: f64,
    /// Diagonal of the 3k×3k mass matrix, `[I_i, M_i, M_i]` per cell.
    pub mass_diag: DVector<f64>,
    /// Equality (joint) Jacobian, one 3-row block per adjacency pair.
    pub je: DMatrix<f64>,
    /// Contact Jacobian (pusher row and/or cell-cell rows); may be empty.
    pub jc: DMatrix<f64>,
    /// Friction Jacobian, 4k×3k block diagonal of the per-cell ray matrix.
    pub jf: DMatrix<f64>,
    /// 4k×k block diagonal of the all-ones ray aggregator columns.
    pub e: DMatrix<f64>,
    /// Per-cell friction force magnitudes (N).
    pub mu_f: DVector<f64>,
    /// `-(M v_t + dt u)`.
    pub q: DVector<f64>,
    /// Contact right-hand side; zero under zero restitution.
    pub c: DVector<f64>,
    /// Basis of `null(je)`: the rigid twists of the connected object,
    /// taken about the current centroid. 3k×3.
    pub null_basis: DMatrix<f64>,
}

/// Solver tolerances and options.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Complementarity residual target (absolute).
    pub tol: f64,
    /// Maximum Gauss-Seidel sweeps.
    pub max_iter: usize,
    /// Recover the equality multipliers by least squares. Costs an SVD of
    /// `je`; rollout hot paths turn it off.
    pub equality_multipliers: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            max_iter: 2000,
            equality_multipliers: true,
        }
    }
}

/// Residual norms of a returned solution.
#[derive(Debug, Clone, Copy)]
pub struct Residuals {
    /// Dynamics row residual (infinity norm). Computed against the full
    /// system when equality multipliers were recovered, otherwise against
    /// the system projected onto the rigid-twist subspace.
    pub dynamics: f64,
    /// `|Je v|` infinity norm.
    pub equality: f64,
    /// `max_i |min(s_i, gamma_i)|` over all complementarity pairs.
    pub comp_max: f64,
    /// `s . gamma` over all complementarity pairs.
    pub comp_dot: f64,
}

/// Complementarity-satisfying unknowns of one step.
#[derive(Debug, Clone)]
pub struct LcpSolution {
    pub v_next: DVector<f64>,
    /// Equality multipliers; empty when not requested.
    pub lambda_e: DVector<f64>,
    pub lambda_c: DVector<f64>,
    pub lambda_f: DVector<f64>,
    pub eta: DVector<f64>,
    /// Contact slack `a`.
    pub slack_contact: DVector<f64>,
    /// Friction ray slack `rho`.
    pub slack_friction: DVector<f64>,
    /// Cone budget slack `xi`.
    pub slack_cone: DVector<f64>,
    pub residuals: Residuals,
    pub iterations: usize,
}

impl LcpSolution {
    pub fn velocity(&self) -> Velocity {
        Velocity::from_vector(&self.v_next)
    }

    /// Net tangential friction impulse on cell `i` (N·s).
    pub fn friction_impulse(&self, i: usize) -> Vector2<f64> {
        Vector2::new(
            self.lambda_f[4 * i] - self.lambda_f[4 * i + 1],
            self.lambda_f[4 * i + 2] - self.lambda_f[4 * i + 3],
        )
    }

    /// Whether cell `i` spent its whole friction budget (slipping).
    pub fn cap_active(&self, i: usize, tol: f64) -> bool {
        self.slack_cone[i] <= tol
    }

    /// Concatenated slack vector `[a, rho, xi]`.
    pub fn slacks(&self) -> DVector<f64> {
        concat(&[&self.slack_contact, &self.slack_friction, &self.slack_cone])
    }

    /// Concatenated multiplier vector `[lambda_c, lambda_f, eta]`.
    pub fn gammas(&self) -> DVector<f64> {
        concat(&[&self.lambda_c, &self.lambda_f, &self.eta])
    }
}

fn concat(parts: &[&DVector<f64>]) -> DVector<f64> {
    let len = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(len);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.len()).copy_from(*p);
        at += p.len();
    }
    out
}

impl LcpProblem {
    pub fn n_equality(&self) -> usize {
        self.je.nrows()
    }

    pub fn n_contacts(&self) -> usize {
        self.jc.nrows()
    }

    /// Number of complementarity variables `[lambda_c, lambda_f, eta]`.
    pub fn n_complementarity(&self) -> usize {
        self.n_contacts() + 5 * self.k
    }

    /// Per-cell friction impulse budget for one step: `dt * mu_f`.
    pub fn caps(&self) -> DVector<f64> {
        &self.mu_f * self.dt
    }

    /// Condensed slack coupling matrix `F` over `[lambda_c, lambda_f, eta]`:
    /// zero except the `E` block feeding `eta` into the ray slacks and the
    /// `-E'` block charging ray multipliers against the cone budget.
    pub fn condensed_f(&self) -> DMatrix<f64> {
        let nc = self.n_contacts();
        let k = self.k;
        let n = nc + 5 * k;
        let mut f = DMatrix::zeros(n, n);
        f.view_mut((nc, nc + 4 * k), (4 * k, k)).copy_from(&self.e);
        f.view_mut((nc + 4 * k, nc), (k, 4 * k))
            .copy_from(&(-self.e.transpose()));
        f
    }

    /// Condensed velocity-to-slack map `G = [Jc; Jf; 0]`.
    pub fn condensed_g(&self) -> DMatrix<f64> {
        let nc = self.n_contacts();
        let k = self.k;
        let mut g = DMatrix::zeros(nc + 5 * k, 3 * k);
        g.view_mut((0, 0), (nc, 3 * k)).copy_from(&self.jc);
        g.view_mut((nc, 0), (4 * k, 3 * k)).copy_from(&self.jf);
        g
    }

    /// Condensed equality block `A = Je`.
    pub fn condensed_a(&self) -> &DMatrix<f64> {
        &self.je
    }

    /// Constant slack offset `m = [-c; 0; dt mu_f]`.
    pub fn condensed_m(&self) -> DVector<f64> {
        let nc = self.n_contacts();
        let k = self.k;
        let mut m = DVector::zeros(nc + 5 * k);
        m.rows_mut(0, nc).copy_from(&(-&self.c));
        m.rows_mut(nc + 4 * k, k).copy_from(&self.caps());
        m
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k;
        let n = 3 * k;
        if k == 0 {
            return Err(Error::invalid("k", "must be at least 1"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid("dt", "must be positive"));
        }
        if self.mass_diag.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "mass diagonal has {} entries, expected {n}",
                self.mass_diag.len()
            )));
        }
        if self.mass_diag.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::invalid(
                "mass_diag",
                "mass matrix must be positive definite (all diagonal entries positive)",
            ));
        }
        if self.je.ncols() != n && self.je.nrows() > 0 {
            return Err(Error::DimensionMismatch("je columns".into()));
        }
        if self.jc.nrows() != self.c.len() {
            return Err(Error::DimensionMismatch("jc rows vs c".into()));
        }
        if self.jf.nrows() != 4 * k || self.jf.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "jf is {}x{}, expected {}x{n}",
                self.jf.nrows(),
                self.jf.ncols(),
                4 * k
            )));
        }
        if self.e.nrows() != 4 * k || self.e.ncols() != k {
            return Err(Error::DimensionMismatch("e shape".into()));
        }
        for i in 0..k {
            for r in 0..4 * k {
                let expected = if r / 4 == i { 1.0 } else { 0.0 };
                if self.e[(r, i)] != expected {
                    return Err(Error::invalid(
                        "e",
                        "ray aggregator must be block diagonal of all-ones columns",
                    ));
                }
            }
        }
        if self.mu_f.len() != k || self.mu_f.iter().any(|&f| f < 0.0 || !f.is_finite()) {
            return Err(Error::invalid("mu_f", "needs k non-negative entries"));
        }
        if self.q.len() != n {
            return Err(Error::DimensionMismatch("q length".into()));
        }
        if self.null_basis.nrows() != n || self.null_basis.ncols() != 3 {
            return Err(Error::DimensionMismatch("null basis shape".into()));
        }
        if self.je.nrows() > 0 {
            let prod = &self.je * &self.null_basis;
            let scale = self.je.amax().max(1.0);
            if prod.amax() > 1e-7 * scale {
                return Err(Error::invalid(
                    "null_basis",
                    "does not annihilate the equality rows",
                ));
            }
        }
        Ok(())
    }
}

/// Assemble the step problem from a generalized force vector. Contact rows
/// come from the grid's explicit `contact_pairs` only; see [`assemble_push`]
/// for the pusher contact row.
pub fn assemble(
    grid: &CellGrid,
    params: &ObjectParams,
    state: &State,
    velocity: &Velocity,
    force: &DVector<f64>,
    dt: f64,
) -> Result<LcpProblem> {
    let jc = dynamics::contact_pair_jacobian(grid, state);
    assemble_inner(grid, params, state, velocity, force, jc, dt)
}

/// Assemble the step problem for a push action: the action's generalized
/// force plus its unilateral contact row, stacked above any cell-cell rows.
pub fn assemble_push(
    grid: &CellGrid,
    params: &ObjectParams,
    state: &State,
    velocity: &Velocity,
    action: Option<&PushAction>,
    dt: f64,
) -> Result<LcpProblem> {
    let k = grid.k();
    let force = match action {
        Some(a) => generalized_force(a, state, k)?,
        None => DVector::zeros(3 * k),
    };
    let push_row = dynamics::contact_jacobian(grid, state, action)?;
    let pair_rows = dynamics::contact_pair_jacobian(grid, state);
    let nc = push_row.nrows() + pair_rows.nrows();
    let mut jc = DMatrix::zeros(nc, 3 * k);
    jc.view_mut((0, 0), (push_row.nrows(), 3 * k))
        .copy_from(&push_row);
    jc.view_mut((push_row.nrows(), 0), (pair_rows.nrows(), 3 * k))
        .copy_from(&pair_rows);
    assemble_inner(grid, params, state, velocity, &force, jc, dt)
}

fn assemble_inner(
    grid: &CellGrid,
    params: &ObjectParams,
    state: &State,
    velocity: &Velocity,
    force: &DVector<f64>,
    jc: DMatrix<f64>,
    dt: f64,
) -> Result<LcpProblem> {
    let k = grid.k();
    params.validate(k)?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid("dt", format!("{dt}")));
    }
    if state.k() != k || velocity.k() != k {
        return Err(Error::DimensionMismatch(format!(
            "state k={} velocity k={} for grid k={k}",
            state.k(),
            velocity.k()
        )));
    }
    if force.len() != 3 * k {
        return Err(Error::DimensionMismatch(format!(
            "force vector length {}, expected {}",
            force.len(),
            3 * k
        )));
    }
    let mass_diag = params.mass_diagonal();
    let je = dynamics::joint_jacobian(grid, state);
    let fb = dynamics::friction_jacobian(grid, params);
    let v = velocity.to_vector();
    let mut q = DVector::zeros(3 * k);
    for r in 0..3 * k {
        q[r] = -(mass_diag[r] * v[r] + dt * force[r]);
    }
    let c = DVector::zeros(jc.nrows());
    let null_basis = rigid_twist_basis(state);
    let problem = LcpProblem {
        k,
        dt,
        mass_diag,
        je,
        jc,
        jf: fb.jf,
        e: fb.e,
        mu_f: fb.mu_f,
        q,
        c,
        null_basis,
    };
    problem.validate()?;
    Ok(problem)
}

/// Rigid twist basis about the centroid of the current cell positions:
/// columns are (rotation about the centroid, unit x translation, unit y
/// translation). For a connected grid this spans `null(Je)` exactly.
pub fn rigid_twist_basis(state: &State) -> DMatrix<f64> {
    let k = state.k();
    let mut c = Vector2::zeros();
    for p in &state.poses {
        c += p.pos();
    }
    c /= k as f64;
    let mut n = DMatrix::zeros(3 * k, 3);
    for i in 0..k {
        let r = state.poses[i].pos() - c;
        n[(3 * i, 0)] = 1.0;
        n[(3 * i + 1, 0)] = -r.y;
        n[(3 * i + 2, 0)] = r.x;
        n[(3 * i + 1, 1)] = 1.0;
        n[(3 * i + 2, 2)] = 1.0;
    }
    n
}

/// Exact minimizer of `p . u + p' H p / 2` over the 1-norm ball of radius
/// `cap`. `H` must be positive definite. Interior minimizers mean the cell
/// sticks (post-impulse slip is exactly zero); boundary minimizers are found
/// by scanning the four diamond edges, so exact-boundary ties resolve to the
/// clamped value.
fn solve_cell_qp(
    h: &Matrix2<f64>,
    h_chol: &Cholesky<f64, U2>,
    u: Vector2<f64>,
    cap: f64,
) -> Vector2<f64> {
    if cap <= 0.0 {
        return Vector2::zeros();
    }
    let p_free = -h_chol.solve(&u);
    if p_free.x.abs() + p_free.y.abs() <= cap {
        return p_free;
    }
    let verts = [
        Vector2::new(cap, 0.0),
        Vector2::new(0.0, cap),
        Vector2::new(-cap, 0.0),
        Vector2::new(0.0, -cap),
    ];
    let mut best = verts[0];
    let mut best_val = f64::INFINITY;
    for e in 0..4 {
        let a = verts[e];
        let b = verts[(e + 1) % 4];
        let d = b - a;
        let denom = (h * d).dot(&d);
        let t = if denom > 0.0 {
            (-(h * a + u).dot(&d) / denom).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let p = a + d * t;
        let val = 0.5 * (h * p).dot(&p) + u.dot(&p);
        if val < best_val {
            best_val = val;
            best = p;
        }
    }
    best
}

struct CellCtx {
    /// Rows of the null basis mapping a body twist to the cell's linear
    /// velocity (2×3).
    s: nalgebra::Matrix2x3<f64>,
    /// `Minv S'` (3×2): body twist change per unit cell impulse.
    minv_st: Matrix3x2<f64>,
    h: Matrix2<f64>,
    h_chol: Cholesky<f64, U2>,
    cap: f64,
}

/// Friction regime of one cell within an active-set policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum CellRegime {
    /// Zero budget: no friction impulse.
    Free,
    /// Budget not exhausted: post-step slip pinned to zero, impulse free.
    Stick,
    /// Budget spent on one axis: impulse fixed at a diamond vertex.
    /// `axis` 0 is x, 1 is y; `positive` is the impulse sign.
    Vertex { axis: u8, positive: bool },
    /// Budget split across both axes (diamond edge): one free ratio,
    /// impulse signs fixed.
    Edge { sx_pos: bool, sy_pos: bool },
}

/// One active-set guess for the whole problem.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Policy {
    contacts: Vec<bool>,
    cells: Vec<CellRegime>,
}

/// Solve the assembled problem by projected Gauss-Seidel; see module docs.
pub fn solve(problem: &LcpProblem, opts: &SolveOptions) -> Result<LcpSolution> {
    solve_warm(problem, opts, None)
}

/// [`solve`] with a warm start from a previous step's multipliers. The warm
/// start is ignored when the dimensions do not match.
pub fn solve_warm(
    problem: &LcpProblem,
    opts: &SolveOptions,
    warm: Option<&LcpSolution>,
) -> Result<LcpSolution> {
    problem.validate()?;
    let k = problem.k;
    let nb = &problem.null_basis;
    let nc = problem.n_contacts();

    // Reduced mass matrix over the rigid-twist coordinates.
    let mut mt = Matrix3::zeros();
    for r in 0..3 * k {
        let m = problem.mass_diag[r];
        for a in 0..3 {
            let na = nb[(r, a)];
            if na == 0.0 {
                continue;
            }
            for b in 0..3 {
                mt[(a, b)] += m * na * nb[(r, b)];
            }
        }
    }
    let mt_chol = Cholesky::<f64, U3>::new(mt).ok_or_else(|| {
        Error::invalid("mass_diag", "reduced mass matrix is not positive definite")
    })?;

    // v_free = Mt^-1 N' (M v_t + dt u) = Mt^-1 N' (-q).
    let mut rhs = Vector3::zeros();
    for r in 0..3 * k {
        let val = -problem.q[r];
        for a in 0..3 {
            rhs[a] += nb[(r, a)] * val;
        }
    }
    let v_free = mt_chol.solve(&rhs);

    let caps = problem.caps();
    let cells: Vec<CellCtx> = (0..k)
        .map(|i| {
            let s = nalgebra::Matrix2x3::new(
                nb[(3 * i + 1, 0)],
                nb[(3 * i + 1, 1)],
                nb[(3 * i + 1, 2)],
                nb[(3 * i + 2, 0)],
                nb[(3 * i + 2, 1)],
                nb[(3 * i + 2, 2)],
            );
            let minv_st = mt_chol.solve(&s.transpose());
            let h = s * minv_st;
            let h_chol = Cholesky::<f64, U2>::new(h)
                .unwrap_or_else(|| Cholesky::new(h + Matrix2::identity() * 1e-14).unwrap());
            CellCtx {
                s,
                minv_st,
                h,
                h_chol,
                cap: caps[i],
            }
        })
        .collect();

    // Reduced contact rows and their Delassus diagonal.
    let jc_red: Vec<Vector3<f64>> = (0..nc)
        .map(|r| {
            let mut row = Vector3::zeros();
            for cch in 0..3 * k {
                let val = problem.jc[(r, cch)];
                if val == 0.0 {
                    continue;
                }
                for a in 0..3 {
                    row[a] += val * nb[(cch, a)];
                }
            }
            row
        })
        .collect();
    let minv_jc: Vec<Vector3<f64>> = jc_red.iter().map(|r| mt_chol.solve(r)).collect();
    let jc_diag: Vec<f64> = jc_red.iter().zip(&minv_jc).map(|(r, m)| r.dot(m)).collect();

    // Warm start.
    let mut p: Vec<Vector2<f64>> = vec![Vector2::zeros(); k];
    let mut lc = DVector::zeros(nc);
    if let Some(w) = warm {
        if w.lambda_f.len() == 4 * k {
            for i in 0..k {
                p[i] = Vector2::new(
                    w.lambda_f[4 * i] - w.lambda_f[4 * i + 1],
                    w.lambda_f[4 * i + 2] - w.lambda_f[4 * i + 3],
                );
                // Respect the current budget in case parameters changed.
                let total = p[i].x.abs() + p[i].y.abs();
                if total > cells[i].cap && total > 0.0 {
                    p[i] *= cells[i].cap / total;
                }
            }
        }
        if w.lambda_c.len() == nc {
            lc.copy_from(&w.lambda_c);
        }
    }

    let recompute_w = |p: &[Vector2<f64>], lc: &DVector<f64>| -> Vector3<f64> {
        let mut acc = Vector3::zeros();
        for i in 0..k {
            acc += cells[i].minv_st * p[i];
        }
        for r in 0..nc {
            acc += minv_jc[r] * lc[r];
        }
        v_free + acc
    };
    let mut w = recompute_w(&p, &lc);

    // Gauss-Seidel alone crawls (or limit-cycles) near stick/slip
    // boundaries, so sweeps alternate with an exact active-set finisher:
    // guess every regime from the iterate, solve the resulting linear
    // system, and accept it when complementarity verifies.
    let rhs3 = mt * v_free;
    let mut iterations = 0;
    let mut last = ResidualAccumulator::default();
    let mut tried_policies: Vec<Policy> = Vec::new();

    while iterations < opts.max_iter {
        // Active-set refinement: follow the policy chain while it keeps
        // producing new policies.
        let trace = std::env::var_os("CELLPUSH_TRACE").is_some();
        let mut policy = policy_from_iterate(&cells, &jc_red, &w, &p, &lc, &problem.c);
        for _ in 0..12 {
            if iterations >= opts.max_iter {
                break;
            }
            if tried_policies.contains(&policy) {
                if trace {
                    eprintln!("policy repeat at iter {iterations}: {policy:?}");
                }
                break;
            }
            tried_policies.push(policy.clone());
            iterations += 1;
            let Some(cand) = solve_policy(&policy, &cells, &jc_red, &rhs3, &mt, &problem.c)
            else {
                if trace {
                    eprintln!("policy solve failed at iter {iterations}: {policy:?}");
                }
                break;
            };
            let res = measure_residuals(problem, &cells, &jc_red, &cand.0, &cand.1, &cand.2);
            if trace {
                eprintln!(
                    "iter {iterations}: policy {policy:?} -> comp_max {:.3e} dot {:.3e}",
                    res.comp_max, res.comp_dot
                );
            }
            if res.comp_max <= opts.tol && res.comp_dot <= opts.tol {
                return Ok(finish_solution(
                    problem, opts, &cells, &jc_red, cand.0, &cand.1, cand.2, iterations,
                ));
            }
            policy = policy_from_iterate(&cells, &jc_red, &cand.0, &cand.1, &cand.2, &problem.c);
        }

        // A batch of projected Gauss-Seidel sweeps.
        for _ in 0..16 {
            if iterations >= opts.max_iter {
                break;
            }
            iterations += 1;
            for r in 0..nc {
                if jc_diag[r] <= 1e-14 {
                    continue;
                }
                let a = jc_red[r].dot(&w) - problem.c[r];
                let lam_new = (lc[r] - a / jc_diag[r]).max(0.0);
                let delta = lam_new - lc[r];
                if delta != 0.0 {
                    w += minv_jc[r] * delta;
                    lc[r] = lam_new;
                }
            }
            for (i, cell) in cells.iter().enumerate() {
                // Remove this cell's impulse, project against the rest.
                w -= cell.minv_st * p[i];
                let u = cell.s * w;
                let p_new = solve_cell_qp(&cell.h, &cell.h_chol, u, cell.cap);
                w += cell.minv_st * p_new;
                p[i] = p_new;
            }
        }
        // Refresh against incremental float drift.
        w = recompute_w(&p, &lc);
        last = measure_residuals(problem, &cells, &jc_red, &w, &p, &lc);
        if last.comp_max <= opts.tol && last.comp_dot <= opts.tol {
            return Ok(finish_solution(
                problem, opts, &cells, &jc_red, w, &p, lc, iterations,
            ));
        }
        // The iterate moved; allow revisiting earlier policies.
        if tried_policies.len() > 64 {
            tried_policies.clear();
        }
    }

    Err(Error::SolverNoConvergence {
        iterations,
        residual: last.comp_max.max(last.comp_dot),
    })
}

/// Read the regime of every block out of the current iterate. Cell regimes
/// come from re-solving each cell's exact projection at its current
/// environment, so the policy is consistent with the block fixed point.
fn policy_from_iterate(
    cells: &[CellCtx],
    jc_red: &[Vector3<f64>],
    w: &Vector3<f64>,
    p: &[Vector2<f64>],
    lc: &DVector<f64>,
    c: &DVector<f64>,
) -> Policy {
    let contacts = jc_red
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let a = row.dot(w) - c[r];
            lc[r] > a
        })
        .collect();
    let cellsv = cells
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            if cell.cap <= 0.0 {
                return CellRegime::Free;
            }
            let u = cell.s * w - cell.h * p[i];
            let best = solve_cell_qp(&cell.h, &cell.h_chol, u, cell.cap);
            let total = best.x.abs() + best.y.abs();
            if total < cell.cap * (1.0 - 1e-9) {
                CellRegime::Stick
            } else if best.y.abs() <= 1e-9 * cell.cap {
                CellRegime::Vertex {
                    axis: 0,
                    positive: best.x > 0.0,
                }
            } else if best.x.abs() <= 1e-9 * cell.cap {
                CellRegime::Vertex {
                    axis: 1,
                    positive: best.y > 0.0,
                }
            } else {
                CellRegime::Edge {
                    sx_pos: best.x > 0.0,
                    sy_pos: best.y > 0.0,
                }
            }
        })
        .collect();
    Policy {
        contacts,
        cells: cellsv,
    }
}

/// Solve the linear system implied by a policy. Unknowns are the body twist,
/// one multiplier per active contact, one budget split per edge cell, and a
/// full impulse per sticking cell; equations are the reduced momentum
/// balance plus the policy's equality rows. Returns `None` when the system
/// is numerically inconsistent.
fn solve_policy(
    policy: &Policy,
    cells: &[CellCtx],
    jc_red: &[Vector3<f64>],
    rhs3: &Vector3<f64>,
    mt: &Matrix3<f64>,
    c: &DVector<f64>,
) -> Option<(Vector3<f64>, Vec<Vector2<f64>>, DVector<f64>)> {
    let k = cells.len();
    let active: Vec<usize> = (0..jc_red.len()).filter(|&r| policy.contacts[r]).collect();
    let edges: Vec<usize> = (0..k)
        .filter(|&i| matches!(policy.cells[i], CellRegime::Edge { .. }))
        .collect();
    let sticks: Vec<usize> = (0..k)
        .filter(|&i| matches!(policy.cells[i], CellRegime::Stick))
        .collect();
    let n = 3 + active.len() + edges.len() + 2 * sticks.len();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);

    // Momentum rows: Mt w - sum(S' p) - sum(jc' lambda) = rhs3 + fixed.
    a.view_mut((0, 0), (3, 3)).copy_from(mt);
    for r in 0..3 {
        b[r] = rhs3[r];
    }
    let col_active = 3;
    let col_edge = 3 + active.len();
    let col_stick = col_edge + edges.len();
    for (j, &r) in active.iter().enumerate() {
        for row in 0..3 {
            a[(row, col_active + j)] = -jc_red[r][row];
        }
    }
    for (j, &i) in edges.iter().enumerate() {
        let CellRegime::Edge { sx_pos, sy_pos } = policy.cells[i] else {
            unreachable!()
        };
        let (sx, sy) = (sign(sx_pos), sign(sy_pos));
        let cap = cells[i].cap;
        // p = (0, cap sy) + alpha * cap (sx, -sy)
        let dir = cells[i].s.transpose() * Vector2::new(sx, -sy) * cap;
        let fixed = cells[i].s.transpose() * Vector2::new(0.0, sy) * cap;
        for row in 0..3 {
            a[(row, col_edge + j)] = -dir[row];
            b[row] += fixed[row];
        }
    }
    for (j, &i) in sticks.iter().enumerate() {
        let st = cells[i].s.transpose();
        for row in 0..3 {
            a[(row, col_stick + 2 * j)] = -st[(row, 0)];
            a[(row, col_stick + 2 * j + 1)] = -st[(row, 1)];
        }
    }
    for i in 0..k {
        if let CellRegime::Vertex { axis, positive } = policy.cells[i] {
            let d = vertex_dir(axis, positive);
            let fixed = cells[i].s.transpose() * d * cells[i].cap;
            for row in 0..3 {
                b[row] += fixed[row];
            }
        }
    }

    // Active contacts: jc w = c.
    let mut row = 3;
    for &r in &active {
        for ccol in 0..3 {
            a[(row, ccol)] = jc_red[r][ccol];
        }
        b[row] = c[r];
        row += 1;
    }
    // Edge cells: slip aligned with -(sx, sy): sy*slip_x - sx*slip_y = 0.
    for &i in &edges {
        let CellRegime::Edge { sx_pos, sy_pos } = policy.cells[i] else {
            unreachable!()
        };
        let (sx, sy) = (sign(sx_pos), sign(sy_pos));
        for ccol in 0..3 {
            a[(row, ccol)] = sy * cells[i].s[(0, ccol)] - sx * cells[i].s[(1, ccol)];
        }
        row += 1;
    }
    // Stick cells: slip pinned to zero.
    for &i in &sticks {
        for srow in 0..2 {
            for ccol in 0..3 {
                a[(row, ccol)] = cells[i].s[(srow, ccol)];
            }
            row += 1;
        }
    }
    debug_assert_eq!(row, n);

    let svd = a.clone().svd(true, true);
    let x = svd.solve(&b, 1e-13).ok()?;
    if ((&a * &x) - &b).amax() > 1e-9 * b.amax().max(1.0) {
        return None;
    }

    // Bound violations (negative multipliers, budget splits outside [0, 1],
    // stick impulses past the cap) do not abort: the raw candidate seeds the
    // next policy, and only a candidate that measures feasible is accepted.
    let w = Vector3::new(x[0], x[1], x[2]);
    let mut lc_out = DVector::zeros(jc_red.len());
    for (j, &r) in active.iter().enumerate() {
        lc_out[r] = x[col_active + j];
    }
    let mut p_out = vec![Vector2::zeros(); k];
    for (j, &i) in edges.iter().enumerate() {
        let CellRegime::Edge { sx_pos, sy_pos } = policy.cells[i] else {
            unreachable!()
        };
        let (sx, sy) = (sign(sx_pos), sign(sy_pos));
        let alpha = x[col_edge + j];
        let cap = cells[i].cap;
        p_out[i] = Vector2::new(cap * sx * alpha, cap * sy * (1.0 - alpha));
    }
    for (j, &i) in sticks.iter().enumerate() {
        p_out[i] = Vector2::new(x[col_stick + 2 * j], x[col_stick + 2 * j + 1]);
    }
    for i in 0..k {
        if let CellRegime::Vertex { axis, positive } = policy.cells[i] {
            p_out[i] = vertex_dir(axis, positive) * cells[i].cap;
        }
    }
    Some((w, p_out, lc_out))
}

fn sign(positive: bool) -> f64 {
    if positive {
        1.0
    } else {
        -1.0
    }
}

fn vertex_dir(axis: u8, positive: bool) -> Vector2<f64> {
    let s = sign(positive);
    if axis == 0 {
        Vector2::new(s, 0.0)
    } else {
        Vector2::new(0.0, s)
    }
}

#[derive(Default)]
struct ResidualAccumulator {
    comp_max: f64,
    comp_dot: f64,
}

/// Slip-variable choice consistent with the cone complementarity: positive
/// only when the cell's budget is exhausted (or zero), in which case it is
/// the infinity norm of the post-step slip.
fn eta_for(slip: Vector2<f64>, total: f64, cap: f64, tol: f64) -> f64 {
    if cap - total <= tol {
        slip.x.abs().max(slip.y.abs())
    } else {
        0.0
    }
}

fn measure_residuals(
    problem: &LcpProblem,
    cells: &[CellCtx],
    jc_red: &[Vector3<f64>],
    w: &Vector3<f64>,
    p: &[Vector2<f64>],
    lc: &DVector<f64>,
) -> ResidualAccumulator {
    let mut acc = ResidualAccumulator::default();
    let mut push = |s: f64, g: f64| {
        let m = s.min(g);
        acc.comp_max = acc.comp_max.max(m.abs());
        acc.comp_dot += s * g;
    };
    for (r, row) in jc_red.iter().enumerate() {
        let a = row.dot(w) - problem.c[r];
        push(a, lc[r]);
    }
    for (i, cell) in cells.iter().enumerate() {
        let slip = cell.s * w;
        let total = p[i].x.abs() + p[i].y.abs();
        let eta = eta_for(slip, total, cell.cap, 1e-12);
        let xi = cell.cap - total;
        let rays = [
            (slip.x + eta, p[i].x.max(0.0)),
            (-slip.x + eta, (-p[i].x).max(0.0)),
            (slip.y + eta, p[i].y.max(0.0)),
            (-slip.y + eta, (-p[i].y).max(0.0)),
        ];
        for (rho, lam) in rays {
            push(rho, lam);
        }
        push(xi, eta);
    }
    acc
}

#[allow(clippy::too_many_arguments)]
fn finish_solution(
    problem: &LcpProblem,
    opts: &SolveOptions,
    cells: &[CellCtx],
    jc_red: &[Vector3<f64>],
    w: Vector3<f64>,
    p: &[Vector2<f64>],
    lc: DVector<f64>,
    iterations: usize,
) -> LcpSolution {
    let k = problem.k;
    let nb = &problem.null_basis;
    let nc = problem.n_contacts();
    // Accepted candidates may carry sub-tolerance negative multipliers.
    let lc = lc.map(|v: f64| v.max(0.0));

    let mut v_next = DVector::zeros(3 * k);
    for r in 0..3 * k {
        let mut val = 0.0;
        for a in 0..3 {
            val += nb[(r, a)] * w[a];
        }
        v_next[r] = val;
    }

    let mut lambda_f = DVector::zeros(4 * k);
    let mut eta = DVector::zeros(k);
    let mut slack_friction = DVector::zeros(4 * k);
    let mut slack_cone = DVector::zeros(k);
    for (i, cell) in cells.iter().enumerate() {
        lambda_f[4 * i] = p[i].x.max(0.0);
        lambda_f[4 * i + 1] = (-p[i].x).max(0.0);
        lambda_f[4 * i + 2] = p[i].y.max(0.0);
        lambda_f[4 * i + 3] = (-p[i].y).max(0.0);
        let slip = cell.s * w;
        let total = p[i].x.abs() + p[i].y.abs();
        eta[i] = eta_for(slip, total, cell.cap, 1e-12);
        slack_cone[i] = cell.cap - total;
        slack_friction[4 * i] = slip.x + eta[i];
        slack_friction[4 * i + 1] = -slip.x + eta[i];
        slack_friction[4 * i + 2] = slip.y + eta[i];
        slack_friction[4 * i + 3] = -slip.y + eta[i];
    }
    let mut slack_contact = DVector::zeros(nc);
    for (r, row) in jc_red.iter().enumerate() {
        slack_contact[r] = row.dot(&w) - problem.c[r];
    }

    // Dynamics residual before equality forces: M v - kappa - Jc' lc - Jf' lf.
    let mut resid = DVector::zeros(3 * k);
    for r in 0..3 * k {
        resid[r] = problem.mass_diag[r] * v_next[r] + problem.q[r];
    }
    for r in 0..nc {
        if lc[r] != 0.0 {
            for cch in 0..3 * k {
                resid[cch] -= problem.jc[(r, cch)] * lc[r];
            }
        }
    }
    for i in 0..k {
        let f = Vector2::new(
            lambda_f[4 * i] - lambda_f[4 * i + 1],
            lambda_f[4 * i + 2] - lambda_f[4 * i + 3],
        );
        resid[3 * i + 1] -= f.x;
        resid[3 * i + 2] -= f.y;
    }

    let (lambda_e, dynamics_resid) = if opts.equality_multipliers && problem.n_equality() > 0 {
        // Je' lambda_e = resid, least squares through SVD.
        let jet = problem.je.transpose();
        let svd = jet.clone().svd(true, true);
        let le = svd
            .solve(&resid, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(problem.n_equality()));
        let full = (&resid - jet * &le).amax();
        (le, full)
    } else if problem.n_equality() == 0 {
        (DVector::zeros(0), resid.amax())
    } else {
        // Projected residual: what the reduced solve actually enforces.
        let mut proj = Vector3::zeros();
        for r in 0..3 * k {
            for a in 0..3 {
                proj[a] += nb[(r, a)] * resid[r];
            }
        }
        (DVector::zeros(0), proj.amax())
    };

    let equality = if problem.n_equality() > 0 {
        (&problem.je * &v_next).amax()
    } else {
        0.0
    };
    let comp = measure_residuals(problem, cells, jc_red, &w, p, &lc);

    LcpSolution {
        v_next,
        lambda_e,
        lambda_c: lc,
        lambda_f,
        eta,
        slack_contact,
        slack_friction,
        slack_cone,
        residuals: Residuals {
            dynamics: dynamics_resid,
            equality,
            comp_max: comp.comp_max,
            comp_dot: comp.comp_dot,
        },
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::square_cell_inertia;
    use approx::assert_relative_eq;
    use nalgebra::Vector2;

    fn single_cell(mass: f64, friction: f64) -> (CellGrid, ObjectParams) {
        let grid = CellGrid::rect(1, 1, 0.05).unwrap();
        let params = ObjectParams::new(
            vec![mass],
            vec![square_cell_inertia(mass, 0.05)],
            vec![friction],
        )
        .unwrap();
        (grid, params)
    }

    #[test]
    fn shapes_single_cell_no_contacts() {
        let (grid, params) = single_cell(1.0, 0.5);
        let state = State::identity(&grid);
        let vel = Velocity::zero(1);
        let force = DVector::zeros(3);
        let p = assemble(&grid, &params, &state, &vel, &force, 0.01).unwrap();
        assert_eq!(p.mass_diag.len(), 3);
        assert_eq!(p.jf.shape(), (4, 3));
        assert_eq!(p.e.shape(), (4, 1));
        assert_eq!(p.mu_f.len(), 1);
        assert_eq!(p.je.nrows(), 0);
        assert_eq!(p.jc.nrows(), 0);
    }

    #[test]
    fn two_cells_have_one_weld() {
        let grid = CellGrid::rect(2, 1, 0.05).unwrap();
        let params = ObjectParams::uniform(2, 1.0, 0.1, 0.05).unwrap();
        let state = State::identity(&grid);
        let p = assemble(
            &grid,
            &params,
            &state,
            &Velocity::zero(2),
            &DVector::zeros(6),
            0.01,
        )
        .unwrap();
        assert_eq!(p.je.nrows(), 3);
        let rank = p.je.clone().svd(false, false).rank(1e-10);
        assert_eq!(rank, 3);
    }

    #[test]
    fn q_is_minus_dt_force_at_rest() {
        let (grid, params) = single_cell(1.0, 0.0);
        let state = State::identity(&grid);
        let mut force = DVector::zeros(3);
        force[1] = 1.0;
        let p = assemble(&grid, &params, &state, &Velocity::zero(1), &force, 0.01).unwrap();
        assert_relative_eq!(p.q[1], -0.01, epsilon = 1e-15);
        assert_eq!(p.q[0], 0.0);
        assert_eq!(p.q[2], 0.0);
    }

    #[test]
    fn free_cell_newton_step() {
        let (grid, params) = single_cell(2.0, 0.0);
        let state = State::identity(&grid);
        let mut force = DVector::zeros(3);
        force[1] = 3.0;
        let p = assemble(&grid, &params, &state, &Velocity::zero(1), &force, 0.01).unwrap();
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_relative_eq!(sol.v_next[1], 0.01 * 3.0 / 2.0, epsilon = 1e-12);
        assert_relative_eq!(sol.v_next[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(sol.v_next[2], 0.0, epsilon = 1e-12);
        assert!(sol.lambda_f.amax() < 1e-12);
        assert!(sol.eta.amax() >= 0.0);
    }

    #[test]
    fn sliding_cell_coulomb_deceleration() {
        let (grid, params) = single_cell(1.0, 0.5);
        let state = State::identity(&grid);
        let vel = Velocity {
            twists: vec![crate::model::Twist::new(0.0, 0.0, 0.1)],
        };
        let p = assemble(&grid, &params, &state, &vel, &DVector::zeros(3), 0.01).unwrap();
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_relative_eq!(sol.v_next[2], 0.095, epsilon = 1e-9);
        // The cap is exhausted while sliding.
        assert!(sol.cap_active(0, 1e-12));
    }

    #[test]
    fn static_friction_holds_below_limit() {
        let (grid, params) = single_cell(1.0, 2.0);
        let state = State::identity(&grid);
        let mut force = DVector::zeros(3);
        force[1] = 1.0; // 1 N push against a 2 N budget
        let p = assemble(&grid, &params, &state, &Velocity::zero(1), &force, 0.01).unwrap();
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert!(sol.v_next.amax() < 1e-12, "stuck cell must not move");
        // lambda_f balances the applied impulse: net friction impulse is
        // -dt * force.
        let f = sol.friction_impulse(0);
        assert_relative_eq!(f.x, -0.01, epsilon = 1e-12);
        assert_relative_eq!(f.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn condensed_blocks_structure() {
        let grid = CellGrid::rect(2, 1, 0.05).unwrap();
        let params = ObjectParams::uniform(2, 1.0, 0.3, 0.05).unwrap();
        let state = State::identity(&grid);
        let p = assemble(
            &grid,
            &params,
            &state,
            &Velocity::zero(2),
            &DVector::zeros(6),
            0.01,
        )
        .unwrap();
        // Every ray aggregator column sums to 4.
        for i in 0..2 {
            assert_eq!(p.e.column(i).sum(), 4.0);
        }
        let f = p.condensed_f();
        let (nc, k) = (p.n_contacts(), p.k);
        // E block feeds eta into ray slacks; -E' charges rays against caps.
        assert_eq!(f.view((nc, nc + 4 * k), (4 * k, k)), p.e);
        assert_eq!(
            f.view((nc + 4 * k, nc), (k, 4 * k)),
            -p.e.transpose()
        );
        // Caps land in the constant offset.
        let m = p.condensed_m();
        assert_relative_eq!(m[nc + 4 * k], 0.3 * 0.01);
        // Friction rows of G are the friction Jacobian.
        let g = p.condensed_g();
        assert_eq!(g.view((nc, 0), (4 * k, 3 * k)), p.jf);
    }

    #[test]
    fn warm_start_converges_faster_or_equal() {
        let grid = CellGrid::rect(3, 3, 0.05).unwrap();
        let params = ObjectParams::uniform(9, 0.1, 0.08, 0.05).unwrap();
        let state = State::identity(&grid);
        let action = PushAction::new(1, Vector2::new(0.0, -0.025), Vector2::new(0.0, 1.0), 3.0, 1);
        let p = assemble_push(&grid, &params, &state, &Velocity::zero(9), Some(&action), 0.01)
            .unwrap();
        let cold = solve(&p, &SolveOptions::default()).unwrap();
        let warm = solve_warm(&p, &SolveOptions::default(), Some(&cold)).unwrap();
        assert!(warm.iterations <= cold.iterations);
        assert_relative_eq!(
            (&warm.v_next - &cold.v_next).amax(),
            0.0,
            epsilon = 1e-8
        );
    }

    #[test]
    fn invalid_mass_rejected() {
        let grid = CellGrid::rect(1, 1, 0.05).unwrap();
        let params = ObjectParams {
            masses: vec![0.0],
            inertias: vec![0.1],
            frictions: vec![0.0],
        };
        let state = State::identity(&grid);
        let err = assemble(
            &grid,
            &params,
            &state,
            &Velocity::zero(1),
            &DVector::zeros(3),
            0.01,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Invalid { .. }));
    }
}
