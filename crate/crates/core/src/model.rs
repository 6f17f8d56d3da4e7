//! Domain types shared across the engine: object geometry, physical
//! parameters, kinematic states, push actions, and trajectories.
//!
//! The object is a connected set of uniform square cells on a grid, welded
//! into one rigid body. Cell offsets are fixed in the body frame at
//! construction; world poses are derived, so rigidity is enforced exactly in
//! the stored data rather than through soft constraints. All types are
//! immutable value objects after construction and safe to share across
//! threads.

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Wrap an angle to the half-open interval (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let r = a.rem_euclid(two_pi); // [0, 2π)
    if r > std::f64::consts::PI {
        r - two_pi
    } else {
        r
    }
}

/// Shortest signed angle from `b` to `a`, in (−π, π].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

/// 2D cross product (z component of the 3D cross).
pub fn cross2(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Rotate a vector by angle `phi`.
pub fn rotate2(v: Vector2<f64>, phi: f64) -> Vector2<f64> {
    let (s, c) = phi.sin_cos();
    Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Moment of inertia of a uniform solid square cell about its center.
pub fn square_cell_inertia(mass: f64, cell_size: f64) -> f64 {
    mass * cell_size * cell_size / 6.0
}

/// The object: `k` rigidly joined square cells with geometry and adjacency.
///
/// `cell_centers` are body-frame offsets in meters. `adjacency` lists the
/// cell pairs sharing an edge; each pair is a fixed rigid joint.
/// `contact_pairs` optionally lists cell pairs subject to unilateral
/// non-penetration rows (the welds already prevent interpenetration among
/// joined cells, so this is empty for ordinary objects).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGrid {
    pub cell_size: f64,
    pub cell_centers: Vec<[f64; 2]>,
    pub adjacency: Vec<(usize, usize)>,
    #[serde(default)]
    pub contact_pairs: Vec<(usize, usize)>,
}

impl CellGrid {
    pub fn new(
        cell_size: f64,
        cell_centers: Vec<[f64; 2]>,
        adjacency: Vec<(usize, usize)>,
        contact_pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let grid = CellGrid {
            cell_size,
            cell_centers,
            adjacency,
            contact_pairs,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Build a grid from integer lattice coordinates. Adjacency is derived
    /// from 4-neighborhoods and the body frame is centered on the centroid.
    pub fn from_lattice(cell_size: f64, cells: &[(i32, i32)]) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::invalid("cells", "at least one cell required"));
        }
        let mut sorted: Vec<(i32, i32)> = cells.to_vec();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != cells.len() {
            return Err(Error::invalid("cells", "duplicate lattice coordinates"));
        }
        let mx = sorted.iter().map(|c| c.0 as f64).sum::<f64>() / sorted.len() as f64;
        let my = sorted.iter().map(|c| c.1 as f64).sum::<f64>() / sorted.len() as f64;
        let centers: Vec<[f64; 2]> = sorted
            .iter()
            .map(|&(x, y)| {
                [
                    (x as f64 - mx) * cell_size,
                    (y as f64 - my) * cell_size,
                ]
            })
            .collect();
        let index_of = |c: (i32, i32)| sorted.binary_search(&c).ok();
        let mut adjacency = Vec::new();
        for (i, &(x, y)) in sorted.iter().enumerate() {
            for nb in [(x + 1, y), (x, y + 1)] {
                if let Some(j) = index_of(nb) {
                    adjacency.push((i, j));
                }
            }
        }
        CellGrid::new(cell_size, centers, adjacency, Vec::new())
    }

    /// Full `w` × `h` rectangle of cells.
    pub fn rect(w: usize, h: usize, cell_size: f64) -> Result<Self> {
        let mut cells = Vec::with_capacity(w * h);
        for x in 0..w as i32 {
            for y in 0..h as i32 {
                cells.push((x, y));
            }
        }
        CellGrid::from_lattice(cell_size, &cells)
    }

    pub fn k(&self) -> usize {
        self.cell_centers.len()
    }

    pub fn center(&self, i: usize) -> Vector2<f64> {
        Vector2::new(self.cell_centers[i][0], self.cell_centers[i][1])
    }

    /// Mean of the body-frame cell centers.
    pub fn centroid(&self) -> Vector2<f64> {
        let mut c = Vector2::zeros();
        for p in &self.cell_centers {
            c += Vector2::new(p[0], p[1]);
        }
        c / self.k() as f64
    }

    /// Cells with fewer than four lattice neighbors.
    pub fn boundary_cells(&self) -> Vec<usize> {
        let mut degree = vec![0usize; self.k()];
        for &(i, j) in &self.adjacency {
            degree[i] += 1;
            degree[j] += 1;
        }
        (0..self.k()).filter(|&i| degree[i] < 4).collect()
    }

    /// Outward normal estimate for a boundary cell: mean of the directions
    /// toward missing lattice neighbors. `None` for interior cells.
    pub fn outward_normal(&self, i: usize) -> Option<Vector2<f64>> {
        let mut present = [false; 4];
        let dirs = [
            Vector2::new(1.0, 0.0),
            Vector2::new(-1.0, 0.0),
            Vector2::new(0.0, 1.0),
            Vector2::new(0.0, -1.0),
        ];
        for &(a, b) in &self.adjacency {
            let (from, to) = if a == i {
                (a, b)
            } else if b == i {
                (b, a)
            } else {
                continue;
            };
            let d = (self.center(to) - self.center(from)) / self.cell_size;
            for (slot, dir) in dirs.iter().enumerate() {
                if (d - dir).norm() < 1e-6 {
                    present[slot] = true;
                }
            }
        }
        let mut n = Vector2::zeros();
        for (slot, dir) in dirs.iter().enumerate() {
            if !present[slot] {
                n += dir;
            }
        }
        if n.norm() < 1e-12 {
            // Missing neighbors on opposite sides only; pick one.
            for (slot, dir) in dirs.iter().enumerate() {
                if !present[slot] {
                    return Some(*dir);
                }
            }
            None
        } else {
            Some(n.normalize())
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(Error::invalid("cell_centers", "k must be at least 1"));
        }
        if !(self.cell_size > 0.0) || !self.cell_size.is_finite() {
            return Err(Error::invalid("cell_size", "must be positive and finite"));
        }
        for &(i, j) in &self.adjacency {
            if i == j {
                return Err(Error::invalid("adjacency", format!("self pair ({i},{j})")));
            }
            if i >= k || j >= k {
                return Err(Error::invalid(
                    "adjacency",
                    format!("pair ({i},{j}) out of range for k={k}"),
                ));
            }
            let d = (self.center(i) - self.center(j)).norm();
            if (d - self.cell_size).abs() > 1e-9 * self.cell_size.max(1.0) {
                return Err(Error::invalid(
                    "adjacency",
                    format!("cells {i},{j} are {d} m apart, expected {}", self.cell_size),
                ));
            }
        }
        for &(i, j) in &self.contact_pairs {
            if i == j || i >= k || j >= k {
                return Err(Error::invalid(
                    "contact_pairs",
                    format!("pair ({i},{j}) invalid for k={k}"),
                ));
            }
        }
        // Connectivity: one rigid body.
        let mut seen = vec![false; k];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &(a, b) in &self.adjacency {
                let nb = if a == i {
                    b
                } else if b == i {
                    a
                } else {
                    continue;
                };
                if !seen[nb] {
                    seen[nb] = true;
                    stack.push(nb);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid(
                "adjacency",
                "grid is not connected; the object must be one rigid body",
            ));
        }
        Ok(())
    }
}

/// Physical parameters: per-cell mass (kg), moment of inertia (kg·m²), and
/// support-surface friction force magnitude (N). Friction magnitudes absorb
/// the normal force and the friction coefficient; gravity never appears
/// separately in the dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectParams {
    pub masses: Vec<f64>,
    pub inertias: Vec<f64>,
    pub frictions: Vec<f64>,
}

impl ObjectParams {
    pub fn new(masses: Vec<f64>, inertias: Vec<f64>, frictions: Vec<f64>) -> Result<Self> {
        let p = ObjectParams {
            masses,
            inertias,
            frictions,
        };
        p.validate(p.masses.len())?;
        Ok(p)
    }

    /// Identical parameters on every cell, inertia from the uniform square
    /// cell formula.
    pub fn uniform(k: usize, mass: f64, friction: f64, cell_size: f64) -> Result<Self> {
        ObjectParams::new(
            vec![mass; k],
            vec![square_cell_inertia(mass, cell_size); k],
            vec![friction; k],
        )
    }

    pub fn k(&self) -> usize {
        self.masses.len()
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.masses.len() != k || self.inertias.len() != k || self.frictions.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "params for k={k}: got {} masses, {} inertias, {} frictions",
                self.masses.len(),
                self.inertias.len(),
                self.frictions.len()
            )));
        }
        for (i, &m) in self.masses.iter().enumerate() {
            if !(m > 0.0) || !m.is_finite() {
                return Err(Error::invalid("masses", format!("cell {i}: {m}")));
            }
        }
        for (i, &v) in self.inertias.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid("inertias", format!("cell {i}: {v}")));
            }
        }
        for (i, &f) in self.frictions.iter().enumerate() {
            if !(f >= 0.0) || !f.is_finite() {
                return Err(Error::invalid("frictions", format!("cell {i}: {f}")));
            }
        }
        Ok(())
    }

    /// Diagonal of the 3k×3k mass matrix, ordered `[I_i, M_i, M_i]` per cell.
    pub fn mass_diagonal(&self) -> DVector<f64> {
        let k = self.k();
        let mut d = DVector::zeros(3 * k);
        for i in 0..k {
            d[3 * i] = self.inertias[i];
            d[3 * i + 1] = self.masses[i];
            d[3 * i + 2] = self.masses[i];
        }
        d
    }
}

/// One planar pose: position (m) and orientation (rad), world frame.
/// Serialized as the triple `[x, y, phi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, phi: f64) -> Self {
        Pose { x, y, phi }
    }

    pub fn pos(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

impl From<[f64; 3]> for Pose {
    fn from(a: [f64; 3]) -> Self {
        Pose::new(a[0], a[1], a[2])
    }
}

impl From<Pose> for [f64; 3] {
    fn from(p: Pose) -> Self {
        [p.x, p.y, p.phi]
    }
}

/// One planar twist: angular velocity (rad/s) first, matching the mass
/// matrix diagonal ordering `[I, M, M]`, then linear velocity (m/s).
/// Serialized as the triple `[omega, vx, vy]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Twist {
    pub omega: f64,
    pub vx: f64,
    pub vy: f64,
}

impl Twist {
    pub fn new(omega: f64, vx: f64, vy: f64) -> Self {
        Twist { omega, vx, vy }
    }

    pub fn zero() -> Self {
        Twist::new(0.0, 0.0, 0.0)
    }

    pub fn linear(&self) -> Vector2<f64> {
        Vector2::new(self.vx, self.vy)
    }
}

impl From<[f64; 3]> for Twist {
    fn from(a: [f64; 3]) -> Self {
        Twist::new(a[0], a[1], a[2])
    }
}

impl From<Twist> for [f64; 3] {
    fn from(t: Twist) -> Self {
        [t.omega, t.vx, t.vy]
    }
}

/// Per-cell world poses, one per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub poses: Vec<Pose>,
}

impl State {
    /// Cells at their body-frame offsets, orientation zero.
    pub fn identity(grid: &CellGrid) -> State {
        State::from_body_pose(grid, Vector2::zeros(), 0.0)
    }

    /// Rigid placement of the grid: body origin at `pos`, rotated by `theta`.
    pub fn from_body_pose(grid: &CellGrid, pos: Vector2<f64>, theta: f64) -> State {
        let poses = (0..grid.k())
            .map(|i| {
                let p = pos + rotate2(grid.center(i), theta);
                Pose::new(p.x, p.y, wrap_angle(theta))
            })
            .collect();
        State { poses }
    }

    pub fn k(&self) -> usize {
        self.poses.len()
    }

    /// Least-squares rigid body pose (translation of the body origin and
    /// rotation) explaining the cell positions. For k = 1 the rotation is the
    /// cell's own orientation.
    pub fn fit_body_pose(&self, grid: &CellGrid) -> (Vector2<f64>, f64) {
        let k = self.k();
        if k == 1 {
            let theta = self.poses[0].phi;
            let t = self.poses[0].pos() - rotate2(grid.center(0), theta);
            return (t, theta);
        }
        let mut pbar = Vector2::zeros();
        let mut bbar = Vector2::zeros();
        for i in 0..k {
            pbar += self.poses[i].pos();
            bbar += grid.center(i);
        }
        pbar /= k as f64;
        bbar /= k as f64;
        let mut dot = 0.0;
        let mut crs = 0.0;
        for i in 0..k {
            let b = grid.center(i) - bbar;
            let p = self.poses[i].pos() - pbar;
            dot += b.dot(&p);
            crs += cross2(b, p);
        }
        let theta = crs.atan2(dot);
        let t = pbar - rotate2(bbar, theta);
        (t, theta)
    }

    pub fn validate(&self, grid: &CellGrid, tol: f64) -> Result<()> {
        if self.k() != grid.k() {
            return Err(Error::DimensionMismatch(format!(
                "state has {} poses for a grid of k={}",
                self.k(),
                grid.k()
            )));
        }
        for (i, p) in self.poses.iter().enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() || !p.phi.is_finite() {
                return Err(Error::invalid("poses", format!("cell {i} not finite")));
            }
            if p.phi <= -std::f64::consts::PI || p.phi > std::f64::consts::PI {
                return Err(Error::invalid(
                    "poses",
                    format!("cell {i}: phi {} outside (-pi, pi]", p.phi),
                ));
            }
        }
        for i in 0..self.k() {
            for j in (i + 1)..self.k() {
                let dw = (self.poses[i].pos() - self.poses[j].pos()).norm();
                let db = (grid.center(i) - grid.center(j)).norm();
                if (dw - db).abs() > tol {
                    return Err(Error::invalid(
                        "poses",
                        format!(
                            "cells {i},{j}: world distance {dw} differs from body distance {db}"
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Per-cell twists, ordering matching the mass matrix diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Velocity {
    pub twists: Vec<Twist>,
}

impl Velocity {
    pub fn zero(k: usize) -> Velocity {
        Velocity {
            twists: vec![Twist::zero(); k],
        }
    }

    pub fn k(&self) -> usize {
        self.twists.len()
    }

    /// Flatten to the 3k generalized velocity vector.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(3 * self.k());
        for (i, t) in self.twists.iter().enumerate() {
            v[3 * i] = t.omega;
            v[3 * i + 1] = t.vx;
            v[3 * i + 2] = t.vy;
        }
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Velocity {
        assert_eq!(v.len() % 3, 0, "generalized velocity length must be 3k");
        Velocity {
            twists: (0..v.len() / 3)
                .map(|i| Twist::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]))
                .collect(),
        }
    }

    pub fn max_speed(&self) -> f64 {
        self.twists
            .iter()
            .map(|t| t.omega.abs().max(t.vx.abs()).max(t.vy.abs()))
            .fold(0.0, f64::max)
    }
}

/// A push: constant force applied at a body-fixed contact point on one cell.
///
/// `contact_point` is the offset from the contacted cell's center, expressed
/// in the body frame; it rotates with the object. `direction` is a unit
/// vector in the world frame; the pusher keeps its heading as the object
/// turns. `duration` counts timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushAction {
    pub contact_cell: usize,
    pub contact_point: [f64; 2],
    pub direction: [f64; 2],
    pub force_magnitude: f64,
    pub duration: usize,
}

impl PushAction {
    pub fn new(
        contact_cell: usize,
        contact_point: Vector2<f64>,
        direction: Vector2<f64>,
        force_magnitude: f64,
        duration: usize,
    ) -> Self {
        PushAction {
            contact_cell,
            contact_point: [contact_point.x, contact_point.y],
            direction: [direction.x, direction.y],
            force_magnitude,
            duration,
        }
    }

    pub fn contact_point_vec(&self) -> Vector2<f64> {
        Vector2::new(self.contact_point[0], self.contact_point[1])
    }

    pub fn direction_vec(&self) -> Vector2<f64> {
        Vector2::new(self.direction[0], self.direction[1])
    }

    /// Basic validity: cell in range, unit direction, non-negative finite
    /// force. Per-step trajectory entries may carry zero magnitude (coasting);
    /// scenario actions are additionally required to have positive force, see
    /// [`PushAction::validate_strict`].
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.contact_cell >= k {
            return Err(Error::invalid(
                "contact_cell",
                format!("{} out of range for k={k}", self.contact_cell),
            ));
        }
        let n = self.direction_vec().norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "direction",
                format!("norm {n}, expected a unit vector"),
            ));
        }
        if !(self.force_magnitude >= 0.0) || !self.force_magnitude.is_finite() {
            return Err(Error::invalid(
                "force_magnitude",
                format!("{}", self.force_magnitude),
            ));
        }
        if !self.contact_point_vec().norm().is_finite() {
            return Err(Error::invalid("contact_point", "not finite"));
        }
        Ok(())
    }

    pub fn validate_strict(&self, k: usize) -> Result<()> {
        self.validate(k)?;
        if self.force_magnitude <= 0.0 {
            return Err(Error::invalid("force_magnitude", "must be positive"));
        }
        if self.duration == 0 {
            return Err(Error::invalid("duration", "must be at least one step"));
        }
        Ok(())
    }
}

/// A recorded motion: `T+1` states and `T` per-step actions.
///
/// Each stored action covers exactly one timestep (`duration` is 1 for every
/// entry); multi-step pushes are expanded when the trajectory is produced.
/// Coasting steps carry `force_magnitude` 0.
///
/// Engine-generated trajectories also record the `T+1` velocities (starting
/// at zero). Externally captured data may omit them, in which case velocities
/// are recovered by backward differences; the recovery is exact up to the
/// engine's rigid re-projection, which is second order in the step rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<PushAction>,
    pub dt: f64,
    #[serde(default)]
    pub velocities: Option<Vec<Velocity>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self, grid: &CellGrid) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid("dt", format!("{}", self.dt)));
        }
        if self.states.len() != self.actions.len() + 1 {
            return Err(Error::DimensionMismatch(format!(
                "trajectory has {} states for {} actions; expected actions + 1",
                self.states.len(),
                self.actions.len()
            )));
        }
        for (t, s) in self.states.iter().enumerate() {
            if s.k() != grid.k() {
                return Err(Error::DimensionMismatch(format!(
                    "state {t} has {} poses for a grid of k={}",
                    s.k(),
                    grid.k()
                )));
            }
        }
        for a in &self.actions {
            a.validate(grid.k())?;
        }
        if let Some(vels) = &self.velocities {
            if vels.len() != self.states.len() {
                return Err(Error::DimensionMismatch(format!(
                    "trajectory has {} velocities for {} states",
                    vels.len(),
                    self.states.len()
                )));
            }
            for (t, v) in vels.iter().enumerate() {
                if v.k() != grid.k() {
                    return Err(Error::DimensionMismatch(format!(
                        "velocity {t} has {} twists for a grid of k={}",
                        v.k(),
                        grid.k()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Observed per-step velocities: the recorded ones when present,
    /// otherwise backward differences with `v_0 = 0`.
    pub fn observed_velocities(&self) -> Vec<Velocity> {
        if let Some(vels) = &self.velocities {
            return vels.clone();
        }
        let mut out = Vec::with_capacity(self.states.len());
        out.push(Velocity::zero(self.states[0].k()));
        for t in 1..self.states.len() {
            let prev = &self.states[t - 1];
            let cur = &self.states[t];
            let twists = (0..cur.k())
                .map(|i| {
                    Twist::new(
                        angle_diff(cur.poses[i].phi, prev.poses[i].phi) / self.dt,
                        (cur.poses[i].x - prev.poses[i].x) / self.dt,
                        (cur.poses[i].y - prev.poses[i].y) / self.dt,
                    )
                })
                .collect();
            out.push(Velocity { twists });
        }
        out
    }
}

/// Generalized force vector (length 3k) produced by a push at the given
/// state: torque and force on the contacted cell's rows, zeros elsewhere.
pub fn generalized_force(action: &PushAction, state: &State, k: usize) -> Result<DVector<f64>> {
    if action.contact_cell >= k {
        return Err(Error::invalid(
            "contact_cell",
            format!("{} out of range for k={k}", action.contact_cell),
        ));
    }
    if state.k() != k {
        return Err(Error::DimensionMismatch(format!(
            "state has {} poses, expected k={k}",
            state.k()
        )));
    }
    let mut f = DVector::zeros(3 * k);
    let i = action.contact_cell;
    let force = action.direction_vec() * action.force_magnitude;
    let lever = rotate2(action.contact_point_vec(), state.poses[i].phi);
    f[3 * i] = cross2(lever, force);
    f[3 * i + 1] = force.x;
    f[3 * i + 2] = force.y;
    Ok(f)
}

/// Mean Euclidean distance between corresponding cell centers (meters).
/// Orientation is excluded: the welds make per-cell orientation redundant.
pub fn pose_error(predicted: &State, observed: &State) -> Result<f64> {
    if predicted.k() != observed.k() {
        return Err(Error::DimensionMismatch(format!(
            "pose_error over {} vs {} cells",
            predicted.k(),
            observed.k()
        )));
    }
    let k = predicted.k();
    let total: f64 = (0..k)
        .map(|i| (predicted.poses[i].pos() - observed.poses[i].pos()).norm())
        .sum();
    Ok(total / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn wrap_angle_range() {
        for a in [-10.0, -std::f64::consts::PI, 0.0, 3.0, 100.0, -0.1] {
            let w = wrap_angle(a);
            assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI, "{a} -> {w}");
        }
        assert_relative_eq!(wrap_angle(std::f64::consts::PI), std::f64::consts::PI);
        assert_relative_eq!(wrap_angle(-std::f64::consts::PI), std::f64::consts::PI);
        assert_relative_eq!(wrap_angle(3.0 * std::f64::consts::PI), std::f64::consts::PI);
    }

    #[test]
    fn lattice_grid_construction() {
        let g = CellGrid::rect(3, 3, 0.02).unwrap();
        assert_eq!(g.k(), 9);
        assert_eq!(g.adjacency.len(), 12);
        g.validate().unwrap();
        // Centered body frame.
        assert!(g.centroid().norm() < 1e-12);
    }

    #[test]
    fn disconnected_grid_rejected() {
        let err = CellGrid::from_lattice(0.02, &[(0, 0), (2, 0)]).unwrap_err();
        assert!(matches!(err, Error::Invalid { .. }));
    }

    #[test]
    fn bad_spacing_rejected() {
        let err = CellGrid::new(
            0.02,
            vec![[0.0, 0.0], [0.05, 0.0]],
            vec![(0, 1)],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Invalid { .. }));
    }

    #[test]
    fn params_validation() {
        assert!(ObjectParams::new(vec![1.0], vec![0.1], vec![0.0]).is_ok());
        assert!(ObjectParams::new(vec![0.0], vec![0.1], vec![0.0]).is_err());
        assert!(ObjectParams::new(vec![1.0], vec![-0.1], vec![0.0]).is_err());
        assert!(ObjectParams::new(vec![1.0], vec![0.1], vec![-0.01]).is_err());
    }

    #[test]
    fn mass_diagonal_ordering() {
        let p = ObjectParams::new(vec![2.0, 3.0], vec![0.5, 0.7], vec![0.1, 0.2]).unwrap();
        let d = p.mass_diagonal();
        assert_eq!(d.as_slice(), &[0.5, 2.0, 2.0, 0.7, 3.0, 3.0]);
    }

    #[test]
    fn force_through_center() {
        let g = CellGrid::rect(1, 1, 0.02).unwrap();
        let s = State::identity(&g);
        let a = PushAction::new(0, Vector2::zeros(), Vector2::new(1.0, 0.0), 1.0, 1);
        let f = generalized_force(&a, &s, 1).unwrap();
        assert_eq!(f.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn force_with_lever_arm() {
        let g = CellGrid::rect(1, 1, 0.2).unwrap();
        let s = State::identity(&g);
        let a = PushAction::new(0, Vector2::new(0.0, 0.05), Vector2::new(1.0, 0.0), 2.0, 1);
        let f = generalized_force(&a, &s, 1).unwrap();
        assert_relative_eq!(f[0], -0.1, epsilon = 1e-15);
        assert_relative_eq!(f[1], 2.0);
        assert_relative_eq!(f[2], 0.0);
    }

    #[test]
    fn zero_magnitude_force_is_zero_vector() {
        let g = CellGrid::rect(2, 1, 0.02).unwrap();
        let s = State::identity(&g);
        let a = PushAction::new(1, Vector2::new(0.01, 0.0), Vector2::new(0.0, 1.0), 0.0, 1);
        let f = generalized_force(&a, &s, 2).unwrap();
        assert!(f.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn force_only_touches_contact_cell_rows() {
        let g = CellGrid::rect(3, 1, 0.02).unwrap();
        let s = State::identity(&g);
        let a = PushAction::new(1, Vector2::new(0.0, 0.01), Vector2::new(0.0, -1.0), 3.0, 1);
        let f = generalized_force(&a, &s, 3).unwrap();
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 0.0);
        assert_eq!(f[2], 0.0);
        assert!(f[3] != 0.0 || f[4] != 0.0 || f[5] != 0.0);
        assert_eq!(f[6], 0.0);
        assert_eq!(f[7], 0.0);
        assert_eq!(f[8], 0.0);
    }

    #[test]
    fn force_rotates_with_body_lever() {
        // Cell rotated 90 degrees: body-frame contact point (d, 0) moves to
        // world (0, d), so an x push gains torque -d*Fx... lever (0,d), F (1,0):
        // tau = 0*0 - d*1 = -d.
        let g = CellGrid::rect(1, 1, 0.2).unwrap();
        let s = State::from_body_pose(&g, Vector2::zeros(), std::f64::consts::FRAC_PI_2);
        let a = PushAction::new(0, Vector2::new(0.05, 0.0), Vector2::new(1.0, 0.0), 1.0, 1);
        let f = generalized_force(&a, &s, 1).unwrap();
        assert_relative_eq!(f[0], -0.05, epsilon = 1e-12);
    }

    #[test]
    fn contact_cell_out_of_range() {
        let g = CellGrid::rect(1, 1, 0.02).unwrap();
        let s = State::identity(&g);
        let a = PushAction::new(5, Vector2::zeros(), Vector2::new(1.0, 0.0), 1.0, 1);
        assert!(generalized_force(&a, &s, 1).is_err());
    }

    #[test]
    fn pose_error_examples() {
        let g = CellGrid::rect(2, 1, 0.02).unwrap();
        let s = State::identity(&g);
        assert_eq!(pose_error(&s, &s).unwrap(), 0.0);

        // Every cell translated by (0.03, 0.04): 3-4-5 triangle.
        let mut t = s.clone();
        for p in &mut t.poses {
            p.x += 0.03;
            p.y += 0.04;
        }
        assert_relative_eq!(pose_error(&t, &s).unwrap(), 0.05, epsilon = 1e-12);

        // One of two cells offset by 0.02, the other exact: mean 0.01.
        let mut u = s.clone();
        u.poses[0].x += 0.02;
        assert_relative_eq!(pose_error(&u, &s).unwrap(), 0.01, epsilon = 1e-12);
    }

    #[test]
    fn pose_error_dimension_mismatch() {
        let g1 = CellGrid::rect(1, 1, 0.02).unwrap();
        let g2 = CellGrid::rect(2, 1, 0.02).unwrap();
        assert!(pose_error(&State::identity(&g1), &State::identity(&g2)).is_err());
    }

    #[test]
    fn fit_body_pose_roundtrip() {
        let g = CellGrid::rect(3, 2, 0.02).unwrap();
        let s = State::from_body_pose(&g, Vector2::new(0.3, -0.1), 0.7);
        let (t, theta) = s.fit_body_pose(&g);
        assert_relative_eq!(theta, 0.7, epsilon = 1e-12);
        assert_relative_eq!(t.x, 0.3, epsilon = 1e-12);
        assert_relative_eq!(t.y, -0.1, epsilon = 1e-12);
        s.validate(&g, 1e-9).unwrap();
    }

    #[test]
    fn observed_velocities_match_symplectic_update() {
        let g = CellGrid::rect(1, 1, 0.02).unwrap();
        let dt = 0.01;
        let s0 = State::identity(&g);
        let mut s1 = s0.clone();
        s1.poses[0].x += 0.05 * dt;
        let coast = PushAction::new(0, Vector2::zeros(), Vector2::new(1.0, 0.0), 0.0, 1);
        let traj = Trajectory {
            states: vec![s0, s1],
            actions: vec![coast],
            dt,
            velocities: None,
        };
        let v = traj.observed_velocities();
        assert_eq!(v[0].twists[0], Twist::zero());
        assert_relative_eq!(v[1].twists[0].vx, 0.05, epsilon = 1e-12);
    }
}
