//! Synthetic ground-truth scenarios, dataset files, and train/test splits.
//!
//! Archetypes mirror common table-top objects: a hammer (heavy head), a
//! ranch wrench (floating handle with zero surface friction), a crimp tool
//! (heavy, grippy head), an open book (thick and thin halves), a toolbox
//! (heavy left side), and a uniform slab. Ground truth is produced by this
//! crate's own engine; the dataset format is open to externally captured
//! trajectories as well.
//!
//! Friction magnitudes follow the physical convention `mu * g * m_i` for
//! cells touching the surface, so mass contrasts show up in the friction
//! distribution exactly the way a real object's weight does.

use std::path::Path;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, DEFAULT_DT};
use crate::model::{
    rotate2, square_cell_inertia, CellGrid, ObjectParams, PushAction, State, Trajectory,
};
use crate::par;
use crate::{Error, Result};

/// Dataset file schema version written and accepted by this build.
pub const SCHEMA_VERSION: u32 = 1;

/// Default cell edge length (m).
pub const DEFAULT_CELL_SIZE: f64 = 0.02;

/// Default number of training pushes.
pub const DEFAULT_TRAIN_ACTIONS: usize = 4;

/// Default number of held-out test pushes.
pub const DEFAULT_TEST_ACTIONS: usize = 12;

/// Default cell-count target; archetype shapes land within 70–100 cells.
pub const DEFAULT_K_TARGET: usize = 84;

pub const ARCHETYPES: [&str; 6] = ["hammer", "ranch", "crimp", "book", "toolbox", "uniform"];

/// Gravitational acceleration used to turn cell weight into friction force.
const GRAVITY: f64 = 9.81;

/// Qualitative role of a cell within its archetype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellTag {
    Plain,
    Head,
    Handle,
    Floating,
    ThickSide,
    ThinSide,
    HeavySide,
    LightSide,
}

/// A synthetic identification problem: geometry, ground-truth parameters,
/// and disjoint train/test push sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub archetype: String,
    pub seed: u64,
    pub dt: f64,
    pub grid: CellGrid,
    pub true_params: ObjectParams,
    pub cell_tags: Vec<CellTag>,
    pub train_actions: Vec<PushAction>,
    pub test_actions: Vec<PushAction>,
}

/// Generated (or externally captured) trajectories with their scenario
/// metadata and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema_version: u32,
    /// Generator name and version.
    pub generator: String,
    pub seed: u64,
    pub archetype: String,
    pub dt: f64,
    pub grid: CellGrid,
    pub cell_tags: Vec<CellTag>,
    /// Ground truth when the data is synthetic; absent for captured data.
    pub true_params: Option<ObjectParams>,
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

struct ShapeSpec {
    cells: Vec<(i32, i32)>,
    tags: Vec<CellTag>,
}

/// Rectangle dimensions nearest the target count with the given aspect.
fn rect_dims(k_target: usize, aspect: f64) -> (usize, usize) {
    let mut best = (1, k_target.max(1));
    let mut best_score = f64::INFINITY;
    for w in 1..=k_target.max(1) {
        let h = ((k_target as f64) / w as f64).round().max(1.0) as usize;
        let count = w * h;
        let a = w as f64 / h as f64;
        let score =
            (count as f64 - k_target as f64).abs() + 3.0 * (a.ln() - aspect.ln()).abs();
        if score < best_score {
            best_score = score;
            best = (w, h);
        }
    }
    best
}

fn rect_cells(w: usize, h: usize) -> Vec<(i32, i32)> {
    let mut cells = Vec::with_capacity(w * h);
    for x in 0..w as i32 {
        for y in 0..h as i32 {
            cells.push((x, y));
        }
    }
    cells
}

fn shape_uniform(k_target: usize) -> ShapeSpec {
    let (w, h) = rect_dims(k_target, 1.0);
    let cells = rect_cells(w, h);
    let tags = vec![CellTag::Plain; cells.len()];
    ShapeSpec { cells, tags }
}

/// Split a rectangle into left/right halves with the given tags.
fn shape_split_rect(k_target: usize, left: CellTag, right: CellTag, aspect: f64) -> ShapeSpec {
    let (w, h) = rect_dims(k_target, aspect);
    let w = w.max(2);
    let cells = rect_cells(w, h);
    let tags = cells
        .iter()
        .map(|&(x, _)| if (x as usize) < w / 2 { left } else { right })
        .collect();
    ShapeSpec { cells, tags }
}

/// Wide head on top of a centered handle.
fn shape_hammer(k_target: usize) -> ShapeSpec {
    let mut best: Option<(f64, (usize, usize, usize, usize))> = None;
    for head_w in 3..=15usize {
        for head_h in 1..=head_w {
            for handle_w in 1..=3usize {
                if head_w < handle_w + 2 {
                    continue;
                }
                for handle_h in head_h.max(1)..=30 {
                    let count = head_w * head_h + handle_w * handle_h;
                    let err = (count as f64 - k_target as f64).abs();
                    // Prefer hammer-like proportions: handle about twice the
                    // head height, head wider than tall.
                    let shape_penalty = (handle_h as f64 / head_h as f64 - 2.5).abs() * 0.3
                        + (head_w as f64 / head_h.max(1) as f64 - 2.5).abs() * 0.3;
                    let score = err * 10.0 + shape_penalty;
                    if best.map(|(s, _)| score < s).unwrap_or(true) {
                        best = Some((score, (head_w, head_h, handle_w, handle_h)));
                    }
                }
            }
        }
    }
    let (_, (head_w, head_h, handle_w, handle_h)) = best.unwrap();
    let mut cells = Vec::new();
    let mut tags = Vec::new();
    let handle_x0 = (head_w - handle_w) / 2;
    for x in 0..head_w as i32 {
        for y in 0..head_h as i32 {
            cells.push((x, handle_h as i32 + y));
            tags.push(CellTag::Head);
        }
    }
    for x in 0..handle_w as i32 {
        for y in 0..handle_h as i32 {
            cells.push((handle_x0 as i32 + x, y));
            tags.push(CellTag::Handle);
        }
    }
    ShapeSpec { cells, tags }
}

/// Two end blocks joined by a floating middle bar.
fn shape_ranch(k_target: usize) -> ShapeSpec {
    let mut best: Option<(f64, (usize, usize, usize))> = None;
    for end in 2..=8usize {
        for bar_w in 1..=2usize {
            if bar_w >= end {
                continue;
            }
            for bar_len in 1..=30usize {
                let count = 2 * end * end + bar_w * bar_len;
                let err = (count as f64 - k_target as f64).abs();
                let shape_penalty = (bar_len as f64 / end as f64 - 2.0).abs() * 0.3;
                let score = err * 10.0 + shape_penalty;
                if best.map(|(s, _)| score < s).unwrap_or(true) {
                    best = Some((score, (end, bar_w, bar_len)));
                }
            }
        }
    }
    let (_, (end, bar_w, bar_len)) = best.unwrap();
    let mut cells = Vec::new();
    let mut tags = Vec::new();
    let bar_y0 = ((end - bar_w) / 2) as i32;
    for x in 0..end as i32 {
        for y in 0..end as i32 {
            cells.push((x, y));
            tags.push(CellTag::Head);
        }
    }
    for x in 0..bar_len as i32 {
        for y in 0..bar_w as i32 {
            cells.push((end as i32 + x, bar_y0 + y));
            tags.push(CellTag::Floating);
        }
    }
    for x in 0..end as i32 {
        for y in 0..end as i32 {
            cells.push(((end + bar_len) as i32 + x, y));
            tags.push(CellTag::Head);
        }
    }
    ShapeSpec { cells, tags }
}

/// Blocky head with a straight handle, like a crimping tool. Shares the
/// hammer topology; the head additionally gets a grip multiplier on its
/// friction coefficient when parameters are synthesized.
fn shape_crimp(k_target: usize) -> ShapeSpec {
    shape_hammer(k_target)
}

fn shape_for(name: &str, k_target: usize) -> Result<ShapeSpec> {
    match name {
        "uniform" => Ok(shape_uniform(k_target)),
        "book" => Ok(shape_split_rect(
            k_target,
            CellTag::ThickSide,
            CellTag::ThinSide,
            1.3,
        )),
        "toolbox" => Ok(shape_split_rect(
            k_target,
            CellTag::HeavySide,
            CellTag::LightSide,
            1.6,
        )),
        "hammer" => Ok(shape_hammer(k_target)),
        "crimp" => Ok(shape_crimp(k_target)),
        "ranch" => Ok(shape_ranch(k_target)),
        other => Err(Error::UnknownArchetype {
            name: other.to_string(),
            known: ARCHETYPES.join(", "),
        }),
    }
}

/// Relative density and friction-coefficient multipliers per tag, plus
/// whether the cell touches the surface.
fn tag_properties(tag: CellTag) -> (f64, f64, bool) {
    match tag {
        CellTag::Plain => (1.0, 1.0, true),
        CellTag::Head => (3.5, 1.0, true),
        CellTag::Handle => (1.0, 1.0, true),
        CellTag::Floating => (1.0, 0.0, false),
        CellTag::ThickSide => (2.2, 1.0, true),
        CellTag::ThinSide => (1.0, 1.0, true),
        CellTag::HeavySide => (2.8, 1.0, true),
        CellTag::LightSide => (1.0, 1.0, true),
    }
}

/// Build a deterministic synthetic scenario for one archetype.
///
/// The default `k_target` lands within the 70–100 cell range; any target in
/// `[4, 200]` is accepted and matched as closely as the shape allows. Masses
/// are normalized so the object totals 0.6–1.0 kg, and friction magnitudes
/// are the cell weights times a common coefficient; a crimp's head gets an
/// extra grip factor.
pub fn make_archetype(name: &str, k_target: usize, seed: u64) -> Result<Scenario> {
    if !(4..=200).contains(&k_target) {
        return Err(Error::invalid(
            "k_target",
            format!("{k_target} outside [4, 200]"),
        ));
    }
    let spec = shape_for(name, k_target)?;
    let grid = CellGrid::from_lattice(DEFAULT_CELL_SIZE, &spec.cells)?;
    // from_lattice sorts cells; reorder tags to match.
    let mut sorted_cells = spec.cells.clone();
    sorted_cells.sort();
    let tags: Vec<CellTag> = sorted_cells
        .iter()
        .map(|c| spec.tags[spec.cells.iter().position(|x| x == c).unwrap()])
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total_mass = rng.gen_range(0.6..1.0);
    let mu_coef = rng.gen_range(0.25..0.35);
    let crimp_grip = if name == "crimp" { 1.6 } else { 1.0 };

    let mut weights: Vec<f64> = tags
        .iter()
        .map(|&t| tag_properties(t).0 * rng.gen_range(0.95..1.05))
        .collect();
    let wsum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w *= total_mass / wsum;
    }
    let masses = weights;
    let inertias: Vec<f64> = masses
        .iter()
        .map(|&m| square_cell_inertia(m, grid.cell_size))
        .collect();
    let frictions: Vec<f64> = masses
        .iter()
        .zip(&tags)
        .map(|(&m, &t)| {
            let (_, mu_mult, contact) = tag_properties(t);
            if !contact {
                return 0.0;
            }
            let grip = if t == CellTag::Head { crimp_grip } else { 1.0 };
            mu_coef * mu_mult * grip * GRAVITY * m
        })
        .collect();
    let true_params = ObjectParams::new(masses, inertias, frictions)?;

    let train_actions = sample_pushes(&grid, &mut rng, DEFAULT_TRAIN_ACTIONS);
    let test_actions = sample_pushes(&grid, &mut rng, DEFAULT_TEST_ACTIONS);

    let scenario = Scenario {
        archetype: name.to_string(),
        seed,
        dt: DEFAULT_DT,
        grid,
        true_params,
        cell_tags: tags,
        train_actions,
        test_actions,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Random pushes: a boundary cell, its exposed face midpoint (with a little
/// tangential jitter), an inward direction within ±30 degrees of the face
/// normal, 1–5 N, 20–50 steps.
fn sample_pushes(grid: &CellGrid, rng: &mut ChaCha8Rng, count: usize) -> Vec<PushAction> {
    let boundary = grid.boundary_cells();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let cell = boundary[rng.gen_range(0..boundary.len())];
        let outward = grid
            .outward_normal(cell)
            .unwrap_or_else(|| Vector2::new(1.0, 0.0));
        // Snap to the dominant cardinal axis to pick the exposed face.
        let face = if outward.x.abs() >= outward.y.abs() {
            Vector2::new(outward.x.signum(), 0.0)
        } else {
            Vector2::new(0.0, outward.y.signum())
        };
        let tangent = Vector2::new(-face.y, face.x);
        let s = grid.cell_size;
        let contact_point =
            face * (s / 2.0) + tangent * rng.gen_range(-0.25 * s..0.25 * s);
        let angle = rng.gen_range(-std::f64::consts::FRAC_PI_6..std::f64::consts::FRAC_PI_6);
        let direction = rotate2(-face, angle);
        let magnitude = rng.gen_range(1.0..5.0);
        let duration = rng.gen_range(20..=50);
        out.push(PushAction::new(
            cell,
            contact_point,
            direction,
            magnitude,
            duration,
        ));
    }
    out
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.true_params.validate(self.grid.k())?;
        if self.cell_tags.len() != self.grid.k() {
            return Err(Error::DimensionMismatch(format!(
                "{} cell tags for k={}",
                self.cell_tags.len(),
                self.grid.k()
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid("dt", "must be positive"));
        }
        for a in self.train_actions.iter().chain(&self.test_actions) {
            a.validate_strict(self.grid.k())?;
        }
        for tr in &self.train_actions {
            if self.test_actions.contains(tr) {
                return Err(Error::invalid(
                    "test_actions",
                    "train and test actions must be disjoint",
                ));
            }
        }
        Ok(())
    }

    /// Initial object placement shared by every rollout.
    pub fn initial_state(&self) -> State {
        State::identity(&self.grid)
    }
}

/// Roll out the ground-truth parameters on every train and test action.
pub fn generate_data(scenario: &Scenario) -> Result<Dataset> {
    scenario.validate()?;
    let s0 = scenario.initial_state();
    let run = |actions: &[PushAction]| -> Result<Vec<Trajectory>> {
        let results = par::map_collect(actions, |a| {
            dynamics::rollout(
                &scenario.grid,
                &scenario.true_params,
                &s0,
                std::slice::from_ref(a),
                scenario.dt,
            )
        });
        let mut out = Vec::with_capacity(results.len());
        for (i, r) in results.into_iter().enumerate() {
            out.push(r.map_err(|e| match e {
                Error::SimulationFailed { step, source, .. } => Error::SimulationFailed {
                    action_index: i,
                    step,
                    source,
                },
                other => other,
            })?);
        }
        Ok(out)
    };
    let train = run(&scenario.train_actions)?;
    let test = run(&scenario.test_actions)?;
    let dataset = Dataset {
        schema_version: SCHEMA_VERSION,
        generator: format!("cellpush {}", env!("CARGO_PKG_VERSION")),
        seed: scenario.seed,
        archetype: scenario.archetype.clone(),
        dt: scenario.dt,
        grid: scenario.grid.clone(),
        cell_tags: scenario.cell_tags.clone(),
        true_params: Some(scenario.true_params.clone()),
        train,
        test,
    };
    dataset.validate()?;
    Ok(dataset)
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        self.grid.validate()?;
        if self.cell_tags.len() != self.grid.k() {
            return Err(Error::DimensionMismatch(format!(
                "{} cell_tags for grid of k={}",
                self.cell_tags.len(),
                self.grid.k()
            )));
        }
        if let Some(p) = &self.true_params {
            p.validate(self.grid.k())?;
        }
        for (name, set) in [("train", &self.train), ("test", &self.test)] {
            for (i, traj) in set.iter().enumerate() {
                traj.validate(&self.grid).map_err(|e| {
                    Error::Parse(format!("{name} trajectory {i}: {e}"))
                })?;
            }
        }
        Ok(())
    }
}

/// Write a dataset as a pretty-printed JSON document. Numbers round-trip
/// losslessly (shortest representation that parses back to the same f64).
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(dataset)
        .map_err(|e| Error::Parse(format!("serialize: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Read and validate a dataset file. The schema version is checked before
/// anything else so version mismatches fail with a clear error rather than
/// a field-level parse failure.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Parse("missing schema_version".into()))? as u32;
    if found != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    let dataset: Dataset = serde_json::from_value(value)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    dataset.validate()?;
    Ok(dataset)
}
