//! Pairwise bond forces, the semi-discrete operator and bond damage.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PdError, Result};
use crate::geometry::{build_neighbor_list, Dim, NeighborList, PointCloud, Vec3};

/// Fraction of the reference bond length below which a deformed bond counts as collapsed.
pub const COLLAPSE_RATIO: f64 = 1e-12;

const POISSON_TOLERANCE: f64 = 1e-6;

/// Points per parallel task when evaluating the operator.
const PAR_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForceLaw {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Material {
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub density: f64,
}

impl Material {
    /// Bond-based models fix the Poisson ratio: 1/3 in 2D, 1/4 in 3D.
    pub fn required_poisson(dim: Dim) -> f64 {
        match dim {
            Dim::Two => 1.0 / 3.0,
            Dim::Three => 0.25,
        }
    }

    pub fn problems(&self, dim: Dim) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(self.youngs_modulus > 0.0) {
            out.push(("youngs_modulus", "must be positive".to_string()));
        }
        if !(self.density > 0.0) {
            out.push(("density", "must be positive".to_string()));
        }
        let nu = Self::required_poisson(dim);
        if (self.poisson_ratio - nu).abs() > POISSON_TOLERANCE {
            out.push((
                "poisson_ratio",
                format!(
                    "bond-based peridynamics requires nu = {} in {}D, got {}",
                    if dim == Dim::Two { "1/3" } else { "1/4" },
                    dim.count(),
                    self.poisson_ratio
                ),
            ));
        }
        out
    }
}

/// Micro-modulus from energy equivalence with classical elasticity.
pub fn calibrate_alpha(material: &Material, horizon: f64, dim: Dim, thickness: Option<f64>) -> Result<f64> {
    if let Some((key, msg)) = material.problems(dim).into_iter().next() {
        return Err(PdError::Invalid(format!("material.{key}: {msg}")));
    }
    if !(horizon > 0.0) {
        return Err(PdError::Invalid("horizon must be positive".into()));
    }
    let e = material.youngs_modulus;
    match dim {
        Dim::Two => match thickness {
            Some(d) if d > 0.0 => Ok(9.0 * e / (PI * horizon.powi(3) * d)),
            _ => Err(PdError::Invalid("2D micro-modulus needs a positive thickness".into())),
        },
        Dim::Three => Ok(12.0 * e / (PI * horizon.powi(4))),
    }
}

/// Relative elongation of a bond with reference vector `xi` and relative displacement `eta`.
pub fn bond_stretch(xi: &Vec3, eta: &Vec3) -> f64 {
    let l = xi.norm();
    ((xi + eta).norm() - l) / l
}

pub fn pairwise_force_linear(xi: &Vec3, eta: &Vec3, alpha: f64) -> Vec3 {
    linear_force(xi, xi.norm(), eta, alpha)
}

/// Returns `None` when the deformed bond has collapsed.
pub fn pairwise_force_nonlinear(xi: &Vec3, eta: &Vec3, alpha: f64) -> Option<Vec3> {
    nonlinear_force(xi, xi.norm(), eta, alpha)
}

#[inline]
fn linear_force(xi: &Vec3, length: f64, eta: &Vec3, alpha: f64) -> Vec3 {
    xi * (alpha * xi.dot(eta) / (length * length * length))
}

#[inline]
fn nonlinear_force(xi: &Vec3, length: f64, eta: &Vec3, alpha: f64) -> Option<Vec3> {
    let y = xi + eta;
    let ly = y.norm();
    if ly < COLLAPSE_RATIO * length {
        return None;
    }
    let s = (ly - length) / length;
    Some(y * (alpha * s / ly))
}

/// Smooth C^5 step from 0 to 1 on `s` in [0, 1].
fn smoothstep5(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s.powi(5) * (126.0 + s * (-420.0 + s * (540.0 + s * (-315.0 + s * 70.0))))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeProfile {
    Constant,
    /// Rises smoothly from 0 to 1 over `duration`, with five vanishing derivatives at both ends.
    SmoothRamp { duration: f64 },
}

impl TimeProfile {
    pub fn scale(&self, t: f64) -> f64 {
        match *self {
            TimeProfile::Constant => 1.0,
            TimeProfile::SmoothRamp { duration } => smoothstep5(t / duration),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadKind {
    BodyForce,
    Velocity,
}

#[derive(Debug, Clone)]
pub struct Loading {
    pub kind: LoadKind,
    pub layer: Vec<usize>,
    /// Force density (N/m^3) for body forces, velocity (m/s) for constraints.
    pub value: Vec3,
    pub profile: TimeProfile,
}

/// Displacement and velocity of every point at one time level.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FieldState {
    pub u: Vec<Vec3>,
    pub v: Vec<Vec3>,
    pub t: f64,
}

impl FieldState {
    pub fn zeros(n: usize) -> Self {
        Self {
            u: vec![Vec3::zeros(); n],
            v: vec![Vec3::zeros(); n],
            t: 0.0,
        }
    }
    pub fn len(&self) -> usize {
        self.u.len()
    }
    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.iter().all(|c| c.is_finite()))
    }
    /// Bitwise equality of every component, including the time stamp.
    pub fn bit_eq(&self, other: &FieldState) -> bool {
        let same = |a: &[Vec3], b: &[Vec3]| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()))
        };
        self.t.to_bits() == other.t.to_bits() && same(&self.u, &other.u) && same(&self.v, &other.v)
    }
}

/// Time derivative of a [`FieldState`]: `du = v`, `dv = acceleration`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rates {
    pub du: Vec<Vec3>,
    pub dv: Vec<Vec3>,
}

impl Rates {
    pub fn zeros(n: usize) -> Self {
        Self {
            du: vec![Vec3::zeros(); n],
            dv: vec![Vec3::zeros(); n],
        }
    }
    pub fn len(&self) -> usize {
        self.du.len()
    }
    pub fn is_empty(&self) -> bool {
        self.du.is_empty()
    }
}

/// Everything the semi-discrete operator needs: points, bonds, material and loads.
#[derive(Debug, Clone)]
pub struct Model {
    cloud: PointCloud,
    bonds: NeighborList,
    material: Material,
    law: ForceLaw,
    alpha: f64,
    critical_stretch: Option<f64>,
    loads: Vec<Loading>,
    body: Vec<(TimeProfile, Vec<Vec3>)>,
    prescribed: Vec<Option<Vec3>>,
    all: Vec<usize>,
}

impl Model {
    pub fn new(
        cloud: PointCloud,
        horizon: f64,
        material: Material,
        law: ForceLaw,
        loads: Vec<Loading>,
        critical_stretch: Option<f64>,
    ) -> Result<Self> {
        let bonds = build_neighbor_list(&cloud, horizon)?;
        Self::with_bonds(cloud, bonds, material, law, loads, critical_stretch)
    }

    pub fn with_bonds(
        cloud: PointCloud,
        bonds: NeighborList,
        material: Material,
        law: ForceLaw,
        loads: Vec<Loading>,
        critical_stretch: Option<f64>,
    ) -> Result<Self> {
        let alpha = calibrate_alpha(&material, bonds.horizon(), cloud.dim(), cloud.thickness())?;
        Self::with_alpha(cloud, bonds, material, law, alpha, loads, critical_stretch)
    }

    /// Skips calibration; used for hand-built test problems.
    pub fn with_alpha(
        cloud: PointCloud,
        bonds: NeighborList,
        material: Material,
        law: ForceLaw,
        alpha: f64,
        loads: Vec<Loading>,
        critical_stretch: Option<f64>,
    ) -> Result<Self> {
        let n = cloud.len();
        if let Some(s0) = critical_stretch {
            if !(s0 > 0.0) {
                return Err(PdError::Invalid(format!("critical stretch must be positive, got {s0}")));
            }
        }
        let mut body = Vec::new();
        let mut prescribed = vec![None; n];
        for load in &loads {
            if load.layer.is_empty() {
                return Err(PdError::Invalid("loading layer is empty".into()));
            }
            if let Some(&bad) = load.layer.iter().find(|&&i| i >= n) {
                return Err(PdError::Invalid(format!("loading layer references point {bad} of {n}")));
            }
            match load.kind {
                LoadKind::BodyForce => {
                    let mut dense = vec![Vec3::zeros(); n];
                    for &i in &load.layer {
                        dense[i] += load.value;
                    }
                    body.push((load.profile, dense));
                }
                LoadKind::Velocity => {
                    for &i in &load.layer {
                        prescribed[i] = Some(load.value);
                    }
                }
            }
        }
        Ok(Self {
            cloud,
            bonds,
            material,
            law,
            alpha,
            critical_stretch,
            loads,
            body,
            prescribed,
            all: (0..n).collect(),
        })
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }
    pub fn bonds(&self) -> &NeighborList {
        &self.bonds
    }
    pub fn material(&self) -> &Material {
        &self.material
    }
    pub fn law(&self) -> ForceLaw {
        self.law
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn critical_stretch(&self) -> Option<f64> {
        self.critical_stretch
    }
    pub fn loads(&self) -> &[Loading] {
        &self.loads
    }
    pub fn len(&self) -> usize {
        self.cloud.len()
    }
    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
    pub fn all_points(&self) -> &[usize] {
        &self.all
    }
    pub fn prescribed_velocity(&self, i: usize) -> Option<Vec3> {
        self.prescribed[i]
    }

    /// Rest state with constrained points already moving at their prescribed velocity.
    pub fn initial_state(&self) -> FieldState {
        let mut s = FieldState::zeros(self.len());
        for (v, p) in s.v.iter_mut().zip(&self.prescribed) {
            if let Some(p) = p {
                *v = *p;
            }
        }
        s
    }

    fn point_rate(&self, u: &[Vec3], v: &[Vec3], t: f64, scales: &[f64], i: usize) -> Result<(Vec3, Vec3)> {
        if let Some(p) = self.prescribed[i] {
            return Ok((p, Vec3::zeros()));
        }
        let ui = u[i];
        let mut bond_sum = Vec3::zeros();
        for b in self.bonds.range(i) {
            if !self.bonds.is_alive(b) {
                continue;
            }
            let j = self.bonds.target(b);
            let xi = self.bonds.xi(b);
            let length = self.bonds.length(b);
            let eta = u[j] - ui;
            bond_sum += match self.law {
                ForceLaw::Linear => linear_force(&xi, length, &eta, 1.0),
                ForceLaw::Nonlinear => nonlinear_force(&xi, length, &eta, 1.0).ok_or(PdError::BondCollapse { i, j })?,
            };
        }
        let mut f = bond_sum * (self.alpha * self.cloud.volume_per_point());
        for ((_, dense), s) in self.body.iter().zip(scales) {
            f += dense[i] * *s;
        }
        let acc = f / self.material.density;
        let vi = v[i];
        if !(acc.iter().all(|c| c.is_finite()) && vi.iter().all(|c| c.is_finite())) {
            return Err(PdError::NonFinite { point: i, t });
        }
        Ok((vi, acc))
    }

    /// Evaluates the operator at `points` only; other entries of `out` are left untouched.
    /// Each point's bond sum runs in ascending neighbor order, so results do not depend
    /// on the thread count.
    pub fn apply(&self, state: &FieldState, points: &[usize], out: &mut Rates) -> Result<()> {
        let t = state.t;
        let scales: Vec<f64> = self.body.iter().map(|(p, _)| p.scale(t)).collect();
        let rates: Vec<(Vec3, Vec3)> = points
            .par_chunks(PAR_CHUNK)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&i| self.point_rate(&state.u, &state.v, t, &scales, i))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        for (&i, (du, dv)) in points.iter().zip(rates) {
            out.du[i] = du;
            out.dv[i] = dv;
        }
        Ok(())
    }

    pub fn apply_all(&self, state: &FieldState) -> Result<Rates> {
        let mut out = Rates::zeros(self.len());
        self.apply(state, &self.all, &mut out)?;
        Ok(out)
    }

    /// Breaks every alive bond with an end in `points` whose stretch has reached the critical
    /// value and whose end points pass `select`. Returns the number of newly broken bonds.
    pub fn update_damage_where<F>(&mut self, u: &[Vec3], points: &[usize], select: F) -> usize
    where
        F: Fn(usize, usize) -> bool + Sync,
    {
        let Some(s0) = self.critical_stretch else {
            return 0;
        };
        let bonds = &self.bonds;
        let mut doomed: Vec<usize> = points
            .par_iter()
            .flat_map_iter(|&i| {
                let select = &select;
                bonds.range(i).filter_map(move |b| {
                    let j = bonds.target(b);
                    let hit = bonds.is_alive(b)
                        && select(i, j)
                        && bond_stretch(&bonds.xi(b), &(u[j] - u[i])) >= s0;
                    hit.then(|| if i < j { b } else { bonds.reverse(b) })
                })
            })
            .collect();
        doomed.sort_unstable();
        doomed.dedup();
        for &b in &doomed {
            self.bonds.break_bond(b);
        }
        doomed.len()
    }

    pub fn update_damage(&mut self, u: &[Vec3]) -> usize {
        let all = std::mem::take(&mut self.all);
        let n = self.update_damage_where(u, &all, |_, _| true);
        self.all = all;
        n
    }

    /// Cuts every bond whose open segment crosses the crack segment `a`-`b` (2D, xy plane).
    pub fn break_precrack_bonds(&mut self, a: Vec3, b: Vec3) -> usize {
        let p = self.cloud.positions();
        let mut doomed = Vec::new();
        for i in 0..self.bonds.point_count() {
            for bond in self.bonds.range(i) {
                let j = self.bonds.target(bond);
                if j > i && self.bonds.is_alive(bond) && open_segment_crosses(&p[i], &p[j], &a, &b) {
                    doomed.push(bond);
                }
            }
        }
        for &bond in &doomed {
            self.bonds.break_bond(bond);
        }
        doomed.len()
    }

    /// Broken fraction of each point's bond volume.
    pub fn damage_index(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let total = self.bonds.range(i).len();
                if total == 0 {
                    return 0.0;
                }
                let alive = self.bonds.range(i).filter(|&b| self.bonds.is_alive(b)).count();
                1.0 - alive as f64 / total as f64
            })
            .collect()
    }
}

fn orient(p: &Vec3, q: &Vec3, r: &Vec3) -> f64 {
    (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x)
}

/// Whether the open segment `p`-`q` meets the closed segment `a`-`b` in the xy plane.
pub fn open_segment_crosses(p: &Vec3, q: &Vec3, a: &Vec3, b: &Vec3) -> bool {
    let side_p = orient(a, b, p);
    let side_q = orient(a, b, q);
    if side_p == 0.0 && side_q == 0.0 {
        // Collinear: overlap of the open interval with the closed one.
        let dir = q - p;
        let along = |x: &Vec3| (x - p).dot(&dir) / dir.dot(&dir);
        let (lo, hi) = {
            let (s, t) = (along(a), along(b));
            (s.min(t), s.max(t))
        };
        return hi > 0.0 && lo < 1.0;
    }
    if side_p * side_q >= 0.0 {
        return false;
    }
    orient(p, q, a) * orient(p, q, b) <= 0.0
}
