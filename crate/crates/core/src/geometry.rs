//! Material-point lattices, horizon neighbor lists and subdomain labels.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PdError, Result};

pub type Vec3 = Vector3<f64>;

/// Relative slack on the horizon test so lattice points sitting exactly on
/// the horizon sphere are kept.
pub const HORIZON_SLACK: f64 = 1e-12;

/// Allowed mismatch between a box extent and a whole number of cells.
const CELL_FIT_TOLERANCE: f64 = 5e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dim {
    Two,
    Three,
}

impl Dim {
    pub fn count(self) -> usize {
        match self {
            Dim::Two => 2,
            Dim::Three => 3,
        }
    }

    pub fn from_count(n: usize) -> Option<Dim> {
        match n {
            2 => Some(Dim::Two),
            3 => Some(Dim::Three),
            _ => None,
        }
    }
}

/// Closed axis-aligned box. Two-dimensional boxes keep `z` at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn from_slices(min: &[f64], max: &[f64]) -> Self {
        let pad = |s: &[f64]| Vec3::new(s[0], s.get(1).copied().unwrap_or(0.0), s.get(2).copied().unwrap_or(0.0));
        Self::new(pad(min), pad(max))
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - tol && p[k] <= self.max[k] + tol)
    }

    pub fn contains_box(&self, other: &Aabb, tol: f64) -> bool {
        self.contains(&other.min, tol) && self.contains(&other.max, tol)
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }
}

#[derive(Debug, Clone)]
pub struct PointCloud {
    dim: Dim,
    positions: Vec<Vec3>,
    spacing: f64,
    thickness: Option<f64>,
    volume: f64,
    bounds: Aabb,
    counts: [usize; 3],
}

impl PointCloud {
    /// Cloud from explicit positions; every point gets the lattice volume for `spacing`.
    pub fn from_positions(dim: Dim, positions: Vec<Vec3>, spacing: f64, thickness: Option<f64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(PdError::Geometry("empty point cloud".into()));
        }
        let volume = cell_volume(dim, spacing, thickness)?;
        let half = Vec3::from_element(0.5 * spacing);
        let mut min = positions[0];
        let mut max = positions[0];
        for p in &positions {
            min = min.inf(p);
            max = max.sup(p);
        }
        let (mut min, mut max) = (min - half, max + half);
        if dim == Dim::Two {
            min.z = 0.0;
            max.z = 0.0;
        }
        let n = positions.len();
        Ok(Self {
            dim,
            positions,
            spacing,
            thickness,
            volume,
            bounds: Aabb::new(min, max),
            counts: [n, 1, 1],
        })
    }

    pub fn dim(&self) -> Dim {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.positions.len()
    }
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }
    pub fn position(&self, i: usize) -> Vec3 {
        self.positions[i]
    }
    pub fn spacing(&self) -> f64 {
        self.spacing
    }
    pub fn thickness(&self) -> Option<f64> {
        self.thickness
    }
    pub fn volume_per_point(&self) -> f64 {
        self.volume
    }
    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }
    /// Per-axis lattice counts (`[n, 1, 1]` for clouds built from explicit positions).
    pub fn counts(&self) -> [usize; 3] {
        self.counts
    }

    /// Tolerance used for closed-box membership tests.
    pub fn tolerance(&self) -> f64 {
        1e-9 * self.spacing
    }
}

fn cell_volume(dim: Dim, spacing: f64, thickness: Option<f64>) -> Result<f64> {
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(PdError::Geometry(format!("spacing must be positive, got {spacing}")));
    }
    match (dim, thickness) {
        (Dim::Two, Some(d)) if d > 0.0 => Ok(spacing * spacing * d),
        (Dim::Two, _) => Err(PdError::Geometry("2D clouds need a positive thickness".into())),
        (Dim::Three, _) => Ok(spacing.powi(3)),
    }
}

/// Uniform lattice with points at cell centers, ordered x fastest, then y, then z.
pub fn build_grid(bounds: &Aabb, spacing: f64, dim: Dim, thickness: Option<f64>) -> Result<PointCloud> {
    let volume = cell_volume(dim, spacing, thickness)?;
    let mut counts = [1usize; 3];
    for axis in 0..dim.count() {
        let length = bounds.max[axis] - bounds.min[axis];
        if !(length > 0.0) {
            return Err(PdError::Geometry(format!("box extent along axis {axis} must be positive")));
        }
        let cells = length / spacing;
        let n = cells.round();
        if n < 1.0 || (cells - n).abs() > CELL_FIT_TOLERANCE * n {
            return Err(PdError::Geometry(format!(
                "extent {length} along axis {axis} is not a whole number of cells of size {spacing}"
            )));
        }
        counts[axis] = n as usize;
    }
    let mut positions = Vec::with_capacity(counts.iter().product());
    for iz in 0..counts[2] {
        for iy in 0..counts[1] {
            for ix in 0..counts[0] {
                let cell = Vec3::new(ix as f64 + 0.5, iy as f64 + 0.5, iz as f64 + 0.5);
                let mut p = bounds.min + cell * spacing;
                if dim == Dim::Two {
                    p.z = 0.0;
                }
                positions.push(p);
            }
        }
    }
    let mut bounds = *bounds;
    if dim == Dim::Two {
        bounds.min.z = 0.0;
        bounds.max.z = 0.0;
    }
    Ok(PointCloud {
        dim,
        positions,
        spacing,
        thickness,
        volume,
        bounds,
        counts,
    })
}

/// Horizon neighbor lists in compressed row form, with per-bond reference
/// vectors and alive flags. Neighbors of each point are sorted ascending.
#[derive(Debug, Clone)]
pub struct NeighborList {
    horizon: f64,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    xi: Vec<Vec3>,
    length: Vec<f64>,
    reverse: Vec<usize>,
    alive: Vec<bool>,
}

/// View of one stored bond `i -> j`.
#[derive(Debug, Clone, Copy)]
pub struct Bond {
    pub index: usize,
    pub j: usize,
    pub xi: Vec3,
    pub length: f64,
    pub alive: bool,
}

impl NeighborList {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn point_count(&self) -> usize {
        self.offsets.len() - 1
    }
    pub fn bond_count(&self) -> usize {
        self.neighbors.len()
    }
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.range(i)]
    }
    pub fn bonds(&self, i: usize) -> impl Iterator<Item = Bond> + '_ {
        self.range(i).map(move |b| Bond {
            index: b,
            j: self.neighbors[b],
            xi: self.xi[b],
            length: self.length[b],
            alive: self.alive[b],
        })
    }
    pub fn target(&self, b: usize) -> usize {
        self.neighbors[b]
    }
    pub fn xi(&self, b: usize) -> Vec3 {
        self.xi[b]
    }
    pub fn length(&self, b: usize) -> f64 {
        self.length[b]
    }
    /// Index of the bond `j -> i` paired with `i -> j`.
    pub fn reverse(&self, b: usize) -> usize {
        self.reverse[b]
    }
    pub fn is_alive(&self, b: usize) -> bool {
        self.alive[b]
    }
    pub fn alive_flags(&self) -> &[bool] {
        &self.alive
    }
    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    /// Breaks the bond in both directions. Returns whether it was alive.
    pub fn break_bond(&mut self, b: usize) -> bool {
        let was = self.alive[b];
        self.alive[b] = false;
        self.alive[self.reverse[b]] = false;
        was
    }

    /// Owner point of every bond, in storage order.
    pub fn sources(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.bond_count());
        for i in 0..self.point_count() {
            out.extend(std::iter::repeat_n(i, self.offsets[i + 1] - self.offsets[i]));
        }
        out
    }
}

struct CellIndex {
    origin: Vec3,
    size: f64,
    dims: [usize; 3],
    start: Vec<usize>,
    members: Vec<usize>,
}

impl CellIndex {
    fn new(positions: &[Vec3], size: f64) -> Self {
        let mut lo = positions[0];
        let mut hi = positions[0];
        for p in positions {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let mut dims = [1usize; 3];
        for k in 0..3 {
            dims[k] = ((hi[k] - lo[k]) / size).floor() as usize + 1;
        }
        let n_cells = dims[0] * dims[1] * dims[2];
        let cell_of: Vec<usize> = positions
            .iter()
            .map(|p| {
                let c = Self::coords(lo, size, dims, p);
                c[0] + dims[0] * (c[1] + dims[1] * c[2])
            })
            .collect();
        let mut start = vec![0usize; n_cells + 1];
        for &c in &cell_of {
            start[c + 1] += 1;
        }
        for c in 0..n_cells {
            start[c + 1] += start[c];
        }
        let mut fill = start.clone();
        let mut members = vec![0usize; positions.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            members[fill[c]] = i;
            fill[c] += 1;
        }
        Self {
            origin: lo,
            size,
            dims,
            start,
            members,
        }
    }

    fn coords(origin: Vec3, size: f64, dims: [usize; 3], p: &Vec3) -> [usize; 3] {
        let mut c = [0usize; 3];
        for k in 0..3 {
            let v = ((p[k] - origin[k]) / size).floor().max(0.0) as usize;
            c[k] = v.min(dims[k] - 1);
        }
        c
    }

    fn candidates(&self, p: &Vec3, out: &mut Vec<usize>) {
        out.clear();
        let c = Self::coords(self.origin, self.size, self.dims, p);
        let span = |k: usize| c[k].saturating_sub(1)..=(c[k] + 1).min(self.dims[k] - 1);
        for z in span(2) {
            for y in span(1) {
                for x in span(0) {
                    let cell = x + self.dims[0] * (y + self.dims[1] * z);
                    out.extend_from_slice(&self.members[self.start[cell]..self.start[cell + 1]]);
                }
            }
        }
    }
}

/// Cell-binned horizon search: `j` is a neighbor of `i` when `|x_j - x_i| <= horizon`.
pub fn build_neighbor_list(cloud: &PointCloud, horizon: f64) -> Result<NeighborList> {
    if !(horizon >= cloud.spacing()) {
        return Err(PdError::Geometry(format!(
            "horizon {horizon} is smaller than the spacing {}",
            cloud.spacing()
        )));
    }
    let cutoff = horizon * (1.0 + HORIZON_SLACK);
    let positions = cloud.positions();
    let cells = CellIndex::new(positions, cutoff);
    let lists: Vec<Vec<usize>> = (0..positions.len())
        .into_par_iter()
        .map_init(Vec::new, |scratch, i| {
            cells.candidates(&positions[i], scratch);
            let mut found: Vec<usize> = scratch
                .iter()
                .copied()
                .filter(|&j| j != i && (positions[j] - positions[i]).norm() <= cutoff)
                .collect();
            found.sort_unstable();
            found
        })
        .collect();

    let mut offsets = Vec::with_capacity(positions.len() + 1);
    offsets.push(0);
    for l in &lists {
        offsets.push(offsets.last().unwrap() + l.len());
    }
    let neighbors: Vec<usize> = lists.into_iter().flatten().collect();
    let mut xi = Vec::with_capacity(neighbors.len());
    let mut length = Vec::with_capacity(neighbors.len());
    let mut reverse = Vec::with_capacity(neighbors.len());
    for i in 0..positions.len() {
        for &j in &neighbors[offsets[i]..offsets[i + 1]] {
            let d = positions[j] - positions[i];
            xi.push(d);
            length.push(d.norm());
            let back = &neighbors[offsets[j]..offsets[j + 1]];
            let pos = back
                .binary_search(&i)
                .map_err(|_| PdError::Geometry(format!("asymmetric neighbor pair {i}-{j}")))?;
            reverse.push(offsets[j] + pos);
        }
    }
    let alive = vec![true; neighbors.len()];
    Ok(NeighborList {
        horizon,
        offsets,
        neighbors,
        xi,
        length,
        reverse,
        alive,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    /// Fine region, whole horizon fine.
    Fine,
    /// Fine region, horizon reaches the coarse region.
    FineInterface,
    /// Coarse region, horizon reaches the fine region.
    CoarseInterface,
    /// Coarse region, whole horizon coarse.
    Coarse,
}

impl Label {
    pub fn is_fine_region(self) -> bool {
        matches!(self, Label::Fine | Label::FineInterface)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Label::Fine => "F",
            Label::FineInterface => "FI",
            Label::CoarseInterface => "CI",
            Label::Coarse => "C",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SubdomainLabels {
    labels: Vec<Label>,
    fine_boxes: Vec<Aabb>,
}

impl SubdomainLabels {
    /// Labels from an explicit fine-region membership mask.
    pub fn from_mask(fine: &[bool], nbrs: &NeighborList) -> Self {
        let labels = (0..fine.len())
            .map(|i| {
                let crosses = nbrs.neighbors(i).iter().any(|&j| fine[j] != fine[i]);
                match (fine[i], crosses) {
                    (true, false) => Label::Fine,
                    (true, true) => Label::FineInterface,
                    (false, true) => Label::CoarseInterface,
                    (false, false) => Label::Coarse,
                }
            })
            .collect();
        Self {
            labels,
            fine_boxes: Vec::new(),
        }
    }

    pub fn all_coarse(n: usize) -> Self {
        Self {
            labels: vec![Label::Coarse; n],
            fine_boxes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
    pub fn get(&self, i: usize) -> Label {
        self.labels[i]
    }
    pub fn as_slice(&self) -> &[Label] {
        &self.labels
    }
    pub fn fine_boxes(&self) -> &[Aabb] {
        &self.fine_boxes
    }

    pub fn indices(&self, label: Label) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == label).collect()
    }

    /// Counts in the order F, FI, CI, C.
    pub fn counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for l in &self.labels {
            c[match l {
                Label::Fine => 0,
                Label::FineInterface => 1,
                Label::CoarseInterface => 2,
                Label::Coarse => 3,
            }] += 1;
        }
        c
    }

    /// Points of the coarse step's integration set: C, CI and FI.
    pub fn coarse_closure(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] != Label::Fine).collect()
    }

    /// Points of the fine step's integration set: F, FI and CI.
    pub fn fine_closure(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] != Label::Coarse).collect()
    }

    pub fn has_fine_region(&self) -> bool {
        self.labels.iter().any(|l| l.is_fine_region())
    }
}

/// Labels every point F, FI, CI or C from fine-region boxes and the discrete neighbor lists.
pub fn classify_subdomains(cloud: &PointCloud, nbrs: &NeighborList, fine_boxes: &[Aabb]) -> SubdomainLabels {
    let tol = cloud.tolerance();
    let mask: Vec<bool> = cloud
        .positions()
        .iter()
        .map(|p| fine_boxes.iter().any(|b| b.contains(p, tol)))
        .collect();
    let mut labels = SubdomainLabels::from_mask(&mask, nbrs);
    labels.fine_boxes = fine_boxes.to_vec();
    labels
}

/// Indices of the points inside a closed box; an empty selection is an error.
pub fn select_layer(cloud: &PointCloud, region: &Aabb) -> Result<Vec<usize>> {
    let tol = cloud.tolerance();
    let picked: Vec<usize> = (0..cloud.len())
        .filter(|&i| region.contains(&cloud.positions()[i], tol))
        .collect();
    if picked.is_empty() {
        return Err(PdError::Geometry(format!(
            "layer [{:?} .. {:?}] selects no points",
            region.min.as_slice(),
            region.max.as_slice()
        )));
    }
    Ok(picked)
}
