//! Error norms, observed convergence rates, cached reference solutions and scoped errors.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PdError, Result};
use crate::forces::{FieldState, Model};
use crate::geometry::{Label, SubdomainLabels, Vec3};
use crate::integrator::{upd_run, ButcherTableau};

/// Relative slack allowed when checking that consecutive step sizes halve.
const HALVING_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    X,
    #[default]
    Y,
    Z,
}

impl Component {
    pub fn index(self) -> usize {
        match self {
            Component::X => 0,
            Component::Y => 1,
            Component::Z => 2,
        }
    }
}

/// One displacement component of every point.
pub fn displacement_component(state: &FieldState, component: Component) -> Vec<f64> {
    let k = component.index();
    state.u.iter().map(|u| u[k]).collect()
}

/// Euclidean distance between two per-point scalar fields.
pub fn l2_error(field: &[f64], reference: &[f64]) -> Result<f64> {
    check_shapes(field, reference)?;
    Ok(field.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

/// Like [`l2_error`], restricted to `points`.
pub fn l2_error_on(field: &[f64], reference: &[f64], points: &[usize]) -> Result<f64> {
    check_shapes(field, reference)?;
    Ok(points.iter().map(|&i| (field[i] - reference[i]).powi(2)).sum::<f64>().sqrt())
}

fn check_shapes(field: &[f64], reference: &[f64]) -> Result<()> {
    if field.len() != reference.len() {
        return Err(PdError::Invalid(format!(
            "field has {} points but the reference has {}",
            field.len(),
            reference.len()
        )));
    }
    Ok(())
}

/// Observed convergence rate between two consecutive rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rate {
    Value(f64),
    /// The finer error is exactly zero, so the rate is unbounded.
    Saturated,
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rate::Value(v) => write!(f, "{v:.2}"),
            Rate::Saturated => f.write_str("sat"),
        }
    }
}

/// `log2(e[m-1] / e[m])` for each row after the first. Step sizes must halve row to row.
pub fn observed_order(dts: &[f64], errors: &[f64]) -> Result<Vec<Option<Rate>>> {
    if dts.len() != errors.len() {
        return Err(PdError::Invalid("need one error per step size".into()));
    }
    if let Some(e) = errors.iter().find(|e| !(**e >= 0.0)) {
        return Err(PdError::Invalid(format!("errors must be non-negative, got {e}")));
    }
    if !halves(dts) {
        return Err(PdError::Invalid("step sizes must halve from row to row".into()));
    }
    Ok((0..errors.len())
        .map(|m| {
            (m > 0).then(|| {
                let (coarse, fine) = (errors[m - 1], errors[m]);
                if fine == 0.0 {
                    Rate::Saturated
                } else {
                    Rate::Value((coarse / fine).log2())
                }
            })
        })
        .collect())
}

/// True when each step size is half the previous one.
pub fn halves(dts: &[f64]) -> bool {
    dts.windows(2).all(|w| (w[0] / w[1] - 2.0).abs() <= 2.0 * HALVING_TOLERANCE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    All,
    Coarse,
    Fine,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::All => "all",
            Scope::Coarse => "coarse",
            Scope::Fine => "fine",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub dt: f64,
    pub substeps: usize,
    pub scope: Scope,
    pub error: f64,
    pub rate: Option<Rate>,
}

/// Errors over every point, over the coarse closure (C, CI, FI) and over the fine
/// closure (F, FI, CI). The closures overlap on the interface layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScopedErrors {
    pub all: f64,
    pub coarse: f64,
    pub fine: f64,
    /// Set when there are no fine points, so `fine` is a sum over the empty set.
    pub fine_empty: bool,
}

impl ScopedErrors {
    pub fn get(&self, scope: Scope) -> f64 {
        match scope {
            Scope::All => self.all,
            Scope::Coarse => self.coarse,
            Scope::Fine => self.fine,
        }
    }
}

pub fn scoped_errors(
    state: &FieldState,
    reference: &FieldState,
    labels: &SubdomainLabels,
    component: Component,
) -> Result<ScopedErrors> {
    if labels.len() != state.len() {
        return Err(PdError::Invalid("labels do not match the point count".into()));
    }
    let field = displacement_component(state, component);
    let truth = displacement_component(reference, component);
    let coarse: Vec<usize> = (0..labels.len()).filter(|&i| labels.get(i) != Label::Fine).collect();
    let fine: Vec<usize> = (0..labels.len()).filter(|&i| labels.get(i) != Label::Coarse).collect();
    Ok(ScopedErrors {
        all: l2_error(&field, &truth)?,
        coarse: l2_error_on(&field, &truth, &coarse)?,
        fine: l2_error_on(&field, &truth, &fine)?,
        fine_empty: !labels.has_fine_region(),
    })
}

/// Hex digest identifying a scenario description.
pub fn scenario_key(description: &str) -> String {
    let digest = Sha256::digest(description.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Number of steps of size `dt` that land on `t_end`.
pub fn step_count(t_end: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t_end >= 0.0) {
        return Err(PdError::Invalid(format!("cannot step to t = {t_end} with dt = {dt}")));
    }
    let n = (t_end / dt).round();
    if (n * dt - t_end).abs() > 1e-9 * t_end.max(dt) {
        return Err(PdError::Invalid(format!("dt = {dt} does not divide the final time {t_end}")));
    }
    Ok(n as usize)
}

/// On-disk store of reference end states, one file per (scenario, reference step).
#[derive(Debug, Clone)]
pub struct ReferenceCache {
    dir: PathBuf,
}

const CACHE_MAGIC: &str = "pd-reference 1";

impl ReferenceCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self, key: &str, dt_ref: f64) -> PathBuf {
        self.dir.join(format!("{key}-{:016x}.ref", dt_ref.to_bits()))
    }

    pub fn load(&self, key: &str, dt_ref: f64, dims: usize) -> Result<Option<FieldState>> {
        let path = self.path(key, dt_ref);
        if !path.exists() {
            return Ok(None);
        }
        read_state(&path, dims).map(Some)
    }

    pub fn store(&self, key: &str, dt_ref: f64, dims: usize, state: &FieldState) -> Result<PathBuf> {
        fs::create_dir_all(&self.dir)?;
        let path = self.path(key, dt_ref);
        let tmp = path.with_extension("tmp");
        write_state(&tmp, dims, state)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

/// Text header (dimension, point count, components per point, time) then little-endian
/// f64 values, displacement components before velocity components for each point.
pub fn write_state(path: &Path, dims: usize, state: &FieldState) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{CACHE_MAGIC}")?;
    writeln!(out, "dim {dims}")?;
    writeln!(out, "points {}", state.len())?;
    writeln!(out, "components {}", 2 * dims)?;
    writeln!(out, "time {:016x} {:e}", state.t.to_bits(), state.t)?;
    writeln!(out, "data")?;
    for (u, v) in state.u.iter().zip(&state.v) {
        for x in u.iter().take(dims).chain(v.iter().take(dims)) {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_state(path: &Path, dims: usize) -> Result<FieldState> {
    let bad = |what: &str| PdError::Invalid(format!("{}: malformed reference file ({what})", path.display()));
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut header = Vec::new();
    for _ in 0..6 {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        header.push(line.trim_end().to_string());
    }
    if header[0] != CACHE_MAGIC || header[5] != "data" {
        return Err(bad("header"));
    }
    let field = |k: usize, name: &str| -> Result<String> {
        header[k]
            .strip_prefix(name)
            .and_then(|s| s.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(name))
    };
    let file_dims: usize = field(1, "dim")?.parse().map_err(|_| bad("dim"))?;
    let points: usize = field(2, "points")?.parse().map_err(|_| bad("points"))?;
    let components: usize = field(3, "components")?.parse().map_err(|_| bad("components"))?;
    let time = field(4, "time")?;
    let bits = time.split_whitespace().next().ok_or_else(|| bad("time"))?;
    let t = f64::from_bits(u64::from_str_radix(bits, 16).map_err(|_| bad("time"))?);
    if file_dims != dims || components != 2 * dims {
        return Err(bad("dimension"));
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() != points * components * 8 {
        return Err(bad("length"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight bytes")))
        .collect();
    let mut state = FieldState::zeros(points);
    state.t = t;
    for (i, row) in values.chunks_exact(components).enumerate() {
        let mut u = Vec3::zeros();
        let mut v = Vec3::zeros();
        for d in 0..dims {
            u[d] = row[d];
            v[d] = row[dims + d];
        }
        state.u[i] = u;
        state.v[i] = v;
    }
    Ok(state)
}

/// Single-rate run to `t_end` at `dt_ref`, served from `cache` when an entry exists.
pub fn reference_solution(
    model: &mut Model,
    tableau: &ButcherTableau,
    dt_ref: f64,
    t_end: f64,
    cache: Option<(&ReferenceCache, &str)>,
) -> Result<FieldState> {
    let dims = model.cloud().dim().count();
    if let Some((store, key)) = cache {
        if let Some(state) = store.load(key, dt_ref, dims)? {
            if state.len() == model.len() {
                return Ok(state);
            }
        }
    }
    let steps = step_count(t_end, dt_ref)?;
    let initial = model.initial_state();
    let state = upd_run(model, tableau, &initial, dt_ref, steps, |_, _, _| Ok(()))?;
    if let Some((store, key)) = cache {
        store.store(key, dt_ref, dims, &state)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forces::{ForceLaw, LoadKind, Loading, Material, TimeProfile};
    use crate::geometry::{build_grid, classify_subdomains, select_layer, Aabb, Dim};

    #[test]
    fn l2_examples() {
        assert_eq!(l2_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l2_error(&[4.0], &[1.0]).unwrap(), 3.0);
        assert_eq!(l2_error(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!(l2_error(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(l2_error_on(&[3.0, 4.0], &[0.0, 0.0], &[1]).unwrap(), 4.0);
    }

    #[test]
    fn rate_examples() {
        let eps = 1e-9;
        let cr = observed_order(&[1.0, 0.5], &[8.0 * eps, eps]).unwrap();
        assert_eq!(cr[0], None);
        match cr[1] {
            Some(Rate::Value(v)) => assert!((v - 3.0).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        let cr = observed_order(&[1.0, 0.5], &[16.0 * eps, eps]).unwrap();
        assert_eq!(cr[1], Some(Rate::Value(4.0)));
        let cr = observed_order(&[1.0, 0.5], &[eps, 0.0]).unwrap();
        assert_eq!(cr[1], Some(Rate::Saturated));
        assert!(observed_order(&[1.0, 0.4], &[1.0, 0.1]).is_err());
        assert_eq!(Rate::Saturated.to_string(), "sat");
    }

    fn bar() -> Model {
        let b = Aabb::from_slices(&[0.0, 0.0], &[0.2, 0.1]);
        let cloud = build_grid(&b, 0.02, Dim::Two, Some(0.01)).unwrap();
        let top = select_layer(&cloud, &Aabb::from_slices(&[0.0, 0.08], &[0.2, 0.1])).unwrap();
        let loads = vec![Loading {
            kind: LoadKind::BodyForce,
            layer: top,
            value: Vec3::new(0.0, 1e9, 0.0),
            profile: TimeProfile::SmoothRamp { duration: 1e-5 },
        }];
        let mat = Material { youngs_modulus: 2e11, poisson_ratio: 1.0 / 3.0, density: 8000.0 };
        Model::new(cloud, 0.06, mat, ForceLaw::Linear, loads, None).unwrap()
    }

    #[test]
    fn cached_reference_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ReferenceCache::new(dir.path());
        let key = scenario_key("bar");
        let tab = ButcherTableau::rk4();
        let fresh = reference_solution(&mut bar(), &tab, 2.5e-7, 1e-5, Some((&cache, &key))).unwrap();
        assert!(cache.path(&key, 2.5e-7).exists());
        let cached = reference_solution(&mut bar(), &tab, 2.5e-7, 1e-5, Some((&cache, &key))).unwrap();
        assert!(fresh.bit_eq(&cached));
        let again = reference_solution(&mut bar(), &tab, 2.5e-7, 1e-5, None).unwrap();
        assert!(fresh.bit_eq(&again));
    }

    #[test]
    fn reference_is_insensitive_to_its_step() {
        let tab = ButcherTableau::rk4();
        let t_end = 1e-5;
        let r1 = reference_solution(&mut bar(), &tab, 1e-7, t_end, None).unwrap();
        let r2 = reference_solution(&mut bar(), &tab, 0.5e-7, t_end, None).unwrap();
        let m = bar();
        let s = upd_run(&mut bar(), &tab, &m.initial_state(), 1e-6, 10, |_, _, _| Ok(())).unwrap();
        let y = |s: &FieldState| displacement_component(s, Component::Y);
        let e1 = l2_error(&y(&s), &y(&r1)).unwrap();
        let e2 = l2_error(&y(&s), &y(&r2)).unwrap();
        assert!(e1 > 0.0);
        assert!((e1 - e2).abs() < 0.01 * e2, "{e1} vs {e2}");
    }

    #[test]
    fn reference_matches_closed_form_oscillation() {
        // Two points joined by one bond: the relative displacement obeys a harmonic
        // oscillator whose frequency follows from the linear bond stiffness.
        let positions = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        let cloud = crate::geometry::PointCloud::from_positions(Dim::Three, positions, 1.0, None).unwrap();
        let mat = Material { youngs_modulus: 1.0, poisson_ratio: 0.25, density: 1.0 };
        let bonds = crate::geometry::build_neighbor_list(&cloud, 1.0).unwrap();
        let mut model = Model::with_alpha(cloud, bonds, mat, ForceLaw::Linear, 1.0, vec![], None).unwrap();
        let mut initial = model.initial_state();
        initial.u[1].x = 1e-3;
        let omega = 2f64.sqrt();
        let t_end = 2.0;
        let steps = step_count(t_end, 1e-3).unwrap();
        let tab = ButcherTableau::rk4();
        let s = upd_run(&mut model, &tab, &initial, 1e-3, steps, |_, _, _| Ok(())).unwrap();
        let gap = s.u[1].x - s.u[0].x;
        let exact = 1e-3 * (omega * t_end).cos();
        assert!((gap - exact).abs() < 1e-14, "{gap} vs {exact}");
    }

    #[test]
    fn scoped_errors_examples() {
        let m = bar();
        let mut s = m.initial_state();
        let r = m.initial_state();
        let all_coarse = SubdomainLabels::all_coarse(m.len());
        let e = scoped_errors(&s, &r, &all_coarse, Component::Y).unwrap();
        assert_eq!((e.all, e.coarse, e.fine), (0.0, 0.0, 0.0));
        assert!(e.fine_empty);

        for (i, u) in s.u.iter_mut().enumerate() {
            u.y = (i as f64).sin();
        }
        let labels = classify_subdomains(m.cloud(), m.bonds(), &[Aabb::from_slices(&[0.0, 0.0], &[0.1, 0.1])]);
        let e = scoped_errors(&s, &r, &labels, Component::Y).unwrap();
        assert!(!e.fine_empty);
        assert!(e.all <= e.coarse + e.fine + 1e-15);
        assert!(e.all >= e.coarse.max(e.fine));
    }

    #[test]
    fn state_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ref");
        let mut s = FieldState::zeros(3);
        s.t = 1.0 / 3.0;
        s.u[1] = Vec3::new(0.1, -0.2, 0.0);
        s.v[2] = Vec3::new(1e-300, 7.0, 0.0);
        write_state(&path, 2, &s).unwrap();
        let back = read_state(&path, 2).unwrap();
        assert!(back.bit_eq(&s));
        assert!(read_state(&path, 3).is_err());
    }
}
