//! Configured simulations and the drivers behind the `pd` command line.

pub mod config;
pub mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::analysis::{
    displacement_component, halves, l2_error, observed_order, reference_solution, scenario_key, scoped_errors,
    step_count, ConvergenceRow, ReferenceCache, Scope,
};
use crate::error::{PdError, Result};
use crate::forces::{FieldState, Loading, Model, TimeProfile};
use crate::geometry::{build_grid, classify_subdomains, select_layer, Aabb, SubdomainLabels, Vec3};
use crate::integrator::{upd_run, ButcherTableau};
use crate::mts::{MtsConfig, MtsStepper, TimingReport};

pub use config::{
    load_config, parse_config, preset_config, Format, Overrides, Scenario, Scheme, SimulationConfig, PRESETS,
};
pub use output::{write_csv, write_state_csv, write_vtk};

fn vec3(v: &[f64]) -> Vec3 {
    let mut out = Vec3::zeros();
    for (k, x) in v.iter().take(3).enumerate() {
        out[k] = *x;
    }
    out
}

/// Point cloud, bonds, loads and pre-crack described by `config`.
pub fn build_model(config: &SimulationConfig) -> Result<Model> {
    let g = &config.geometry;
    let cloud = build_grid(&g.bounds(), g.spacing, config.dim(), g.thickness)?;
    let loads = config
        .loads
        .iter()
        .map(|l| {
            Ok(Loading {
                kind: l.kind.into(),
                layer: select_layer(&cloud, &Aabb::from_slices(&l.min, &l.max))?,
                value: vec3(&l.value),
                profile: l.ramp.map_or(TimeProfile::Constant, |duration| TimeProfile::SmoothRamp { duration }),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stretch = config.fracture.enabled.then_some(config.fracture.critical_stretch);
    let mut model = Model::new(cloud, config.model.horizon, config.material, config.model.law, loads, stretch)?;
    if let Some([a, b]) = config.fracture.precrack {
        model.break_precrack_bonds(Vec3::new(a[0], a[1], 0.0), Vec3::new(b[0], b[1], 0.0));
    }
    Ok(model)
}

/// Subdomain labels for the configured fine region; all coarse for single-rate runs.
pub fn build_labels(config: &SimulationConfig, model: &Model) -> SubdomainLabels {
    if config.mts.scheme == Scheme::Mts {
        let boxes: Vec<Aabb> = config.mts.fine_region.iter().map(|r| r.to_aabb()).collect();
        classify_subdomains(model.cloud(), model.bonds(), &boxes)
    } else {
        SubdomainLabels::all_coarse(model.len())
    }
}

/// A configured run that can be advanced step by step.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: SimulationConfig,
    model: Model,
    labels: SubdomainLabels,
    tableau: ButcherTableau,
    stepper: Option<MtsStepper>,
    state: FieldState,
    t0: f64,
    steps_done: usize,
    timing: TimingReport,
}

impl Simulation {
    pub fn new(config: SimulationConfig) -> Result<Self> {
        let model = build_model(&config)?;
        let labels = build_labels(&config, &model);
        let tableau = ButcherTableau::for_order(config.mts.order)?;
        let stepper = match config.mts.scheme {
            Scheme::Mts => Some(MtsStepper::new(
                &model,
                labels.clone(),
                MtsConfig {
                    order: config.mts.order,
                    dt: config.time.dt,
                    substeps: config.mts.substeps,
                },
            )?),
            Scheme::Upd => None,
        };
        let state = model.initial_state();
        Ok(Self {
            config,
            model,
            labels,
            tableau,
            stepper,
            t0: state.t,
            state,
            steps_done: 0,
            timing: TimingReport::default(),
        })
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }
    pub fn model(&self) -> &Model {
        &self.model
    }
    pub fn labels(&self) -> &SubdomainLabels {
        &self.labels
    }
    pub fn state(&self) -> &FieldState {
        &self.state
    }
    pub fn steps_done(&self) -> usize {
        self.steps_done
    }
    pub fn time(&self) -> f64 {
        self.state.t
    }
    pub fn damage(&self) -> Vec<f64> {
        self.model.damage_index()
    }
    pub fn is_finished(&self) -> bool {
        self.steps_done >= self.config.time.steps
    }

    /// Phase timings of the steps taken so far.
    pub fn timing(&self) -> TimingReport {
        let mut t = self.timing.clone();
        if let Some(s) = &self.stepper {
            t.merge(s.timing());
        }
        t
    }

    /// One step of the configured scheme (a whole coarse interval for two-rate runs).
    pub fn step(&mut self) -> Result<()> {
        let dt = self.config.time.dt;
        let next = match &mut self.stepper {
            Some(stepper) => stepper.advance(&mut self.model, &self.state)?,
            None => {
                let start = Instant::now();
                let n = self.steps_done;
                let mut next = upd_run(&mut self.model, &self.tableau, &self.state, dt, 1, |_, _, _| Ok(()))
                    .map_err(|e| match e {
                        PdError::Step { source, .. } => source.in_step(n + 1),
                        other => other,
                    })?;
                next.t = self.t0 + (n + 1) as f64 * dt;
                self.timing.record("step", start.elapsed());
                next
            }
        };
        self.state = next;
        self.steps_done += 1;
        Ok(())
    }

    /// Takes up to `steps` steps without passing the configured step count.
    pub fn advance(&mut self, steps: usize) -> Result<usize> {
        let todo = steps.min(self.config.time.steps - self.steps_done.min(self.config.time.steps));
        for _ in 0..todo {
            self.step()?;
        }
        Ok(todo)
    }

    /// Runs the remaining steps, calling `observe` after each one.
    pub fn run<O>(&mut self, mut observe: O) -> Result<()>
    where
        O: FnMut(&Simulation) -> Result<()>,
    {
        while !self.is_finished() {
            self.step()?;
            observe(self)?;
        }
        Ok(())
    }
}

/// What `run_to_disk` wrote.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub snapshots: Vec<PathBuf>,
    pub timing: TimingReport,
    pub final_time: f64,
}

fn write_snapshot(sim: &Simulation, dir: &Path, written: &mut Vec<PathBuf>) -> Result<()> {
    let damage = sim.damage();
    let stem = format!("snapshot_{:06}", sim.steps_done());
    for format in &sim.config().output.formats {
        let path = match format {
            Format::Vtk => dir.join(format!("{stem}.vtk")),
            Format::Csv => dir.join(format!("{stem}.csv")),
        };
        match format {
            Format::Vtk => write_vtk(sim.model().cloud(), sim.state(), &damage, &path)?,
            Format::Csv => write_state_csv(sim.model().cloud(), sim.state(), &damage, &path)?,
        }
        written.push(path);
    }
    Ok(())
}

/// Runs the configuration, writing snapshots at the output cadence, the resolved
/// configuration and a timing report into the output directory.
pub fn run_to_disk(config: SimulationConfig) -> Result<RunSummary> {
    let dir = config.output.directory.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), config.to_toml())?;
    let cadence = config.output.cadence;
    let total = config.time.steps;
    let mut sim = Simulation::new(config)?;
    let mut snapshots = Vec::new();
    write_snapshot(&sim, &dir, &mut snapshots)?;
    sim.run(|s| {
        let n = s.steps_done();
        if (cadence > 0 && n % cadence == 0) || n == total {
            write_snapshot(s, &dir, &mut snapshots)?;
        }
        Ok(())
    })?;
    let timing = sim.timing();
    fs::write(dir.join("timing.csv"), timing.to_string())?;
    Ok(RunSummary {
        snapshots,
        timing,
        final_time: sim.time(),
    })
}

/// A step-size sweep against a single-rate reference.
#[derive(Debug, Clone)]
pub struct ConvergeOptions {
    pub dts: Vec<f64>,
    pub substeps: Vec<usize>,
    /// Pair the step and substep lists entry by entry instead of taking every combination.
    pub paired: bool,
    /// Report coarse-region and fine-region errors as well as the total.
    pub scoped: bool,
    pub reference_dt: Option<f64>,
    pub order: Option<usize>,
    pub cache: Option<PathBuf>,
}

/// Runs `config` with one step size and substep count to its final time.
/// `K = 1` runs the single-rate scheme.
pub fn run_variant(config: &SimulationConfig, dt: f64, substeps: usize, order: usize) -> Result<(Simulation, f64)> {
    let mut c = config.clone();
    c.time.steps = step_count(config.final_time(), dt)?;
    c.time.dt = dt;
    c.mts.order = order;
    c.mts.substeps = substeps;
    c.mts.scheme = if substeps == 1 { Scheme::Upd } else { Scheme::Mts };
    c.output.cadence = 0;
    c.validate()?;
    let mut sim = Simulation::new(c)?;
    let start = Instant::now();
    sim.run(|_| Ok(()))?;
    Ok((sim, start.elapsed().as_secs_f64()))
}

/// Error table of a sweep. Without pairing, rates are computed along each substep count
/// when the step sizes halve.
pub fn converge(config: &SimulationConfig, options: &ConvergeOptions) -> Result<Vec<ConvergenceRow>> {
    if options.dts.is_empty() || options.substeps.is_empty() {
        return Err(PdError::Invalid("need at least one step size and one substep count".into()));
    }
    if options.paired && options.dts.len() != options.substeps.len() {
        return Err(PdError::Invalid("paired sweeps need equally long step and substep lists".into()));
    }
    let order = options.order.unwrap_or(config.mts.order);
    let runs: Vec<(f64, usize)> = if options.paired {
        options.dts.iter().copied().zip(options.substeps.iter().copied()).collect()
    } else {
        options.dts.iter().flat_map(|&dt| options.substeps.iter().map(move |&k| (dt, k))).collect()
    };
    let finest_fine_step = runs.iter().map(|(dt, k)| dt / *k as f64).fold(f64::INFINITY, f64::min);
    let finest = options.dts.iter().copied().fold(f64::INFINITY, f64::min);
    let dt_ref = options
        .reference_dt
        .or(config.analysis.reference_dt)
        .unwrap_or(if options.paired { finest_fine_step } else { finest / 16.0 });

    let tableau = ButcherTableau::for_order(order)?;
    let mut reference_model = build_model(config)?;
    let key = scenario_key(&format!("{}\norder = {order}\nt_end = {:e}", config.physics_description(), config.final_time()));
    let cache_dir = options.cache.clone().or_else(|| config.analysis.cache.clone());
    let cache = cache_dir.map(ReferenceCache::new);
    let reference = reference_solution(
        &mut reference_model,
        &tableau,
        dt_ref,
        config.final_time(),
        cache.as_ref().map(|c| (c, key.as_str())),
    )?;

    let scopes: &[Scope] = if options.scoped { &[Scope::Fine, Scope::Coarse, Scope::All] } else { &[Scope::All] };
    let component = config.analysis.component;
    let mut with_mts = config.clone();
    with_mts.mts.scheme = Scheme::Mts;
    let mut rows = Vec::new();
    for &(dt, k) in &runs {
        let (sim, _) = run_variant(config, dt, k, order)?;
        let labels = build_labels(&with_mts, sim.model());
        let errors = scoped_errors(sim.state(), &reference, &labels, component)?;
        for &scope in scopes {
            rows.push(ConvergenceRow {
                dt,
                substeps: k,
                scope,
                error: output::round_sci6(errors.get(scope)),
                rate: None,
            });
        }
    }

    if !options.paired && halves(&options.dts) {
        for &k in &options.substeps {
            for &scope in scopes {
                let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].substeps == k && rows[i].scope == scope).collect();
                let dts: Vec<f64> = idx.iter().map(|&i| rows[i].dt).collect();
                let errs: Vec<f64> = idx.iter().map(|&i| rows[i].error).collect();
                for (i, rate) in idx.into_iter().zip(observed_order(&dts, &errs)?) {
                    rows[i].rate = rate;
                }
            }
        }
    }
    Ok(rows)
}

/// Two-rate run with `K` substeps against the single-rate run at the fine step.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub substeps: usize,
    pub mts_seconds: f64,
    pub upd_seconds: f64,
    /// Distance between the two final displacement components.
    pub displacement_gap: f64,
    /// Points whose damage differs between the two runs.
    pub damage_mismatches: usize,
    pub points: usize,
    pub mts_timing: TimingReport,
}

impl std::fmt::Display for Comparison {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "K = {}", self.substeps)?;
        writeln!(f, "mts seconds: {:.3}", self.mts_seconds)?;
        writeln!(f, "upd seconds (dt/K): {:.3}", self.upd_seconds)?;
        writeln!(f, "time ratio: {:.3}", self.mts_seconds / self.upd_seconds)?;
        writeln!(f, "displacement gap: {:.6e}", self.displacement_gap)?;
        writeln!(f, "damage mismatches: {} of {} points", self.damage_mismatches, self.points)?;
        write!(f, "{}", self.mts_timing)
    }
}

pub fn compare(config: &SimulationConfig, substeps: usize) -> Result<Comparison> {
    if substeps == 0 {
        return Err(PdError::Invalid("K must be at least 1".into()));
    }
    let order = config.mts.order;
    let dt = config.time.dt;
    let mut two_rate = config.clone();
    two_rate.mts.scheme = Scheme::Mts;
    two_rate.mts.substeps = substeps;
    two_rate.output.cadence = 0;
    two_rate.validate()?;
    let mut mts = Simulation::new(two_rate)?;
    let start = Instant::now();
    mts.run(|_| Ok(()))?;
    let mts_seconds = start.elapsed().as_secs_f64();
    let (upd, upd_seconds) = run_variant(config, dt / substeps as f64, 1, order)?;

    let component = config.analysis.component;
    let gap = l2_error(
        &displacement_component(mts.state(), component),
        &displacement_component(upd.state(), component),
    )?;
    let (a, b) = (mts.damage(), upd.damage());
    let damage_mismatches = a.iter().zip(&b).filter(|(x, y)| (*x - *y).abs() > DAMAGE_MATCH).count();
    Ok(Comparison {
        substeps,
        mts_seconds,
        upd_seconds,
        displacement_gap: gap,
        damage_mismatches,
        points: a.len(),
        mts_timing: mts.timing(),
    })
}

/// Damage values closer than this count as equal.
pub const DAMAGE_MATCH: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;

    fn small_plate() -> SimulationConfig {
        let o = Overrides { steps: Some(6), ..Default::default() };
        preset_config("plate2d", false, &o).unwrap()
    }

    #[test]
    fn stepping_matches_single_rate_driver() {
        let mut c = small_plate();
        c.mts.scheme = Scheme::Upd;
        let mut sim = Simulation::new(c.clone()).unwrap();
        sim.run(|_| Ok(())).unwrap();
        let mut model = build_model(&c).unwrap();
        let s0 = model.initial_state();
        let tab = ButcherTableau::rk4();
        let direct = upd_run(&mut model, &tab, &s0, c.time.dt, 6, |_, _, _| Ok(())).unwrap();
        assert!(sim.state().bit_eq(&direct));
    }

    #[test]
    fn zero_steps_writes_initial_snapshot_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small_plate();
        c.time.steps = 0;
        c.output.directory = dir.path().to_path_buf();
        let summary = run_to_disk(c).unwrap();
        assert_eq!(summary.snapshots.len(), 1);
        assert!(summary.snapshots[0].ends_with("snapshot_000000.vtk"));
        assert_eq!(summary.final_time, 0.0);
    }

    #[test]
    fn snapshots_follow_cadence() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small_plate();
        c.output.cadence = 3;
        c.output.formats = vec![Format::Vtk, Format::Csv];
        c.output.directory = dir.path().to_path_buf();
        let summary = run_to_disk(c).unwrap();
        let names: Vec<String> = summary
            .snapshots
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            names,
            [
                "snapshot_000000.vtk",
                "snapshot_000000.csv",
                "snapshot_000003.vtk",
                "snapshot_000003.csv",
                "snapshot_000006.vtk",
                "snapshot_000006.csv"
            ]
        );
        assert!(dir.path().join("timing.csv").exists());
        let back = load_config(&dir.path().join("config.toml"), false, &Overrides::default()).unwrap();
        assert_eq!(back.time.steps, 6);
    }

    #[test]
    fn single_rate_row_of_paired_sweep_is_zero() {
        let c = small_plate();
        let options = ConvergeOptions {
            dts: vec![1e-5, 0.5e-5],
            substeps: vec![2, 1],
            paired: true,
            scoped: true,
            reference_dt: None,
            order: None,
            cache: None,
        };
        let rows = converge(&c, &options).unwrap();
        assert_eq!(rows.len(), 6);
        for r in rows.iter().filter(|r| r.substeps == 1) {
            assert_eq!(r.error, 0.0);
        }
        assert!(rows.iter().filter(|r| r.substeps == 2).all(|r| r.error > 0.0));
    }
}
