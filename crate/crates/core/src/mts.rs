//! Two-rate Runge-Kutta stepping: the coarse region advances with `dt`, the fine
//! region with `dt / K`, coupled through interface layers on both sides.

use std::collections::VecDeque;
use std::fmt;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;

use crate::error::{PdError, Result};
use crate::forces::{FieldState, Model, Rates};
use crate::geometry::{Label, SubdomainLabels, Vec3};
use crate::integrator::{combine_at, combine_point, rk_step, ButcherTableau};

/// Displacement and velocity of one point, stacked.
pub type Dof = [Vec3; 2];

const HISTORY_DEPTH: usize = 3;
const SPACING_TOLERANCE: f64 = 1e-12;

fn dof_lin(terms: &[(f64, &Dof)]) -> Dof {
    let mut out = [Vec3::zeros(); 2];
    for (w, d) in terms {
        out[0] += d[0] * *w;
        out[1] += d[1] * *w;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtsConfig {
    pub order: usize,
    pub dt: f64,
    pub substeps: usize,
}

impl MtsConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.order, 3 | 4) {
            return Err(PdError::Invalid(format!("order must be 3 or 4, got {}", self.order)));
        }
        if !(self.dt > 0.0) {
            return Err(PdError::Invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if self.substeps == 0 {
            return Err(PdError::Invalid("K must be at least 1".into()));
        }
        Ok(())
    }

    pub fn fine_dt(&self) -> f64 {
        self.dt / self.substeps as f64
    }
}

/// The matrix linking backward differences to time derivatives of the operator.
pub fn matrix_a(order: usize, dt: f64) -> Result<DMatrix<f64>> {
    let full = DMatrix::from_row_slice(
        3,
        3,
        &[
            0.5,
            dt / 6.0,
            dt * dt / 24.0,
            1.0,
            -dt / 2.0,
            dt * dt / 6.0,
            1.0,
            -1.5 * dt,
            7.0 * dt * dt / 6.0,
        ],
    );
    match order {
        4 => Ok(full),
        3 => Ok(full.view((0, 0), (2, 2)).into_owned()),
        _ => Err(PdError::Invalid(format!("order must be 3 or 4, got {order}"))),
    }
}

/// Closed-form inverse of [`matrix_a`].
pub fn gamma_closed_form(order: usize, dt: f64) -> Result<DMatrix<f64>> {
    match order {
        4 => Ok(DMatrix::from_row_slice(
            3,
            3,
            &[
                8.0 / 9.0,
                37.0 / 54.0,
                -7.0 / 54.0,
                8.0 / (3.0 * dt),
                -13.0 / (9.0 * dt),
                1.0 / (9.0 * dt),
                8.0 / (3.0 * dt * dt),
                -22.0 / (9.0 * dt * dt),
                10.0 / (9.0 * dt * dt),
            ],
        )),
        3 => Ok(DMatrix::from_row_slice(
            2,
            2,
            &[6.0 / 5.0, 2.0 / 5.0, 12.0 / (5.0 * dt), -6.0 / (5.0 * dt)],
        )),
        _ => Err(PdError::Invalid(format!("order must be 3 or 4, got {order}"))),
    }
}

#[derive(Debug, Clone)]
pub struct CorrectionMatrices {
    pub order: usize,
    pub dt: f64,
    pub a: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
}

impl CorrectionMatrices {
    pub fn new(order: usize, dt: f64) -> Result<Self> {
        Ok(Self {
            order,
            dt,
            a: matrix_a(order, dt)?,
            gamma: gamma_closed_form(order, dt)?,
        })
    }

    /// Derivative estimates `d = gamma * f`: first, second (and third) derivatives of the operator.
    pub fn derivatives(&self, f: &[Dof]) -> Vec<Dof> {
        let m = self.gamma.nrows();
        (0..m)
            .map(|row| {
                let terms: Vec<(f64, &Dof)> = (0..m).map(|col| (self.gamma[(row, col)], &f[col])).collect();
                dof_lin(&terms)
            })
            .collect()
    }
}

/// Difference quantities for one point: `f1 = (U1 - U0 - dt L0)/dt^2`, `f2 = (L0 - L1)/dt`,
/// and for order 4 `f3 = (L1 - L2)/dt`, where `L0` is the newest operator value.
pub fn assemble_f(order: usize, dt: f64, u_now: &Dof, u_next: &Dof, rates: &[Dof]) -> Result<Vec<Dof>> {
    let need = order - 1;
    if rates.len() < need {
        return Err(PdError::Invalid(format!(
            "order {order} needs {need} operator levels, history has {}",
            rates.len()
        )));
    }
    let inv2 = 1.0 / (dt * dt);
    let mut f = vec![dof_lin(&[(inv2, u_next), (-inv2, u_now), (-dt * inv2, &rates[0])])];
    for k in 0..need - 1 {
        f.push(dof_lin(&[(1.0 / dt, &rates[k]), (-1.0 / dt, &rates[k + 1])]));
    }
    Ok(f)
}

/// The last few coarse-level operator evaluations, newest first.
#[derive(Debug, Clone, Default)]
pub struct OperatorHistory {
    levels: VecDeque<(f64, Rates)>,
}

impl OperatorHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: f64, rates: Rates) -> Result<()> {
        if let Some((t_last, _)) = self.levels.front() {
            if !(t > *t_last) {
                return Err(PdError::Invalid(format!("history time {t} does not follow {t_last}")));
            }
            if let Some((t_prev, _)) = self.levels.get(1) {
                let (h0, h1) = (t - t_last, t_last - t_prev);
                if (h0 - h1).abs() > SPACING_TOLERANCE * t.abs().max(h0) {
                    return Err(PdError::Invalid(format!("uneven history spacing {h0} vs {h1}")));
                }
            }
        }
        self.levels.push_front((t, rates));
        self.levels.truncate(HISTORY_DEPTH);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
    /// `lag = 0` is the newest level.
    pub fn get(&self, lag: usize) -> Option<&Rates> {
        self.levels.get(lag).map(|(_, r)| r)
    }
    pub fn time(&self, lag: usize) -> Option<f64> {
        self.levels.get(lag).map(|(t, _)| *t)
    }
    pub fn dof(&self, lag: usize, i: usize) -> Option<Dof> {
        self.get(lag).map(|r| [r.du[i], r.dv[i]])
    }
}

/// Per-point polynomial in time, `I(t) = U + s L + sum_{j>=2} s^j / j! * d_{j-1}` with
/// `s = t - t0`, valid on `[t0, t0 + dt]`.
#[derive(Debug, Clone)]
pub struct Interpolant {
    order: usize,
    t0: f64,
    dt: f64,
    points: Vec<usize>,
    slot: Vec<usize>,
    coeffs: Vec<Dof>,
}

impl Interpolant {
    pub fn order(&self) -> usize {
        self.order
    }
    pub fn points(&self) -> &[usize] {
        &self.points
    }
    pub fn window(&self) -> (f64, f64) {
        (self.t0, self.t0 + self.dt)
    }

    fn stride(&self) -> usize {
        self.order + 1
    }

    fn local(&self, i: usize) -> usize {
        let s = self.slot[i];
        assert!(s != usize::MAX, "point {i} has no interpolant");
        s
    }

    /// Offset from the window start, or an error outside the window.
    pub fn offset(&self, t: f64) -> Result<f64> {
        let slack = 1e-9 * self.dt;
        if t < self.t0 - slack || t > self.t0 + self.dt + slack {
            return Err(PdError::Invalid(format!(
                "interpolant valid on [{}, {}] evaluated at {t}",
                self.t0,
                self.t0 + self.dt
            )));
        }
        Ok(t - self.t0)
    }

    /// Value at offset `s` from the window start.
    pub fn value_at(&self, i: usize, s: f64) -> Dof {
        let c = &self.coeffs[self.local(i) * self.stride()..][..self.stride()];
        let mut acc = c[self.order];
        for j in (1..self.order).rev() {
            acc = dof_lin(&[(1.0, &c[j]), (s / (j + 1) as f64, &acc)]);
        }
        dof_lin(&[(1.0, &c[0]), (s, &acc)])
    }

    /// Time derivative at offset `s` from the window start.
    pub fn rate_at(&self, i: usize, s: f64) -> Dof {
        let c = &self.coeffs[self.local(i) * self.stride()..][..self.stride()];
        let mut acc = c[self.order];
        for j in (1..self.order).rev() {
            acc = dof_lin(&[(1.0, &c[j]), (s / j as f64, &acc)]);
        }
        acc
    }

    pub fn eval(&self, i: usize, t: f64) -> Result<Dof> {
        Ok(self.value_at(i, self.offset(t)?))
    }

    pub fn derivative(&self, i: usize, t: f64) -> Result<Dof> {
        Ok(self.rate_at(i, self.offset(t)?))
    }
}

/// Fits interpolants at `points` from the states at both ends of a coarse step and the
/// operator history (newest level evaluated at `now`).
pub fn build_interpolant(
    points: &[usize],
    now: &FieldState,
    next: &FieldState,
    history: &OperatorHistory,
    order: usize,
    dt: f64,
) -> Result<Interpolant> {
    let mats = CorrectionMatrices::new(order, dt)?;
    if history.len() < order - 1 {
        return Err(PdError::Invalid(format!(
            "order {order} interpolant needs {} history levels, have {}",
            order - 1,
            history.len()
        )));
    }
    let mut slot = vec![usize::MAX; now.len()];
    let mut coeffs = Vec::with_capacity(points.len() * (order + 1));
    for (k, &i) in points.iter().enumerate() {
        slot[i] = k;
        let rates: Vec<Dof> = (0..order - 1).map(|lag| history.dof(lag, i).unwrap()).collect();
        let u0 = [now.u[i], now.v[i]];
        let u1 = [next.u[i], next.v[i]];
        let f = assemble_f(order, dt, &u0, &u1, &rates)?;
        coeffs.push(u0);
        coeffs.push(rates[0]);
        coeffs.extend(mats.derivatives(&f));
    }
    Ok(Interpolant {
        order,
        t0: now.t,
        dt,
        points: points.to_vec(),
        slot,
        coeffs,
    })
}

/// Index sets the two-rate step works on.
#[derive(Debug, Clone)]
pub struct MtsPlan {
    labels: SubdomainLabels,
    coarse_active: Vec<usize>,
    coarse_ghosts: Vec<usize>,
    coarse_kept: Vec<usize>,
    fine_active: Vec<usize>,
    fine_ghosts: Vec<usize>,
    fine_kept: Vec<usize>,
    coarse_interface: Vec<usize>,
    interpolated: Vec<usize>,
    history_points: Vec<usize>,
    in_fine: Vec<bool>,
}

impl MtsPlan {
    pub fn new(labels: SubdomainLabels, model: &Model) -> Self {
        let n = labels.len();
        let nbrs = model.bonds();
        let touches = |i: usize, l: Label| nbrs.neighbors(i).iter().any(|&j| labels.get(j) == l);
        let coarse_active = labels.coarse_closure();
        let fine_active = labels.fine_closure();
        let coarse_ghosts: Vec<usize> = labels
            .indices(Label::Fine)
            .into_iter()
            .filter(|&i| touches(i, Label::FineInterface))
            .collect();
        let fine_ghosts: Vec<usize> = labels
            .indices(Label::Coarse)
            .into_iter()
            .filter(|&i| touches(i, Label::CoarseInterface))
            .collect();
        let coarse_interface = labels.indices(Label::CoarseInterface);
        let in_fine: Vec<bool> = (0..n).map(|i| labels.get(i).is_fine_region()).collect();
        let coarse_kept = (0..n).filter(|&i| !in_fine[i]).collect();
        let fine_kept = (0..n).filter(|&i| in_fine[i]).collect();
        let mut interpolated = [coarse_interface.clone(), fine_ghosts.clone()].concat();
        interpolated.sort_unstable();
        let mut history_points = [coarse_active.clone(), coarse_ghosts.clone()].concat();
        history_points.sort_unstable();
        Self {
            labels,
            coarse_active,
            coarse_ghosts,
            coarse_kept,
            fine_active,
            fine_ghosts,
            fine_kept,
            coarse_interface,
            interpolated,
            history_points,
            in_fine,
        }
    }

    pub fn labels(&self) -> &SubdomainLabels {
        &self.labels
    }
    /// Points integrated in the coarse step: C, CI and FI.
    pub fn coarse_active(&self) -> &[usize] {
        &self.coarse_active
    }
    /// F points feeding FI evaluations during the coarse step.
    pub fn coarse_ghosts(&self) -> &[usize] {
        &self.coarse_ghosts
    }
    /// Points integrated in the fine substeps: F, FI and CI.
    pub fn fine_active(&self) -> &[usize] {
        &self.fine_active
    }
    /// C points feeding CI evaluations during fine substeps.
    pub fn fine_ghosts(&self) -> &[usize] {
        &self.fine_ghosts
    }
    /// Points that carry an interpolant: CI and the fine ghosts.
    pub fn interpolated(&self) -> &[usize] {
        &self.interpolated
    }
    pub fn history_points(&self) -> &[usize] {
        &self.history_points
    }
    pub fn is_fine(&self, i: usize) -> bool {
        self.in_fine[i]
    }
}

/// Wall-clock accounting per phase.
#[derive(Debug, Clone, Default)]
pub struct TimingReport {
    phases: Vec<(String, usize, Duration)>,
}

impl TimingReport {
    pub fn record(&mut self, phase: &str, elapsed: Duration) {
        match self.phases.iter_mut().find(|(p, _, _)| p == phase) {
            Some(entry) => {
                entry.1 += 1;
                entry.2 += elapsed;
            }
            None => self.phases.push((phase.to_string(), 1, elapsed)),
        }
    }

    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.record(phase, start.elapsed());
        out
    }

    /// `(phase, calls, seconds)` in first-seen order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, usize, f64)> {
        self.phases.iter().map(|(p, c, d)| (p.as_str(), *c, d.as_secs_f64()))
    }

    pub fn total_seconds(&self) -> f64 {
        self.phases.iter().map(|(_, _, d)| d.as_secs_f64()).sum()
    }

    pub fn merge(&mut self, other: &TimingReport) {
        for (p, c, d) in &other.phases {
            match self.phases.iter_mut().find(|(q, _, _)| q == p) {
                Some(e) => {
                    e.1 += c;
                    e.2 += *d;
                }
                None => self.phases.push((p.clone(), *c, *d)),
            }
        }
    }
}

impl fmt::Display for TimingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "phase,calls,seconds")?;
        for (p, c, s) in self.entries() {
            writeln!(f, "{p},{c},{s:.6}")?;
        }
        Ok(())
    }
}

/// Backward-difference estimate of the operator at offset `s` from the newest history
/// entry, at point `i`.
fn extrapolated_rate(history: &OperatorHistory, order: usize, dt: f64, i: usize, s: f64) -> Dof {
    let l0 = history.dof(0, i).unwrap();
    let l1 = history.dof(1, i).unwrap();
    match order {
        3 => dof_lin(&[(1.0 + s / dt, &l0), (-s / dt, &l1)]),
        _ => {
            let l2 = history.dof(2, i).unwrap();
            let slope = dof_lin(&[(1.5 / dt, &l0), (-2.0 / dt, &l1), (0.5 / dt, &l2)]);
            let curve = dof_lin(&[(1.0 / (dt * dt), &l0), (-2.0 / (dt * dt), &l1), (1.0 / (dt * dt), &l2)]);
            dof_lin(&[(1.0, &l0), (s, &slope), (0.5 * s * s, &curve)])
        }
    }
}

/// Two-rate stepper state: plan, operator history and coarse step counter.
#[derive(Debug, Clone)]
pub struct MtsStepper {
    config: MtsConfig,
    tableau: ButcherTableau,
    plan: MtsPlan,
    history: OperatorHistory,
    t0: f64,
    steps_done: usize,
    timing: TimingReport,
    scratch: Scratch,
}

/// Stage buffers reused across steps. Only entries at the active points of a step are read.
#[derive(Debug, Clone, Default)]
struct Scratch {
    stages: Vec<Rates>,
    ghosts: Vec<Rates>,
    stage: FieldState,
}

impl Scratch {
    fn prepare(&mut self, n: usize, stages: usize, state: &FieldState) -> &mut Self {
        if self.stage.len() != n || self.stages.len() != stages {
            self.stages = (0..stages).map(|_| Rates::zeros(n)).collect();
            self.ghosts = (0..stages).map(|_| Rates::zeros(n)).collect();
            self.stage = state.clone();
        }
        self
    }
}

impl MtsStepper {
    pub fn new(model: &Model, labels: SubdomainLabels, config: MtsConfig) -> Result<Self> {
        config.validate()?;
        if labels.len() != model.len() {
            return Err(PdError::Invalid("labels do not match the point count".into()));
        }
        Ok(Self {
            tableau: ButcherTableau::for_order(config.order)?,
            plan: MtsPlan::new(labels, model),
            config,
            history: OperatorHistory::new(),
            t0: 0.0,
            steps_done: 0,
            timing: TimingReport::default(),
            scratch: Scratch::default(),
        })
    }

    pub fn config(&self) -> &MtsConfig {
        &self.config
    }
    pub fn plan(&self) -> &MtsPlan {
        &self.plan
    }
    pub fn history(&self) -> &OperatorHistory {
        &self.history
    }
    pub fn timing(&self) -> &TimingReport {
        &self.timing
    }
    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    fn coarse_time(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.config.dt
    }

    fn record_history(&mut self, model: &Model, state: &FieldState) -> Result<()> {
        let plan = &self.plan;
        let rates = self.timing.time("history", || {
            let mut r = Rates::zeros(model.len());
            model.apply(state, plan.history_points(), &mut r).map(|_| r)
        })?;
        self.history.push(state.t, rates)
    }

    /// Advances one coarse interval with whole-domain substeps of `dt / K`. The first two
    /// intervals run this way, filling the operator history.
    pub fn startup_interval(&mut self, model: &mut Model, state: &FieldState) -> Result<FieldState> {
        let n = self.steps_done;
        if n == 0 {
            self.t0 = state.t;
            self.history = OperatorHistory::new();
            self.record_history(model, state)?;
        }
        let k_sub = self.config.substeps;
        let h = self.config.fine_dt();
        let t_n = self.coarse_time(n);
        let mut s = state.clone();
        let start = Instant::now();
        for k in 0..k_sub {
            s.t = t_n + k as f64 * h;
            let m: &Model = model;
            s = rk_step(&self.tableau, &s, h, |x, out| m.apply(x, m.all_points(), out))?.state;
            s.t = if k + 1 == k_sub { self.coarse_time(n + 1) } else { t_n + (k + 1) as f64 * h };
            model.update_damage(&s.u);
        }
        self.timing.record("startup", start.elapsed());
        self.steps_done += 1;
        self.record_history(model, &s)?;
        Ok(s)
    }

    /// Coarse RK step on C, CI and FI. F neighbors of FI follow the RK stage recursion
    /// driven by the extrapolated operator. Only C and CI entries of the result are final.
    pub fn coarse_advance(&mut self, model: &Model, state: &FieldState) -> Result<FieldState> {
        let tab = &self.tableau;
        let dt = self.config.dt;
        let plan = &self.plan;
        let l0 = self
            .history
            .get(0)
            .ok_or_else(|| PdError::Invalid("coarse step before startup".into()))?;
        let scratch = self.scratch.prepare(model.len(), tab.stages(), state);

        for (g, &c) in scratch.ghosts.iter_mut().zip(tab.c()) {
            for &i in plan.coarse_ghosts() {
                let d = extrapolated_rate(&self.history, self.config.order, dt, i, c * dt);
                g.du[i] = d[0];
                g.dv[i] = d[1];
            }
        }

        let stage = &mut scratch.stage;
        for j in 1..tab.stages() {
            let (done, rest) = scratch.stages.split_at_mut(j - 1);
            let known: Vec<&Rates> = std::iter::once(l0).chain(done.iter()).collect();
            combine_at(state, dt, tab.a(j), &known, plan.coarse_active(), stage);
            combine_at(state, dt, tab.a(j), &scratch.ghosts, plan.coarse_ghosts(), stage);
            stage.t = state.t + tab.c()[j] * dt;
            model
                .apply(stage, plan.coarse_active(), &mut rest[0])
                .map_err(|e| e.in_stage(j + 1))?;
        }
        let all: Vec<&Rates> = std::iter::once(l0).chain(&scratch.stages[..tab.stages() - 1]).collect();
        let mut next = state.clone();
        combine_at(state, dt, tab.b(), &all, &plan.coarse_kept, &mut next);
        next.t = state.t + dt;
        Ok(next)
    }

    /// K substeps on F, FI and CI. CI restarts from the interpolant at every substep and its
    /// C neighbors follow the stage recursion driven by the interpolant's derivative.
    /// Bonds touching the fine region are checked for breakage after every substep.
    pub fn fine_advance(&mut self, model: &mut Model, state: &FieldState, interp: &Interpolant) -> Result<FieldState> {
        let tab = &self.tableau;
        let k_sub = self.config.substeps;
        let h = self.config.fine_dt();
        let plan = &self.plan;
        let scratch = self.scratch.prepare(model.len(), tab.stages(), state);
        let mut w = state.clone();
        for k in 0..k_sub {
            let s_k = k as f64 * h;
            interp.offset(state.t + s_k)?;
            for &i in interp.points() {
                let d = interp.value_at(i, s_k);
                w.u[i] = d[0];
                w.v[i] = d[1];
            }
            w.t = state.t + s_k;
            for (g, &c) in scratch.ghosts.iter_mut().zip(tab.c()) {
                for &i in plan.fine_ghosts() {
                    let d = interp.rate_at(i, s_k + c * h);
                    g.du[i] = d[0];
                    g.dv[i] = d[1];
                }
            }
            let stage = &mut scratch.stage;
            for &i in plan.fine_active().iter().chain(plan.fine_ghosts()) {
                stage.u[i] = w.u[i];
                stage.v[i] = w.v[i];
            }
            stage.t = w.t;
            for j in 0..tab.stages() {
                let (done, rest) = scratch.stages.split_at_mut(j);
                if j > 0 {
                    combine_at(&w, h, tab.a(j), done, plan.fine_active(), stage);
                    combine_at(&w, h, tab.a(j), &scratch.ghosts, plan.fine_ghosts(), stage);
                    stage.t = w.t + tab.c()[j] * h;
                }
                model
                    .apply(stage, plan.fine_active(), &mut rest[0])
                    .map_err(|e| e.in_stage(j + 1))?;
            }
            for &i in &plan.fine_kept {
                let (u, v) = combine_point(&w, h, tab.b(), &scratch.stages, i);
                w.u[i] = u;
                w.v[i] = v;
            }

            let s_next = (k + 1) as f64 * h;
            for &i in &plan.coarse_interface {
                w.u[i] = interp.value_at(i, s_next)[0];
            }
            model.update_damage_where(&w.u, &plan.fine_kept, |_, _| true);
        }
        w.t = state.t + self.config.dt;
        Ok(w)
    }

    /// One coarse interval after startup: coarse step, interpolant, fine substeps,
    /// coarse-cadence damage, history update.
    pub fn step(&mut self, model: &mut Model, state: &FieldState) -> Result<FieldState> {
        let n = self.steps_done;
        if n < 2 {
            return Err(PdError::Invalid("two startup intervals are required first".into()));
        }
        let start = Instant::now();
        let mut next = self.coarse_advance(model, state)?;
        self.timing.record("coarse", start.elapsed());
        next.t = self.coarse_time(n + 1);

        if self.plan.labels().has_fine_region() {
            let start = Instant::now();
            let interp = build_interpolant(
                self.plan.interpolated(),
                state,
                &next,
                &self.history,
                self.config.order,
                self.config.dt,
            )?;
            self.timing.record("interpolation", start.elapsed());

            let start = Instant::now();
            let fine = self.fine_advance(model, state, &interp)?;
            for &i in &self.plan.fine_kept {
                next.u[i] = fine.u[i];
                next.v[i] = fine.v[i];
            }
            self.timing.record("fine", start.elapsed());
        }

        let start = Instant::now();
        let in_fine = &self.plan.in_fine;
        model.update_damage_where(&next.u, &self.plan.coarse_kept, |_, j| !in_fine[j]);
        self.timing.record("damage", start.elapsed());

        self.steps_done += 1;
        self.record_history(model, &next)?;
        Ok(next)
    }

    /// Next coarse interval, whichever phase the stepper is in.
    pub fn advance(&mut self, model: &mut Model, state: &FieldState) -> Result<FieldState> {
        let n = self.steps_done + 1;
        let out = if self.steps_done < 2 {
            self.startup_interval(model, state)
        } else {
            self.step(model, state)
        };
        out.map_err(|e| e.in_step(n))
    }
}

/// Startup followed by two-rate steps up to `steps` coarse intervals. `observe` sees the
/// state after every coarse interval.
pub fn mts_run<O>(
    model: &mut Model,
    labels: SubdomainLabels,
    config: MtsConfig,
    initial: &FieldState,
    steps: usize,
    mut observe: O,
) -> Result<(FieldState, TimingReport)>
where
    O: FnMut(usize, &FieldState, &Model) -> Result<()>,
{
    let mut stepper = MtsStepper::new(model, labels, config)?;
    let mut state = initial.clone();
    for n in 0..steps {
        state = stepper.advance(model, &state)?;
        observe(n + 1, &state, model)?;
    }
    Ok((state, stepper.timing.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forces::{ForceLaw, LoadKind, Loading, Material, TimeProfile};
    use crate::geometry::{build_grid, classify_subdomains, select_layer, Aabb, Dim};
    use crate::integrator::upd_run;
    use approx::assert_relative_eq;

    fn d(x: f64) -> Dof {
        [Vec3::new(x, 0.0, 0.0), Vec3::zeros()]
    }

    #[test]
    fn printed_inverse_of_order_four() {
        for dt in [1.0, 1e-3, 1e-8] {
            let a = matrix_a(4, dt).unwrap();
            let g = gamma_closed_form(4, dt).unwrap();
            let e = &a * &g - DMatrix::identity(3, 3);
            assert!(e.amax() <= 1e-13, "dt {dt}: {e}");
        }
        let a = matrix_a(4, 1.0).unwrap();
        assert_eq!(a[(2, 1)], -1.5);
        assert_eq!(a[(2, 2)], 7.0 / 6.0);
    }

    #[test]
    fn order_three_inverse() {
        let g = gamma_closed_form(3, 1.0).unwrap();
        let inv = matrix_a(3, 1.0).unwrap().try_inverse().unwrap();
        assert!((&g - &inv).amax() <= 1e-13);
        assert_relative_eq!(g[(1, 1)], -1.2, epsilon = 1e-15);
        assert!(matrix_a(5, 1.0).is_err());
    }

    #[test]
    fn f_for_constant_and_linear_rates() {
        let f = assemble_f(4, 0.5, &d(1.0), &d(2.0), &[d(3.0), d(3.0), d(3.0)]).unwrap();
        assert_eq!(f[1][0].x, 0.0);
        assert_eq!(f[2][0].x, 0.0);
        assert_relative_eq!(f[0][0].x, (2.0 - 1.0 - 0.5 * 3.0) / 0.25);
        // L(t) = 2 + m t sampled at t = 0, -dt, -2dt.
        let (m, dt) = (0.7, 0.25);
        let f = assemble_f(4, dt, &d(0.0), &d(0.0), &[d(2.0), d(2.0 - m * dt), d(2.0 - 2.0 * m * dt)]).unwrap();
        assert_relative_eq!(f[1][0].x, m, epsilon = 1e-14);
        assert_relative_eq!(f[2][0].x, m, epsilon = 1e-14);
        assert!(assemble_f(4, dt, &d(0.0), &d(0.0), &[d(1.0)]).is_err());
    }

    fn derivative_estimates(power: i32, dt: f64) -> Vec<Dof> {
        let p = power as f64;
        let u = |t: f64| t.powi(power);
        let l = |t: f64| p * t.powi(power - 1);
        let f = assemble_f(4, dt, &d(u(1.0)), &d(u(1.0 + dt)), &[d(l(1.0)), d(l(1.0 - dt)), d(l(1.0 - 2.0 * dt))])
            .unwrap();
        CorrectionMatrices::new(4, dt).unwrap().derivatives(&f)
    }

    #[test]
    fn quartic_derivatives_are_exact() {
        // u = t^4 at t = 1: (u'', u''', u'''') = (12, 24, 24).
        for dt in [0.1, 0.01] {
            let est = derivative_estimates(4, dt);
            for (e, x) in est.iter().zip([12.0, 24.0, 24.0]) {
                assert_relative_eq!(e[0].x, x, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn quintic_derivative_errors_shrink() {
        // u = t^5 at t = 1: (u'', u''', u'''') = (20, 60, 120).
        let errs: Vec<Vec<f64>> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&dt| {
                derivative_estimates(5, dt)
                    .iter()
                    .zip([20.0, 60.0, 120.0])
                    .map(|(e, x)| (e[0].x - x).abs())
                    .collect()
            })
            .collect();
        for w in errs.windows(2) {
            for k in 0..3 {
                assert!(w[1][k] < w[0][k] / 1.8, "component {k}: {errs:?}");
            }
        }
    }

    #[test]
    fn gamma_rows_scale_with_dt() {
        for order in [3, 4] {
            let g1 = gamma_closed_form(order, 1.0).unwrap();
            let dt = 1e-3;
            let g = gamma_closed_form(order, dt).unwrap();
            for r in 0..g.nrows() {
                for c in 0..g.ncols() {
                    assert_relative_eq!(g[(r, c)], g1[(r, c)] * dt.powi(-(r as i32)), max_relative = 1e-12);
                }
            }
        }
    }

    fn one_point_states(u0: Dof, u1: Dof, t0: f64, dt: f64) -> (FieldState, FieldState) {
        let mk = |x: Dof, t| FieldState {
            u: vec![x[0]],
            v: vec![x[1]],
            t,
        };
        (mk(u0, t0), mk(u1, t0 + dt))
    }

    fn history_of(rates: &[(f64, Dof)]) -> OperatorHistory {
        let mut h = OperatorHistory::new();
        for (t, r) in rates {
            h.push(*t, Rates { du: vec![r[0]], dv: vec![r[1]] }).unwrap();
        }
        h
    }

    #[test]
    fn interpolant_reproduces_polynomials() {
        // u(t) = p(t) with degree <= r; v is carried as its derivative.
        for order in [3usize, 4] {
            let coef = [0.3, -1.1, 0.7, 2.0, -0.4];
            let p = |t: f64| (0..=order).map(|k| coef[k] * t.powi(k as i32)).sum::<f64>();
            let dp = |t: f64| (1..=order).map(|k| k as f64 * coef[k] * t.powi(k as i32 - 1)).sum::<f64>();
            let (t0, dt) = (0.8, 0.125);
            let val = |t: f64| [Vec3::new(p(t), 0.0, 0.0), Vec3::new(dp(t), 0.0, 0.0)];
            let rate = |t: f64| {
                let ddp = (2..=order)
                    .map(|k| (k * (k - 1)) as f64 * coef[k] * t.powi(k as i32 - 2))
                    .sum::<f64>();
                [Vec3::new(dp(t), 0.0, 0.0), Vec3::new(ddp, 0.0, 0.0)]
            };
            let (s0, s1) = one_point_states(val(t0), val(t0 + dt), t0, dt);
            let h = history_of(&[(t0 - 2.0 * dt, rate(t0 - 2.0 * dt)), (t0 - dt, rate(t0 - dt)), (t0, rate(t0))]);
            let it = build_interpolant(&[0], &s0, &s1, &h, order, dt).unwrap();
            assert_eq!(it.eval(0, t0).unwrap(), val(t0));
            for k in 0..=8 {
                let t = t0 + k as f64 * dt / 8.0;
                let got = it.eval(0, t).unwrap()[0].x;
                assert!((got - p(t)).abs() <= 1e-12 * p(t).abs().max(1.0), "order {order} k {k}");
            }
            assert!(it.eval(0, t0 + 2.0 * dt).is_err());
        }
    }

    #[test]
    fn history_spacing_checked() {
        let mut h = OperatorHistory::new();
        h.push(0.0, Rates::zeros(1)).unwrap();
        h.push(1.0, Rates::zeros(1)).unwrap();
        assert!(h.push(1.0, Rates::zeros(1)).is_err());
        assert!(h.push(2.5, Rates::zeros(1)).is_err());
        h.push(2.0, Rates::zeros(1)).unwrap();
        h.push(3.0, Rates::zeros(1)).unwrap();
        assert_eq!(h.len(), 3);
        assert_eq!(h.time(0), Some(3.0));
    }

    fn small_plate() -> Model {
        let b = Aabb::from_slices(&[0.0, 0.0], &[0.4, 0.2]);
        let cloud = build_grid(&b, 0.025, Dim::Two, Some(0.01)).unwrap();
        let top = select_layer(&cloud, &Aabb::from_slices(&[0.0, 0.175], &[0.4, 0.2])).unwrap();
        let load = Loading {
            kind: LoadKind::BodyForce,
            layer: top,
            value: Vec3::new(0.0, 2e10, 0.0),
            profile: TimeProfile::SmoothRamp { duration: 2e-4 },
        };
        let mat = Material {
            youngs_modulus: 1.92e11,
            poisson_ratio: 1.0 / 3.0,
            density: 8000.0,
        };
        Model::new(cloud, 0.075, mat, ForceLaw::Linear, vec![load], None).unwrap()
    }

    #[test]
    fn single_rate_reduction_is_bit_identical() {
        for order in [3, 4] {
            let mut m1 = small_plate();
            let mut m2 = m1.clone();
            let s0 = m1.initial_state();
            let tab = ButcherTableau::for_order(order).unwrap();
            let mut upd = Vec::new();
            upd_run(&mut m1, &tab, &s0, 1e-5, 12, |_, s, _| {
                upd.push(s.clone());
                Ok(())
            })
            .unwrap();
            let labels = SubdomainLabels::all_coarse(m2.len());
            let cfg = MtsConfig {
                order,
                dt: 1e-5,
                substeps: 1,
            };
            let mut k = 0;
            mts_run(&mut m2, labels, cfg, &s0, 12, |_, s, _| {
                assert!(s.bit_eq(&upd[k]), "step {k}");
                k += 1;
                Ok(())
            })
            .unwrap();
            assert_eq!(k, 12);
        }
    }

    #[test]
    fn static_problem_stays_at_rest() {
        let b = Aabb::from_slices(&[0.0, 0.0], &[0.4, 0.2]);
        let cloud = build_grid(&b, 0.025, Dim::Two, Some(0.01)).unwrap();
        let mat = Material {
            youngs_modulus: 1.92e11,
            poisson_ratio: 1.0 / 3.0,
            density: 8000.0,
        };
        let mut m = Model::new(cloud, 0.075, mat, ForceLaw::Linear, Vec::new(), None).unwrap();
        let fine = Aabb::from_slices(&[0.0, 0.0], &[0.15, 0.2]);
        let labels = classify_subdomains(m.cloud(), m.bonds(), &[fine]);
        let s0 = m.initial_state();
        let cfg = MtsConfig {
            order: 4,
            dt: 1e-5,
            substeps: 4,
        };
        let (s, timing) = mts_run(&mut m, labels, cfg, &s0, 6, |_, _, _| Ok(())).unwrap();
        assert!(s.u.iter().all(|u| u.norm() == 0.0));
        assert_relative_eq!(s.t, 6e-5, max_relative = 1e-15);
        assert!(timing.entries().any(|(p, c, _)| p == "fine" && c == 4));
    }

    #[test]
    fn coupled_run_is_closer_to_fine_step_run() {
        let fine = Aabb::from_slices(&[0.0, 0.1], &[0.4, 0.2]);
        let labels = {
            let m = small_plate();
            classify_subdomains(m.cloud(), m.bonds(), &[fine])
        };
        assert!(labels.counts()[0] > 0);
        let s0 = small_plate().initial_state();
        let tab = ButcherTableau::rk4();
        let (steps, k) = (20, 4);
        let fine_run = upd_run(&mut small_plate(), &tab, &s0, 1e-5 / k as f64, steps * k, |_, _, _| Ok(())).unwrap();
        let coarse = upd_run(&mut small_plate(), &tab, &s0, 1e-5, steps, |_, _, _| Ok(())).unwrap();
        let cfg = MtsConfig {
            order: 4,
            dt: 1e-5,
            substeps: k,
        };
        let (mts, _) = mts_run(&mut small_plate(), labels, cfg, &s0, steps, |_, _, _| Ok(())).unwrap();
        let gap = |s: &FieldState| {
            s.u.iter()
                .zip(&fine_run.u)
                .map(|(a, b)| (a - b).norm_squared())
                .sum::<f64>()
                .sqrt()
        };
        assert!(gap(&mts) < gap(&coarse), "mts {} vs coarse {}", gap(&mts), gap(&coarse));
    }
}
