//! Explicit Runge-Kutta stepping and the single-rate driver.

use std::borrow::Borrow;

use crate::error::{PdError, Result};
use crate::forces::{FieldState, Model, Rates};
use crate::geometry::Vec3;

const TABLEAU_TOLERANCE: f64 = 1e-14;

/// Explicit Runge-Kutta coefficients; `a` is stored as its strictly lower triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl ButcherTableau {
    /// `a[j]` holds the `j` coefficients of stage `j` on the earlier stages.
    pub fn new(a: Vec<Vec<f64>>, b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let r = b.len();
        if r == 0 || a.len() != r || c.len() != r {
            return Err(PdError::Invalid("tableau arrays must all have one entry per stage".into()));
        }
        for (j, row) in a.iter().enumerate() {
            if row.len() != j {
                return Err(PdError::Invalid(format!("stage {j} must have exactly {j} coefficients")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - c[j]).abs() > TABLEAU_TOLERANCE {
                return Err(PdError::Invalid(format!("c[{j}] = {} but row sum is {sum}", c[j])));
            }
        }
        let total: f64 = b.iter().sum();
        if (total - 1.0).abs() > TABLEAU_TOLERANCE {
            return Err(PdError::Invalid(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { a, b, c })
    }

    /// Three-stage third-order method with nodes (0, 2/3, 2/3).
    pub fn rk3() -> Self {
        Self::new(
            vec![vec![], vec![2.0 / 3.0], vec![0.0, 2.0 / 3.0]],
            vec![0.25, 0.375, 0.375],
            vec![0.0, 2.0 / 3.0, 2.0 / 3.0],
        )
        .expect("rk3 tableau is valid")
    }

    /// The classical fourth-order method.
    pub fn rk4() -> Self {
        Self::new(
            vec![vec![], vec![0.5], vec![0.0, 0.5], vec![0.0, 0.0, 1.0]],
            vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            vec![0.0, 0.5, 0.5, 1.0],
        )
        .expect("rk4 tableau is valid")
    }

    pub fn for_order(order: usize) -> Result<Self> {
        match order {
            3 => Ok(Self::rk3()),
            4 => Ok(Self::rk4()),
            _ => Err(PdError::Invalid(format!("order must be 3 or 4, got {order}"))),
        }
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }
    pub fn a(&self, j: usize) -> &[f64] {
        &self.a[j]
    }
    pub fn b(&self) -> &[f64] {
        &self.b
    }
    pub fn c(&self) -> &[f64] {
        &self.c
    }
}

pub fn tableau_rk3() -> ButcherTableau {
    ButcherTableau::rk3()
}

pub fn tableau_rk4() -> ButcherTableau {
    ButcherTableau::rk4()
}

#[inline]
pub(crate) fn combine_point<R: Borrow<Rates>>(base: &FieldState, dt: f64, coeffs: &[f64], stages: &[R], i: usize) -> (Vec3, Vec3) {
    let mut du = Vec3::zeros();
    let mut dv = Vec3::zeros();
    for (&w, k) in coeffs.iter().zip(stages) {
        let k = k.borrow();
        if w != 0.0 {
            du += k.du[i] * w;
            dv += k.dv[i] * w;
        }
    }
    (base.u[i] + du * dt, base.v[i] + dv * dt)
}

/// `out = base + dt * sum_k coeffs[k] * stages[k]` at the listed points.
/// Every stepper uses this one kernel so that identical inputs give identical bits.
pub fn combine_at<R: Borrow<Rates>>(
    base: &FieldState,
    dt: f64,
    coeffs: &[f64],
    stages: &[R],
    points: &[usize],
    out: &mut FieldState,
) {
    for &i in points {
        let (u, v) = combine_point(base, dt, coeffs, stages, i);
        out.u[i] = u;
        out.v[i] = v;
    }
}

pub fn combine_all<R: Borrow<Rates>>(base: &FieldState, dt: f64, coeffs: &[f64], stages: &[R], out: &mut FieldState) {
    for i in 0..base.len() {
        let (u, v) = combine_point(base, dt, coeffs, stages, i);
        out.u[i] = u;
        out.v[i] = v;
    }
}

/// Result of one step with the stage rates it used.
#[derive(Debug, Clone)]
pub struct RkStep {
    pub state: FieldState,
    pub stages: Vec<Rates>,
}

/// One explicit RK step. `rate` fills the derivative of the stage state it is given;
/// stage states carry their stage time in `t`.
pub fn rk_step<F>(tableau: &ButcherTableau, state: &FieldState, dt: f64, mut rate: F) -> Result<RkStep>
where
    F: FnMut(&FieldState, &mut Rates) -> Result<()>,
{
    if !(dt > 0.0) {
        return Err(PdError::Invalid(format!("step size must be positive, got {dt}")));
    }
    let n = state.len();
    let mut stages: Vec<Rates> = Vec::with_capacity(tableau.stages());
    let mut stage = state.clone();
    for j in 0..tableau.stages() {
        if j > 0 {
            combine_all(state, dt, tableau.a(j), &stages, &mut stage);
            stage.t = state.t + tableau.c()[j] * dt;
        }
        let mut k = Rates::zeros(n);
        rate(&stage, &mut k).map_err(|e| e.in_stage(j + 1))?;
        stages.push(k);
    }
    let mut next = state.clone();
    combine_all(state, dt, tableau.b(), &stages, &mut next);
    next.t = state.t + dt;
    Ok(RkStep { state: next, stages })
}

/// Whole-domain stepping with one step size, breaking bonds after every step when
/// fracture is enabled. `observe` sees the state after each completed step.
pub fn upd_run<O>(
    model: &mut Model,
    tableau: &ButcherTableau,
    initial: &FieldState,
    dt: f64,
    steps: usize,
    mut observe: O,
) -> Result<FieldState>
where
    O: FnMut(usize, &FieldState, &Model) -> Result<()>,
{
    let t0 = initial.t;
    let mut state = initial.clone();
    let mut stages: Vec<Rates> = (0..tableau.stages()).map(|_| Rates::zeros(state.len())).collect();
    let mut stage = state.clone();
    for n in 0..steps {
        let m: &Model = model;
        let points = m.all_points();
        stage.clone_from(&state);
        for j in 0..tableau.stages() {
            let (done, rest) = stages.split_at_mut(j);
            if j > 0 {
                combine_all(&state, dt, tableau.a(j), done, &mut stage);
                stage.t = state.t + tableau.c()[j] * dt;
            }
            m.apply(&stage, points, &mut rest[0])
                .map_err(|e| e.in_stage(j + 1).in_step(n + 1))?;
        }
        for i in 0..state.len() {
            let (u, v) = combine_point(&state, dt, tableau.b(), &stages, i);
            state.u[i] = u;
            state.v[i] = v;
        }
        state.t = t0 + (n + 1) as f64 * dt;
        model.update_damage(&state.u);
        observe(n + 1, &state, model)?;
    }
    Ok(state)
}
