//! Implicit Euler time integration of the line system.
//!
//! Each step solves `residual(t_{n+1}, x, (x - x_n)/dt) = 0` by damped
//! Newton. The iteration matrix `d r/d x + (1/dt) d r/d x'` is assembled from
//! the Jacobian blocks and factorised by dense LU with partial pivoting;
//! factorisations are reused across iterations and steps while convergence
//! stays fast, since the line profiles drift slowly.
//!
//! Rows are scaled by `(1, 1, h)` for the differential, algebraic and
//! coupling blocks, each divided by a magnitude estimate of the block, both
//! for the convergence norm and for pivoting balance. The index-2 couplings
//! show up as constraint-drift sensitivity; the drift is recorded on the
//! trajectory, never suppressed.
//!
//! Fixed step size, no local error control. Identical inputs produce bitwise
//! identical trajectories.

use ndarray::Array1;
use ndarray_linalg::{FactorizeInto, LUFactorized, ReciprocalConditionNum, Solve};

use crate::assembly::{GridState, MolSystem};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct IntegratorConfig {
    /// Number of uniform steps.
    pub steps: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// Absolute tolerance on the scaled residual.
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    /// Smallest damping factor tried before declaring failure.
    pub min_damping: f64,
    /// Reciprocal condition estimate below which the iteration matrix counts
    /// as singular.
    pub rcond_threshold: f64,
    /// Steps whose Newton needed more than this many iterations trigger a
    /// fresh Jacobian for the next step.
    pub refresh_iters: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            t_start: 0.0,
            t_end: 1.0,
            newton_tol: 1e-10,
            max_newton_iters: 25,
            min_damping: 2f64.powi(-8),
            rcond_threshold: 1e-14,
            refresh_iters: 4,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParameter("step count must be at least 1".into()));
        }
        if !(self.t_end > self.t_start) {
            return Err(Error::InvalidParameter(format!(
                "time interval [{}, {}] is empty",
                self.t_start, self.t_end
            )));
        }
        if !(self.newton_tol > 0.0) || self.max_newton_iters == 0 {
            return Err(Error::InvalidParameter(
                "Newton tolerance and iteration budget must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }
}

/// Stored solution of an initial value run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<GridState>,
    /// Newton iterations spent per step (one entry per step).
    pub newton_iters: Vec<usize>,
    /// Infinity norm of the algebraic block at each stored state.
    pub constraint_inf: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn nu_history(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.nu).collect()
    }

    pub fn last_state(&self) -> &GridState {
        self.states.last().expect("trajectory is never empty")
    }

    /// Worst constraint residual over the whole run.
    pub fn max_constraint_drift(&self) -> f64 {
        self.constraint_inf.iter().fold(0.0f64, |a, &v| a.max(v))
    }
}

/// Outcome of a single accepted step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: GridState,
    pub newton_iters: usize,
    /// Infinity norm of the algebraic block at the accepted state.
    pub constraint_inf: f64,
}

/// One implicit Euler step from `(t_n, state_n)` with step size `dt`.
pub fn step(
    sys: &MolSystem,
    t_n: f64,
    state_n: &GridState,
    dt: f64,
    cfg: &IntegratorConfig,
) -> Result<StepOutcome> {
    crate::blas::verify_backend()?;
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "step size must be positive, got {dt}"
        )));
    }
    let mut fact = None;
    let (state, iters, constraint) = newton_step(sys, t_n + dt, state_n, dt, cfg, &mut fact)?;
    Ok(StepOutcome {
        state,
        newton_iters: iters,
        constraint_inf: constraint,
    })
}

/// Integrates the initial pair over `[t_start, t_end]` with uniform steps.
///
/// The initial velocity enters only the stored diagnostics; implicit Euler
/// rebuilds velocities from differences. Per-step Newton counts and the
/// constraint drift (the visible face of the index-2 couplings) are recorded
/// on the trajectory.
pub fn integrate(
    sys: &MolSystem,
    init: (GridState, GridState),
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    crate::blas::verify_backend()?;
    cfg.validate()?;
    let (state0, velocity0) = init;
    let dt = cfg.dt();

    let res0 = sys.residual(cfg.t_start, &state0, &velocity0);
    let constraint0 = block2_inf(sys, res0.view());

    let mut traj = Trajectory {
        times: vec![cfg.t_start],
        states: vec![state0],
        newton_iters: Vec::with_capacity(cfg.steps),
        constraint_inf: vec![constraint0],
    };

    let mut fact: Option<Factored> = None;
    for n in 0..cfg.steps {
        let t_next = cfg.t_start + (n + 1) as f64 * dt;
        let state_n = traj.states.last().unwrap();
        let (state, iters, constraint) =
            newton_step(sys, t_next, state_n, dt, cfg, &mut fact).map_err(|e| match e {
                Error::NewtonFailure {
                    residual,
                    iterations,
                    ..
                } => Error::NewtonFailure {
                    residual,
                    iterations,
                    context: format!("step {} (t = {t_next})", n + 1),
                },
                other => other,
            })?;
        if iters > cfg.refresh_iters {
            fact = None;
        }
        traj.times.push(t_next);
        traj.states.push(state);
        traj.newton_iters.push(iters);
        traj.constraint_inf.push(constraint);
    }
    Ok(traj)
}

fn block2_inf(sys: &MolSystem, res: ndarray::ArrayView1<'_, f64>) -> f64 {
    res.slice(ndarray::s![sys.n1()..sys.n1() + sys.n2()])
        .iter()
        .fold(0.0f64, |a, &v| a.max(v.abs()))
}

/// LU factorisation of the row-scaled iteration matrix together with the
/// scales it was built with.
struct Factored {
    lu: LUFactorized<ndarray::OwnedRepr<f64>>,
    row_scales: Array1<f64>,
}

impl Factored {
    fn solve(&self, residual: &Array1<f64>) -> Result<Array1<f64>> {
        let mut rhs = residual * &self.row_scales;
        self.lu.solve_inplace(&mut rhs.view_mut())?;
        Ok(rhs)
    }
}

fn factorize(
    sys: &MolSystem,
    t: f64,
    state: &GridState,
    xdot: &GridState,
    dt: f64,
    cfg: &IntegratorConfig,
) -> Result<Factored> {
    let blocks = sys.jacobian_blocks(t, state, xdot);
    let mut jac = blocks.iteration_matrix(1.0 / dt);

    // Row scaling (1/s1, 1, h/s3): balances the huge velocity rows of stiff
    // circuits and the m-term coupling row before pivoting.
    let row_scales = sys.residual_scales(state, xdot).row_weights();
    for (r, mut row) in jac.rows_mut().into_iter().enumerate() {
        if row_scales[r] != 1.0 {
            row.mapv_inplace(|v| v * row_scales[r]);
        }
    }

    let lu = jac
        .factorize_into()
        .map_err(|_| Error::SingularMatrix("implicit Euler iteration matrix".into()))?;
    let rcond = lu.rcond()?;
    if rcond < cfg.rcond_threshold {
        return Err(Error::SingularMatrix(format!(
            "iteration matrix numerically singular (rcond = {rcond:.3e})"
        )));
    }
    Ok(Factored { lu, row_scales })
}

/// Damped Newton solve of one implicit Euler stage. `fact` carries a possibly
/// stale factorisation in and the most recent one out; it is rebuilt lazily
/// whenever the iteration stalls on it.
fn newton_step(
    sys: &MolSystem,
    t_next: f64,
    state_n: &GridState,
    dt: f64,
    cfg: &IntegratorConfig,
    fact: &mut Option<Factored>,
) -> Result<(GridState, usize, f64)> {
    let (m, n_y, n_z) = (sys.m(), sys.n_y(), sys.n_z());
    let x_n = state_n.to_flat();
    let mut x = x_n.clone();
    // Iterate counter at which the current factorisation was built; a
    // factorisation is fresh only until the iterate moves again.
    let mut moves = 0usize;
    let mut built_at: Option<usize> = None;

    let eval = |x: &Array1<f64>| -> (GridState, GridState, Array1<f64>) {
        let state = GridState::from_flat(x.view(), m, n_y, n_z);
        let xdot_flat = (x - &x_n) / dt;
        let xdot = GridState::from_flat(xdot_flat.view(), m, n_y, n_z);
        let res = sys.residual(t_next, &state, &xdot);
        (state, xdot, res)
    };

    let (mut state, mut xdot, mut res) = eval(&x);
    let mut norm = sys.residual_scales(&state, &xdot).norm(res.view());
    for iter in 1..=cfg.max_newton_iters {
        if !norm.is_finite() {
            return Err(Error::NewtonFailure {
                residual: norm,
                iterations: iter - 1,
                context: "residual not finite".into(),
            });
        }
        if norm < cfg.newton_tol {
            return Ok((state, iter - 1, block2_inf(sys, res.view())));
        }
        if fact.is_none() {
            *fact = Some(factorize(sys, t_next, &state, &xdot, dt, cfg)?);
            built_at = Some(moves);
        }
        let delta = fact.as_ref().unwrap().solve(&res)?;

        // Monotone damping: the block scales are frozen at the current
        // iterate so the comparison happens in one fixed norm per iteration.
        let frozen = sys.residual_scales(&state, &xdot);
        let here = frozen.norm(res.view());
        let mut lambda = 1.0;
        let mut accepted = None;
        while lambda >= cfg.min_damping {
            let trial = &x - &(&delta * lambda);
            let out = eval(&trial);
            if frozen.norm(out.2.view()) < here {
                accepted = Some((trial, out));
                break;
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((trial, out)) => {
                x = trial;
                (state, xdot, res) = out;
                norm = sys.residual_scales(&state, &xdot).norm(res.view());
                moves += 1;
            }
            None if built_at != Some(moves) => {
                // A stale Jacobian stalled: rebuild at the current iterate.
                *fact = None;
            }
            None => {
                return Err(Error::NewtonFailure {
                    residual: norm,
                    iterations: iter,
                    context: "damping exhausted".into(),
                });
            }
        }
    }
    if norm < cfg.newton_tol {
        return Ok((state, cfg.max_newton_iters, block2_inf(sys, res.view())));
    }
    Err(Error::NewtonFailure {
        residual: norm,
        iterations: cfg.max_newton_iters,
        context: String::new(),
    })
}
