//! Assembly of the method-of-lines DAE.
//!
//! Discretising the fast derivative of the lifted system on `m` periodic
//! lines and closing with a coupling equation gives a DAE in slow time with
//! the structure
//!
//! ```text
//! x1' = f1(t, x1, x2, nu)        (stacked line ODEs, f - nu D(y))
//! 0   = f2(t, x1, x2)            (stacked line constraints g)
//! 0   = f3                       (phase or optimality coupling)
//! ```
//!
//! where `x1` stacks the differential line values, `x2` the algebraic line
//! values and `x3 = nu` is the scalar local frequency. The flat layout is
//! line-major, component-minor, project-wide: entry `(line i, component c)`
//! sits at `i*n + c`. With that layout the difference operator acting on the
//! stacked vectors is `S (x) I_n`.
//!
//! Systems are immutable after construction and evaluation is re-entrant.
//! The coupling sum of the optimality condition is accumulated in fixed line
//! order so results do not depend on evaluation schedule.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::model::SemiExplicitDae;
use crate::stencil::{CirculantOperator, DifferenceStencil};

/// State of the line system: per-line differential and algebraic values plus
/// the local frequency.
///
/// `y` is `m x n_y`, `z` is `m x n_z`; both are stored row-major, so row `i`
/// is line `i` and the underlying memory is exactly the project-wide flat
/// layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub y: Array2<f64>,
    pub z: Array2<f64>,
    pub nu: f64,
}

impl GridState {
    pub fn zeros(m: usize, n_y: usize, n_z: usize) -> Self {
        Self {
            y: Array2::zeros((m, n_y)),
            z: Array2::zeros((m, n_z)),
            nu: 0.0,
        }
    }

    pub fn m(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_y(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_z(&self) -> usize {
        self.z.ncols()
    }

    /// Flat differential block `x1` (line-major).
    pub fn x1(&self) -> &[f64] {
        self.y.as_slice().expect("grid stored row-major")
    }

    /// Flat algebraic block `x2` (line-major).
    pub fn x2(&self) -> &[f64] {
        self.z.as_slice().expect("grid stored row-major")
    }

    /// Stacks `(x1, x2, nu)` into one flat vector of length `nbar`.
    pub fn to_flat(&self) -> Array1<f64> {
        let n1 = self.y.len();
        let n2 = self.z.len();
        let mut flat = Array1::zeros(n1 + n2 + 1);
        flat.as_slice_mut().unwrap()[..n1].copy_from_slice(self.x1());
        flat.as_slice_mut().unwrap()[n1..n1 + n2].copy_from_slice(self.x2());
        flat[n1 + n2] = self.nu;
        flat
    }

    /// Rebuilds a state from the flat `(x1, x2, nu)` layout.
    pub fn from_flat(flat: ArrayView1<'_, f64>, m: usize, n_y: usize, n_z: usize) -> Self {
        let n1 = m * n_y;
        let n2 = m * n_z;
        assert_eq!(flat.len(), n1 + n2 + 1, "flat state has wrong length");
        let y = Array2::from_shape_fn((m, n_y), |(i, c)| flat[i * n_y + c]);
        let z = Array2::from_shape_fn((m, n_z), |(i, c)| flat[n1 + i * n_z + c]);
        Self {
            y,
            z,
            nu: flat[n1 + n2],
        }
    }
}

/// Slowly varying pinning function with analytic derivatives, used by the
/// phase conditions.
#[derive(Clone)]
pub struct PinnedFunction {
    eta: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    deta: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    ddeta: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    description: String,
}

impl PinnedFunction {
    pub fn new(
        eta: impl Fn(f64) -> f64 + Send + Sync + 'static,
        deta: impl Fn(f64) -> f64 + Send + Sync + 'static,
        ddeta: impl Fn(f64) -> f64 + Send + Sync + 'static,
        description: impl Into<String>,
    ) -> Self {
        Self {
            eta: Arc::new(eta),
            deta: Arc::new(deta),
            ddeta: Arc::new(ddeta),
            description: description.into(),
        }
    }

    /// The common choice: a constant boundary value.
    pub fn constant(value: f64) -> Self {
        Self::new(move |_| value, |_| 0.0, |_| 0.0, format!("eta = {value}"))
    }

    pub fn eta(&self, t: f64) -> f64 {
        (self.eta)(t)
    }

    pub fn deta(&self, t: f64) -> f64 {
        (self.deta)(t)
    }

    pub fn ddeta(&self, t: f64) -> f64 {
        (self.ddeta)(t)
    }

    pub fn description(&self) -> &str {
        &self.description
    }
}

impl std::fmt::Debug for PinnedFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PinnedFunction({})", self.description)
    }
}

/// Identity/zero weight combinations investigated in the benchmark suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightCase {
    /// `W_y = I`, `W_z = I`.
    A,
    /// `W_y = I`, `W_z = 0`.
    B,
    /// `W_y = 0`, `W_z = I`.
    C,
}

/// The closing equation `f3` pinning the local frequency.
#[derive(Debug, Clone)]
pub enum CouplingCondition {
    /// Pins differential component `component` (0-based) on line 1:
    /// `y[0][component] - eta(t) = 0`.
    PhaseDifferential {
        component: usize,
        eta: PinnedFunction,
    },
    /// Pins algebraic component `component` (0-based) on line 1:
    /// `z[0][component] - eta(t) = 0`.
    PhaseAlgebraic {
        component: usize,
        eta: PinnedFunction,
    },
    /// Discretised necessary condition of the minimum-oscillation functional:
    /// `sum_i [ y_i'^T W_y D_i(y) + z_i'^T W_z D_i(z) ] = 0`.
    Optimality { w_y: Array1<f64>, w_z: Array1<f64> },
}

impl CouplingCondition {
    pub fn optimality_case(case: WeightCase, n_y: usize, n_z: usize) -> Self {
        let (w_y, w_z) = match case {
            WeightCase::A => (Array1::ones(n_y), Array1::ones(n_z)),
            WeightCase::B => (Array1::ones(n_y), Array1::zeros(n_z)),
            WeightCase::C => (Array1::zeros(n_y), Array1::ones(n_z)),
        };
        CouplingCondition::Optimality { w_y, w_z }
    }

    fn validate(&self, n_y: usize, n_z: usize) -> Result<()> {
        match self {
            CouplingCondition::PhaseDifferential { component, .. } => {
                if *component >= n_y {
                    return Err(Error::InvalidParameter(format!(
                        "phase component {component} out of range for n_y = {n_y}"
                    )));
                }
            }
            CouplingCondition::PhaseAlgebraic { component, .. } => {
                if *component >= n_z {
                    return Err(Error::InvalidParameter(format!(
                        "phase component {component} out of range for n_z = {n_z}"
                    )));
                }
            }
            CouplingCondition::Optimality { w_y, w_z } => {
                if w_y.len() != n_y || w_z.len() != n_z {
                    return Err(Error::DimensionMismatch(format!(
                        "weight lengths ({}, {}) do not match variable counts ({n_y}, {n_z})",
                        w_y.len(),
                        w_z.len()
                    )));
                }
                if w_y
                    .iter()
                    .chain(w_z.iter())
                    .any(|&w| !(w >= 0.0) || !w.is_finite())
                {
                    return Err(Error::InvalidParameter(
                        "optimisation weights must be non-negative and finite".into(),
                    ));
                }
                if !w_y.iter().chain(w_z.iter()).any(|&w| w > 0.0) {
                    return Err(Error::InvalidParameter(
                        "at least one optimisation weight must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        match self {
            CouplingCondition::PhaseDifferential { component, eta } => format!(
                "phase condition on differential component {} ({})",
                component + 1,
                eta.description()
            ),
            CouplingCondition::PhaseAlgebraic { component, eta } => format!(
                "phase condition on algebraic component {} ({})",
                component + 1,
                eta.description()
            ),
            CouplingCondition::Optimality { w_y, w_z } => {
                format!("optimality condition (w_y = {w_y}, w_z = {w_z})")
            }
        }
    }
}

/// The assembled line system: model, difference operator and coupling.
pub struct MolSystem {
    model: Arc<dyn SemiExplicitDae>,
    op: CirculantOperator,
    coupling: CouplingCondition,
}

impl MolSystem {
    pub fn new(
        model: Arc<dyn SemiExplicitDae>,
        m: usize,
        stencil: DifferenceStencil,
        coupling: CouplingCondition,
    ) -> Result<Self> {
        crate::blas::verify_backend()?;
        coupling.validate(model.n_y(), model.n_z())?;
        let op = stencil.build_matrix(m)?;
        Ok(Self {
            model,
            op,
            coupling,
        })
    }

    pub fn model(&self) -> &dyn SemiExplicitDae {
        self.model.as_ref()
    }

    pub fn model_arc(&self) -> Arc<dyn SemiExplicitDae> {
        Arc::clone(&self.model)
    }

    pub fn coupling(&self) -> &CouplingCondition {
        &self.coupling
    }

    pub fn op(&self) -> &CirculantOperator {
        &self.op
    }

    pub fn stencil(&self) -> &DifferenceStencil {
        self.op.stencil()
    }

    pub fn m(&self) -> usize {
        self.op.m()
    }

    pub fn h(&self) -> f64 {
        1.0 / self.m() as f64
    }

    pub fn n_y(&self) -> usize {
        self.model.n_y()
    }

    pub fn n_z(&self) -> usize {
        self.model.n_z()
    }

    pub fn n1(&self) -> usize {
        self.m() * self.n_y()
    }

    pub fn n2(&self) -> usize {
        self.m() * self.n_z()
    }

    pub fn nbar(&self) -> usize {
        self.n1() + self.n2() + 1
    }

    /// A system over the same grid and stencil with a different coupling.
    pub fn with_coupling(&self, coupling: CouplingCondition) -> Result<Self> {
        coupling.validate(self.n_y(), self.n_z())?;
        Ok(Self {
            model: Arc::clone(&self.model),
            op: self.op.clone(),
            coupling,
        })
    }

    /// Difference of the differential lines, `S1 x1`, line-major.
    pub fn diff_y(&self, state: &GridState) -> Array1<f64> {
        self.op.apply_lifted(state.x1(), self.n_y())
    }

    /// Difference of the algebraic lines, `S2 x2`, line-major.
    pub fn diff_z(&self, state: &GridState) -> Array1<f64> {
        self.op.apply_lifted(state.x2(), self.n_z())
    }

    /// Value of the coupling equation `f3` alone.
    pub fn coupling_residual(&self, t: f64, state: &GridState, xdot: &GridState) -> f64 {
        match &self.coupling {
            CouplingCondition::PhaseDifferential { component, eta } => {
                state.y[[0, *component]] - eta.eta(t)
            }
            CouplingCondition::PhaseAlgebraic { component, eta } => {
                state.z[[0, *component]] - eta.eta(t)
            }
            CouplingCondition::Optimality { w_y, w_z } => {
                let d_y = self.diff_y(state);
                let d_z = self.diff_z(state);
                let (m, n_y, n_z) = (self.m(), self.n_y(), self.n_z());
                let mut sum = 0.0;
                for i in 0..m {
                    for l in 0..n_y {
                        sum += w_y[l] * xdot.y[[i, l]] * d_y[i * n_y + l];
                    }
                    for l in 0..n_z {
                        sum += w_z[l] * xdot.z[[i, l]] * d_z[i * n_z + l];
                    }
                }
                sum
            }
        }
    }

    /// Residual of the full line system at `(t, state, xdot)`, length `nbar`:
    /// differential rows `x1' - (f - nu D(y))`, algebraic rows `g`, then the
    /// coupling row.
    pub fn residual(&self, t: f64, state: &GridState, xdot: &GridState) -> Array1<f64> {
        let (m, n_y, n_z) = (self.m(), self.n_y(), self.n_z());
        assert_eq!(state.m(), m, "state line count mismatch");
        let (n1, n2) = (self.n1(), self.n2());
        let d_y = self.diff_y(state);
        let mut res = Array1::zeros(self.nbar());
        for i in 0..m {
            let y_i = state.y.row(i);
            let z_i = state.z.row(i);
            let f_i = self.model.f(t, y_i, z_i);
            let g_i = self.model.g(t, y_i, z_i);
            for c in 0..n_y {
                let r = i * n_y + c;
                res[r] = xdot.y[[i, c]] - (f_i[c] - state.nu * d_y[r]);
            }
            for c in 0..n_z {
                res[n1 + i * n_z + c] = g_i[c];
            }
        }
        res[n1 + n2] = self.coupling_residual(t, state, xdot);
        res
    }

    /// All first-order Jacobian blocks of the structured system at one point.
    pub fn jacobian_blocks(&self, t: f64, state: &GridState, xdot: &GridState) -> JacobianBlocks {
        let (m, n_y, n_z) = (self.m(), self.n_y(), self.n_z());
        let (n1, n2) = (self.n1(), self.n2());
        let d_y = self.diff_y(state);

        // Block-diagonal model Jacobians, then the -nu S1 correction.
        let mut df1_dx1 = Array2::zeros((n1, n1));
        let mut df1_dx2 = Array2::zeros((n1, n2));
        let mut df2_dx1 = Array2::zeros((n2, n1));
        let mut df2_dx2 = Array2::zeros((n2, n2));
        for i in 0..m {
            let y_i = state.y.row(i);
            let z_i = state.z.row(i);
            let dfy = self.model.df_dy(t, y_i, z_i);
            let dfz = self.model.df_dz(t, y_i, z_i);
            let dgy = self.model.dg_dy(t, y_i, z_i);
            let dgz = self.model.dg_dz(t, y_i, z_i);
            for a in 0..n_y {
                for b in 0..n_y {
                    df1_dx1[[i * n_y + a, i * n_y + b]] = dfy[[a, b]];
                }
                for b in 0..n_z {
                    df1_dx2[[i * n_y + a, i * n_z + b]] = dfz[[a, b]];
                }
            }
            for a in 0..n_z {
                for b in 0..n_y {
                    df2_dx1[[i * n_z + a, i * n_y + b]] = dgy[[a, b]];
                }
                for b in 0..n_z {
                    df2_dx2[[i * n_z + a, i * n_z + b]] = dgz[[a, b]];
                }
            }
        }
        // f1 = f - nu D(y): subtract nu S1 from the block diagonal.
        for i in 0..m {
            for (offset, alpha) in self.stencil().terms() {
                let j = (i as isize + offset).rem_euclid(m as isize) as usize;
                let scale = state.nu * alpha * m as f64;
                for c in 0..n_y {
                    df1_dx1[[i * n_y + c, j * n_y + c]] -= scale;
                }
            }
        }

        let f13 = -&d_y;

        let (f31, f32, df3_dx1, df3_dx2, df3_dxdot1, df3_dxdot2, f3hat_dxdot1, f3hat_dxdot2) =
            match &self.coupling {
                CouplingCondition::PhaseDifferential { component, .. } => {
                    let mut f31 = Array1::zeros(n1);
                    f31[*component] = 1.0;
                    (
                        f31.clone(),
                        Array1::zeros(n2),
                        f31,
                        Array1::zeros(n2),
                        Array1::zeros(n1),
                        Array1::zeros(n2),
                        Array1::zeros(n1),
                        Array1::zeros(n2),
                    )
                }
                CouplingCondition::PhaseAlgebraic { component, .. } => {
                    let mut f32 = Array1::zeros(n2);
                    f32[*component] = 1.0;
                    (
                        Array1::zeros(n1),
                        f32.clone(),
                        Array1::zeros(n1),
                        f32,
                        Array1::zeros(n1),
                        Array1::zeros(n2),
                        Array1::zeros(n1),
                        Array1::zeros(n2),
                    )
                }
                CouplingCondition::Optimality { w_y, w_z } => {
                    let d_z = self.diff_z(state);
                    let lift =
                        |w: &Array1<f64>, n: usize, len: usize| Array1::from_shape_fn(len, |r| w[r % n]);
                    let w1 = lift(w_y, n_y, n1);
                    let w2 = lift(w_z, n_z, n2);
                    // f31 = W1 S1 x1, f32 = W2 S2 x2 (coefficients of the velocities).
                    let f31 = &w1 * &d_y;
                    let f32 = &w2 * &d_z;
                    // True state gradient of the bilinear f3: x1 enters through D.
                    let xdot1 = Array1::from_iter(xdot.y.iter().copied());
                    let xdot2 = Array1::from_iter(xdot.z.iter().copied());
                    let df3_dx1 = self
                        .op
                        .apply_lifted_transposed((&w1 * &xdot1).as_slice().unwrap(), n_y);
                    let df3_dx2 = self
                        .op
                        .apply_lifted_transposed((&w2 * &xdot2).as_slice().unwrap(), n_z);
                    // Velocity gradient of the differentiated coupling,
                    // the symmetrised form (W S + S^T W) xdot.
                    let f3hat_dxdot1 =
                        &df3_dx1 + &(&w1 * &self.op.apply_lifted(xdot1.as_slice().unwrap(), n_y));
                    let f3hat_dxdot2 =
                        &df3_dx2 + &(&w2 * &self.op.apply_lifted(xdot2.as_slice().unwrap(), n_z));
                    (
                        f31.clone(),
                        f32.clone(),
                        df3_dx1,
                        df3_dx2,
                        f31,
                        f32,
                        f3hat_dxdot1,
                        f3hat_dxdot2,
                    )
                }
            };

        JacobianBlocks {
            m,
            n_y,
            n_z,
            df1_dx1,
            df1_dx2,
            f13,
            df2_dx1,
            df2_dx2,
            f31,
            f32,
            df3_dx1,
            df3_dx2,
            df3_dxdot1,
            df3_dxdot2,
            f3hat_dxdot1,
            f3hat_dxdot2,
        }
    }

    /// Block magnitude scales of the residual at one point, used to weight
    /// the three row blocks `(1/s1, 1, h/s3)` both in convergence norms and
    /// for pivoting balance.
    pub fn residual_scales(&self, state: &GridState, xdot: &GridState) -> ResidualScales {
        let s1 = 1.0 + xdot.y.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let coupling = match &self.coupling {
            CouplingCondition::PhaseDifferential { component, .. } => {
                state.y[[0, *component]].abs()
            }
            CouplingCondition::PhaseAlgebraic { component, .. } => state.z[[0, *component]].abs(),
            CouplingCondition::Optimality { w_y, w_z } => {
                // Pre-cancellation magnitude of the bilinear sum: the
                // velocities are differences of terms of size |xdot| + nu |D|
                // (fast and slow parts cancel near steady profiles), so the
                // achievable accuracy of the row is set by these products,
                // not by the residual velocities themselves.
                let d_y = self.diff_y(state);
                let d_z = self.diff_z(state);
                let (m, n_y, n_z) = (self.m(), self.n_y(), self.n_z());
                let nu_abs = state.nu.abs();
                let mut sum = 0.0;
                for i in 0..m {
                    for l in 0..n_y {
                        let d = d_y[i * n_y + l].abs();
                        sum += w_y[l] * d * (xdot.y[[i, l]].abs() + nu_abs * d);
                    }
                    for l in 0..n_z {
                        let d = d_z[i * n_z + l].abs();
                        sum += w_z[l] * d * (xdot.z[[i, l]].abs() + nu_abs * d);
                    }
                }
                sum
            }
        };
        ResidualScales {
            n1: self.n1(),
            n2: self.n2(),
            h: self.h(),
            s1,
            s3: 1.0 + coupling,
        }
    }

    /// Mass matrix of the quasi-linear form `M(x) x' = rhs(t, x)`: identity
    /// rows for the differential block, zero rows for the algebraic block,
    /// and the coupling row `(F31, F32, 0)` for the optimality condition or a
    /// zero row for the phase conditions. The last column is always zero, so
    /// the matrix is singular.
    pub fn mass_matrix(&self, state: &GridState) -> Array2<f64> {
        let (n1, n2) = (self.n1(), self.n2());
        let nbar = self.nbar();
        let mut mass = Array2::zeros((nbar, nbar));
        for r in 0..n1 {
            mass[[r, r]] = 1.0;
        }
        if let CouplingCondition::Optimality { w_y, w_z } = &self.coupling {
            let d_y = self.diff_y(state);
            let d_z = self.diff_z(state);
            for r in 0..n1 {
                mass[[n1 + n2, r]] = w_y[r % self.n_y()] * d_y[r];
            }
            for r in 0..n2 {
                mass[[n1 + n2, n1 + r]] = w_z[r % self.n_z()] * d_z[r];
            }
        }
        mass
    }
}

impl std::fmt::Debug for MolSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MolSystem")
            .field("model", &self.model.description())
            .field("m", &self.m())
            .field("stencil_order", &self.stencil().order())
            .field("coupling", &self.coupling.describe())
            .finish()
    }
}

/// Frozen block scales for residual norms: the differential block is weighted
/// by the velocity magnitude, the algebraic block is taken as is, and the
/// coupling row is weighted by `h` over its term magnitude.
#[derive(Debug, Clone, Copy)]
pub struct ResidualScales {
    n1: usize,
    n2: usize,
    h: f64,
    s1: f64,
    s3: f64,
}

impl ResidualScales {
    /// Scaled infinity norm `max(|r1|/s1, |r2|, h |r3|/s3)`.
    pub fn norm(&self, residual: ArrayView1<'_, f64>) -> f64 {
        let r1 = residual
            .slice(ndarray::s![..self.n1])
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        let r2 = residual
            .slice(ndarray::s![self.n1..self.n1 + self.n2])
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        let r3 = residual[self.n1 + self.n2].abs();
        (r1 / self.s1).max(r2).max(self.h * r3 / self.s3)
    }

    /// Same norm without the coupling row.
    pub fn norm_without_coupling(&self, residual: ArrayView1<'_, f64>) -> f64 {
        let r1 = residual
            .slice(ndarray::s![..self.n1])
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        let r2 = residual
            .slice(ndarray::s![self.n1..self.n1 + self.n2])
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        (r1 / self.s1).max(r2)
    }

    /// Row weight vector `(1/s1, ..., 1, ..., h/s3)` of length `nbar`.
    pub fn row_weights(&self) -> Array1<f64> {
        let mut w = Array1::ones(self.n1 + self.n2 + 1);
        for r in 0..self.n1 {
            w[r] = 1.0 / self.s1;
        }
        w[self.n1 + self.n2] = self.h / self.s3;
        w
    }
}

/// First-order Jacobian blocks of the structured system, all evaluated at a
/// single `(t, state, xdot)` point.
///
/// Naming follows the structured form: `f1` is the differential right-hand
/// side `f - nu D(y)`, `f2 = g`, `f3` the coupling. `f13 = -S1 x1` is the
/// frequency column of `f1`. For the phase conditions `(f31, f32)` are the
/// constant selector rows multiplying the state; for the optimality condition
/// they are `(W1 S1 x1, W2 S2 x2)`, the coefficients multiplying the
/// velocities. `f3hat_dxdot*` are the velocity gradients of the once
/// differentiated optimality coupling, needed by the derivative-array tests;
/// zero for the phase conditions.
#[derive(Debug, Clone)]
pub struct JacobianBlocks {
    pub m: usize,
    pub n_y: usize,
    pub n_z: usize,
    pub df1_dx1: Array2<f64>,
    pub df1_dx2: Array2<f64>,
    pub f13: Array1<f64>,
    pub df2_dx1: Array2<f64>,
    pub df2_dx2: Array2<f64>,
    pub f31: Array1<f64>,
    pub f32: Array1<f64>,
    pub df3_dx1: Array1<f64>,
    pub df3_dx2: Array1<f64>,
    pub df3_dxdot1: Array1<f64>,
    pub df3_dxdot2: Array1<f64>,
    pub f3hat_dxdot1: Array1<f64>,
    pub f3hat_dxdot2: Array1<f64>,
}

impl JacobianBlocks {
    pub fn n1(&self) -> usize {
        self.m * self.n_y
    }

    pub fn n2(&self) -> usize {
        self.m * self.n_z
    }

    pub fn nbar(&self) -> usize {
        self.n1() + self.n2() + 1
    }

    /// Jacobian of the residual with respect to the state, `nbar x nbar`.
    ///
    /// The differential rows are `x1' - f1`, so their state blocks enter with
    /// a minus sign and the frequency column is `-f13 = S1 x1`.
    pub fn residual_jacobian_x(&self) -> Array2<f64> {
        let (n1, n2) = (self.n1(), self.n2());
        let nbar = self.nbar();
        let mut jac = Array2::zeros((nbar, nbar));
        jac.slice_mut(ndarray::s![..n1, ..n1])
            .assign(&-&self.df1_dx1);
        jac.slice_mut(ndarray::s![..n1, n1..n1 + n2])
            .assign(&-&self.df1_dx2);
        for r in 0..n1 {
            jac[[r, n1 + n2]] = -self.f13[r];
        }
        jac.slice_mut(ndarray::s![n1..n1 + n2, ..n1])
            .assign(&self.df2_dx1);
        jac.slice_mut(ndarray::s![n1..n1 + n2, n1..n1 + n2])
            .assign(&self.df2_dx2);
        for c in 0..n1 {
            jac[[n1 + n2, c]] = self.df3_dx1[c];
        }
        for c in 0..n2 {
            jac[[n1 + n2, n1 + c]] = self.df3_dx2[c];
        }
        jac
    }

    /// Jacobian of the residual with respect to the velocity, `nbar x nbar`.
    pub fn residual_jacobian_xdot(&self) -> Array2<f64> {
        let (n1, n2) = (self.n1(), self.n2());
        let nbar = self.nbar();
        let mut jac = Array2::zeros((nbar, nbar));
        for r in 0..n1 {
            jac[[r, r]] = 1.0;
        }
        for c in 0..n1 {
            jac[[n1 + n2, c]] = self.df3_dxdot1[c];
        }
        for c in 0..n2 {
            jac[[n1 + n2, n1 + c]] = self.df3_dxdot2[c];
        }
        jac
    }

    /// Newton iteration matrix `d(residual)/dx + inv_dt * d(residual)/dx'`
    /// assembled in one pass.
    pub fn iteration_matrix(&self, inv_dt: f64) -> Array2<f64> {
        let mut jac = self.residual_jacobian_x();
        let (n1, n2) = (self.n1(), self.n2());
        for r in 0..n1 {
            jac[[r, r]] += inv_dt;
        }
        for c in 0..n1 {
            jac[[n1 + n2, c]] += inv_dt * self.df3_dxdot1[c];
        }
        for c in 0..n2 {
            jac[[n1 + n2, n1 + c]] += inv_dt * self.df3_dxdot2[c];
        }
        jac
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinearTestModel, RingOscillator};
    use crate::stencil::DifferenceStencil;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;
    use ndarray_linalg::Solve;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, m: usize, n_y: usize, n_z: usize) -> GridState {
        GridState {
            y: Array2::from_shape_fn((m, n_y), |_| rng.random_range(-1.0..1.0)),
            z: Array2::from_shape_fn((m, n_z), |_| rng.random_range(-1.0..1.0)),
            nu: rng.random_range(0.1..2.0),
        }
    }

    fn small_system(coupling: CouplingCondition) -> MolSystem {
        let model = Arc::new(LinearTestModel::builtin());
        MolSystem::new(model, 6, DifferenceStencil::bdf2(), coupling).unwrap()
    }

    #[test]
    fn flat_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let state = random_grid(&mut rng, 5, 2, 3);
        let flat = state.to_flat();
        let back = GridState::from_flat(flat.view(), 5, 2, 3);
        assert_eq!(state, back);
        // Line-major layout contract: (i, c) at i*n + c.
        assert_eq!(flat[2 + 1], state.y[[1, 1]]);
        assert_eq!(flat[5 * 2 + 2 * 3 + 1], state.z[[2, 1]]);
    }

    #[test]
    fn constant_grid_reduces_to_per_line_ode() {
        // All lines equal: D terms vanish, so the differential rows are
        // exactly xdot - f per line, for any nu.
        let sys = small_system(CouplingCondition::optimality_case(WeightCase::B, 2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let line_y = Array1::from_shape_fn(2, |_| rng.random_range(-1.0..1.0));
        let line_z = Array1::from_shape_fn(2, |_| rng.random_range(-1.0..1.0));
        let state = GridState {
            y: Array2::from_shape_fn((6, 2), |(_, c)| line_y[c]),
            z: Array2::from_shape_fn((6, 2), |(_, c)| line_z[c]),
            nu: 17.3,
        };
        let xdot = random_grid(&mut rng, 6, 2, 2);
        let res = sys.residual(0.3, &state, &xdot);
        let f_line = sys.model().f(0.3, line_y.view(), line_z.view());
        for i in 0..6 {
            for c in 0..2 {
                assert_abs_diff_eq!(res[i * 2 + c], xdot.y[[i, c]] - f_line[c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn optimality_residual_zero_for_zero_velocity() {
        let sys = small_system(CouplingCondition::optimality_case(WeightCase::A, 2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let state = random_grid(&mut rng, 6, 2, 2);
        let xdot = GridState::zeros(6, 2, 2);
        assert_eq!(sys.coupling_residual(0.0, &state, &xdot), 0.0);
    }

    #[test]
    fn residual_matches_brute_force_reassembly() {
        // Independent re-assembly of the m = 4, n_y = n_z = 1 instance with
        // explicit index arithmetic, sharing no code with the implementation.
        let model = Arc::new(
            LinearTestModel::new(
                ndarray::array![[-0.8]],
                ndarray::array![[0.4]],
                ndarray::array![[0.6]],
                ndarray::array![[1.2]],
            )
            .unwrap()
            .with_offsets(ndarray::array![0.2], ndarray::array![-0.1]),
        );
        let m = 4;
        let sys = MolSystem::new(
            model,
            m,
            DifferenceStencil::bdf1(),
            CouplingCondition::Optimality {
                w_y: ndarray::array![0.7],
                w_z: ndarray::array![1.3],
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let state = random_grid(&mut rng, m, 1, 1);
        let xdot = random_grid(&mut rng, m, 1, 1);
        let t = 0.37;

        let h = 1.0 / m as f64;
        let d = |v: &Array2<f64>, i: usize| (v[[i, 0]] - v[[(i + m - 1) % m, 0]]) / h;
        let mut expected = Vec::new();
        for i in 0..m {
            let f = -0.8 * state.y[[i, 0]] + 0.4 * state.z[[i, 0]] + 0.2;
            expected.push(xdot.y[[i, 0]] - (f - state.nu * d(&state.y, i)));
        }
        for i in 0..m {
            expected.push(0.6 * state.y[[i, 0]] + 1.2 * state.z[[i, 0]] - 0.1);
        }
        let mut f3 = 0.0;
        for i in 0..m {
            f3 += 0.7 * xdot.y[[i, 0]] * d(&state.y, i) + 1.3 * xdot.z[[i, 0]] * d(&state.z, i);
        }
        expected.push(f3);

        let res = sys.residual(t, &state, &xdot);
        for (r, e) in res.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(r, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn jacobian_blocks_match_directional_derivatives() {
        let couplings = [
            CouplingCondition::PhaseDifferential {
                component: 1,
                eta: PinnedFunction::constant(0.0),
            },
            CouplingCondition::PhaseAlgebraic {
                component: 0,
                eta: PinnedFunction::constant(0.1),
            },
            CouplingCondition::optimality_case(WeightCase::A, 2, 2),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for coupling in couplings {
            let sys = small_system(coupling);
            let state = random_grid(&mut rng, 6, 2, 2);
            let xdot = random_grid(&mut rng, 6, 2, 2);
            let t = 0.21;
            let blocks = sys.jacobian_blocks(t, &state, &xdot);
            let jx = blocks.residual_jacobian_x();
            let jxd = blocks.residual_jacobian_xdot();
            let nbar = sys.nbar();
            let eps = 1e-6;
            for _ in 0..10 {
                let dv = Array1::from_shape_fn(nbar, |_| rng.random_range(-1.0..1.0));
                let dw = Array1::from_shape_fn(nbar, |_| rng.random_range(-1.0..1.0));
                let perturb = |s: f64| {
                    let sf = &state.to_flat() + &(&dv * (s * eps));
                    let wf = &xdot.to_flat() + &(&dw * (s * eps));
                    let sp = GridState::from_flat(sf.view(), 6, 2, 2);
                    let wp = GridState::from_flat(wf.view(), 6, 2, 2);
                    sys.residual(t, &sp, &wp)
                };
                let fd = (&perturb(1.0) - &perturb(-1.0)) / (2.0 * eps);
                let lin = jx.dot(&dv) + jxd.dot(&dw);
                for r in 0..nbar {
                    let scale = lin[r].abs().max(1.0);
                    assert!(
                        (fd[r] - lin[r]).abs() / scale < 1e-6,
                        "row {r}: fd {} vs linear {}",
                        fd[r],
                        lin[r]
                    );
                }
            }
        }
    }

    #[test]
    fn phase_blocks_are_selectors() {
        let sys = small_system(CouplingCondition::PhaseDifferential {
            component: 1,
            eta: PinnedFunction::constant(0.0),
        });
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let state = random_grid(&mut rng, 6, 2, 2);
        let xdot = random_grid(&mut rng, 6, 2, 2);
        let blocks = sys.jacobian_blocks(0.0, &state, &xdot);
        assert_eq!(blocks.f32, Array1::zeros(12));
        assert_eq!(blocks.f31.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(blocks.f31[1], 1.0);
        assert_eq!(blocks.df3_dxdot1, Array1::zeros(12));
    }

    #[test]
    fn zero_nu_leaves_block_diagonal() {
        let sys = small_system(CouplingCondition::optimality_case(WeightCase::B, 2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut state = random_grid(&mut rng, 6, 2, 2);
        state.nu = 0.0;
        let xdot = random_grid(&mut rng, 6, 2, 2);
        let blocks = sys.jacobian_blocks(0.4, &state, &xdot);
        // Off-line-diagonal entries of df1_dx1 come only from nu S1.
        for i in 0..6 {
            for j in 0..6 {
                if i == j {
                    continue;
                }
                for a in 0..2 {
                    for b in 0..2 {
                        assert_eq!(blocks.df1_dx1[[i * 2 + a, j * 2 + b]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn constraint_difference_identity_on_feasible_grids() {
        // For affine constraints, Gz^-1 Gy D_i(y) = -D_i(z) on any grid that
        // satisfies the constraint on every line.
        let model = LinearTestModel::builtin();
        let sys = MolSystem::new(
            Arc::new(model.clone()),
            8,
            DifferenceStencil::bdf2(),
            CouplingCondition::optimality_case(WeightCase::A, 2, 2),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = 0.63;
        let y = Array2::from_shape_fn((8, 2), |_| rng.random_range(-1.0..1.0));
        let mut z = Array2::zeros((8, 2));
        for i in 0..8 {
            let rhs = -(model.g_y.dot(&y.row(i)) + model.constraint_offset(t));
            let zi = model.g_z.solve(&rhs).unwrap();
            z.row_mut(i).assign(&zi);
        }
        let state = GridState { y, z, nu: 1.0 };
        let d_y = sys.diff_y(&state);
        let d_z = sys.diff_z(&state);
        for i in 0..8 {
            let dyi = Array1::from_iter((0..2).map(|c| d_y[i * 2 + c]));
            let lhs = model.g_z.solve(&model.g_y.dot(&dyi)).unwrap();
            for c in 0..2 {
                assert_abs_diff_eq!(lhs[c], -d_z[i * 2 + c], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn optimality_invariant_under_constant_shift() {
        let sys = small_system(CouplingCondition::optimality_case(WeightCase::A, 2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let state = random_grid(&mut rng, 6, 2, 2);
        let xdot = random_grid(&mut rng, 6, 2, 2);
        let f3 = sys.coupling_residual(0.0, &state, &xdot);
        let shifted = GridState {
            y: &state.y + 0.37,
            z: &state.z - 1.2,
            nu: state.nu,
        };
        let f3_shifted = sys.coupling_residual(0.0, &shifted, &xdot);
        assert_abs_diff_eq!(f3, f3_shifted, epsilon = 1e-10);
    }

    #[test]
    fn mass_matrix_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let state = random_grid(&mut rng, 6, 2, 2);
        for coupling in [
            CouplingCondition::PhaseDifferential {
                component: 0,
                eta: PinnedFunction::constant(0.0),
            },
            CouplingCondition::optimality_case(WeightCase::A, 2, 2),
        ] {
            let phase = matches!(coupling, CouplingCondition::PhaseDifferential { .. });
            let sys = small_system(coupling);
            let mass = sys.mass_matrix(&state);
            let nbar = sys.nbar();
            // Last column zero: the frequency has no derivative anywhere.
            for r in 0..nbar {
                assert_eq!(mass[[r, nbar - 1]], 0.0);
            }
            // Algebraic rows zero.
            for r in sys.n1()..sys.n1() + sys.n2() {
                for c in 0..nbar {
                    assert_eq!(mass[[r, c]], 0.0);
                }
            }
            if phase {
                for c in 0..nbar {
                    assert_eq!(mass[[nbar - 1, c]], 0.0);
                }
            } else {
                assert!(mass.row(nbar - 1).iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn coupling_validation() {
        let model: Arc<dyn SemiExplicitDae> = Arc::new(LinearTestModel::builtin());
        assert!(MolSystem::new(
            model.clone(),
            6,
            DifferenceStencil::bdf2(),
            CouplingCondition::PhaseDifferential {
                component: 2,
                eta: PinnedFunction::constant(0.0)
            }
        )
        .is_err());
        assert!(MolSystem::new(
            model.clone(),
            6,
            DifferenceStencil::bdf2(),
            CouplingCondition::Optimality {
                w_y: Array1::zeros(2),
                w_z: Array1::zeros(2)
            }
        )
        .is_err());
        assert!(MolSystem::new(
            model,
            6,
            DifferenceStencil::bdf2(),
            CouplingCondition::Optimality {
                w_y: ndarray::array![1.0, -0.5],
                w_z: Array1::zeros(2)
            }
        )
        .is_err());
    }

    #[test]
    fn ring_oscillator_dimensions() {
        let sys = MolSystem::new(
            Arc::new(RingOscillator::three_stage_benchmark()),
            100,
            DifferenceStencil::bdf2(),
            CouplingCondition::optimality_case(WeightCase::A, 3, 3),
        )
        .unwrap();
        assert_eq!(sys.nbar(), 601);
    }
}
