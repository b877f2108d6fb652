//! Numerical determination of the differential index.
//!
//! The line system is a DAE `f(t, x, x') = 0` whose index is decided by
//! 1-fullness of derivative-array matrices: the index is one if the first
//! array matrix forces the leading unknown block of its kernel to zero, two
//! if the (kernel-reduced) second array matrix does, and otherwise higher or
//! undefined. 1-fullness with respect to the first `k` columns is checked by
//! ranks: `rank(B) = k + rank(B without its first k columns)`.
//!
//! Only first-order Jacobian blocks ever enter: the chain rule identifies
//! the velocity gradients of the differentiated equations with the state
//! gradients of the originals, and the kernel reductions eliminate every
//! remaining block that would need second derivatives.
//!
//! Closed-form scalar criteria accompany the rank route: with the structured
//! blocks, 1-fullness collapses to non-vanishing of `F31 F13` (differential
//! phase pinning, or the optimality condition without algebraic weights), of
//! `F32 (df2/dx2)^-1 df2/dx1 F13` (algebraic phase pinning), or of their
//! difference `c2` (optimality with algebraic weights). Agreement of the two
//! routes is reported; disagreement flags a fragile rank decision.

use ndarray::{Array1, Array2, ArrayView1};
use ndarray_linalg::{Solve, SVD};

use crate::assembly::{CouplingCondition, GridState, JacobianBlocks, MolSystem};
use crate::error::{Error, Result};

/// Which closing equation shaped the blocks; picks the projector rows of the
/// derivative-array matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingKind {
    PhaseDifferential,
    PhaseAlgebraic,
    Optimality,
}

impl CouplingKind {
    pub fn of(coupling: &CouplingCondition) -> Self {
        match coupling {
            CouplingCondition::PhaseDifferential { .. } => CouplingKind::PhaseDifferential,
            CouplingCondition::PhaseAlgebraic { .. } => CouplingKind::PhaseAlgebraic,
            CouplingCondition::Optimality { .. } => CouplingKind::Optimality,
        }
    }

    fn is_phase(self) -> bool {
        !matches!(self, CouplingKind::Optimality)
    }
}

/// Rank-decision thresholds. The default keeps singular values above
/// `1e-10 * sigma_max`; values inside the fragile band make the decision
/// suspect and are reported.
#[derive(Debug, Clone, Copy)]
pub struct RankOptions {
    pub tol: f64,
    pub fragile_lo: f64,
    pub fragile_hi: f64,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            fragile_lo: 1e-12,
            fragile_hi: 1e-8,
        }
    }
}

impl RankOptions {
    /// Reads `MPDAE_RANK_TOL` from the environment, if set.
    pub fn from_env() -> Result<Self> {
        let mut opts = Self::default();
        if let Some(v) = std::env::var_os("MPDAE_RANK_TOL") {
            let s = v.to_string_lossy();
            let tol: f64 = s
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("MPDAE_RANK_TOL = {s:?}")))?;
            if !(tol > 0.0 && tol < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "MPDAE_RANK_TOL must be in (0, 1), got {tol}"
                )));
            }
            opts.tol = tol;
        }
        Ok(opts)
    }
}

/// Outcome of a 1-fullness test of one matrix.
#[derive(Debug, Clone)]
pub struct OneFullnessResult {
    pub is_one_full: bool,
    /// Rank of the full matrix.
    pub rank_full: usize,
    /// Rank of the matrix with the leading columns removed.
    pub rank_tail: usize,
    /// Number of leading columns the kernel must vanish on.
    pub lead_cols: usize,
    /// Singular values of the full matrix (descending).
    pub singular_values_full: Vec<f64>,
    /// Singular values of the truncated matrix (descending).
    pub singular_values_tail: Vec<f64>,
    /// Relative rank threshold used.
    pub tol: f64,
    /// Some singular value fell into the fragile band, so the rank decision
    /// may not be robust.
    pub fragile: bool,
}

/// Rank-based 1-fullness with respect to the first `lead_cols` columns:
/// the kernel of `b` is confined to the trailing columns exactly when
/// `rank(b) = lead_cols + rank(tail)`.
pub fn check_one_full(b: &Array2<f64>, lead_cols: usize, opts: &RankOptions) -> Result<OneFullnessResult> {
    crate::blas::verify_backend()?;
    if b.ncols() < lead_cols {
        return Err(Error::DimensionMismatch(format!(
            "matrix has {} columns, fewer than the {lead_cols} leading ones",
            b.ncols()
        )));
    }
    let tail = b.slice(ndarray::s![.., lead_cols..]).to_owned();
    let (rank_full, sv_full, frag_full) = numerical_rank(b, opts)?;
    let (rank_tail, sv_tail, frag_tail) = numerical_rank(&tail, opts)?;
    Ok(OneFullnessResult {
        is_one_full: rank_full == rank_tail + lead_cols,
        rank_full,
        rank_tail,
        lead_cols,
        singular_values_full: sv_full,
        singular_values_tail: sv_tail,
        tol: opts.tol,
        fragile: frag_full || frag_tail,
    })
}

fn numerical_rank(b: &Array2<f64>, opts: &RankOptions) -> Result<(usize, Vec<f64>, bool)> {
    if b.is_empty() {
        return Ok((0, Vec::new(), false));
    }
    let (_, sv, _) = b.svd(false, false)?;
    let sigma_max = sv.iter().cloned().fold(0.0f64, f64::max);
    if sigma_max == 0.0 {
        return Ok((0, sv.to_vec(), false));
    }
    let rank = sv.iter().filter(|&&s| s > opts.tol * sigma_max).count();
    let fragile = sv
        .iter()
        .any(|&s| s > opts.fragile_lo * sigma_max && s < opts.fragile_hi * sigma_max);
    Ok((rank, sv.to_vec(), fragile))
}

/// First derivative-array matrix, `2 nbar x 2 nbar`: the projector rows of
/// the velocity structure stacked over the full first-order rows
/// `(d f/d x, d f/d x')`.
pub fn build_b1(blocks: &JacobianBlocks, kind: CouplingKind) -> Array2<f64> {
    let (n1, n2) = (blocks.n1(), blocks.n2());
    let nbar = blocks.nbar();
    let mut b = Array2::zeros((2 * nbar, 2 * nbar));

    // Projector rows: identity for the differential block; for the
    // optimality coupling additionally the rank-one projector onto the span
    // of F32 (the velocity rows reachable through the coupling).
    for r in 0..n1 {
        b[[r, r]] = 1.0;
    }
    if kind == CouplingKind::Optimality {
        let p32 = span_projector(blocks.f32.view());
        if let Some(p32) = p32 {
            for r in 0..n2 {
                for c in 0..n2 {
                    b[[n1 + r, n1 + c]] = p32[[r, c]];
                }
            }
        }
    }

    // Full first-order rows.
    let row0 = nbar;
    for r in 0..n1 {
        for c in 0..n1 {
            b[[row0 + r, c]] = blocks.df1_dx1[[r, c]];
        }
        for c in 0..n2 {
            b[[row0 + r, n1 + c]] = blocks.df1_dx2[[r, c]];
        }
        b[[row0 + r, n1 + n2]] = blocks.f13[r];
        b[[row0 + r, nbar + r]] = 1.0;
    }
    for r in 0..n2 {
        for c in 0..n1 {
            b[[row0 + n1 + r, c]] = blocks.df2_dx1[[r, c]];
        }
        for c in 0..n2 {
            b[[row0 + n1 + r, n1 + c]] = blocks.df2_dx2[[r, c]];
        }
    }
    let last = row0 + n1 + n2;
    for c in 0..n1 {
        b[[last, c]] = blocks.df3_dx1[c];
        b[[last, nbar + c]] = blocks.df3_dxdot1[c];
    }
    for c in 0..n2 {
        b[[last, n1 + c]] = blocks.df3_dx2[c];
        b[[last, nbar + n1 + c]] = blocks.df3_dxdot2[c];
    }
    b
}

/// Orthogonal projector onto the span of `v`, or `None` when `v = 0` (the
/// projector is zero then).
fn span_projector(v: ArrayView1<'_, f64>) -> Option<Array2<f64>> {
    let norm2: f64 = v.iter().map(|x| x * x).sum();
    if norm2 == 0.0 {
        return None;
    }
    let n = v.len();
    let mut p = Array2::zeros((n, n));
    for r in 0..n {
        for c in 0..n {
            p[[r, c]] = v[r] * v[c] / norm2;
        }
    }
    Some(p)
}

/// Kernel-reduced second derivative-array matrix, tested for 1-fullness with
/// respect to its first column (the frequency direction).
///
/// Only first-order blocks appear: the velocity gradients of the
/// differentiated rows equal the state gradients of the originals, and for
/// the bilinear optimality coupling they are the symmetrised rows carried on
/// the blocks.
pub fn build_b2_reduced(blocks: &JacobianBlocks, kind: CouplingKind) -> Result<Array2<f64>> {
    let (n1, n2) = (blocks.n1(), blocks.n2());
    if kind.is_phase() {
        // Rows: frequency column of the differential block against the new
        // velocities; the differentiated constraints; the phase row on the
        // velocities. Columns: (nu, x1', x2').
        let rows = n1 + n2 + 1;
        let cols = 1 + n1 + n2;
        let mut b = Array2::zeros((rows, cols));
        for r in 0..n1 {
            b[[r, 0]] = blocks.f13[r];
            b[[r, 1 + r]] = 1.0;
        }
        for r in 0..n2 {
            for c in 0..n1 {
                b[[n1 + r, 1 + c]] = blocks.df2_dx1[[r, c]];
            }
            for c in 0..n2 {
                b[[n1 + r, 1 + n1 + c]] = blocks.df2_dx2[[r, c]];
            }
        }
        for c in 0..n1 {
            b[[n1 + n2, 1 + c]] = blocks.f31[c];
        }
        for c in 0..n2 {
            b[[n1 + n2, 1 + n1 + c]] = blocks.f32[c];
        }
        Ok(b)
    } else {
        // Columns: (nu, x1', x2', nu', x1'', x2'').
        let rows = 2 * n1 + n2 + 2;
        let cols = 2 * (n1 + n2 + 1);
        let mut b = Array2::zeros((rows, cols));
        let (c_v1, c_v2, c_nud, c_a1, c_a2) = (1, 1 + n1, 1 + n1 + n2, 2 + n1 + n2, 2 + 2 * n1 + n2);
        // Differential rows against the first derivatives.
        for r in 0..n1 {
            b[[r, 0]] = blocks.f13[r];
            b[[r, c_v1 + r]] = 1.0;
        }
        // Coupling row on the first derivatives.
        for c in 0..n1 {
            b[[n1, c_v1 + c]] = blocks.f31[c];
        }
        for c in 0..n2 {
            b[[n1, c_v2 + c]] = blocks.f32[c];
        }
        // Differentiated constraints.
        for r in 0..n2 {
            for c in 0..n1 {
                b[[n1 + 1 + r, c_v1 + c]] = blocks.df2_dx1[[r, c]];
            }
            for c in 0..n2 {
                b[[n1 + 1 + r, c_v2 + c]] = blocks.df2_dx2[[r, c]];
            }
        }
        // Differentiated differential rows against the second derivatives.
        let r0 = n1 + 1 + n2;
        for r in 0..n1 {
            for c in 0..n1 {
                b[[r0 + r, c_v1 + c]] = blocks.df1_dx1[[r, c]];
            }
            for c in 0..n2 {
                b[[r0 + r, c_v2 + c]] = blocks.df1_dx2[[r, c]];
            }
            b[[r0 + r, c_nud]] = blocks.f13[r];
            b[[r0 + r, c_a1 + r]] = 1.0;
        }
        // Differentiated coupling row.
        let last = r0 + n1;
        for c in 0..n1 {
            b[[last, c_v1 + c]] = blocks.f3hat_dxdot1[c];
            b[[last, c_a1 + c]] = blocks.f31[c];
        }
        for c in 0..n2 {
            b[[last, c_v2 + c]] = blocks.f3hat_dxdot2[c];
            b[[last, c_a2 + c]] = blocks.f32[c];
        }
        Ok(b)
    }
}

/// Closed-form scalar index criteria built from the structured blocks.
#[derive(Debug, Clone, Copy)]
pub struct ScalarCriteria {
    /// `F31 . F13`.
    pub c1: f64,
    /// `F31 . F13 - F32 (df2/dx2)^-1 df2/dx1 F13`.
    pub c2: f64,
    /// `F32 (df2/dx2)^-1 df2/dx1 F13` (the algebraic-pinning part).
    pub phase_algebraic: f64,
    /// Magnitude scale of the criteria (for nonzero decisions).
    pub scale: f64,
}

pub fn scalar_criteria(blocks: &JacobianBlocks) -> Result<ScalarCriteria> {
    crate::blas::verify_backend()?;
    let c1 = blocks.f31.dot(&blocks.f13);
    let chained = blocks.df2_dx1.dot(&blocks.f13);
    let solved = blocks
        .df2_dx2
        .solve(&chained)
        .map_err(|_| Error::SingularMatrix("constraint block df2/dx2".into()))?;
    let phase_algebraic = blocks.f32.dot(&solved);
    let scale = norm2(blocks.f31.view()) * norm2(blocks.f13.view())
        + norm2(blocks.f32.view()) * norm2(solved.view())
        + 1e-300;
    Ok(ScalarCriteria {
        c1,
        c2: c1 - phase_algebraic,
        phase_algebraic,
        scale,
    })
}

fn norm2(v: ArrayView1<'_, f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Index statement produced by the analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexVerdict {
    One,
    Two,
    HigherOrUndefined,
}

impl IndexVerdict {
    /// Encoding used by the command line for scripting.
    pub fn code(self) -> i32 {
        match self {
            IndexVerdict::One => 1,
            IndexVerdict::Two => 2,
            IndexVerdict::HigherOrUndefined => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            IndexVerdict::One => "1",
            IndexVerdict::Two => "2",
            IndexVerdict::HigherOrUndefined => ">2 or undefined",
        }
    }
}

/// Orthogonal projector onto the higher-index component: zero except for a
/// unit entry at the frequency position.
#[derive(Debug, Clone, Copy)]
pub struct NuProjector {
    pub nbar: usize,
}

impl NuProjector {
    pub fn matrix(&self) -> Array2<f64> {
        let mut t = Array2::zeros((self.nbar, self.nbar));
        t[[self.nbar - 1, self.nbar - 1]] = 1.0;
        t
    }
}

/// Full outcome of the index analysis at one consistent point.
#[derive(Debug, Clone)]
pub struct IndexReport {
    pub verdict: IndexVerdict,
    pub kind: CouplingKind,
    pub criteria: ScalarCriteria,
    /// The criterion deciding the scalar route for this coupling.
    pub relevant_criterion: f64,
    /// Scalar-route verdict; `None` where the closed forms are only
    /// sufficient (optimality with both leading criteria at zero).
    pub scalar_verdict: Option<IndexVerdict>,
    /// Rank and scalar routes agree (vacuously true when the scalar route is
    /// undecided).
    pub consistent: bool,
    pub b1: OneFullnessResult,
    pub b2: Option<OneFullnessResult>,
    /// Projector onto the higher-index component (the frequency).
    pub projector: NuProjector,
    pub rank_tol: f64,
    pub fragile: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct IndexOptions {
    pub rank: RankOptions,
    /// Scaled-residual bound for accepting the evaluation point.
    pub consistency_tol: f64,
}

impl Default for IndexOptions {
    fn default() -> Self {
        Self {
            rank: RankOptions::default(),
            consistency_tol: 1e-8,
        }
    }
}

/// Index determination from pre-evaluated blocks (no consistency check).
pub fn index_from_blocks(
    blocks: &JacobianBlocks,
    kind: CouplingKind,
    opts: &IndexOptions,
) -> Result<IndexReport> {
    let criteria = scalar_criteria(blocks)?;
    let scalar_tol = opts.rank.tol * criteria.scale;

    let f32_scale = blocks.f32.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let f32_zero = f32_scale <= opts.rank.tol * (1.0 + norm2(blocks.f32.view()));
    let (relevant, scalar_verdict) = match kind {
        CouplingKind::PhaseDifferential => {
            // Never one; two exactly when the pinned component moves along
            // the fast scale.
            let v = if criteria.c1.abs() > scalar_tol {
                Some(IndexVerdict::Two)
            } else {
                Some(IndexVerdict::HigherOrUndefined)
            };
            (criteria.c1, v)
        }
        CouplingKind::PhaseAlgebraic => {
            let v = if criteria.phase_algebraic.abs() > scalar_tol {
                Some(IndexVerdict::Two)
            } else {
                Some(IndexVerdict::HigherOrUndefined)
            };
            (criteria.phase_algebraic, v)
        }
        CouplingKind::Optimality => {
            if f32_zero {
                if criteria.c1.abs() > scalar_tol {
                    (criteria.c1, Some(IndexVerdict::One))
                } else {
                    // Only a sufficient rectangular test exists here; leave
                    // the scalar route undecided.
                    (criteria.c1, None)
                }
            } else if criteria.c2.abs() > scalar_tol {
                (criteria.c2, Some(IndexVerdict::Two))
            } else {
                (criteria.c2, Some(IndexVerdict::HigherOrUndefined))
            }
        }
    };

    let b1 = check_one_full(&build_b1(blocks, kind), blocks.nbar(), &opts.rank)?;
    let mut fragile = b1.fragile;
    let (verdict, b2) = if b1.is_one_full {
        (IndexVerdict::One, None)
    } else {
        let b2m = build_b2_reduced(blocks, kind)?;
        let b2 = check_one_full(&b2m, 1, &opts.rank)?;
        fragile |= b2.fragile;
        let verdict = if b2.is_one_full {
            IndexVerdict::Two
        } else {
            IndexVerdict::HigherOrUndefined
        };
        (verdict, Some(b2))
    };

    let consistent = scalar_verdict.map_or(true, |s| s == verdict);
    Ok(IndexReport {
        verdict,
        kind,
        criteria,
        relevant_criterion: relevant,
        scalar_verdict,
        consistent,
        b1,
        b2,
        projector: NuProjector {
            nbar: blocks.nbar(),
        },
        rank_tol: opts.rank.tol,
        fragile,
    })
}

/// Determines the differential index of the line system at a consistent
/// point. The index of a nonlinear DAE is a local statement, so the verdict
/// holds for this point; sweep trajectory points for a global picture.
pub fn determine_index(
    sys: &MolSystem,
    t: f64,
    state: &GridState,
    velocity: &GridState,
    opts: &IndexOptions,
) -> Result<IndexReport> {
    crate::blas::verify_backend()?;
    let residual = sys.residual(t, state, velocity);
    let scaled = sys.residual_scales(state, velocity).norm(residual.view());
    if scaled > opts.consistency_tol {
        return Err(Error::InconsistentPoint {
            residual: scaled,
            tol: opts.consistency_tol,
        });
    }
    let blocks = sys.jacobian_blocks(t, state, velocity);
    index_from_blocks(&blocks, CouplingKind::of(sys.coupling()), opts)
}

impl IndexReport {
    /// Key/value text report.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(": ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("index", self.verdict.label().to_string());
        kv("coupling_kind", format!("{:?}", self.kind));
        kv("criterion_c1", format!("{:e}", self.criteria.c1));
        kv("criterion_c2", format!("{:e}", self.criteria.c2));
        kv(
            "criterion_phase_algebraic",
            format!("{:e}", self.criteria.phase_algebraic),
        );
        kv("relevant_criterion", format!("{:e}", self.relevant_criterion));
        kv(
            "scalar_verdict",
            self.scalar_verdict
                .map_or("undecided".to_string(), |v| v.label().to_string()),
        );
        kv("scalar_rank_consistent", self.consistent.to_string());
        kv("b1_one_full", self.b1.is_one_full.to_string());
        kv("b1_rank_full", self.b1.rank_full.to_string());
        kv("b1_rank_tail", self.b1.rank_tail.to_string());
        if let Some(b2) = &self.b2 {
            kv("b2_one_full", b2.is_one_full.to_string());
            kv("b2_rank_full", b2.rank_full.to_string());
            kv("b2_rank_tail", b2.rank_tail.to_string());
        }
        kv("rank_tol", format!("{:e}", self.rank_tol));
        kv("fragile", self.fragile.to_string());
        kv(
            "projector_T",
            format!("unit entry at position {} (frequency)", self.projector.nbar),
        );
        out
    }

    pub fn csv_header() -> &'static str {
        "index,coupling_kind,c1,c2,phase_algebraic,relevant,scalar_verdict,consistent,\
         b1_one_full,b1_rank_full,b1_rank_tail,b2_one_full,b2_rank_full,b2_rank_tail,\
         rank_tol,fragile"
    }

    pub fn csv_row(&self) -> String {
        let (b2_full, b2_rank_full, b2_rank_tail) = match &self.b2 {
            Some(b2) => (
                b2.is_one_full.to_string(),
                b2.rank_full.to_string(),
                b2.rank_tail.to_string(),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        format!(
            "{},{:?},{:e},{:e},{:e},{:e},{},{},{},{},{},{},{},{},{:e},{}",
            self.verdict.code(),
            self.kind,
            self.criteria.c1,
            self.criteria.c2,
            self.criteria.phase_algebraic,
            self.relevant_criterion,
            self.scalar_verdict
                .map_or("undecided".to_string(), |v| v.code().to_string()),
            self.consistent,
            self.b1.is_one_full,
            self.b1.rank_full,
            self.b1.rank_tail,
            b2_full,
            b2_rank_full,
            b2_rank_tail,
            self.rank_tol,
            self.fragile,
        )
    }
}

/// Both sides of the closed-form identity for the optimality criterion on
/// affine constraints.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticIdentity {
    pub c2: f64,
    pub quadratic_form: f64,
    pub relative_deviation: f64,
}

/// Verifies that `c2` equals the negative weighted quadratic form
/// `-[(S1 x1)^T W1 (S1 x1) + (S2 x2)^T W2 (S2 x2)]` for models with affine
/// constraints. The left side goes through the generic criterion (constraint
/// solves included); the right side is summed directly.
pub fn verify_quadratic_identity(
    sys: &MolSystem,
    t: f64,
    state: &GridState,
) -> Result<QuadraticIdentity> {
    crate::blas::verify_backend()?;
    let (w_y, w_z) = match sys.coupling() {
        CouplingCondition::Optimality { w_y, w_z } => (w_y.clone(), w_z.clone()),
        _ => {
            return Err(Error::UnsupportedModel(
                "quadratic identity applies to the optimality coupling".into(),
            ))
        }
    };
    if sys.model().linear_constraint_parts().is_none() {
        return Err(Error::UnsupportedModel(
            "quadratic identity requires affine algebraic constraints".into(),
        ));
    }

    let velocity = GridState::zeros(sys.m(), sys.n_y(), sys.n_z());
    let blocks = sys.jacobian_blocks(t, state, &velocity);
    let criteria = scalar_criteria(&blocks)?;

    let d_y = sys.diff_y(state);
    let d_z = sys.diff_z(state);
    let (n_y, n_z) = (sys.n_y(), sys.n_z());
    let mut form = 0.0;
    for (r, &d) in d_y.iter().enumerate() {
        form += w_y[r % n_y] * d * d;
    }
    for (r, &d) in d_z.iter().enumerate() {
        form += w_z[r % n_z] * d * d;
    }
    let quadratic_form = -form;
    let scale = criteria.c2.abs().max(quadratic_form.abs()).max(1e-300);
    Ok(QuadraticIdentity {
        c2: criteria.c2,
        quadratic_form,
        relative_deviation: (criteria.c2 - quadratic_form).abs() / scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{PinnedFunction, WeightCase};
    use crate::init::{consistent_init, periodic_seed, InitGuess, InitOptions, SeedOptions};
    use crate::model::{LinearTestModel, RingOscillator};
    use crate::stencil::DifferenceStencil;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn bordered_matrix_lemma() {
        // B = [v, H; 0, w] is 1-full w.r.t. the first column iff w H^-1 v != 0.
        crate::blas::verify_backend().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let opts = RankOptions::default();
        for _ in 0..5 {
            let h = Array2::from_shape_fn((5, 5), |(i, j)| {
                rng.random_range(-1.0..1.0) + if i == j { 3.0 } else { 0.0 }
            });
            let v = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
            let w = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
            let mut b = Array2::zeros((6, 6));
            for r in 0..5 {
                b[[r, 0]] = v[r];
                for c in 0..5 {
                    b[[r, 1 + c]] = h[[r, c]];
                }
            }
            for c in 0..5 {
                b[[5, 1 + c]] = w[c];
            }
            let test = w.dot(&h.solve(&v).unwrap());
            let result = check_one_full(&b, 1, &opts).unwrap();
            assert_eq!(result.is_one_full, test.abs() > 1e-10, "w H^-1 v = {test}");
        }
    }

    #[test]
    fn identity_is_one_full_and_zero_column_is_not() {
        let opts = RankOptions::default();
        let eye = Array2::eye(6);
        assert!(check_one_full(&eye, 3, &opts).unwrap().is_one_full);
        let mut b = Array2::eye(6);
        for r in 0..6 {
            b[[r, 0]] = 0.0;
        }
        assert!(!check_one_full(&b, 1, &opts).unwrap().is_one_full);
    }

    #[test]
    fn fragile_band_is_reported() {
        let mut b = Array2::eye(4);
        b[[3, 3]] = 1e-9; // inside [1e-12, 1e-8] relative band
        let result = check_one_full(&b, 1, &RankOptions::default()).unwrap();
        assert!(result.fragile);
    }

    fn wavy_state(rng: &mut ChaCha8Rng, m: usize, n_y: usize, n_z: usize) -> GridState {
        GridState {
            y: Array2::from_shape_fn((m, n_y), |(i, c)| {
                (2.0 * std::f64::consts::PI * i as f64 / m as f64 + c as f64).sin()
                    + 0.3 * rng.random_range(-1.0..1.0)
            }),
            z: Array2::from_shape_fn((m, n_z), |(i, c)| {
                (2.0 * std::f64::consts::PI * i as f64 / m as f64 + 1.7 * c as f64).cos()
                    + 0.3 * rng.random_range(-1.0..1.0)
            }),
            nu: rng.random_range(0.5..2.0),
        }
    }

    /// Random well-conditioned linear model with the requested sizes.
    fn random_model(rng: &mut ChaCha8Rng, n_y: usize, n_z: usize) -> LinearTestModel {
        let r = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..1.0);
        let a_y = Array2::from_shape_fn((n_y, n_y), |_| r(rng));
        let a_z = Array2::from_shape_fn((n_y, n_z), |_| r(rng));
        let g_y = Array2::from_shape_fn((n_z, n_y), |_| r(rng));
        let g_z = Array2::from_shape_fn((n_z, n_z), |(i, j)| {
            0.3 * r(rng) + if i == j { 1.5 } else { 0.0 }
        });
        LinearTestModel::new(a_y, a_z, g_y, g_z).unwrap()
    }

    fn random_coupling(rng: &mut ChaCha8Rng, n_y: usize, n_z: usize) -> CouplingCondition {
        match rng.random_range(0..5) {
            0 => CouplingCondition::PhaseDifferential {
                component: rng.random_range(0..n_y),
                eta: PinnedFunction::constant(0.0),
            },
            1 => CouplingCondition::PhaseAlgebraic {
                component: rng.random_range(0..n_z),
                eta: PinnedFunction::constant(0.0),
            },
            2 => CouplingCondition::optimality_case(WeightCase::B, n_y, n_z),
            3 => CouplingCondition::optimality_case(WeightCase::C, n_y, n_z),
            _ => CouplingCondition::Optimality {
                w_y: Array1::from_shape_fn(n_y, |_| rng.random_range(0.0..2.0)),
                w_z: Array1::from_shape_fn(n_z, |_| rng.random_range(0.0..2.0)),
            },
        }
    }

    /// Acceptance-grade property: on randomized structured systems the
    /// rank-based verdicts match the scalar criteria whenever the relevant
    /// criterion clears the rank tolerance by a factor 100.
    #[test]
    fn scalar_and_rank_verdicts_agree_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let opts = IndexOptions::default();
        let mut checked = 0;
        while checked < 100 {
            let m = if rng.random_bool(0.5) { 4 } else { 8 };
            let n_y = rng.random_range(1..=2);
            let n_z = rng.random_range(1..=2);
            let model = random_model(&mut rng, n_y, n_z);
            let coupling = random_coupling(&mut rng, n_y, n_z);
            let stencil = if rng.random_bool(0.5) {
                DifferenceStencil::bdf1()
            } else {
                DifferenceStencil::bdf2()
            };
            let sys = MolSystem::new(Arc::new(model), m, stencil, coupling).unwrap();
            let state = wavy_state(&mut rng, m, n_y, n_z);
            let mut xdot = wavy_state(&mut rng, m, n_y, n_z);
            xdot.nu = 0.0;
            let blocks = sys.jacobian_blocks(0.0, &state, &xdot);
            let kind = CouplingKind::of(sys.coupling());
            let report = index_from_blocks(&blocks, kind, &opts).unwrap();
            let Some(scalar) = report.scalar_verdict else {
                continue;
            };
            if report.relevant_criterion.abs()
                <= 100.0 * opts.rank.tol * report.criteria.scale
            {
                continue;
            }
            assert_eq!(
                scalar, report.verdict,
                "disagreement: scalar {scalar:?} vs rank {:?} (criterion {:e}, kind {kind:?}, m {m})",
                report.verdict, report.relevant_criterion
            );
            checked += 1;
        }
    }

    fn ring_index(coupling: CouplingCondition, m: usize) -> IndexReport {
        let model = RingOscillator::three_stage_benchmark();
        let frozen = Arc::new(model.with_frozen_input(0.0));
        let seed = periodic_seed(
            frozen,
            m,
            DifferenceStencil::bdf2(),
            None,
            &SeedOptions::default(),
        )
        .unwrap();
        let sys = MolSystem::new(Arc::new(model), m, DifferenceStencil::bdf2(), coupling).unwrap();
        let (state, velocity) =
            consistent_init(&sys, &InitGuess::from_seed(&seed), &InitOptions::default()).unwrap();
        determine_index(&sys, 0.0, &state, &velocity, &IndexOptions::default()).unwrap()
    }

    #[test]
    fn ring_oscillator_index_table_small_grid() {
        // The benchmark verdicts: phase pinning and the optimisation with
        // algebraic weights give two, the purely differential optimisation
        // gives one; grid-size independent.
        let m = 20;
        let phase = ring_index(
            CouplingCondition::PhaseDifferential {
                component: 0,
                eta: PinnedFunction::constant(0.0),
            },
            m,
        );
        assert_eq!(phase.verdict, IndexVerdict::Two);
        assert!(phase.consistent);
        assert!(!phase.b1.is_one_full);

        let opt_a = ring_index(CouplingCondition::optimality_case(WeightCase::A, 3, 3), m);
        assert_eq!(opt_a.verdict, IndexVerdict::Two);
        assert!(opt_a.consistent);

        let opt_b = ring_index(CouplingCondition::optimality_case(WeightCase::B, 3, 3), m);
        assert_eq!(opt_b.verdict, IndexVerdict::One);
        assert!(opt_b.consistent);
        assert!(opt_b.b1.is_one_full);
        // c1 is the negative weighted quadratic form of the line differences.
        assert!(opt_b.criteria.c1 < 0.0);

        let opt_c = ring_index(CouplingCondition::optimality_case(WeightCase::C, 3, 3), m);
        assert_eq!(opt_c.verdict, IndexVerdict::Two);
        assert!(opt_c.consistent);
    }

    #[test]
    fn inconsistent_point_rejected() {
        let model = RingOscillator::three_stage_benchmark();
        let sys = MolSystem::new(
            Arc::new(model),
            10,
            DifferenceStencil::bdf2(),
            CouplingCondition::optimality_case(WeightCase::B, 3, 3),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let state = wavy_state(&mut rng, 10, 3, 3);
        let velocity = GridState::zeros(10, 3, 3);
        let err = determine_index(&sys, 0.0, &state, &velocity, &IndexOptions::default());
        assert!(matches!(err, Err(Error::InconsistentPoint { .. })));
    }

    #[test]
    fn quadratic_identity_on_random_linear_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let n_y = rng.random_range(1..=2);
            let n_z = rng.random_range(1..=2);
            let model = random_model(&mut rng, n_y, n_z);
            let coupling = CouplingCondition::Optimality {
                w_y: Array1::from_shape_fn(n_y, |_| rng.random_range(0.0..2.0)),
                w_z: Array1::from_shape_fn(n_z, |_| rng.random_range(0.1..2.0)),
            };
            let sys = MolSystem::new(Arc::new(model), 8, DifferenceStencil::bdf2(), coupling)
                .unwrap();
            let state = wavy_state(&mut rng, 8, n_y, n_z);
            let id = verify_quadratic_identity(&sys, 0.0, &state).unwrap();
            assert!(
                id.relative_deviation < 1e-10,
                "deviation {:e} (c2 {:e} vs form {:e})",
                id.relative_deviation,
                id.c2,
                id.quadratic_form
            );
            // Negative semidefinite by construction.
            assert!(id.c2 <= 0.0);
        }
    }

    #[test]
    fn quadratic_identity_trivial_cases() {
        // Constant grid: the stencil kernel kills both sides.
        let model = LinearTestModel::builtin();
        let sys = MolSystem::new(
            Arc::new(model),
            8,
            DifferenceStencil::bdf2(),
            CouplingCondition::optimality_case(WeightCase::A, 2, 2),
        )
        .unwrap();
        let state = GridState {
            y: Array2::from_elem((8, 2), 0.7),
            z: Array2::from_elem((8, 2), -0.2),
            nu: 1.0,
        };
        let id = verify_quadratic_identity(&sys, 0.0, &state).unwrap();
        assert_abs_diff_eq!(id.c2, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(id.quadratic_form, 0.0, epsilon = 1e-12);

        // Requires affine constraints.
        let ring = MolSystem::new(
            Arc::new(RingOscillator::three_stage_benchmark()),
            8,
            DifferenceStencil::bdf2(),
            CouplingCondition::optimality_case(WeightCase::A, 3, 3),
        )
        .unwrap();
        assert!(verify_quadratic_identity(&ring, 0.0, &state).is_err());
    }

    #[test]
    fn verdict_invariant_under_constraint_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let base = random_model(&mut rng, 2, 2);
        let state = wavy_state(&mut rng, 8, 2, 2);
        let mut xdot = wavy_state(&mut rng, 8, 2, 2);
        xdot.nu = 0.0;
        let opts = IndexOptions::default();
        let mut verdicts = Vec::new();
        for scale in [1e-3, 1.0, 1e3] {
            let mut model = base.clone();
            model.g_y = &model.g_y * scale;
            model.g_z = &model.g_z * scale;
            model.b_g = &model.b_g * scale;
            let sys = MolSystem::new(
                Arc::new(model),
                8,
                DifferenceStencil::bdf2(),
                CouplingCondition::optimality_case(WeightCase::A, 2, 2),
            )
            .unwrap();
            let blocks = sys.jacobian_blocks(0.0, &state, &xdot);
            let report = index_from_blocks(&blocks, CouplingKind::Optimality, &opts).unwrap();
            verdicts.push(report.verdict);
        }
        assert!(verdicts.windows(2).all(|w| w[0] == w[1]), "{verdicts:?}");
    }

    #[test]
    fn projector_selects_frequency() {
        let t = NuProjector { nbar: 5 }.matrix();
        assert_eq!(t.sum(), 1.0);
        assert_eq!(t[[4, 4]], 1.0);
        // Rank one: T^2 = T and trace 1.
        assert_eq!(t.dot(&t), t);
    }

    #[test]
    fn report_serialisation_roundtrip_fields() {
        let report = ring_index(CouplingCondition::optimality_case(WeightCase::B, 3, 3), 10);
        let text = report.to_text();
        assert!(text.contains("index: 1"));
        assert!(text.contains("scalar_rank_consistent: true"));
        let row = report.csv_row();
        assert_eq!(
            row.split(',').count(),
            IndexReport::csv_header().split(',').count()
        );
        assert!(row.starts_with("1,"));
    }
}
