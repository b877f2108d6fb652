//! Semi-explicit DAE models and the ring-oscillator benchmark.
//!
//! A model is the pair of maps
//!
//! ```text
//! y' = f(t, y, z),      0 = g(t, y, z),
//! ```
//!
//! with differential variables `y` and algebraic variables `z`. Models supply
//! analytic first-order Jacobians; the downstream index analysis needs only
//! these blocks, and analytic forms keep the rank tests well conditioned.
//! Predetermined input signals are folded into the time argument.
//!
//! All evaluation is pure, so models can be shared freely across threads.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// A slowly varying scalar input signal with its analytic derivative.
#[derive(Clone)]
pub struct InputSignal {
    b: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    db_dt: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    description: String,
}

impl InputSignal {
    pub fn new(
        b: impl Fn(f64) -> f64 + Send + Sync + 'static,
        db_dt: impl Fn(f64) -> f64 + Send + Sync + 'static,
        description: impl Into<String>,
    ) -> Self {
        Self {
            b: Arc::new(b),
            db_dt: Arc::new(db_dt),
            description: description.into(),
        }
    }

    /// Constant signal `b(t) = value`.
    pub fn constant(value: f64) -> Self {
        Self::new(move |_| value, |_| 0.0, format!("constant b = {value}"))
    }

    /// Harmonic modulation `b(t) = 1 + sin(2 pi t / T) / 2`.
    pub fn harmonic(period: f64) -> Result<Self> {
        check_period(period)?;
        let omega = 2.0 * std::f64::consts::PI / period;
        Ok(Self::new(
            move |t| 1.0 + 0.5 * (omega * t).sin(),
            move |t| 0.5 * omega * (omega * t).cos(),
            format!("harmonic b = 1 + sin(2 pi t/{period})/2"),
        ))
    }

    /// Squared-sine modulation `b(t) = 1 + 2 sin^2(2 pi t / T)`.
    pub fn sin_squared(period: f64) -> Result<Self> {
        check_period(period)?;
        let omega = 2.0 * std::f64::consts::PI / period;
        Ok(Self::new(
            move |t| 1.0 + 2.0 * (omega * t).sin().powi(2),
            move |t| 2.0 * omega * (2.0 * omega * t).sin(),
            format!("sin^2 b = 1 + 2 sin^2(2 pi t/{period})"),
        ))
    }

    pub fn b(&self, t: f64) -> f64 {
        (self.b)(t)
    }

    pub fn db_dt(&self, t: f64) -> f64 {
        (self.db_dt)(t)
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    /// Worst relative deviation of the analytic derivative from a central
    /// difference of `b` over the given sample times.
    pub fn check_derivative(&self, times: &[f64], h: f64) -> f64 {
        times
            .iter()
            .map(|&t| {
                let fd = (self.b(t + h) - self.b(t - h)) / (2.0 * h);
                relative_deviation(fd, self.db_dt(t))
            })
            .fold(0.0, f64::max)
    }
}

impl std::fmt::Debug for InputSignal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "InputSignal({})", self.description)
    }
}

fn check_period(period: f64) -> Result<()> {
    if period > 0.0 && period.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "signal period must be positive, got {period}"
        )))
    }
}

/// Semi-explicit DAE `y' = f(t,y,z)`, `0 = g(t,y,z)` with analytic Jacobians.
///
/// The constraint Jacobian `dg/dz` must be non-singular along computed
/// trajectories (index-1 assumption); a singular value is surfaced as an
/// error by the consumers, never silently ignored.
pub trait SemiExplicitDae: Send + Sync {
    fn n_y(&self) -> usize;
    fn n_z(&self) -> usize;

    fn f(&self, t: f64, y: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Array1<f64>;
    fn g(&self, t: f64, y: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Array1<f64>;

    fn df_dy(&self, t: f64, y: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Array2<f64>;
    fn df_dz(&self, t: f64, y: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Array2<f64>;
    fn dg_dy(&self, t: f64, y: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Array2<f64>;
    fn dg_dz(&self, t: f64, y: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Array2<f64>;

    /// Partial time derivative of `f` (input-signal dependence included).
    fn df_dt(&self, t: f64, y: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Array1<f64>;
    /// Partial time derivative of `g`.
    fn dg_dt(&self, t: f64, y: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Array1<f64>;

    /// For affine constraints `g = G_y y + G_z z + b_g(t)`, the constant pair
    /// `(G_y, G_z)`; `None` otherwise.
    fn linear_constraint_parts(&self) -> Option<(Array2<f64>, Array2<f64>)> {
        None
    }

    fn description(&self) -> String {
        "semi-explicit DAE".into()
    }
}

/// Parameters of the k-stage ring oscillator.
#[derive(Debug, Clone)]
pub struct RingOscillatorParams {
    /// Stage count; must be odd for the circuit to oscillate.
    pub k: usize,
    /// Capacitance in Farad.
    pub c: f64,
    /// Resistance in Ohm.
    pub r: f64,
    /// Inverter gain (dimensionless).
    pub gain: f64,
    /// Input signal controlling the first capacitance.
    pub input: InputSignal,
}

impl RingOscillatorParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "ring oscillator stage count must be odd and positive, got {}",
                self.k
            )));
        }
        if !(self.c > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "capacitance must be positive, got {}",
                self.c
            )));
        }
        if !(self.r > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "resistance must be positive, got {}",
                self.r
            )));
        }
        Ok(())
    }
}

/// The k-stage ring oscillator.
///
/// Unknowns are node voltages `u_1..u_k` (differential) and branch currents
/// `i_1..i_k` (algebraic):
///
/// ```text
/// u_1' = i_1 / (C b(t)),   0 = R i_1 - (tanh(G u_k)     - u_1),
/// u_j' = i_j / C,          0 = R i_j - (tanh(G u_{j-1}) - u_j),   j = 2..k.
/// ```
///
/// `dg/dz = R I` is non-singular everywhere, so the system has index one.
#[derive(Debug, Clone)]
pub struct RingOscillator {
    params: RingOscillatorParams,
}

impl RingOscillator {
    pub fn new(params: RingOscillatorParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    /// Three-stage benchmark: `C = 1e-6`, `R = 1e3`, `G = -5`, harmonic input
    /// with period 1.
    pub fn three_stage_benchmark() -> Self {
        Self::new(RingOscillatorParams {
            k: 3,
            c: 1e-6,
            r: 1e3,
            gain: -5.0,
            input: InputSignal::harmonic(1.0).unwrap(),
        })
        .unwrap()
    }

    /// Eleven-stage benchmark: `C = 2e-12`, `R = 1e3`, `G = -5`, squared-sine
    /// input with period 1e-4.
    pub fn eleven_stage_benchmark() -> Self {
        Self::new(RingOscillatorParams {
            k: 11,
            c: 2e-12,
            r: 1e3,
            gain: -5.0,
            input: InputSignal::sin_squared(1e-4).unwrap(),
        })
        .unwrap()
    }

    pub fn params(&self) -> &RingOscillatorParams {
        &self.params
    }

    /// Same circuit with the input frozen to its value at `t`, making the
    /// model autonomous.
    pub fn with_frozen_input(&self, t: f64) -> Self {
        let mut params = self.params.clone();
        params.input = InputSignal::constant(self.params.input.b(t));
        Self { params }
    }

    fn pred(&self, i: usize) -> usize {
        if i == 0 {
            self.params.k - 1
        } else {
            i - 1
        }
    }

    fn sech2(&self, u: f64) -> f64 {
        // 1 - tanh^2 avoids overflow of cosh for large |G u|.
        let th = (self.params.gain * u).tanh();
        1.0 - th * th
    }
}

/// Constructs the ring-oscillator model after validating the parameters.
pub fn make_ring_oscillator(params: RingOscillatorParams) -> Result<RingOscillator> {
    RingOscillator::new(params)
}

impl SemiExplicitDae for RingOscillator {
    fn n_y(&self) -> usize {
        self.params.k
    }

    fn n_z(&self) -> usize {
        self.params.k
    }

    fn f(&self, t: f64, _y: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Array1<f64> {
        let c = self.params.c;
        let mut out = Array1::zeros(self.params.k);
        out[0] = z[0] / (c * self.params.input.b(t));
        for i in 1..self.params.k {
            out[i] = z[i] / c;
        }
        out
    }

    fn g(&self, _t: f64, y: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Array1<f64> {
        let RingOscillatorParams { k, r, gain, .. } = self.params;
        let mut out = Array1::zeros(k);
        for i in 0..k {
            out[i] = r * z[i] - ((gain * y[self.pred(i)]).tanh() - y[i]);
        }
        out
    }

    fn df_dy(&self, _t: f64, _y: ArrayView1<'_, f64>, _z: ArrayView1<'_, f64>) -> Array2<f64> {
        Array2::zeros((self.params.k, self.params.k))
    }

    fn df_dz(&self, t: f64, _y: ArrayView1<'_, f64>, _z: ArrayView1<'_, f64>) -> Array2<f64> {
        let c = self.params.c;
        let mut out = Array2::zeros((self.params.k, self.params.k));
        out[[0, 0]] = 1.0 / (c * self.params.input.b(t));
        for i in 1..self.params.k {
            out[[i, i]] = 1.0 / c;
        }
        out
    }

    fn dg_dy(&self, _t: f64, y: ArrayView1<'_, f64>, _z: ArrayView1<'_, f64>) -> Array2<f64> {
        let RingOscillatorParams { k, gain, .. } = self.params;
        let mut out = Array2::zeros((k, k));
        for i in 0..k {
            let j = self.pred(i);
            out[[i, i]] += 1.0;
            out[[i, j]] -= gain * self.sech2(y[j]);
        }
        out
    }

    fn dg_dz(&self, _t: f64, _y: ArrayView1<'_, f64>, _z: ArrayView1<'_, f64>) -> Array2<f64> {
        Array2::eye(self.params.k) * self.params.r
    }

    fn df_dt(&self, t: f64, _y: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Array1<f64> {
        let b = self.params.input.b(t);
        let db = self.params.input.db_dt(t);
        let mut out = Array1::zeros(self.params.k);
        out[0] = -z[0] * db / (self.params.c * b * b);
        out
    }

    fn dg_dt(&self, _t: f64, _y: ArrayView1<'_, f64>, _z: ArrayView1<'_, f64>) -> Array1<f64> {
        Array1::zeros(self.params.k)
    }

    fn description(&self) -> String {
        format!(
            "{}-stage ring oscillator (C = {:e}, R = {:e}, G = {}), {}",
            self.params.k,
            self.params.c,
            self.params.r,
            self.params.gain,
            self.params.input.description()
        )
    }
}

/// Fully linear test model
///
/// ```text
/// y' = A_y y + A_z z + b_f,
/// 0  = G_y y + G_z z + b_g + e_g sin(2 pi t / T_g),
/// ```
///
/// used wherever affine constraints are required exactly (kernel identities,
/// closed-form oracles).
#[derive(Debug, Clone)]
pub struct LinearTestModel {
    pub a_y: Array2<f64>,
    pub a_z: Array2<f64>,
    pub g_y: Array2<f64>,
    pub g_z: Array2<f64>,
    pub b_f: Array1<f64>,
    pub b_g: Array1<f64>,
    /// Amplitude of the sinusoidal constraint forcing (zero for autonomous).
    pub e_g: Array1<f64>,
    /// Period of the constraint forcing.
    pub t_g: f64,
}

impl LinearTestModel {
    pub fn new(
        a_y: Array2<f64>,
        a_z: Array2<f64>,
        g_y: Array2<f64>,
        g_z: Array2<f64>,
    ) -> Result<Self> {
        let n_y = a_y.nrows();
        let n_z = g_z.nrows();
        if a_y.ncols() != n_y
            || a_z.shape() != [n_y, n_z]
            || g_y.shape() != [n_z, n_y]
            || g_z.ncols() != n_z
        {
            return Err(Error::DimensionMismatch(
                "linear model blocks must form a conformable 2x2 partition".into(),
            ));
        }
        Ok(Self {
            b_f: Array1::zeros(n_y),
            b_g: Array1::zeros(n_z),
            e_g: Array1::zeros(n_z),
            t_g: 1.0,
            a_y,
            a_z,
            g_y,
            g_z,
        })
    }

    pub fn with_offsets(mut self, b_f: Array1<f64>, b_g: Array1<f64>) -> Self {
        self.b_f = b_f;
        self.b_g = b_g;
        self
    }

    pub fn with_constraint_forcing(mut self, e_g: Array1<f64>, t_g: f64) -> Self {
        self.e_g = e_g;
        self.t_g = t_g;
        self
    }

    /// Fixed 2+2 instance used by the CLI and as a reference case in tests.
    pub fn builtin() -> Self {
        let a_y = ndarray::array![[-1.0, 0.5], [0.0, -2.0]];
        let a_z = ndarray::array![[0.3, 0.0], [0.1, -0.2]];
        let g_y = ndarray::array![[0.7, -0.4], [0.2, 0.9]];
        let g_z = ndarray::array![[1.3, 0.2], [-0.1, 1.1]];
        Self::new(a_y, a_z, g_y, g_z)
            .unwrap()
            .with_offsets(ndarray::array![0.1, -0.3], ndarray::array![0.05, -0.02])
            .with_constraint_forcing(ndarray::array![0.4, 0.3], 1.0)
    }

    /// The affine constraint offset `b_g + e_g sin(2 pi t / T_g)`.
    pub fn constraint_offset(&self, t: f64) -> Array1<f64> {
        let s = (2.0 * std::f64::consts::PI * t / self.t_g).sin();
        &self.b_g + &(&self.e_g * s)
    }
}

impl SemiExplicitDae for LinearTestModel {
    fn n_y(&self) -> usize {
        self.a_y.nrows()
    }

    fn n_z(&self) -> usize {
        self.g_z.nrows()
    }

    fn f(&self, _t: f64, y: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Array1<f64> {
        self.a_y.dot(&y) + self.a_z.dot(&z) + &self.b_f
    }

    fn g(&self, t: f64, y: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Array1<f64> {
        self.g_y.dot(&y) + self.g_z.dot(&z) + self.constraint_offset(t)
    }

    fn df_dy(&self, _t: f64, _y: ArrayView1<'_, f64>, _z: ArrayView1<'_, f64>) -> Array2<f64> {
        self.a_y.clone()
    }

    fn df_dz(&self, _t: f64, _y: ArrayView1<'_, f64>, _z: ArrayView1<'_, f64>) -> Array2<f64> {
        self.a_z.clone()
    }

    fn dg_dy(&self, _t: f64, _y: ArrayView1<'_, f64>, _z: ArrayView1<'_, f64>) -> Array2<f64> {
        self.g_y.clone()
    }

    fn dg_dz(&self, _t: f64, _y: ArrayView1<'_, f64>, _z: ArrayView1<'_, f64>) -> Array2<f64> {
        self.g_z.clone()
    }

    fn df_dt(&self, _t: f64, _y: ArrayView1<'_, f64>, _z: ArrayView1<'_, f64>) -> Array1<f64> {
        Array1::zeros(self.n_y())
    }

    fn dg_dt(&self, t: f64, _y: ArrayView1<'_, f64>, _z: ArrayView1<'_, f64>) -> Array1<f64> {
        let omega = 2.0 * std::f64::consts::PI / self.t_g;
        let c = omega * (omega * t).cos();
        &self.e_g * c
    }

    fn linear_constraint_parts(&self) -> Option<(Array2<f64>, Array2<f64>)> {
        Some((self.g_y.clone(), self.g_z.clone()))
    }

    fn description(&self) -> String {
        format!(
            "linear test model ({} + {} variables)",
            self.n_y(),
            self.n_z()
        )
    }
}

fn relative_deviation(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / analytic.abs().max(1.0)
}

/// Compares the analytic Jacobians of a model against central finite
/// differences of `f` and `g` at one point; returns the worst relative
/// deviation over all entries of all six blocks.
pub fn check_jacobians(
    model: &dyn SemiExplicitDae,
    t: f64,
    y: ArrayView1<'_, f64>,
    z: ArrayView1<'_, f64>,
    h_fd: f64,
) -> Result<f64> {
    if !(h_fd > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step must be positive, got {h_fd}"
        )));
    }
    crate::blas::verify_backend()?;
    let mut worst = 0.0f64;
    let mut record = |fd: f64, an: f64| {
        let dev = relative_deviation(fd, an);
        if dev > worst {
            worst = dev;
        }
    };

    let dfy = model.df_dy(t, y, z);
    let dfz = model.df_dz(t, y, z);
    let dgy = model.dg_dy(t, y, z);
    let dgz = model.dg_dz(t, y, z);

    let mut yp = y.to_owned();
    for j in 0..model.n_y() {
        let h = h_fd * y[j].abs().max(1.0);
        yp[j] = y[j] + h;
        let f_hi = model.f(t, yp.view(), z);
        let g_hi = model.g(t, yp.view(), z);
        yp[j] = y[j] - h;
        let f_lo = model.f(t, yp.view(), z);
        let g_lo = model.g(t, yp.view(), z);
        yp[j] = y[j];
        for i in 0..model.n_y() {
            record((f_hi[i] - f_lo[i]) / (2.0 * h), dfy[[i, j]]);
        }
        for i in 0..model.n_z() {
            record((g_hi[i] - g_lo[i]) / (2.0 * h), dgy[[i, j]]);
        }
    }

    let mut zp = z.to_owned();
    for j in 0..model.n_z() {
        let h = h_fd * z[j].abs().max(1.0);
        zp[j] = z[j] + h;
        let f_hi = model.f(t, y, zp.view());
        let g_hi = model.g(t, y, zp.view());
        zp[j] = z[j] - h;
        let f_lo = model.f(t, y, zp.view());
        let g_lo = model.g(t, y, zp.view());
        zp[j] = z[j];
        for i in 0..model.n_y() {
            record((f_hi[i] - f_lo[i]) / (2.0 * h), dfz[[i, j]]);
        }
        for i in 0..model.n_z() {
            record((g_hi[i] - g_lo[i]) / (2.0 * h), dgz[[i, j]]);
        }
    }

    let h = h_fd * t.abs().max(1.0);
    let dft = model.df_dt(t, y, z);
    let dgt = model.dg_dt(t, y, z);
    let f_hi = model.f(t + h, y, z);
    let f_lo = model.f(t - h, y, z);
    let g_hi = model.g(t + h, y, z);
    let g_lo = model.g(t - h, y, z);
    for i in 0..model.n_y() {
        record((f_hi[i] - f_lo[i]) / (2.0 * h), dft[i]);
    }
    for i in 0..model.n_z() {
        record((g_hi[i] - g_lo[i]) / (2.0 * h), dgt[i]);
    }

    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_point(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
        Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn parameter_validation() {
        let mut params = RingOscillator::three_stage_benchmark().params().clone();
        params.k = 4;
        assert!(RingOscillator::new(params.clone()).is_err());
        params.k = 3;
        params.c = 0.0;
        assert!(RingOscillator::new(params.clone()).is_err());
        params.c = 1e-6;
        params.r = -1.0;
        assert!(RingOscillator::new(params).is_err());
        assert!(InputSignal::harmonic(0.0).is_err());
        assert!(InputSignal::sin_squared(-2.0).is_err());
    }

    #[test]
    fn input_signal_values() {
        let harmonic = InputSignal::harmonic(1.0).unwrap();
        assert_abs_diff_eq!(harmonic.b(0.0), 1.0);
        assert_abs_diff_eq!(harmonic.b(0.25), 1.5, epsilon = 1e-15);
        let sinsq = InputSignal::sin_squared(1.0).unwrap();
        assert_abs_diff_eq!(sinsq.b(0.25), 3.0, epsilon = 1e-13);
    }

    #[test]
    fn input_signal_derivatives_match_fd() {
        let times = [0.0, 0.1, 0.3, 0.77, 1.4];
        for signal in [
            InputSignal::harmonic(1.0).unwrap(),
            InputSignal::sin_squared(0.5).unwrap(),
            InputSignal::constant(2.0),
        ] {
            assert!(signal.check_derivative(&times, 1e-6) < 1e-9);
        }
    }

    #[test]
    fn constraint_vanishes_at_origin() {
        let model = RingOscillator::three_stage_benchmark();
        let zero = Array1::zeros(3);
        for t in [0.0, 0.33, 2.5] {
            let g = model.g(t, zero.view(), zero.view());
            for &v in g.iter() {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn dg_dz_is_r_times_identity() {
        let model = RingOscillator::three_stage_benchmark();
        let zero = Array1::zeros(3);
        let dgz = model.dg_dz(0.0, zero.view(), zero.view());
        assert_eq!(dgz, Array2::eye(3) * 1e3);
    }

    #[test]
    fn ring_oscillator_jacobians_match_fd() {
        let model = RingOscillator::three_stage_benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let y = random_point(&mut rng, 3);
            let z = random_point(&mut rng, 3) * 1e-3;
            let t = rng.random_range(0.0..1.0);
            let dev = check_jacobians(&model, t, y.view(), z.view(), 1e-6).unwrap();
            assert!(dev < 1e-6, "jacobian deviation {dev}");
        }
    }

    #[test]
    fn linear_model_jacobians_exact() {
        let model = LinearTestModel::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = random_point(&mut rng, 2);
        let z = random_point(&mut rng, 2);
        // FD is exact for linear maps up to roundoff; t-forcing is smooth.
        let dev = check_jacobians(&model, 0.4, y.view(), z.view(), 1e-6).unwrap();
        assert!(dev < 1e-9, "deviation {dev}");
    }

    #[test]
    fn frozen_input_is_autonomous() {
        let model = RingOscillator::eleven_stage_benchmark().with_frozen_input(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = random_point(&mut rng, 11);
        let z = random_point(&mut rng, 11);
        for t in [0.0, 1e-5, 3e-4] {
            assert_eq!(model.df_dt(t, y.view(), z.view()), Array1::zeros(11));
            assert_eq!(model.dg_dt(t, y.view(), z.view()), Array1::zeros(11));
        }
        // f and g themselves must not depend on t either.
        let f0 = model.f(0.0, y.view(), z.view());
        let f1 = model.f(0.7, y.view(), z.view());
        assert_eq!(f0, f1);
    }

    #[test]
    fn fd_step_must_be_positive() {
        let model = LinearTestModel::builtin();
        let y = Array1::zeros(2);
        let z = Array1::zeros(2);
        assert!(check_jacobians(&model, 0.0, y.view(), z.view(), 0.0).is_err());
    }
}
