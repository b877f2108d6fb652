use mpdae::assembly::{CouplingCondition, GridState, MolSystem, PinnedFunction, WeightCase};
use mpdae::init::{consistent_init, periodic_seed, InitGuess, InitOptions, SeedOptions};
use mpdae::model::RingOscillator;
use mpdae::stencil::DifferenceStencil;
use ndarray::Array1;
use ndarray_linalg::{FactorizeInto, Solve};
use std::sync::Arc;
use std::time::Instant;

// Spec-style flat Newton over all unknowns including nu.
fn flat_step(sys: &MolSystem, t1: f64, x_n: &Array1<f64>, dt: f64) -> Result<(Array1<f64>, usize), String> {
    let (m, n_y, n_z) = (sys.m(), sys.n_y(), sys.n_z());
    let eval = |x: &Array1<f64>| {
        let s = GridState::from_flat(x.view(), m, n_y, n_z);
        let xd = GridState::from_flat(((x - x_n) / dt).view(), m, n_y, n_z);
        let r = sys.residual(t1, &s, &xd);
        (s, xd, r)
    };
    let mut x = x_n.clone();
    for iter in 0..40 {
        let (s, xd, r) = eval(&x);
        let sc = sys.residual_scales(&s, &xd);
        let norm = sc.norm(r.view());
        if norm < 1e-10 {
            return Ok((x, iter));
        }
        let blocks = sys.jacobian_blocks(t1, &s, &xd);
        let mut jac = blocks.iteration_matrix(1.0 / dt);
        let w = sc.row_weights();
        for (rr, mut row) in jac.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v * w[rr]);
        }
        let rs = &r * &w;
        let lu = jac.factorize_into().map_err(|e| e.to_string())?;
        let delta = lu.solve_into(rs).map_err(|e| e.to_string())?;
        let mut lam = 1.0;
        let mut ok = false;
        while lam >= 1.0 / 256.0 {
            let xt = &x - &(&delta * lam);
            let (st, xdt, rt) = eval(&xt);
            let _ = (st, xdt);
            if sc.norm(rt.view()) < norm {
                x = xt;
                ok = true;
                break;
            }
            lam *= 0.5;
        }
        if !ok {
            return Err(format!("damping exhausted at iter {iter}, norm {norm:.3e}"));
        }
    }
    Err("iteration budget".into())
}

fn main() {
    let m = 100;
    for (name, coupling) in [
        ("opt-b", CouplingCondition::optimality_case(WeightCase::B, 3, 3)),
        ("opt-a", CouplingCondition::optimality_case(WeightCase::A, 3, 3)),
        ("phase", CouplingCondition::PhaseDifferential { component: 0, eta: PinnedFunction::constant(0.0) }),
    ] {
        let frozen = Arc::new(RingOscillator::three_stage_benchmark().with_frozen_input(0.0));
        let seed = periodic_seed(frozen, m, DifferenceStencil::bdf2(), None, &SeedOptions::default()).unwrap();
        let sys = MolSystem::new(Arc::new(RingOscillator::three_stage_benchmark()), m,
            DifferenceStencil::bdf2(), coupling).unwrap();
        let (state, _) = consistent_init(&sys, &InitGuess::from_seed(&seed), &InitOptions::default()).unwrap();
        let dt = 1.0 / 200.0;
        let mut x = state.to_flat();
        let t0 = Instant::now();
        let mut iters_hist = vec![];
        let mut fail = None;
        for n in 0..20 {
            match flat_step(&sys, (n + 1) as f64 * dt, &x, dt) {
                Ok((xn, it)) => { x = xn; iters_hist.push(it); }
                Err(e) => { fail = Some(format!("step {}: {e}", n + 1)); break; }
            }
        }
        match fail {
            None => println!("{name}: flat OK, 20 steps in {:?}, iters {:?}, nu_end {:.3}", t0.elapsed(), iters_hist, x[x.len()-1]),
            Some(e) => println!("{name}: flat FAILED: {e}"),
        }
    }
}
