//! Reference solutions: a Newton power flow for fixed injections and a
//! grid-search OPF over tiny feeders. Both work directly on bus voltages and
//! share no code with the relaxations.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{evaluate_cost, CostError, CostWeights};
use crate::feeder::{gamma, Feeder, Vec3, C64};

pub const PF_TOL: f64 = 1e-10;
pub const PF_MAX_ITER: usize = 50;
/// `|Gamma V|` components below this count as zero.
pub const DELTA_DEGENERATE_TOL: f64 = 1e-9;
pub const BRUTE_FORCE_MAX_DIMS: usize = 4;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("power flow did not converge in {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("singular power flow Jacobian")]
    Singular,
    #[error("line-to-line voltage vanishes under a delta load at bus `{bus}`")]
    DeltaDegenerate { bus: String },
    #[error("{0} free injection scalars exceed the grid-search limit of {BRUTE_FORCE_MAX_DIMS}")]
    TooManyDims(usize),
    #[error("no grid point satisfies the voltage and substation limits")]
    NoFeasiblePoint,
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// Delta currents `I_k = conj(s_k / (Gamma V)_k)`, zero where both the
/// line-to-line voltage and the load vanish.
pub fn delta_currents(gv: &Vec3, s_delta: &Vec3) -> Option<Vec3> {
    let mut i = Vec3::zeros();
    for k in 0..3 {
        if s_delta[k].norm() < DELTA_DEGENERATE_TOL {
            continue;
        }
        if gv[k].norm() < DELTA_DEGENERATE_TOL {
            return None;
        }
        i[k] = (s_delta[k] / gv[k]).conj();
    }
    Some(i)
}

/// Bus admittance matrix over slots `3 j + phase` (shunts included).
pub fn bus_admittance(feeder: &Feeder) -> DMatrix<C64> {
    let n = feeder.n_buses();
    let mut y = DMatrix::zeros(3 * n, 3 * n);
    let mut add = |a: usize, b: usize, m: &crate::feeder::Mat3, sign: f64| {
        for r in 0..3 {
            for c in 0..3 {
                y[(3 * a + r, 3 * b + c)] += m[(r, c)] * sign;
            }
        }
    };
    for line in &feeder.lines {
        add(line.from, line.from, &line.y, 1.0);
        add(line.to, line.to, &line.y, 1.0);
        add(line.from, line.to, &line.y, -1.0);
        add(line.to, line.from, &line.y, -1.0);
    }
    for j in 0..n {
        add(j, j, &feeder.shunt[j], 1.0);
    }
    y
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PfSolution {
    pub v: Vec<Vec3>,
    pub i_delta: Vec<Vec3>,
    /// Wye injections with the substation entry filled in by the flow.
    pub s: Vec<Vec3>,
    pub iterations: usize,
    /// Largest power mismatch, per unit.
    pub residual: f64,
}

struct Pf<'a> {
    feeder: &'a Feeder,
    ybus: DMatrix<C64>,
    /// Unknown slots (non-substation bus phases).
    slots: Vec<usize>,
}

impl Pf<'_> {
    fn voltages(&self, full: &DVector<C64>) -> Vec<Vec3> {
        (0..self.feeder.n_buses()).map(|j| Vec3::from_fn(|r, _| full[3 * j + r])).collect()
    }

    /// Per-slot injection `V o conj(J)` with `J = Y V + Gamma^T I_delta`,
    /// and the delta currents.
    fn injections(&self, full: &DVector<C64>, s_delta: &[Vec3]) -> Result<(DVector<C64>, Vec<Vec3>), OracleError> {
        let g = gamma();
        let yv = &self.ybus * full;
        let v = self.voltages(full);
        let mut out = DVector::zeros(full.len());
        let mut currents = Vec::with_capacity(v.len());
        for (j, vj) in v.iter().enumerate() {
            let i = delta_currents(&(g * vj), &s_delta[j])
                .ok_or_else(|| OracleError::DeltaDegenerate { bus: self.feeder.buses[j].id.clone() })?;
            let gi = g.transpose() * i;
            for r in self.feeder.phases(j).slots() {
                let p = 3 * j + r;
                out[p] = full[p] * (yv[p] + gi[r]).conj();
            }
            currents.push(i);
        }
        Ok((out, currents))
    }

    /// Wirtinger derivatives `A = dF/dV`, `B = dF/dconj(V)` on the unknown slots.
    fn jacobian(&self, full: &DVector<C64>, s_delta: &[Vec3]) -> (DMatrix<C64>, DMatrix<C64>) {
        let g = gamma();
        let m = self.slots.len();
        let yv = &self.ybus * full;
        let mut a = DMatrix::zeros(m, m);
        let mut b = DMatrix::zeros(m, m);
        let pos: std::collections::HashMap<usize, usize> = self.slots.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        for (i, &p) in self.slots.iter().enumerate() {
            let (j, phi) = (p / 3, p % 3);
            let vj = Vec3::from_fn(|r, _| full[3 * j + r]);
            let gv = g * vj;
            // conj(J_p) = conj(Y V)_p + sum_k Gamma[k, phi] s_k / (Gamma V)_k
            let mut cj = yv[p].conj();
            for k in 0..3 {
                if s_delta[j][k].norm() >= DELTA_DEGENERATE_TOL && g[(k, phi)].re != 0.0 {
                    cj += s_delta[j][k] * g[(k, phi)].re / gv[k];
                }
            }
            a[(i, i)] += cj;
            for psi in 0..3 {
                let Some(&q) = pos.get(&(3 * j + psi)) else { continue };
                let mut d = C64::new(0.0, 0.0);
                for k in 0..3 {
                    if s_delta[j][k].norm() >= DELTA_DEGENERATE_TOL {
                        d -= s_delta[j][k] * g[(k, phi)] * g[(k, psi)] / (gv[k] * gv[k]);
                    }
                }
                a[(i, q)] += full[p] * d;
            }
            for (q, &pq) in self.slots.iter().enumerate() {
                let y = self.ybus[(p, pq)];
                if y != C64::new(0.0, 0.0) {
                    b[(i, q)] += full[p] * y.conj();
                }
            }
        }
        (a, b)
    }
}

/// Solves the power flow for fixed wye injections `s` (substation entry
/// ignored) and delta draws `s_delta`, from a flat start at `v_ref`.
pub fn newton_pf(feeder: &Feeder, s: &[Vec3], s_delta: &[Vec3]) -> Result<PfSolution, OracleError> {
    let n = feeder.n_buses();
    let slots: Vec<usize> = (1..n).flat_map(|j| feeder.phases(j).slots().into_iter().map(move |r| 3 * j + r)).collect();
    let pf = Pf { feeder, ybus: bus_admittance(feeder), slots };
    let mut full = DVector::from_fn(3 * n, |p, _| if feeder.phases(p / 3).contains(p % 3) { feeder.v_ref[p % 3] } else { C64::new(0.0, 0.0) });
    let m = pf.slots.len();
    let mismatch = |inj: &DVector<C64>| DVector::from_fn(m, |i, _| inj[pf.slots[i]] - s[pf.slots[i] / 3][pf.slots[i] % 3]);
    let mut residual = f64::INFINITY;
    for it in 0..=PF_MAX_ITER {
        let (inj, currents) = pf.injections(&full, s_delta)?;
        let f = mismatch(&inj);
        residual = f.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if residual <= PF_TOL {
            let v = pf.voltages(&full);
            let mut s_out = s.to_vec();
            s_out[0] = Vec3::from_fn(|r, _| inj[r]);
            return Ok(PfSolution { v, i_delta: currents, s: s_out, iterations: it, residual });
        }
        if it == PF_MAX_ITER {
            break;
        }
        let (a, b) = pf.jacobian(&full, s_delta);
        let sum = &a + &b;
        let diff = &a - &b;
        let mut jac = DMatrix::<f64>::zeros(2 * m, 2 * m);
        for r in 0..m {
            for c in 0..m {
                jac[(r, c)] = sum[(r, c)].re;
                jac[(r, m + c)] = -diff[(r, c)].im;
                jac[(m + r, c)] = sum[(r, c)].im;
                jac[(m + r, m + c)] = diff[(r, c)].re;
            }
        }
        let rhs = DVector::from_fn(2 * m, |i, _| if i < m { -f[i].re } else { -f[i - m].im });
        let step = jac.lu().solve(&rhs).ok_or(OracleError::Singular)?;
        for (i, &p) in pf.slots.iter().enumerate() {
            full[p] += C64::new(step[i], step[m + i]);
        }
    }
    Err(OracleError::NoConvergence { iterations: PF_MAX_ITER, residual })
}

/// One free injection scalar of the feeder's device regions.
#[derive(Clone, Debug)]
struct FreeDim {
    bus: usize,
    slot: usize,
    delta: bool,
    active: bool,
    lo: f64,
    hi: f64,
}

fn free_dims(feeder: &Feeder) -> Vec<FreeDim> {
    let mut out = Vec::new();
    for j in 1..feeder.n_buses() {
        for (delta, region) in [(false, &feeder.wye[j]), (true, &feeder.delta[j])] {
            let Some(r) = region else { continue };
            for slot in r.mask.slots() {
                if r.p_max[slot] > r.p_min[slot] {
                    out.push(FreeDim { bus: j, slot, delta, active: true, lo: r.p_min[slot], hi: r.p_max[slot] });
                }
                if r.q_max[slot] > r.q_min[slot] {
                    out.push(FreeDim { bus: j, slot, delta, active: false, lo: r.q_min[slot], hi: r.q_max[slot] });
                }
            }
        }
    }
    out
}

/// Injections at the lower corner of every region (exact where fixed).
fn base_injections(feeder: &Feeder) -> (Vec<Vec3>, Vec<Vec3>) {
    let corner = |regions: &[Option<crate::feeder::InjectionRegion>]| {
        regions
            .iter()
            .map(|r| match r {
                Some(r) => Vec3::from_fn(|i, _| if r.mask.contains(i) { C64::new(r.p_min[i], r.q_min[i]) } else { C64::new(0.0, 0.0) }),
                None => Vec3::zeros(),
            })
            .collect::<Vec<_>>()
    };
    let mut s = corner(&feeder.wye);
    s[0] = Vec3::zeros();
    (s, corner(&feeder.delta))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BruteForceResult {
    /// `f + lambda / base * sum |I_delta|^2`, per unit.
    pub objective: f64,
    /// `f` alone, per unit.
    pub cost: f64,
    pub pf: PfSolution,
    pub s_delta: Vec<Vec3>,
    /// Grid spacing per free scalar at the finest level.
    pub cell: Vec<f64>,
    /// Largest objective change one cell away from the optimum, per unit.
    pub cell_spread: f64,
    pub evaluations: usize,
}

/// Options for [`brute_force_opf`]: `points` per free scalar, and `levels`
/// successive zooms onto the cell around the incumbent.
#[derive(Clone, Copy, Debug)]
pub struct GridOptions {
    pub points: usize,
    pub levels: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions { points: 21, levels: 4 }
    }
}

struct Eval {
    objective: f64,
    cost: f64,
    pf: PfSolution,
    s_delta: Vec<Vec3>,
}

fn evaluate(feeder: &Feeder, weights: &CostWeights, lambda: f64, s: Vec<Vec3>, s_delta: Vec<Vec3>) -> Option<Eval> {
    let pf = newton_pf(feeder, &s, &s_delta).ok()?;
    const TOL: f64 = 1e-9;
    for j in 1..feeder.n_buses() {
        for r in feeder.phases(j).slots() {
            let m = pf.v[j][r].norm();
            if m < feeder.v_min[j][r] - TOL || m > feeder.v_max[j][r] + TOL {
                return None;
            }
        }
    }
    if let Some(r) = &feeder.wye[0] {
        if !r.contains(&pf.s[0], TOL) {
            return None;
        }
    }
    let cost = evaluate_cost(feeder, &pf.s, &s_delta, weights).ok()?.total;
    let rho: f64 = pf.i_delta.iter().map(|i| i.norm_squared()).sum();
    Some(Eval { objective: cost + lambda / feeder.power_base_kva * rho, cost, pf, s_delta })
}

/// Grid search over the free injection scalars (at most four) with a power
/// flow at every point; infeasible points (voltage limits, substation box,
/// no convergence) are discarded.
pub fn brute_force_opf(
    feeder: &Feeder,
    weights: &CostWeights,
    lambda: f64,
    grid: GridOptions,
) -> Result<BruteForceResult, OracleError> {
    let dims = free_dims(feeder);
    if dims.len() > BRUTE_FORCE_MAX_DIMS {
        return Err(OracleError::TooManyDims(dims.len()));
    }
    crate::cost::evaluate_cost(feeder, &vec![Vec3::zeros(); feeder.n_buses()], &vec![Vec3::zeros(); feeder.n_buses()], weights)?;
    let (s0, d0) = base_injections(feeder);
    let at = |x: &[f64]| {
        let (mut s, mut d) = (s0.clone(), d0.clone());
        for (dim, &v) in dims.iter().zip(x) {
            let target = if dim.delta { &mut d[dim.bus][dim.slot] } else { &mut s[dim.bus][dim.slot] };
            if dim.active {
                target.re = v;
            } else {
                target.im = v;
            }
        }
        evaluate(feeder, weights, lambda, s, d)
    };
    let coords = |e: &Eval| -> Vec<f64> {
        dims.iter()
            .map(|dim| {
                let s = if dim.delta { e.s_delta[dim.bus][dim.slot] } else { e.pf.s[dim.bus][dim.slot] };
                if dim.active { s.re } else { s.im }
            })
            .collect()
    };
    let points = grid.points.max(2);
    let mut lo: Vec<f64> = dims.iter().map(|d| d.lo).collect();
    let mut hi: Vec<f64> = dims.iter().map(|d| d.hi).collect();
    let mut best: Option<Eval> = None;
    let mut evaluations = 0;
    let mut cell = vec![0.0; dims.len()];
    for _ in 0..grid.levels.max(1) {
        let step: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| (b - a) / (points - 1) as f64).collect();
        let total = points.pow(dims.len() as u32);
        let found = (0..total)
            .into_par_iter()
            .filter_map(|mut idx| {
                let x: Vec<f64> = (0..dims.len())
                    .map(|k| {
                        let v = lo[k] + step[k] * (idx % points) as f64;
                        idx /= points;
                        v
                    })
                    .collect();
                at(&x)
            })
            .min_by(|a, b| a.objective.total_cmp(&b.objective));
        evaluations += total;
        if let Some(e) = found {
            if best.as_ref().is_none_or(|b| e.objective < b.objective) {
                best = Some(e);
            }
        }
        let Some(b) = &best else { break };
        cell = step.clone();
        for (k, (dim, x)) in dims.iter().zip(coords(b)).enumerate() {
            lo[k] = (x - step[k]).max(dim.lo);
            hi[k] = (x + step[k]).min(dim.hi);
        }
        if dims.is_empty() {
            break;
        }
    }
    let b = best.ok_or(OracleError::NoFeasiblePoint)?;
    let centre = coords(&b);
    let mut cell_spread: f64 = 0.0;
    for k in 0..dims.len() {
        for sign in [-1.0, 1.0] {
            let mut x = centre.clone();
            x[k] = (x[k] + sign * cell[k]).clamp(dims[k].lo, dims[k].hi);
            if let Some(e) = at(&x) {
                cell_spread = cell_spread.max((e.objective - b.objective).abs());
            }
            evaluations += 1;
        }
    }
    Ok(BruteForceResult { objective: b.objective, cost: b.cost, pf: b.pf, s_delta: b.s_delta, cell, cell_spread, evaluations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bfm::{bfm_residuals, BfmSolution};
    use crate::bim::{bim_residuals, BimSolution};
    use crate::feeder::bundled;

    fn nominal(f: &Feeder) -> (Vec<Vec3>, Vec<Vec3>) {
        let pick = |regions: &[Option<crate::feeder::InjectionRegion>]| {
            regions.iter().map(|r| r.as_ref().map(|r| r.nominal()).unwrap_or_else(Vec3::zeros)).collect::<Vec<_>>()
        };
        let mut s = pick(&f.wye);
        s[0] = Vec3::zeros();
        (s, pick(&f.delta))
    }

    #[test]
    fn zero_injections_keep_flat_voltages() {
        let f = bundled("no_delta").unwrap();
        let n = f.n_buses();
        let pf = newton_pf(&f, &vec![Vec3::zeros(); n], &vec![Vec3::zeros(); n]).unwrap();
        for j in 0..n {
            for r in f.phases(j).slots() {
                assert!((pf.v[j][r] - f.v_ref[r]).norm() < 1e-12);
            }
        }
        assert_eq!(pf.iterations, 0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let f = bundled("three_bus_delta").unwrap();
        let (_, d) = nominal(&f);
        let n = f.n_buses();
        let slots: Vec<usize> = (1..n).flat_map(|j| f.phases(j).slots().into_iter().map(move |r| 3 * j + r)).collect();
        let pf = Pf { feeder: &f, ybus: bus_admittance(&f), slots: slots.clone() };
        let mut v = DVector::from_fn(3 * n, |p, _| if f.phases(p / 3).contains(p % 3) { f.v_ref[p % 3] } else { C64::new(0.0, 0.0) });
        for (i, &p) in slots.iter().enumerate() {
            v[p] *= C64::from_polar(0.97 - 0.01 * i as f64, 0.02 * i as f64);
        }
        let (a, b) = pf.jacobian(&v, &d);
        let h = 1e-7;
        for (q, &pq) in slots.iter().enumerate() {
            for dir in [C64::new(1.0, 0.0), C64::new(0.0, 1.0)] {
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[pq] += dir * h;
                vm[pq] -= dir * h;
                let (fp, _) = pf.injections(&vp, &d).unwrap();
                let (fm, _) = pf.injections(&vm, &d).unwrap();
                for (i, &p) in slots.iter().enumerate() {
                    let fd = (fp[p] - fm[p]) / (2.0 * h);
                    let an = a[(i, q)] * dir + b[(i, q)] * dir.conj();
                    assert!((fd - an).norm() < 1e-6, "slot {p} wrt {pq}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn delta_load_flow_satisfies_the_balance() {
        let f = bundled("two_bus_delta").unwrap();
        let (s, d) = nominal(&f);
        let pf = newton_pf(&f, &s, &d).unwrap();
        assert!(pf.residual <= PF_TOL);
        let g = gamma();
        for j in 0..f.n_buses() {
            let gv = g * pf.v[j];
            for k in f.delta_pairs(j).slots() {
                let back = gv[k] * pf.i_delta[j][k].conj();
                assert!((back - d[j][k]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn small_wye_load_follows_first_order_estimate() {
        let f = bundled("no_delta").unwrap();
        let n = f.n_buses();
        let mut s = vec![Vec3::zeros(); n];
        let eps = 1e-4;
        s[1][0] = C64::new(-eps, 0.0);
        let pf = newton_pf(&f, &s, &vec![Vec3::zeros(); n]).unwrap();
        // V_1 ~ v_ref - z_aa conj(p / v_ref_a) for a load on phase a alone.
        let z = f.lines[0].z;
        let est: Vec3 = Vec3::from_fn(|r, _| f.v_ref[r] - z[(r, 0)] * (C64::new(eps, 0.0) / f.v_ref[0]).conj());
        for r in 0..3 {
            assert!((pf.v[1][r] - est[r]).norm() < 10.0 * eps * eps, "phase {r}");
        }
    }

    #[test]
    fn lifted_flow_is_feasible_for_both_relaxations() {
        for name in ["two_bus_delta", "three_bus_delta", "no_delta"] {
            let f = bundled(name).unwrap();
            let (s, d) = nominal(&f);
            let pf = newton_pf(&f, &s, &d).unwrap();
            let bim = BimSolution::from_voltages(&f, &pf.v, &pf.i_delta, &pf.s, &d);
            assert!(bim_residuals(&bim, &f).max_kw < 1e-8, "{name}");
            let bfm = BfmSolution::from_voltages(&f, &pf.v, &pf.i_delta, &pf.s, &d);
            let r = bfm_residuals(&bfm, &f);
            assert!(r.max_kw < 1e-8 && r.max_drop_pu2 < 1e-12, "{name}");
        }
    }

    #[test]
    fn fixed_feeder_needs_one_flow() {
        let f = bundled("single_bus").unwrap();
        let w = CostWeights::for_feeder(&f);
        let r = brute_force_opf(&f, &w, 0.0, GridOptions::default()).unwrap();
        assert_eq!(r.evaluations, 1);
        assert!(r.cell.is_empty());
    }

    #[test]
    fn wide_regions_are_refused() {
        let f = bundled("no_delta").unwrap();
        let w = CostWeights::for_feeder(&f);
        assert!(matches!(brute_force_opf(&f, &w, 0.0, GridOptions::default()), Err(OracleError::TooManyDims(_))));
    }

    #[test]
    fn zoom_refines_the_grid() {
        let f = bundled("two_bus_delta").unwrap();
        let w = CostWeights::for_feeder(&f);
        let coarse = brute_force_opf(&f, &w, 0.0, GridOptions { points: 11, levels: 1 }).unwrap();
        let fine = brute_force_opf(&f, &w, 0.0, GridOptions { points: 11, levels: 4 }).unwrap();
        assert_eq!(fine.cell.len(), coarse.cell.len());
        assert!(fine.cell.iter().zip(&coarse.cell).all(|(a, b)| *a < b / 10.0));
        assert!(fine.objective <= coarse.objective);
    }

    #[test]
    fn impossible_voltage_band_has_no_feasible_point() {
        let mut f = bundled("two_bus_delta").unwrap();
        for row in f.v_max.iter_mut().skip(1) {
            *row = [0.5; 3];
        }
        for row in f.v_min.iter_mut().skip(1) {
            *row = [0.5; 3];
        }
        let w = CostWeights::for_feeder(&f);
        let r = brute_force_opf(&f, &w, 0.0, GridOptions { points: 5, levels: 1 });
        assert!(matches!(r, Err(OracleError::NoFeasiblePoint)));
    }
}
