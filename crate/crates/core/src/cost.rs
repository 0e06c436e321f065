//! Operating cost: network losses, deviation from nominal injections and
//! deviation of the substation injection from its reference.
//!
//! Wye injections are generation-positive and delta quantities are the power
//! drawn across each pair, so the active loss is the sum of wye injections
//! (substation included) minus the delta draw.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{CExpr, ConicProgram, LinExpr};
use crate::feeder::{Feeder, InjectionRegion, Vec3, PAIR_NAMES, PHASE_NAMES};

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("zero normalizer for {component} at bus `{bus}` ({slot})")]
    ZeroNormalizer { bus: String, component: &'static str, slot: &'static str },
    #[error("zero substation reference for {0}")]
    ZeroReference(&'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub mu_loss: f64,
    pub w_p: f64,
    pub w_q: f64,
    pub mu_p: f64,
    pub mu_q: f64,
    /// Substation references, total over phases, per unit.
    pub p0_ref: f64,
    pub q0_ref: f64,
}

impl CostWeights {
    /// Unit loss and deviation weights, substation weights of 4, and the
    /// feeder's substation references.
    pub fn for_feeder(feeder: &Feeder) -> Self {
        CostWeights {
            mu_loss: 1.0,
            w_p: 1.0,
            w_q: 1.0,
            mu_p: 4.0,
            mu_q: 4.0,
            p0_ref: feeder.p0_ref,
            q0_ref: feeder.q0_ref,
        }
    }

    pub fn zero() -> Self {
        CostWeights { mu_loss: 0.0, w_p: 0.0, w_q: 0.0, mu_p: 0.0, mu_q: 0.0, p0_ref: 0.0, q0_ref: 0.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub loss: f64,
    pub dev_p: f64,
    pub dev_q: f64,
    pub sub_p: f64,
    pub sub_q: f64,
    pub total: f64,
}

/// One quadratic deviation term `weight * (x - nominal)^2 / (2 |nominal|)`.
struct DevTerm {
    bus: usize,
    slot: usize,
    delta: bool,
    active: bool,
    nominal: f64,
}

fn deviation_terms(feeder: &Feeder, weights: &CostWeights) -> Result<Vec<DevTerm>, CostError> {
    let mut out = Vec::new();
    let mut push = |j: usize, r: &InjectionRegion, delta: bool| -> Result<(), CostError> {
        for slot in r.mask.slots() {
            for (active, nom, w) in [(true, r.p_nom[slot], weights.w_p), (false, r.q_nom[slot], weights.w_q)] {
                let Some(nominal) = nom else { continue };
                if w == 0.0 {
                    continue;
                }
                if nominal == 0.0 {
                    return Err(CostError::ZeroNormalizer {
                        bus: feeder.buses[j].id.clone(),
                        component: if active { "p" } else { "q" },
                        slot: if delta { PAIR_NAMES[slot] } else { PHASE_NAMES[slot] },
                    });
                }
                out.push(DevTerm { bus: j, slot, delta, active, nominal });
            }
        }
        Ok(())
    };
    for j in 1..feeder.n_buses() {
        if let Some(r) = &feeder.wye[j] {
            push(j, r, false)?;
        }
        if let Some(r) = &feeder.delta[j] {
            push(j, r, true)?;
        }
    }
    Ok(out)
}

fn check_refs(weights: &CostWeights) -> Result<(), CostError> {
    if weights.mu_p != 0.0 && weights.p0_ref == 0.0 {
        return Err(CostError::ZeroReference("p"));
    }
    if weights.mu_q != 0.0 && weights.q0_ref == 0.0 {
        return Err(CostError::ZeroReference("q"));
    }
    Ok(())
}

/// Evaluates the cost at wye injections `s` and delta injections `s_delta`
/// (one 3-vector per bus, per unit).
pub fn evaluate_cost(
    feeder: &Feeder,
    s: &[Vec3],
    s_delta: &[Vec3],
    weights: &CostWeights,
) -> Result<CostBreakdown, CostError> {
    check_refs(weights)?;
    let mut b = CostBreakdown::default();
    for v in s {
        b.loss += v.iter().map(|c| c.re).sum::<f64>();
    }
    for v in s_delta {
        b.loss -= v.iter().map(|c| c.re).sum::<f64>();
    }
    b.loss *= weights.mu_loss;
    for t in deviation_terms(feeder, weights)? {
        let v = if t.delta { s_delta[t.bus][t.slot] } else { s[t.bus][t.slot] };
        let (x, w, acc) = if t.active { (v.re, weights.w_p, &mut b.dev_p) } else { (v.im, weights.w_q, &mut b.dev_q) };
        *acc += w * (x - t.nominal).powi(2) / (2.0 * t.nominal.abs());
    }
    let p0: f64 = s[0].iter().map(|c| c.re).sum();
    let q0: f64 = s[0].iter().map(|c| c.im).sum();
    if weights.mu_p != 0.0 {
        b.sub_p = weights.mu_p * (p0 - weights.p0_ref).powi(2) / weights.p0_ref.abs();
    }
    if weights.mu_q != 0.0 {
        b.sub_q = weights.mu_q * (q0 - weights.q0_ref).powi(2) / weights.q0_ref.abs();
    }
    b.total = b.loss + b.dev_p + b.dev_q + b.sub_p + b.sub_q;
    Ok(b)
}

/// Injection expressions of a relaxation, `None` where a slot is absent.
pub struct InjectionExprs {
    pub wye: Vec<[Option<CExpr>; 3]>,
    pub delta: Vec<[Option<CExpr>; 3]>,
}

impl InjectionExprs {
    fn get(&self, bus: usize, slot: usize, delta: bool) -> Option<&CExpr> {
        let table = if delta { &self.delta } else { &self.wye };
        table[bus][slot].as_ref()
    }
}

/// Adds epigraph variables and rotated cones for every quadratic term and
/// returns the (now linear) objective.
pub fn epigraph_constraints(
    prog: &mut ConicProgram,
    feeder: &Feeder,
    weights: &CostWeights,
    inj: &InjectionExprs,
) -> Result<LinExpr, CostError> {
    check_refs(weights)?;
    let mut obj = LinExpr::zero();
    if weights.mu_loss != 0.0 {
        for row in &inj.wye {
            for e in row.iter().flatten() {
                obj += &e.re.scaled(weights.mu_loss);
            }
        }
        for row in &inj.delta {
            for e in row.iter().flatten() {
                obj -= &e.re.scaled(weights.mu_loss);
            }
        }
    }
    let square = |prog: &mut ConicProgram, label: String, x: LinExpr, coeff: f64, obj: &mut LinExpr| {
        let t = prog.var(label);
        prog.add_rsoc(LinExpr::var(t), LinExpr::constant(0.5), vec![x]);
        *obj += &LinExpr { terms: vec![(t, coeff)], constant: 0.0 };
    };
    for t in deviation_terms(feeder, weights)? {
        let Some(e) = inj.get(t.bus, t.slot, t.delta) else { continue };
        let (x, w) = if t.active { (e.re.clone(), weights.w_p) } else { (e.im.clone(), weights.w_q) };
        let label = format!(
            "dev_{}_{}_{}",
            if t.active { "p" } else { "q" },
            feeder.buses[t.bus].id,
            if t.delta { PAIR_NAMES[t.slot] } else { PHASE_NAMES[t.slot] }
        );
        square(prog, label, x - LinExpr::constant(t.nominal), w / (2.0 * t.nominal.abs()), &mut obj);
    }
    let total = |active: bool| {
        let mut acc = LinExpr::zero();
        for e in inj.wye[0].iter().flatten() {
            acc += if active { &e.re } else { &e.im };
        }
        acc
    };
    if weights.mu_p != 0.0 {
        let x = total(true) - LinExpr::constant(weights.p0_ref);
        square(prog, "sub_p".into(), x, weights.mu_p / weights.p0_ref.abs(), &mut obj);
    }
    if weights.mu_q != 0.0 {
        let x = total(false) - LinExpr::constant(weights.q0_ref);
        square(prog, "sub_q".into(), x, weights.mu_q / weights.q0_ref.abs(), &mut obj);
    }
    Ok(obj.compact())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{ClarabelBackend, ConicBackend, SolveOptions};
    use crate::feeder::{bundled, C64};

    fn nominal_point(f: &Feeder) -> (Vec<Vec3>, Vec<Vec3>) {
        let s: Vec<Vec3> = (0..f.n_buses())
            .map(|j| f.wye[j].as_ref().map(|r| r.nominal()).unwrap_or_else(Vec3::zeros))
            .collect();
        let d: Vec<Vec3> = (0..f.n_buses())
            .map(|j| f.delta[j].as_ref().map(|r| r.nominal()).unwrap_or_else(Vec3::zeros))
            .collect();
        (s, d)
    }

    #[test]
    fn nominal_loads_cost_only_losses_and_substation() {
        let f = bundled("two_bus_delta").unwrap();
        let w = CostWeights::for_feeder(&f);
        let (mut s, d) = nominal_point(&f);
        // Substation supplies the nominal load plus 10 kW of losses.
        let p0 = w.p0_ref + 0.01;
        s[0] = Vec3::new(C64::new(p0 / 3.0, w.q0_ref / 3.0), C64::new(p0 / 3.0, w.q0_ref / 3.0), C64::new(p0 / 3.0, w.q0_ref / 3.0));
        let b = evaluate_cost(&f, &s, &d, &w).unwrap();
        assert!((b.loss - 0.01).abs() < 1e-12);
        assert_eq!(b.dev_p, 0.0);
        assert!((b.sub_p - 4.0 * 1e-4 / w.p0_ref).abs() < 1e-15);
        assert!(b.sub_q.abs() < 1e-24);
    }

    #[test]
    fn zero_normalizer_detected() {
        let mut f = bundled("two_bus_delta").unwrap();
        f.delta[1].as_mut().unwrap().p_nom[0] = Some(0.0);
        let (s, d) = nominal_point(&f);
        let err = evaluate_cost(&f, &s, &d, &CostWeights::for_feeder(&f)).unwrap_err();
        assert!(matches!(err, CostError::ZeroNormalizer { component: "p", slot: "ab", .. }));
    }

    #[test]
    fn zero_weights_give_empty_epigraph() {
        let f = bundled("two_bus_delta").unwrap();
        let mut prog = ConicProgram::new();
        let x = prog.var("p");
        let mut wye = vec![[None, None, None]; f.n_buses()];
        wye[0][0] = Some(CExpr::real(LinExpr::var(x)));
        let inj = InjectionExprs { wye, delta: vec![[None, None, None]; f.n_buses()] };
        let obj = epigraph_constraints(&mut prog, &f, &CostWeights::zero(), &inj).unwrap();
        assert!(prog.rsoc.is_empty());
        assert!(obj.terms.is_empty() && obj.constant == 0.0);
    }

    #[test]
    fn epigraph_matches_direct_evaluation() {
        // Fix every injection to a point, minimize the epigraph objective, and
        // compare against the direct formula.
        let f = bundled("three_bus_delta").unwrap();
        let w = CostWeights::for_feeder(&f);
        let (mut s, mut d) = nominal_point(&f);
        s[0] = Vec3::from_element(C64::new(0.31, 0.12));
        s[2][2] += C64::new(0.0, 0.07);
        d[1][0] *= 0.9;
        let mut prog = ConicProgram::new();
        let table = |vals: &[Vec3], tag: &str, prog: &mut ConicProgram| {
            vals.iter()
                .enumerate()
                .map(|(j, v)| {
                    let mut row: [Option<CExpr>; 3] = [None, None, None];
                    for k in 0..3 {
                        if v[k] != C64::new(0.0, 0.0) {
                            let re = prog.var(format!("{tag}{j}{k}r"));
                            let im = prog.var(format!("{tag}{j}{k}i"));
                            prog.add_eq(LinExpr::var(re) - LinExpr::constant(v[k].re));
                            prog.add_eq(LinExpr::var(im) - LinExpr::constant(v[k].im));
                            row[k] = Some(CExpr { re: LinExpr::var(re), im: LinExpr::var(im) });
                        }
                    }
                    row
                })
                .collect::<Vec<_>>()
        };
        let inj = InjectionExprs { wye: table(&s, "s", &mut prog), delta: table(&d, "d", &mut prog) };
        prog.objective = epigraph_constraints(&mut prog, &f, &w, &inj).unwrap();
        let r = ClarabelBackend.solve(&prog, &SolveOptions::default()).unwrap();
        let direct = evaluate_cost(&f, &s, &d, &w).unwrap().total;
        assert!((r.primal_objective - direct).abs() < 1e-8 * (1.0 + direct.abs()));
    }
}
