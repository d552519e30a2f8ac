//! Log-barrier path following on a subset of coordinates.
//!
//! The l1 term is written with auxiliary bounds `a_k >= |w_k|`; those are
//! eliminated from every Newton system by a diagonal Schur complement, so
//! each step solves a dense system in `(w_active, T)` only.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::{ConvexProgram, SolverOptions};

const PATH_FACTOR: f64 = 16.0;
const CENTERING_TOL: f64 = 1e-10;
const ARMIJO: f64 = 0.01;
const MAX_CENTERING_STEPS: usize = 100;
/// Relative decrease below which a centering step counts as rounding noise.
const STALL_TOL: f64 = 1e-14;
const BOUNDARY_FRACTION: f64 = 0.5;

pub(super) struct Outcome {
    pub w: Vec<f64>,
    /// Barrier value of `T` (strictly above the natural epigraph).
    pub epigraph: f64,
    pub t: f64,
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct LocalMoment {
    scale: f64,
    offset: DVector<f64>,
    matrix: DMatrix<f64>,
}

struct LocalGroup<'a> {
    offset: &'a DVector<f64>,
    design: DMatrix<f64>,
    loc: Vec<usize>,
    weights_sq: &'a DMatrix<f64>,
    moment: Option<LocalMoment>,
}

struct LocalLinear {
    coeffs: Vec<(usize, f64)>,
    offset: f64,
    scale: f64,
}

struct Local<'a> {
    dim: usize,
    penalized: Vec<bool>,
    lambda: f64,
    groups: Vec<LocalGroup<'a>>,
    ineq: Vec<LocalLinear>,
    /// Equality rows over `(w_active, T)`.
    eq: Option<DMatrix<f64>>,
    nu: f64,
}

impl<'a> Local<'a> {
    fn new(program: &'a ConvexProgram, idx: &[usize]) -> Self {
        let mut pos = vec![usize::MAX; program.dim];
        for (i, &k) in idx.iter().enumerate() {
            pos[k] = i;
        }
        let dim = idx.len();
        let penalized: Vec<bool> = idx.iter().map(|&k| program.penalized[k]).collect();
        let mut nu = 1.0 + 2.0 * penalized.iter().filter(|&&p| p).count() as f64;

        let groups = program
            .groups
            .iter()
            .map(|g| {
                let keep: Vec<usize> = (0..g.columns.len())
                    .filter(|&c| pos[g.columns[c]] != usize::MAX)
                    .collect();
                let design = g.design.select_columns(keep.iter());
                let loc = keep.iter().map(|&c| pos[g.columns[c]]).collect();
                let moment = g.moment_scale.map(|scale| LocalMoment {
                    scale,
                    offset: g.moment_offset.clone(),
                    matrix: g.moment_matrix.select_columns(keep.iter()),
                });
                nu += g.len() as f64 * if moment.is_some() { 4.0 } else { 2.0 };
                LocalGroup {
                    offset: &g.offset,
                    design,
                    loc,
                    weights_sq: &g.weights_sq,
                    moment,
                }
            })
            .collect();

        let localize = |c: &super::AbsConstraint| -> Vec<(usize, f64)> {
            c.coeffs
                .iter()
                .enumerate()
                .filter(|&(k, &v)| v != 0.0 && pos[k] != usize::MAX)
                .map(|(k, &v)| (pos[k], v))
                .collect()
        };
        let ineq: Vec<LocalLinear> = program
            .linear
            .iter()
            .filter(|c| c.scale > 0.0)
            .map(|c| LocalLinear {
                coeffs: localize(c),
                offset: c.offset,
                scale: c.scale,
            })
            .collect();
        nu += 2.0 * ineq.len() as f64;

        let eq_rows: Vec<Vec<(usize, f64)>> = program.equalities().map(localize).collect();
        let eq = (!eq_rows.is_empty()).then(|| {
            let mut m = DMatrix::zeros(eq_rows.len(), dim + 1);
            for (i, row) in eq_rows.iter().enumerate() {
                for &(k, v) in row {
                    m[(i, k)] = v;
                }
            }
            m
        });

        Self {
            dim,
            penalized,
            lambda: program.lambda,
            groups,
            ineq,
            eq,
            nu,
        }
    }

    fn gather(loc: &[usize], x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(loc.len(), loc.iter().map(|&i| x[i]))
    }

    fn group_residual(g: &LocalGroup, x: &DVector<f64>) -> DVector<f64> {
        let mut r = g.offset.clone();
        if !g.loc.is_empty() {
            r.gemv(-1.0, &g.design, &Self::gather(&g.loc, x), 1.0);
        }
        r
    }

    fn group_moments(m: &LocalMoment, loc: &[usize], x: &DVector<f64>) -> DVector<f64> {
        let mut v = m.offset.clone();
        if !loc.is_empty() {
            v.gemv(-1.0, &m.matrix, &Self::gather(loc, x), 1.0);
        }
        v
    }

    fn rms_squared(g: &LocalGroup, r: &DVector<f64>) -> DVector<f64> {
        let r2 = r.map(|v| v * v);
        g.weights_sq.tr_mul(&r2) / r.len() as f64
    }

    fn linear_value(c: &LocalLinear, x: &DVector<f64>) -> f64 {
        c.coeffs.iter().map(|&(k, v)| v * x[k]).sum::<f64>() + c.offset
    }

    /// Constraint barrier at `x = (w, T)`; `None` outside the domain.
    #[cfg(test)]
    fn phi(&self, x: &DVector<f64>) -> Option<f64> {
        let t_epi = x[self.dim];
        if t_epi <= 0.0 {
            return None;
        }
        let mut val = -t_epi.ln();
        let t2 = t_epi * t_epi;
        for g in &self.groups {
            let r = Self::group_residual(g, x);
            for q in Self::rms_squared(g, &r).iter() {
                let s = t2 - q;
                if s <= 0.0 {
                    return None;
                }
                val -= s.ln();
            }
            if let Some(m) = &g.moment {
                for mv in Self::group_moments(m, &g.loc, x).iter() {
                    let s1 = m.scale * t_epi - mv;
                    let s2 = m.scale * t_epi + mv;
                    if s1 <= 0.0 || s2 <= 0.0 {
                        return None;
                    }
                    val -= s1.ln() + s2.ln();
                }
            }
        }
        for c in &self.ineq {
            let v = Self::linear_value(c, x);
            let s1 = c.scale * t_epi - v;
            let s2 = c.scale * t_epi + v;
            if s1 <= 0.0 || s2 <= 0.0 {
                return None;
            }
            val -= s1.ln() + s2.ln();
        }
        Some(val)
    }

    /// Every barrier slack at `(w, T, a)`; `None` outside the domain.
    fn slacks(&self, x: &DVector<f64>, a: &DVector<f64>) -> Option<Vec<f64>> {
        let t_epi = x[self.dim];
        if t_epi <= 0.0 {
            return None;
        }
        let mut out = vec![t_epi];
        let t2 = t_epi * t_epi;
        for g in &self.groups {
            let r = Self::group_residual(g, x);
            out.extend(Self::rms_squared(g, &r).iter().map(|q| t2 - q));
            if let Some(m) = &g.moment {
                for mv in Self::group_moments(m, &g.loc, x).iter() {
                    out.push(m.scale * t_epi - mv);
                    out.push(m.scale * t_epi + mv);
                }
            }
        }
        for c in &self.ineq {
            let v = Self::linear_value(c, x);
            out.push(c.scale * t_epi - v);
            out.push(c.scale * t_epi + v);
        }
        for k in 0..self.dim {
            if self.penalized[k] {
                out.push(a[k] - x[k]);
                out.push(a[k] + x[k]);
            }
        }
        out.iter().all(|&s| s > 0.0).then_some(out)
    }

    /// Barrier objective including the l1 bounds, from precomputed slacks.
    fn value_from(&self, slacks: &[f64], x: &DVector<f64>, a: &DVector<f64>, t: f64) -> f64 {
        let l1: f64 = (0..self.dim).filter(|&k| self.penalized[k]).map(|k| a[k]).sum();
        t * (self.lambda * x[self.dim] + l1) - slacks.iter().map(|s| s.ln()).sum::<f64>()
    }

    /// Gradient and Hessian of the constraint barrier over `(w, T)`.
    fn derivatives(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim;
        let t_epi = x[d];
        let mut grad = DVector::zeros(d + 1);
        let mut hess = DMatrix::zeros(d + 1, d + 1);
        grad[d] -= 1.0 / t_epi;
        hess[(d, d)] += 1.0 / (t_epi * t_epi);

        for g in &self.groups {
            let n = g.offset.len() as f64;
            let m_loc = g.loc.len();
            let r = Self::group_residual(g, x);
            let s: DVector<f64> = Self::rms_squared(g, &r).map(|q| t_epi * t_epi - q);
            let inv_s = s.map(|v| 1.0 / v);

            // T-only contributions of the cone barriers.
            for &sl in s.iter() {
                grad[d] -= 2.0 * t_epi / sl;
                hess[(d, d)] += -2.0 / sl + 4.0 * t_epi * t_epi / (sl * sl);
            }

            if m_loc > 0 {
                // h_i = sum_l e_il^2 / s_l
                let h = g.weights_sq * &inv_s;
                let rh = r.component_mul(&h);
                let gw = g.design.tr_mul(&rh) * (-2.0 / n);

                let mut scaled = g.design.clone();
                for (i, mut row) in scaled.row_iter_mut().enumerate() {
                    row *= h[i].sqrt();
                }
                let curv = scaled.tr_mul(&scaled) * (2.0 / n);

                // rows: grad q_l / s_l
                let mut er = g.weights_sq.clone();
                for (i, mut row) in er.row_iter_mut().enumerate() {
                    row *= r[i];
                }
                let mut gq = er.tr_mul(&g.design) * (-2.0 / n);
                for (l, mut row) in gq.row_iter_mut().enumerate() {
                    row *= inv_s[l];
                }
                let outer = gq.tr_mul(&gq);
                let cross = gq.tr_mul(&inv_s) * (-2.0 * t_epi);

                for (a, &ia) in g.loc.iter().enumerate() {
                    grad[ia] += gw[a];
                    hess[(ia, d)] += cross[a];
                    hess[(d, ia)] += cross[a];
                    for (b, &ib) in g.loc.iter().enumerate() {
                        hess[(ia, ib)] += curv[(a, b)] + outer[(a, b)];
                    }
                }
            }

            if let Some(m) = &g.moment {
                let mv = Self::group_moments(m, &g.loc, x);
                let c = m.scale;
                let s1 = mv.map(|v| c * t_epi - v);
                let s2 = mv.map(|v| c * t_epi + v);
                let mut dww = DVector::zeros(mv.len());
                let mut gw_coef = DVector::zeros(mv.len());
                let mut cross_coef = DVector::zeros(mv.len());
                for l in 0..mv.len() {
                    let (i1, i2) = (1.0 / s1[l], 1.0 / s2[l]);
                    grad[d] -= c * (i1 + i2);
                    hess[(d, d)] += c * c * (i1 * i1 + i2 * i2);
                    gw_coef[l] = i2 - i1;
                    dww[l] = i1 * i1 + i2 * i2;
                    cross_coef[l] = c * (i1 * i1 - i2 * i2);
                }
                if m_loc > 0 {
                    let gw = m.matrix.tr_mul(&gw_coef);
                    let cross = m.matrix.tr_mul(&cross_coef);
                    let mut scaled = m.matrix.clone();
                    for (l, mut row) in scaled.row_iter_mut().enumerate() {
                        row *= dww[l].sqrt();
                    }
                    let curv = scaled.tr_mul(&scaled);
                    for (a, &ia) in g.loc.iter().enumerate() {
                        grad[ia] += gw[a];
                        hess[(ia, d)] += cross[a];
                        hess[(d, ia)] += cross[a];
                        for (b, &ib) in g.loc.iter().enumerate() {
                            hess[(ia, ib)] += curv[(a, b)];
                        }
                    }
                }
            }
        }

        for c in &self.ineq {
            let v = Self::linear_value(c, x);
            let i1 = 1.0 / (c.scale * t_epi - v);
            let i2 = 1.0 / (c.scale * t_epi + v);
            grad[d] -= c.scale * (i1 + i2);
            hess[(d, d)] += c.scale * c.scale * (i1 * i1 + i2 * i2);
            let dww = i1 * i1 + i2 * i2;
            let cross = c.scale * (i2 * i2 - i1 * i1);
            for &(k, ak) in &c.coeffs {
                grad[k] += ak * (i1 - i2);
                hess[(k, d)] += ak * cross;
                hess[(d, k)] += ak * cross;
                for &(j, aj) in &c.coeffs {
                    hess[(k, j)] += ak * aj * dww;
                }
            }
        }
        (grad, hess)
    }
}

fn factor(mut h: DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let scale = h.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    if let Some(ch) = Cholesky::new(h.clone()) {
        return Some(ch);
    }
    let mut ridge = 1e-14 * scale;
    for _ in 0..12 {
        for i in 0..h.nrows() {
            h[(i, i)] += ridge;
        }
        if let Some(ch) = Cholesky::new(h.clone()) {
            return Some(ch);
        }
        ridge *= 10.0;
    }
    None
}

/// Newton direction `(dx, da)` and the squared decrement.
fn newton_step(
    local: &Local,
    x: &DVector<f64>,
    a: &DVector<f64>,
    t: f64,
) -> Option<(DVector<f64>, DVector<f64>, f64)> {
    let d = local.dim;
    let (mut g, mut h) = local.derivatives(x);
    g[d] += t * local.lambda;

    // Eliminating `a` in closed form; forming `h_kk + haa` and subtracting
    // `hwa^2 / haa` cancels catastrophically once `a_k - |w_k|` is tiny.
    let mut rhs = -&g;
    let mut ga = DVector::zeros(d);
    let mut haa = DVector::from_element(d, 1.0);
    let mut hwa = DVector::zeros(d);
    for k in 0..d {
        if local.penalized[k] {
            let i1 = 1.0 / (a[k] - x[k]);
            let i2 = 1.0 / (a[k] + x[k]);
            let diag = i1 * i1 + i2 * i2;
            ga[k] = t - i1 - i2;
            haa[k] = diag;
            hwa[k] = i2 * i2 - i1 * i1;
            h[(k, k)] += 4.0 * (i1 * i1) * (i2 * i2) / diag;
            rhs[k] -= (i1 - i2) * ((i1 + i2) * t - 2.0 * i1 * i2) / diag;
        }
    }

    let chol = factor(h)?;
    let dx = match &local.eq {
        None => chol.solve(&rhs),
        Some(eq) => {
            let hinv_rhs = chol.solve(&rhs);
            let hinv_at = chol.solve(&eq.transpose());
            let schur = eq * &hinv_at;
            let nu = schur.svd(true, true).solve(&(eq * &hinv_rhs), 1e-12).ok()?;
            hinv_rhs - hinv_at * nu
        }
    };
    let mut da = DVector::zeros(d);
    for k in 0..d {
        if local.penalized[k] {
            da[k] = (-ga[k] - hwa[k] * dx[k]) / haa[k];
        }
    }
    let decrement = rhs.dot(&dx);
    Some((dx, da, decrement))
}

/// Least-norm point satisfying every equality, or `None` if they are inconsistent.
pub(super) fn equality_start(program: &ConvexProgram) -> Option<Vec<f64>> {
    let rows: Vec<&super::AbsConstraint> = program.equalities().collect();
    if rows.is_empty() {
        return Some(vec![0.0; program.dim]);
    }
    let a = DMatrix::from_fn(rows.len(), program.dim, |i, k| rows[i].coeffs[k]);
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|c| -c.offset));
    let w = a.clone().svd(true, true).solve(&b, 1e-12).ok()?;
    let resid = (&a * &w - &b).amax();
    let scale = 1.0 + b.amax() + a.amax() * w.amax();
    (resid <= 1e-9 * scale).then(|| w.as_slice().to_vec())
}

/// Barrier method with every coordinate outside `active` fixed at zero.
pub(super) fn solve_restricted(
    program: &ConvexProgram,
    active: &[bool],
    start: &[f64],
    options: &SolverOptions,
    budget: usize,
) -> Outcome {
    let idx: Vec<usize> = (0..program.dim).filter(|&k| active[k]).collect();
    let local = Local::new(program, &idx);
    let d = local.dim;

    let mut w_full = vec![0.0; program.dim];
    for &k in &idx {
        w_full[k] = start[k];
    }
    let natural = program.natural_epigraph(&w_full);
    let t0_epi = if natural > 0.0 { 2.0 * natural } else { 1.0 };
    let mut x = DVector::from_iterator(d + 1, idx.iter().map(|&k| start[k]).chain([t0_epi]));
    let mut a = DVector::from_iterator(d, (0..d).map(|k| x[k].abs() + 1.0));

    let objective = |x: &DVector<f64>, a: &DVector<f64>| -> f64 {
        (0..d).filter(|&k| local.penalized[k]).map(|k| a[k]).sum::<f64>() + local.lambda * x[d]
    };
    let mut t = local.nu / objective(&x, &a).max(1e-12);
    let mut iterations = 0;

    let pack = |x: &DVector<f64>, t: f64, gap: f64, iterations: usize, converged: bool| {
        let mut w = vec![0.0; program.dim];
        for (i, &k) in idx.iter().enumerate() {
            w[k] = x[i];
        }
        Outcome {
            w,
            epigraph: x[d],
            t,
            gap,
            iterations,
            converged,
        }
    };

    loop {
        // centering
        let mut steps = 0;
        loop {
            steps += 1;
            if steps > MAX_CENTERING_STEPS {
                break;
            }
            if iterations >= budget {
                return pack(&x, t, f64::INFINITY, iterations, false);
            }
            iterations += 1;
            let Some((dx, da, decrement)) = newton_step(&local, &x, &a, t) else {
                break;
            };
            if !(decrement > 0.0) || decrement / 2.0 <= CENTERING_TOL {
                break;
            }
            let Some(s0) = local.slacks(&x, &a) else {
                break;
            };
            let f0 = local.value_from(&s0, &x, &a, t);
            let mut step = 1.0;
            let mut accepted = false;
            let mut stalled = false;
            for _ in 0..60 {
                let xn = &x + &dx * step;
                let an = &a + &da * step;
                // fraction to the boundary: a slack that lands at rounding
                // level in one step leaves Newton crawling along the boundary
                let inside = local
                    .slacks(&xn, &an)
                    .filter(|sn| sn.iter().zip(&s0).all(|(n, o)| *n >= BOUNDARY_FRACTION * o));
                if let Some(sn) = inside {
                    let fv = local.value_from(&sn, &xn, &an, t);
                    if fv <= f0 - ARMIJO * step * decrement {
                        stalled = f0 - fv <= STALL_TOL * f0.abs().max(1.0);
                        x = xn;
                        a = an;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted || stalled {
                // no representable decrease left at this t
                break;
            }
        }
        let gap = local.nu / t;
        let obj = objective(&x, &a);
        if gap <= 0.5 * options.tol_obj * (1.0 + obj.abs()) {
            return pack(&x, t, gap, iterations, true);
        }
        t *= PATH_FACTOR;
    }
}

/// `(1/t) * d(constraint barrier)/dw` over all coordinates at `(w, T)`.
///
/// At a central point this is the constraint part of the Lagrangian
/// gradient, so optimality of a zero coordinate requires `|value| <= 1`.
pub(super) fn dual_w_gradient(program: &ConvexProgram, w: &[f64], epigraph: f64, t: f64) -> Vec<f64> {
    let mut grad = vec![0.0; program.dim];
    let t2 = epigraph * epigraph;
    for g in &program.groups {
        let n = g.rows() as f64;
        let r = g.residual(w);
        let r2 = r.map(|v| v * v);
        let q = g.weights_sq.tr_mul(&r2) / n;
        let inv_s = q.map(|v| 1.0 / (t2 - v));
        let h = &g.weights_sq * &inv_s;
        let gw = g.design.tr_mul(&r.component_mul(&h)) * (-2.0 / n);
        for (c, &col) in g.columns.iter().enumerate() {
            grad[col] += gw[c];
        }
        if let Some(scale) = g.moment_scale {
            let mut mv = g.moment_offset.clone();
            let wc = DVector::from_iterator(g.columns.len(), g.columns.iter().map(|&c| w[c]));
            mv.gemv(-1.0, &g.moment_matrix, &wc, 1.0);
            let coef = mv.map(|m| 1.0 / (scale * epigraph + m) - 1.0 / (scale * epigraph - m));
            let gm = g.moment_matrix.tr_mul(&coef);
            for (c, &col) in g.columns.iter().enumerate() {
                grad[col] += gm[c];
            }
        }
    }
    for c in program.linear.iter().filter(|c| c.scale > 0.0) {
        let v = c.value(w);
        let coef = 1.0 / (c.scale * epigraph - v) - 1.0 / (c.scale * epigraph + v);
        for (k, &ak) in c.coeffs.iter().enumerate() {
            grad[k] += ak * coef;
        }
    }
    grad.iter_mut().for_each(|v| *v /= t);
    grad
}

#[cfg(test)]
mod tests {
    use super::super::{ResidualGroup, ConvexProgram};
    use super::*;

    fn toy_program() -> ConvexProgram {
        let n = 6;
        let y = DVector::from_vec(vec![1.0, -0.5, 2.0, 0.3, -1.2, 0.8]);
        let x = DMatrix::from_fn(n, 2, |i, j| ((i * 3 + j * 5) % 7) as f64 / 3.0 - 1.0);
        let z = DMatrix::from_fn(n, 3, |i, j| ((i * 2 + j * 3) % 5) as f64 / 2.0 - 0.7);
        let mut prog = ConvexProgram::new(2, 0.3).unwrap();
        prog.add_group(ResidualGroup::new(y, x, vec![0, 1], z, Some(0.4)).unwrap())
            .unwrap();
        prog
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let prog = toy_program();
        let local = Local::new(&prog, &[0, 1]);
        let x0 = DVector::from_vec(vec![0.2, -0.1, 5.0]);
        let (g, h) = local.derivatives(&x0);
        let eps = 1e-6;
        for i in 0..3 {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[i] += eps;
            xm[i] -= eps;
            let fd = (local.phi(&xp).unwrap() - local.phi(&xm).unwrap()) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()), "grad {i}: {fd} vs {}", g[i]);
            let (gp, _) = local.derivatives(&xp);
            let (gm, _) = local.derivatives(&xm);
            for j in 0..3 {
                let fd = (gp[j] - gm[j]) / (2.0 * eps);
                assert!(
                    (fd - h[(j, i)]).abs() < 1e-5 * (1.0 + h[(j, i)].abs()),
                    "hess ({j},{i}): {fd} vs {}",
                    h[(j, i)]
                );
            }
        }
    }

    #[test]
    fn dual_gradient_agrees_with_local_gradient() {
        let prog = toy_program();
        let local = Local::new(&prog, &[0, 1]);
        let x0 = DVector::from_vec(vec![0.2, -0.1, 5.0]);
        let (g, _) = local.derivatives(&x0);
        let dual = dual_w_gradient(&prog, &[0.2, -0.1], 5.0, 2.0);
        assert!((dual[0] - g[0] / 2.0).abs() < 1e-12);
        assert!((dual[1] - g[1] / 2.0).abs() < 1e-12);
    }
}
