//! Assembly and solution of the discrete scattering system, density
//! reconstruction and exterior field evaluation.
//!
//! The unknowns are point values of the per-chart densities at the active
//! grid nodes. The operator action combines the identity part, the
//! trapezoidal regular-kernel sums and the polar singular sums; it is
//! applied matrix-free inside GMRES, with a dense materialization available
//! for small problems and for cross-checks.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Atlas, ChartGrid};
use crate::kernels::{kernel_k, KernelSplit, ScatteringParams};
use crate::quadrature::{
    apply_regular_core, apply_singular_core, build_hermite_lines, singular_target_active,
    ChartDiscretization, HermiteLines, LineEval, PolarRule, PolarTarget,
};
use crate::trig::{Axis, GridValues, TrigPoly};
use crate::{dot3, norm3, sub3, Vec2, Vec3, C64};

/// Singular-evaluation variant of the discrete operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// Exact trigonometric interpolation along radial node lines.
    Base,
    /// Piecewise Hermite interpolation on a mesh refined by `m`, matching
    /// derivatives up to order `d`.
    Hermite { m: usize, d: usize },
}

/// Per-chart arrays of density values at the active grid nodes.
#[derive(Debug, Clone)]
pub struct DiscreteDensity {
    pub ns: Vec<usize>,
    pub values: Vec<Vec<C64>>,
}

impl DiscreteDensity {
    pub fn zeros_like(other: &DiscreteDensity) -> Self {
        DiscreteDensity {
            ns: other.ns.clone(),
            values: other.values.iter().map(|v| vec![C64::new(0.0, 0.0); v.len()]).collect(),
        }
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn flatten(&self) -> Vec<C64> {
        let mut out = Vec::with_capacity(self.total_len());
        for v in &self.values {
            out.extend_from_slice(v);
        }
        out
    }

    pub fn norm_l2_grid(&self) -> f64 {
        self.values
            .iter()
            .map(|v| v.iter().map(|c| c.norm_sqr()).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Trigonometric interpolant of the weighted density `omega . phi`,
    /// zero-extended to the full grid.
    pub fn weighted_interpolant(&self, atlas: &Atlas, j: usize, grid: &ChartGrid) -> TrigPoly {
        let n = grid.n;
        let mut values = vec![C64::new(0.0, 0.0); n * n];
        for (slot, m) in grid.active.iter().enumerate() {
            let u = [m[0] as f64 * grid.h, m[1] as f64 * grid.h];
            let r = atlas.chart(j).eval_unchecked(u).point;
            let w = atlas.pou_weight(j, r);
            values[m[0] * n + m[1]] = w * self.values[j][slot];
        }
        TrigPoly::interpolate(&GridValues::new(n, values))
    }
}

/// Right-hand side of the discrete system: `-U^inc` at the active nodes.
#[derive(Debug, Clone)]
pub struct Rhs {
    pub incidence: Vec3,
    pub values: Vec<Vec<C64>>,
}

/// Incident plane wave `exp(i kappa d . x)`.
pub fn plane_wave(kappa: f64, direction: Vec3, x: Vec3) -> C64 {
    C64::from_polar(1.0, kappa * dot3(direction, x))
}

impl Rhs {
    pub fn plane_wave(ctx: &NystromContext, incidence: Vec3) -> Result<Rhs> {
        let d = norm3(incidence);
        if (d - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(
                "incidence direction must be a unit vector".into(),
            ));
        }
        let values = ctx
            .discretizations
            .iter()
            .map(|disc| {
                disc.points
                    .iter()
                    .map(|&r| -plane_wave(ctx.params.kappa, incidence, r))
                    .collect()
            })
            .collect();
        Ok(Rhs { incidence, values })
    }
}

/// Linear-solver selection.
#[derive(Debug, Clone, Copy)]
pub enum SolveMethod {
    Gmres {
        tol: f64,
        restart: usize,
        max_iter: usize,
    },
    Dense,
}

impl Default for SolveMethod {
    fn default() -> Self {
        SolveMethod::Gmres {
            tol: 1e-12,
            restart: 50,
            max_iter: 600,
        }
    }
}

/// Assembled discrete problem: geometry, kernel split, per-chart grids and
/// polar rules, plus precomputed singular-target classifications.
pub struct NystromContext {
    pub atlas: Atlas,
    pub params: ScatteringParams,
    pub delta: f64,
    pub split: KernelSplit,
    pub ns: Vec<usize>,
    pub variant: Variant,
    pub discretizations: Vec<ChartDiscretization>,
    pub rules: Vec<PolarRule>,
    /// `sing_targets[i][j]`: active-slot / polar-target pairs of chart `i`
    /// lying in the singular region of source chart `j`.
    sing_targets: Vec<Vec<Vec<(usize, PolarTarget)>>>,
}

impl NystromContext {
    pub fn new(
        atlas: Atlas,
        params: ScatteringParams,
        delta: f64,
        ns: &[usize],
        alpha: f64,
        theta_factor: f64,
        variant: Variant,
    ) -> Result<Self> {
        let nc = atlas.num_charts();
        if ns.len() != nc {
            return Err(Error::Parameter(format!(
                "need one grid order per chart ({nc}), got {}",
                ns.len()
            )));
        }
        let split = KernelSplit::new(params, atlas.cutoff(), delta)?;
        let discretizations: Vec<ChartDiscretization> = (0..nc)
            .map(|j| ChartDiscretization::build(&atlas, j, ns[j]))
            .collect();
        let rules: Vec<PolarRule> = (0..nc)
            .map(|j| PolarRule::new(ns[j], alpha, theta_factor))
            .collect();
        let mut sing_targets = Vec::with_capacity(nc);
        for i in 0..nc {
            let disc = &discretizations[i];
            let mut per_source = Vec::with_capacity(nc);
            for j in 0..nc {
                let mut list = Vec::new();
                if atlas.sing_sources[i].contains(&j) {
                    for (slot, m) in disc.active.iter().enumerate() {
                        let r = disc.points[slot];
                        if !singular_target_active(&atlas, j, r, delta) {
                            continue;
                        }
                        let u = [m[0] as f64 * disc.h, m[1] as f64 * disc.h];
                        let z = atlas.transition_map(i, j, u)?;
                        list.push((slot, PolarTarget { r, z }));
                    }
                }
                per_source.push(list);
            }
            sing_targets.push(per_source);
        }
        Ok(NystromContext {
            atlas,
            params,
            delta,
            split,
            ns: ns.to_vec(),
            variant,
            discretizations,
            rules,
            sing_targets,
        })
    }

    pub fn num_unknowns(&self) -> usize {
        self.discretizations.iter().map(|d| d.active.len()).sum()
    }

    pub fn zero_density(&self) -> DiscreteDensity {
        DiscreteDensity {
            ns: self.ns.clone(),
            values: self
                .discretizations
                .iter()
                .map(|d| vec![C64::new(0.0, 0.0); d.active.len()])
                .collect(),
        }
    }

    pub fn unflatten(&self, flat: &[C64]) -> DiscreteDensity {
        let mut density = self.zero_density();
        let mut offset = 0;
        for v in density.values.iter_mut() {
            let len = v.len();
            v.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        density
    }

    /// Weighted interpolants `Q_N(omega . phi)` of all charts.
    pub fn weighted_polys(&self, phi: &DiscreteDensity) -> Vec<TrigPoly> {
        (0..self.atlas.num_charts())
            .map(|j| {
                let disc = &self.discretizations[j];
                let n = disc.n;
                let mut values = vec![C64::new(0.0, 0.0); n * n];
                for (slot, m) in disc.active.iter().enumerate() {
                    values[m[0] * n + m[1]] = disc.pou[slot] * phi.values[j][slot];
                }
                TrigPoly::interpolate(&GridValues::new(n, values))
            })
            .collect()
    }

    fn line_data(&self, polys: &[TrigPoly]) -> Result<Vec<SourceLines>> {
        polys
            .iter()
            .map(|poly| {
                Ok(match self.variant {
                    Variant::Base => SourceLines::Trig {
                        vlines: poly.all_line_restrictions(Axis::U1),
                        hlines: poly.all_line_restrictions(Axis::U2),
                    },
                    Variant::Hermite { m, d } => {
                        SourceLines::Hermite(build_hermite_lines(poly, m, d)?)
                    }
                })
            })
            .collect()
    }

    /// Full operator action `(1/2 I + A_h) phi`.
    pub fn apply_operator(&self, phi: &DiscreteDensity) -> Result<DiscreteDensity> {
        self.apply_operator_parts(phi, true, true)
    }

    /// Operator action with the regular and/or singular sums switched off
    /// (both off leaves the identity part).
    pub(crate) fn apply_operator_parts(
        &self,
        phi: &DiscreteDensity,
        include_reg: bool,
        include_sing: bool,
    ) -> Result<DiscreteDensity> {
        let nc = self.atlas.num_charts();
        for j in 0..nc {
            if phi.values[j].len() != self.discretizations[j].active.len() {
                return Err(Error::Parameter(format!(
                    "density chart {j} has {} entries, grid expects {}",
                    phi.values[j].len(),
                    self.discretizations[j].active.len()
                )));
            }
        }
        let mut out = DiscreteDensity {
            ns: self.ns.clone(),
            values: phi.values.iter().map(|v| v.iter().map(|&x| 0.5 * x).collect()).collect(),
        };
        if include_reg {
            for i in 0..nc {
                let targets = &self.discretizations[i].points;
                for j in 0..nc {
                    let vals = apply_regular_core(
                        &self.split,
                        &self.discretizations[j],
                        &phi.values[j],
                        targets,
                    );
                    for (slot, v) in vals.into_iter().enumerate() {
                        out.values[i][slot] += v;
                    }
                }
            }
        }
        if include_sing {
            let polys = self.weighted_polys(phi);
            let lines = self.line_data(&polys)?;
            for i in 0..nc {
                for j in 0..nc {
                    let pairs = &self.sing_targets[i][j];
                    if pairs.is_empty() {
                        continue;
                    }
                    let targets: Vec<PolarTarget> = pairs.iter().map(|p| p.1).collect();
                    let vals = apply_singular_core(
                        &self.split,
                        self.atlas.chart(j),
                        &self.discretizations[j],
                        &self.rules[j],
                        &lines[j].as_line_eval(),
                        &targets,
                        None,
                    );
                    for ((slot, _), v) in pairs.iter().zip(vals) {
                        out.values[i][*slot] += v;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Dense materialization of the operator (unit-vector columns).
    pub fn assemble_dense(&self) -> Result<DMatrix<C64>> {
        let n = self.num_unknowns();
        if n > 5000 {
            return Err(Error::Resource(format!(
                "dense assembly capped at 5000 unknowns, need {n}"
            )));
        }
        let mut mat = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
        for col in 0..n {
            let mut e = vec![C64::new(0.0, 0.0); n];
            e[col] = C64::new(1.0, 0.0);
            let out = self.apply_operator(&self.unflatten(&e))?.flatten();
            for (row, v) in out.into_iter().enumerate() {
                mat[(row, col)] = v;
            }
        }
        Ok(mat)
    }

    /// Solve the discrete system for the given right-hand side.
    pub fn solve(&self, rhs: &Rhs, method: SolveMethod) -> Result<NystromSolution> {
        let b: Vec<C64> = rhs.values.iter().flatten().copied().collect();
        if b.len() != self.num_unknowns() {
            return Err(Error::Parameter("rhs does not match the grids".into()));
        }
        let norm_b = b.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        let (x, iterations, residual) = match method {
            SolveMethod::Dense => {
                let mat = self.assemble_dense()?;
                let bvec = nalgebra::DVector::from_column_slice(&b);
                let lu = mat.clone().lu();
                let x = lu
                    .solve(&bvec)
                    .ok_or_else(|| Error::Numerical("dense factorization failed".into()))?;
                let res = (&mat * &x - &bvec).norm() / norm_b.max(1e-300);
                (x.as_slice().to_vec(), 1, res)
            }
            SolveMethod::Gmres {
                tol,
                restart,
                max_iter,
            } => {
                if norm_b == 0.0 {
                    (vec![C64::new(0.0, 0.0); b.len()], 0, 0.0)
                } else {
                    let apply = |v: &[C64]| -> Result<Vec<C64>> {
                        Ok(self.apply_operator(&self.unflatten(v))?.flatten())
                    };
                    gmres(&apply, &b, tol, restart, max_iter)?
                }
            }
        };
        let density = self.unflatten(&x);
        let phi_h = self.weighted_polys(&density);
        let lines = self.line_data(&phi_h)?;
        Ok(NystromSolution {
            density,
            phi_h,
            lines,
            incidence: rhs.incidence,
            iterations,
            residual,
        })
    }
}

/// Per-chart line data of the solved weighted density.
pub enum SourceLines {
    Trig {
        vlines: Vec<Vec<C64>>,
        hlines: Vec<Vec<C64>>,
    },
    Hermite(HermiteLines),
}

impl SourceLines {
    fn as_line_eval(&self) -> LineEval<'_> {
        match self {
            SourceLines::Trig { vlines, hlines } => LineEval::Trig { vlines, hlines },
            SourceLines::Hermite(h) => LineEval::Hermite {
                vlines: &h.vlines,
                hlines: &h.hlines,
            },
        }
    }
}

/// Solved density with reconstruction data and solver diagnostics.
pub struct NystromSolution {
    pub density: DiscreteDensity,
    /// `Q_N(omega . phi)` per chart.
    pub phi_h: Vec<TrigPoly>,
    lines: Vec<SourceLines>,
    pub incidence: Vec3,
    pub iterations: usize,
    pub residual: f64,
}

impl NystromContext {
    /// Continuous reconstruction `psi^i_h(u)` on chart `i`.
    pub fn reconstruct(&self, solution: &NystromSolution, i: usize, u: Vec2) -> Result<C64> {
        let r = self.atlas.chart(i).eval(u)?.point;
        let nc = self.atlas.num_charts();
        let mut acc = C64::new(0.0, 0.0);
        for j in 0..nc {
            let reg = apply_regular_core(
                &self.split,
                &self.discretizations[j],
                &solution.density.values[j],
                &[r],
            )[0];
            acc += reg;
            if singular_target_active(&self.atlas, j, r, self.delta) {
                let z = self.atlas.transition_map(i, j, u)?;
                let sing = apply_singular_core(
                    &self.split,
                    self.atlas.chart(j),
                    &self.discretizations[j],
                    &self.rules[j],
                    &solution.lines[j].as_line_eval(),
                    &[PolarTarget { r, z }],
                    None,
                )[0];
                acc += sing;
            }
        }
        let uinc = plane_wave(self.params.kappa, solution.incidence, r);
        Ok(-2.0 * acc - 2.0 * uinc)
    }

    /// Assemble the single continuous surface density at a surface point.
    pub fn assemble_psi(&self, solution: &NystromSolution, r: Vec3) -> Result<C64> {
        let mut acc = C64::new(0.0, 0.0);
        let mut weight = 0.0;
        let mut found = false;
        for j in 0..self.atlas.num_charts() {
            let w = self.atlas.pou_weight(j, r);
            if w == 0.0 {
                continue;
            }
            let u = self.atlas.chart(j).inverse_analytic(r).ok_or_else(|| {
                Error::Domain("surface point not invertible on a supporting chart".into())
            })?;
            let back = self.atlas.chart(j).eval_unchecked(u).point;
            if norm3(sub3(back, r)) > 1e-9 {
                return Err(Error::Domain(
                    "point is not on the surface within inversion tolerance".into(),
                ));
            }
            acc += w * self.reconstruct(solution, j, u)?;
            weight += w;
            found = true;
        }
        if !found {
            return Err(Error::Domain("point not covered by any chart support".into()));
        }
        debug_assert!((weight - 1.0).abs() < 1e-10);
        Ok(acc)
    }

    /// Exterior combined potential of the solved density.
    pub fn evaluate_potential(&self, solution: &NystromSolution, x: Vec3) -> Result<C64> {
        let h_surf: f64 = self
            .discretizations
            .iter()
            .map(|d| d.h * d.metric_max)
            .fold(0.0, f64::max);
        let dist = self.distance_to_surface_estimate(x);
        if dist <= 2.0 * h_surf {
            return Err(Error::Domain(format!(
                "potential evaluation requires dist(x, S) > 2h = {:.3e}, got {:.3e}",
                2.0 * h_surf,
                dist
            )));
        }
        let nc = self.atlas.num_charts();
        let mut acc = C64::new(0.0, 0.0);
        for j in 0..nc {
            let disc = &self.discretizations[j];
            let mut chart_sum = C64::new(0.0, 0.0);
            for slot in 0..disc.points.len() {
                let k = kernel_k(x, disc.points[slot], disc.normals[slot], self.params)?;
                chart_sum += k
                    * (disc.jacobians[slot] * disc.pou[slot])
                    * solution.density.values[j][slot];
            }
            acc += chart_sum * (disc.h * disc.h);
        }
        Ok(acc)
    }

    fn distance_to_surface_estimate(&self, x: Vec3) -> f64 {
        match self.atlas.geometry {
            crate::geometry::Geometry::Sphere => (norm3(x) - 1.0).abs(),
            crate::geometry::Geometry::Ellipsoid(ax) => {
                let p = [x[0] / ax[0], x[1] / ax[1], x[2] / ax[2]];
                let min_axis = ax.iter().cloned().fold(f64::INFINITY, f64::min);
                (norm3(p) - 1.0).abs() * min_axis
            }
        }
    }
}

// ---------------------------------------------------------------------------
// GMRES
// ---------------------------------------------------------------------------

fn dotc(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm2(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Restarted GMRES with modified Gram-Schmidt and Givens rotations.
///
/// Returns the solution, the matvec count and the final true relative
/// residual.
pub fn gmres(
    apply: &dyn Fn(&[C64]) -> Result<Vec<C64>>,
    b: &[C64],
    tol: f64,
    restart: usize,
    max_iter: usize,
) -> Result<(Vec<C64>, usize, f64)> {
    let n = b.len();
    let norm_b = norm2(b);
    let mut x = vec![C64::new(0.0, 0.0); n];
    let mut total_iters = 0;
    let mut history = Vec::new();
    while total_iters < max_iter {
        let ax = apply(&x)?;
        let mut r: Vec<C64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = norm2(&r);
        if beta / norm_b <= tol {
            return Ok((x, total_iters, beta / norm_b));
        }
        for v in r.iter_mut() {
            *v /= beta;
        }
        let m = restart.min(max_iter - total_iters).max(1);
        let mut basis: Vec<Vec<C64>> = vec![r];
        let mut hess = vec![vec![C64::new(0.0, 0.0); m]; m + 1];
        let mut cs = vec![C64::new(0.0, 0.0); m];
        let mut sn = vec![C64::new(0.0, 0.0); m];
        let mut g = vec![C64::new(0.0, 0.0); m + 1];
        g[0] = C64::new(beta, 0.0);
        let mut converged_at = None;
        for jcol in 0..m {
            let mut w = apply(&basis[jcol])?;
            for irow in 0..=jcol {
                let hij = dotc(&basis[irow], &w);
                hess[irow][jcol] = hij;
                for (wk, vk) in w.iter_mut().zip(&basis[irow]) {
                    *wk -= hij * vk;
                }
            }
            let hnext = norm2(&w);
            hess[jcol + 1][jcol] = C64::new(hnext, 0.0);
            if hnext > 0.0 {
                for wk in w.iter_mut() {
                    *wk /= hnext;
                }
                basis.push(w);
            }
            // apply accumulated rotations to the new column
            for irow in 0..jcol {
                let t1 = cs[irow].conj() * hess[irow][jcol] + sn[irow].conj() * hess[irow + 1][jcol];
                let t2 = -sn[irow] * hess[irow][jcol] + cs[irow] * hess[irow + 1][jcol];
                hess[irow][jcol] = t1;
                hess[irow + 1][jcol] = t2;
            }
            // new rotation zeroing the subdiagonal
            let a = hess[jcol][jcol];
            let bb = hess[jcol + 1][jcol].re;
            let t = (a.norm_sqr() + bb * bb).sqrt();
            if t == 0.0 {
                cs[jcol] = C64::new(1.0, 0.0);
                sn[jcol] = C64::new(0.0, 0.0);
            } else if a.norm() == 0.0 {
                cs[jcol] = C64::new(0.0, 0.0);
                sn[jcol] = C64::new(1.0, 0.0);
            } else {
                cs[jcol] = C64::new(a.norm() / t, 0.0);
                sn[jcol] = (a / a.norm()) * (bb / t);
            }
            let t1 = cs[jcol].conj() * hess[jcol][jcol] + sn[jcol].conj() * hess[jcol + 1][jcol];
            hess[jcol][jcol] = t1;
            hess[jcol + 1][jcol] = C64::new(0.0, 0.0);
            let g1 = cs[jcol].conj() * g[jcol] + sn[jcol].conj() * g[jcol + 1];
            let g2 = -sn[jcol] * g[jcol] + cs[jcol] * g[jcol + 1];
            g[jcol] = g1;
            g[jcol + 1] = g2;
            total_iters += 1;
            let est = g[jcol + 1].norm() / norm_b;
            history.push(est);
            if est <= tol || hnext == 0.0 || total_iters >= max_iter {
                converged_at = Some(jcol + 1);
                break;
            }
        }
        let cols = converged_at.unwrap_or(m);
        // back substitution
        let mut y = vec![C64::new(0.0, 0.0); cols];
        for irow in (0..cols).rev() {
            let mut s = g[irow];
            for k in irow + 1..cols {
                s -= hess[irow][k] * y[k];
            }
            if hess[irow][irow].norm() == 0.0 {
                return Err(Error::Numerical("GMRES breakdown: singular Hessenberg".into()));
            }
            y[irow] = s / hess[irow][irow];
        }
        x.par_iter_mut().enumerate().for_each(|(k, xk)| {
            let mut acc = C64::new(0.0, 0.0);
            for (col, yc) in y.iter().enumerate() {
                acc += yc * basis[col][k];
            }
            *xk += acc;
        });
    }
    let ax = apply(&x)?;
    let res = norm2(
        &b.iter()
            .zip(&ax)
            .map(|(bi, ai)| bi - ai)
            .collect::<Vec<_>>(),
    ) / norm_b;
    if res <= tol {
        Ok((x, total_iters, res))
    } else {
        Err(Error::SolverNonConvergence {
            residual: res,
            iterations: total_iters,
            history,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_sphere_atlas;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn small_context(n: usize) -> NystromContext {
        let atlas = build_sphere_atlas(0.3).unwrap();
        let params = ScatteringParams::new(1.0, None).unwrap();
        let delta = atlas.delta0;
        NystromContext::new(atlas, params, delta, &[n; 6], 0.5, 2.0, Variant::Base).unwrap()
    }

    fn random_density(ctx: &NystromContext, seed: u64) -> DiscreteDensity {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = ctx.zero_density();
        for chart in d.values.iter_mut() {
            for v in chart.iter_mut() {
                *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
        }
        d
    }

    #[test]
    fn identity_part_with_kernels_off() {
        let ctx = small_context(8);
        let phi = random_density(&ctx, 1);
        let out = ctx.apply_operator_parts(&phi, false, false).unwrap();
        for j in 0..6 {
            for (a, b) in out.values[j].iter().zip(&phi.values[j]) {
                assert_eq!(*a, 0.5 * b);
            }
        }
    }

    #[test]
    fn operator_linearity() {
        let ctx = small_context(8);
        let a = random_density(&ctx, 2);
        let b = random_density(&ctx, 3);
        let alpha = C64::new(0.7, -1.3);
        let mut combo = ctx.zero_density();
        for j in 0..6 {
            for k in 0..combo.values[j].len() {
                combo.values[j][k] = a.values[j][k] + alpha * b.values[j][k];
            }
        }
        let fa = ctx.apply_operator(&a).unwrap().flatten();
        let fb = ctx.apply_operator(&b).unwrap().flatten();
        let fc = ctx.apply_operator(&combo).unwrap().flatten();
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for k in 0..fa.len() {
            worst = worst.max((fc[k] - (fa[k] + alpha * fb[k])).norm());
            scale = scale.max(fc[k].norm());
        }
        assert!(worst <= 1e-12 * scale.max(1.0), "linearity defect {worst}");
    }

    #[test]
    fn zero_rhs_gives_zero_solution() {
        let ctx = small_context(8);
        let rhs = Rhs {
            incidence: [0.0, 0.0, 1.0],
            values: ctx.zero_density().values,
        };
        let sol = ctx.solve(&rhs, SolveMethod::default()).unwrap();
        assert_eq!(sol.density.norm_l2_grid(), 0.0);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn gmres_solves_small_system() {
        // random diagonally dominant system
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 40;
        let mut mat = vec![vec![C64::new(0.0, 0.0); n]; n];
        for (i, row) in mat.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = C64::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
                if i == j {
                    *v += C64::new(2.0, 0.4);
                }
            }
        }
        let b: Vec<C64> = (0..n)
            .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let apply = |x: &[C64]| -> Result<Vec<C64>> {
            Ok(mat
                .iter()
                .map(|row| row.iter().zip(x).map(|(a, v)| a * v).sum())
                .collect())
        };
        let (x, _, res) = gmres(&apply, &b, 1e-13, 20, 500).unwrap();
        assert!(res < 1e-13);
        let ax = apply(&x).unwrap();
        let err = norm2(&b.iter().zip(&ax).map(|(u, v)| u - v).collect::<Vec<_>>());
        assert!(err < 1e-12 * norm2(&b));
    }

    #[test]
    fn dense_columns_match_operator() {
        let ctx = small_context(8);
        let mat = ctx.assemble_dense().unwrap();
        let n = ctx.num_unknowns();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let col = rng.gen_range(0..n);
            let mut e = vec![C64::new(0.0, 0.0); n];
            e[col] = C64::new(1.0, 0.0);
            let out = ctx.apply_operator(&ctx.unflatten(&e)).unwrap().flatten();
            for row in 0..n {
                assert!((mat[(row, col)] - out[row]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_and_gmres_agree() {
        let ctx = small_context(8);
        let rhs = Rhs::plane_wave(&ctx, [0.0, 0.0, 1.0]).unwrap();
        let dense = ctx.solve(&rhs, SolveMethod::Dense).unwrap();
        assert!(dense.residual < 1e-12);
        let gm = ctx.solve(&rhs, SolveMethod::default()).unwrap();
        assert!(gm.residual < 1e-12);
        let mut worst: f64 = 0.0;
        for j in 0..6 {
            for (a, b) in dense.density.values[j].iter().zip(&gm.density.values[j]) {
                worst = worst.max((a - b).norm());
            }
        }
        assert!(worst < 1e-10, "dense vs gmres gap {worst}");
    }

    #[test]
    fn reconstruction_collocates_at_grid_points() {
        let ctx = small_context(8);
        let rhs = Rhs::plane_wave(&ctx, [0.0, 0.0, 1.0]).unwrap();
        let sol = ctx.solve(&rhs, SolveMethod::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let i = rng.gen_range(0..6);
            let disc = &ctx.discretizations[i];
            let slot = rng.gen_range(0..disc.active.len());
            let m = disc.active[slot];
            let u = [m[0] as f64 * disc.h, m[1] as f64 * disc.h];
            let psi = ctx.reconstruct(&sol, i, u).unwrap();
            let phi = sol.density.values[i][slot];
            assert!(
                (psi - phi).norm() < 1e-10 * phi.norm().max(1.0),
                "collocation identity: {psi} vs {phi}"
            );
        }
    }

    #[test]
    fn zero_operator_reconstruction_is_incident_field() {
        // with both kernel sums forced off the system is (1/2) phi = -U^inc,
        // and the reconstruction reduces to -2 U^inc
        let ctx = small_context(8);
        let rhs = Rhs::plane_wave(&ctx, [0.0, 0.0, 1.0]).unwrap();
        let mut phi = ctx.zero_density();
        for j in 0..6 {
            for (slot, v) in rhs.values[j].iter().enumerate() {
                phi.values[j][slot] = 2.0 * v;
            }
        }
        let half = ctx.apply_operator_parts(&phi, false, false).unwrap();
        for j in 0..6 {
            for (a, b) in half.values[j].iter().zip(&rhs.values[j]) {
                assert!((a - b).norm() < 1e-14);
            }
        }
        for j in 0..6 {
            for (slot, v) in phi.values[j].iter().enumerate() {
                let r = ctx.discretizations[j].points[slot];
                let expect = -2.0 * plane_wave(1.0, [0.0, 0.0, 1.0], r);
                assert!((v - expect).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn potential_of_zero_density_is_zero() {
        let ctx = small_context(8);
        let rhs = Rhs {
            incidence: [0.0, 0.0, 1.0],
            values: ctx.zero_density().values,
        };
        let sol = ctx.solve(&rhs, SolveMethod::default()).unwrap();
        let v = ctx.evaluate_potential(&sol, [2.5, 0.3, 0.1]).unwrap();
        assert_eq!(v, C64::new(0.0, 0.0));
        // too close to the surface
        assert!(ctx.evaluate_potential(&sol, [1.01, 0.0, 0.0]).is_err());
    }

    #[test]
    fn rhs_plane_wave_satisfies_helmholtz() {
        // finite-difference Laplacian residual of the incident wave
        let kappa = 1.3;
        let d = crate::normalize3([0.3, -0.5, 0.81]);
        let x = [0.7, -0.2, 0.4];
        let h = 1e-3;
        let mut lap = C64::new(0.0, 0.0);
        for axis in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[axis] += h;
            xm[axis] -= h;
            lap += plane_wave(kappa, d, xp) + plane_wave(kappa, d, xm);
        }
        lap = (lap - 6.0 * plane_wave(kappa, d, x)) / (h * h);
        let residual = (lap + kappa * kappa * plane_wave(kappa, d, x)).norm();
        assert!(
            residual / (kappa * kappa) < 1e-4,
            "helmholtz residual {residual}"
        );
    }
}
