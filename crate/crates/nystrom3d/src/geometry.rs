//! Surface atlases, partition of unity and cut-off families.
//!
//! A surface is covered by six overlapping charts obtained by stereographic
//! projection around the six coordinate half-axes (composed with a diagonal
//! scaling for ellipsoids). Each chart maps a closed rectangle
//! `D^j = [0.05, 0.95]^2` strictly inside the unit square onto a patch that
//! extends well past the corresponding cube face, so neighboring patches
//! overlap generously. The partition of unity is built from smooth angular
//! bumps around the chart poles, normalized so the weights sum to one
//! exactly.

use crate::error::{Error, Result};
use crate::{add3, cross3, dot3, norm3, normalize3, scale3, sub3, Vec2, Vec3};

/// Margin of the chart parameter rectangle inside the unit square.
pub const PARAM_MARGIN: f64 = 0.05;
/// Half-width of the parameter rectangle.
const PARAM_HALF: f64 = 0.5 - PARAM_MARGIN;

/// Angle from a cube-face axis to the farthest point of that face (the cube
/// corner direction), `acos(1/sqrt(3))`.
pub const CORNER_ANGLE: f64 = 0.955_316_618_124_509_3;

/// `C^inf` step: 0 for `x <= 0`, 1 for `x >= 1`, standard mollifier blend
/// between.
pub fn smooth_step(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / x).exp();
        let b = (-1.0 / (1.0 - x)).exp();
        a / (a + b)
    }
}

/// Scatterer shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Sphere,
    Ellipsoid(Vec3),
}

impl Geometry {
    fn semiaxes(self) -> Vec3 {
        match self {
            Geometry::Sphere => [1.0, 1.0, 1.0],
            Geometry::Ellipsoid(axes) => axes,
        }
    }
}

/// Tunable atlas parameters. The defaults are used by all experiments.
#[derive(Debug, Clone, Copy)]
pub struct AtlasOptions {
    /// Controls how far the partition-of-unity supports and chart images
    /// extend past the cube faces. Must lie in `(0, 1/2)`.
    pub overlap: f64,
    /// Cut-off plateau fraction, `0 < eps0 < eps1`.
    pub eps0: f64,
    /// Cut-off support fraction, `eps1 <= 1`.
    pub eps1: f64,
}

impl Default for AtlasOptions {
    fn default() -> Self {
        AtlasOptions {
            overlap: 0.3,
            eps0: 0.4,
            eps1: 0.8,
        }
    }
}

impl AtlasOptions {
    fn validate(&self) -> Result<()> {
        if !(self.overlap > 0.0 && self.overlap < 0.5) {
            return Err(Error::Parameter(format!(
                "overlap must lie in (0, 1/2), got {}",
                self.overlap
            )));
        }
        if !(0.0 < self.eps0 && self.eps0 < self.eps1 && self.eps1 <= 1.0) {
            return Err(Error::Parameter(format!(
                "cut-off parameters must satisfy 0 < eps0 < eps1 <= 1, got ({}, {})",
                self.eps0, self.eps1
            )));
        }
        Ok(())
    }

    /// Angular radius of the partition-of-unity plateau.
    ///
    /// The plateau ends where neighboring supports begin; normalization
    /// keeps the weights identically 1 until then, so this choice maximizes
    /// the effective transition width of the normalized weights.
    pub fn theta_plateau(&self) -> f64 {
        (std::f64::consts::FRAC_PI_2 - self.theta_support() - 0.05).max(0.2)
    }

    /// Angular radius of the partition-of-unity support.
    pub fn theta_support(&self) -> f64 {
        CORNER_ANGLE + 0.9 * self.overlap
    }

    /// Angular radius of the chart image (inscribed disk).
    pub fn theta_chart(&self) -> f64 {
        (self.theta_support() + 0.2 + 0.4 * self.overlap).min(1.56)
    }
}

/// Result of evaluating a chart at a parameter point.
#[derive(Debug, Clone, Copy)]
pub struct SurfacePoint {
    pub point: Vec3,
    pub normal: Vec3,
    pub jacobian: f64,
}

/// One stereographic coordinate patch.
#[derive(Debug, Clone)]
pub struct Chart {
    pub index: usize,
    pub pole: Vec3,
    e1: Vec3,
    e2: Vec3,
    /// Tangent-plane half-width, `tan(theta_chart / 2)`.
    rho_max: f64,
    semiaxes: Vec3,
    /// Coarse preimage table used to seed chart inversion.
    seed_grid: Vec<(Vec2, Vec3)>,
}

const SEED_GRID_SIZE: usize = 24;

impl Chart {
    fn new(index: usize, rho_max: f64, semiaxes: Vec3) -> Self {
        let axis = index / 2;
        let sign = if index % 2 == 0 { 1.0 } else { -1.0 };
        let mut pole = [0.0; 3];
        pole[axis] = sign;
        let mut e1 = [0.0; 3];
        e1[(axis + 1) % 3] = 1.0;
        // e2 = pole x e1 keeps (e1, e2, pole) right-handed so the forward map
        // is orientation preserving and normals point outward.
        let e2 = cross3(pole, e1);
        let mut chart = Chart {
            index,
            pole,
            e1,
            e2,
            rho_max,
            semiaxes,
            seed_grid: Vec::new(),
        };
        let k = SEED_GRID_SIZE;
        let mut seeds = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..k {
                let u = [
                    PARAM_MARGIN + (0.5 + i as f64) / k as f64 * 2.0 * PARAM_HALF,
                    PARAM_MARGIN + (0.5 + j as f64) / k as f64 * 2.0 * PARAM_HALF,
                ];
                seeds.push((u, chart.eval_unchecked(u).point));
            }
        }
        chart.seed_grid = seeds;
        chart
    }

    #[inline]
    fn param_to_tangent(&self, u: Vec2) -> Vec2 {
        let s = self.rho_max / PARAM_HALF;
        [(u[0] - 0.5) * s, (u[1] - 0.5) * s]
    }

    #[inline]
    fn tangent_to_param(&self, rho: Vec2) -> Vec2 {
        let s = PARAM_HALF / self.rho_max;
        [0.5 + rho[0] * s, 0.5 + rho[1] * s]
    }

    /// Is `u` inside the (closed) chart domain `D^j`?
    pub fn contains(&self, u: Vec2) -> bool {
        let lo = PARAM_MARGIN - 1e-12;
        let hi = 1.0 - PARAM_MARGIN + 1e-12;
        u[0] >= lo && u[0] <= hi && u[1] >= lo && u[1] <= hi
    }

    /// Unit-sphere point of the underlying stereographic projection.
    #[inline]
    pub fn sphere_point(&self, u: Vec2) -> Vec3 {
        let rho = self.param_to_tangent(u);
        let r2 = rho[0] * rho[0] + rho[1] * rho[1];
        let w = 1.0 / (1.0 + r2);
        let mut p = scale3(self.pole, (1.0 - r2) * w);
        p = add3(p, scale3(self.e1, 2.0 * rho[0] * w));
        add3(p, scale3(self.e2, 2.0 * rho[1] * w))
    }

    /// Forward map, normal and Jacobian without the domain check.
    pub fn eval_unchecked(&self, u: Vec2) -> SurfacePoint {
        let rho = self.param_to_tangent(u);
        let r2 = rho[0] * rho[0] + rho[1] * rho[1];
        let w = 1.0 / (1.0 + r2);
        let p = {
            let mut p = scale3(self.pole, (1.0 - r2) * w);
            p = add3(p, scale3(self.e1, 2.0 * rho[0] * w));
            add3(p, scale3(self.e2, 2.0 * rho[1] * w))
        };
        // dP/drho_k = (2 e_k - 2 rho_k pole) w - 2 rho_k w P
        let s = self.rho_max / PARAM_HALF;
        let dp = |ek: Vec3, rk: f64| -> Vec3 {
            let mut v = scale3(ek, 2.0 * w);
            v = add3(v, scale3(self.pole, -2.0 * rk * w));
            add3(v, scale3(p, -2.0 * rk * w))
        };
        let d1 = dp(self.e1, rho[0]);
        let d2 = dp(self.e2, rho[1]);
        let ax = self.semiaxes;
        let point = [p[0] * ax[0], p[1] * ax[1], p[2] * ax[2]];
        let t1 = [d1[0] * ax[0] * s, d1[1] * ax[1] * s, d1[2] * ax[2] * s];
        let t2 = [d2[0] * ax[0] * s, d2[1] * ax[1] * s, d2[2] * ax[2] * s];
        let cr = cross3(t1, t2);
        let jacobian = norm3(cr);
        let normal = normalize3([p[0] / ax[0], p[1] / ax[1], p[2] / ax[2]]);
        debug_assert!(dot3(cr, normal) > 0.0, "chart orientation flipped");
        SurfacePoint {
            point,
            normal,
            jacobian,
        }
    }

    /// Forward map with domain check.
    pub fn eval(&self, u: Vec2) -> Result<SurfacePoint> {
        if !self.contains(u) {
            return Err(Error::Domain(format!(
                "parameter ({}, {}) outside chart domain",
                u[0], u[1]
            )));
        }
        Ok(self.eval_unchecked(u))
    }

    /// Exact inverse of the forward map, when the point lies in the chart
    /// image. Used as an independent cross-check of the Newton inversion.
    pub fn inverse_analytic(&self, point: Vec3) -> Option<Vec2> {
        let ax = self.semiaxes;
        let p = normalize3([point[0] / ax[0], point[1] / ax[1], point[2] / ax[2]]);
        let t = dot3(p, self.pole);
        if t <= -1.0 + 1e-12 {
            return None;
        }
        let rho = [dot3(p, self.e1) / (1.0 + t), dot3(p, self.e2) / (1.0 + t)];
        let u = self.tangent_to_param(rho);
        if self.contains(u) {
            Some(u)
        } else {
            None
        }
    }

    /// Damped Gauss-Newton inversion of the forward map, seeded from the
    /// nearest precomputed grid preimage.
    pub fn inverse_newton(&self, point: Vec3, tol: f64) -> Result<Vec2> {
        let mut best = ([0.5, 0.5], f64::INFINITY);
        for (u, r) in &self.seed_grid {
            let d = norm3(sub3(*r, point));
            if d < best.1 {
                best = (*u, d);
            }
        }
        let mut u = best.0;
        let mut res = best.1;
        for _ in 0..60 {
            if res < tol {
                return Ok(u);
            }
            let sp = self.eval_unchecked(u);
            let f = sub3(sp.point, point);
            // two tangent columns of the Jacobian via finite shifts would lose
            // accuracy; use the analytic partials
            let (t1, t2) = self.partials(u);
            let a = dot3(t1, t1);
            let b = dot3(t1, t2);
            let c = dot3(t2, t2);
            let g1 = dot3(t1, f);
            let g2 = dot3(t2, f);
            let det = a * c - b * b;
            if det.abs() < 1e-300 {
                return Err(Error::Numerical("degenerate chart Jacobian".into()));
            }
            let step = [-(c * g1 - b * g2) / det, -(a * g2 - b * g1) / det];
            let mut lambda = 1.0;
            let mut accepted = false;
            while lambda > 1e-6 {
                let cand = [u[0] + lambda * step[0], u[1] + lambda * step[1]];
                let r = norm3(sub3(self.eval_unchecked(cand).point, point));
                if r < res {
                    u = cand;
                    res = r;
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if res < tol {
            Ok(u)
        } else {
            Err(Error::Numerical(format!(
                "chart inversion stalled at residual {res:.3e}"
            )))
        }
    }

    /// Analytic partial derivatives of the forward map.
    pub fn partials(&self, u: Vec2) -> (Vec3, Vec3) {
        let rho = self.param_to_tangent(u);
        let r2 = rho[0] * rho[0] + rho[1] * rho[1];
        let w = 1.0 / (1.0 + r2);
        let p = {
            let mut p = scale3(self.pole, (1.0 - r2) * w);
            p = add3(p, scale3(self.e1, 2.0 * rho[0] * w));
            add3(p, scale3(self.e2, 2.0 * rho[1] * w))
        };
        let s = self.rho_max / PARAM_HALF;
        let dp = |ek: Vec3, rk: f64| -> Vec3 {
            let mut v = scale3(ek, 2.0 * w);
            v = add3(v, scale3(self.pole, -2.0 * rk * w));
            add3(v, scale3(p, -2.0 * rk * w))
        };
        let d1 = dp(self.e1, rho[0]);
        let d2 = dp(self.e2, rho[1]);
        let ax = self.semiaxes;
        (
            [d1[0] * ax[0] * s, d1[1] * ax[1] * s, d1[2] * ax[2] * s],
            [d2[0] * ax[0] * s, d2[1] * ax[1] * s, d2[2] * ax[2] * s],
        )
    }
}

/// Uniform grid of one chart together with its active index set.
#[derive(Debug, Clone)]
pub struct ChartGrid {
    pub n: usize,
    pub h: f64,
    /// Indices `m` with `r^j(x_m)` in the interior of the partition-of-unity
    /// support, sorted row-major.
    pub active: Vec<[usize; 2]>,
}

/// Floating cut-off family `eta_delta`.
#[derive(Debug, Clone, Copy)]
pub struct CutoffFamily {
    pub eps0: f64,
    pub eps1: f64,
    pub delta0: f64,
}

impl CutoffFamily {
    /// `eta_delta(r, r')` for distances, without the range check on `delta`.
    #[inline]
    pub fn eta_dist(&self, dist: f64, delta: f64) -> f64 {
        let lo = self.eps0 * delta;
        let hi = self.eps1 * delta;
        if dist <= lo {
            1.0
        } else if dist >= hi {
            0.0
        } else {
            smooth_step((hi - dist) / (hi - lo))
        }
    }

    /// `eta_delta(r, r')`.
    pub fn eta(&self, r: Vec3, rp: Vec3, delta: f64) -> Result<f64> {
        if !(delta > 0.0 && delta <= self.delta0 * (1.0 + 1e-12)) {
            return Err(Error::Parameter(format!(
                "delta = {delta} outside (0, {}]",
                self.delta0
            )));
        }
        Ok(self.eta_dist(norm3(sub3(r, rp)), delta))
    }
}

/// Overlapping-chart description of the scatterer surface.
#[derive(Debug, Clone)]
pub struct Atlas {
    pub geometry: Geometry,
    pub options: AtlasOptions,
    pub charts: Vec<Chart>,
    /// Largest cut-off radius for which the polar integration of any chart
    /// stays inside the neighboring chart domains.
    pub delta0: f64,
    /// Cut-off radius satisfying the stronger separation inequality used by
    /// the stability theory (much smaller; kept as a diagnostic).
    pub delta0_strict: f64,
    /// Chordal separation between each partition-of-unity support and the
    /// complement of its chart image (minimum over charts).
    pub gap: f64,
    /// Chart pairs with intersecting images.
    pub overlap_pairs: Vec<(usize, usize)>,
    /// For each target chart `i`, the source charts `j` whose singular
    /// operator can be nonzero somewhere on `supp omega^i`.
    pub sing_sources: Vec<Vec<usize>>,
}

/// Six-chart atlas of the unit sphere.
pub fn build_sphere_atlas(overlap: f64) -> Result<Atlas> {
    Atlas::build(
        Geometry::Sphere,
        AtlasOptions {
            overlap,
            ..AtlasOptions::default()
        },
    )
}

/// Six-chart atlas of an axis-aligned ellipsoid.
pub fn build_ellipsoid_atlas(semiaxes: Vec3, overlap: f64) -> Result<Atlas> {
    if semiaxes.iter().any(|&a| a <= 0.0) {
        return Err(Error::Parameter(format!(
            "semiaxes must be positive, got {semiaxes:?}"
        )));
    }
    Atlas::build(
        Geometry::Ellipsoid(semiaxes),
        AtlasOptions {
            overlap,
            ..AtlasOptions::default()
        },
    )
}

impl Atlas {
    pub fn build(geometry: Geometry, options: AtlasOptions) -> Result<Atlas> {
        options.validate()?;
        let semiaxes = geometry.semiaxes();
        if semiaxes.iter().any(|&a| a <= 0.0) {
            return Err(Error::Parameter(format!(
                "semiaxes must be positive, got {semiaxes:?}"
            )));
        }
        let rho_max = (options.theta_chart() / 2.0).tan();
        let charts: Vec<Chart> = (0..6).map(|j| Chart::new(j, rho_max, semiaxes)).collect();

        // Chordal separation between the POU support cap and the boundary of
        // the chart image, sampled along the parameter-rectangle boundary.
        // All charts are congruent on the unit sphere, so one chart suffices;
        // an ellipsoid can only shrink chordal distances by min(semiaxes).
        let theta_supp = options.theta_support();
        let samples = 3000;
        let mut gap_sphere = f64::INFINITY;
        let reference = Chart::new(0, rho_max, [1.0, 1.0, 1.0]);
        for k in 0..samples {
            let t = PARAM_MARGIN + (k as f64 / (samples - 1) as f64) * 2.0 * PARAM_HALF;
            for edge in [
                [t, PARAM_MARGIN],
                [t, 1.0 - PARAM_MARGIN],
                [PARAM_MARGIN, t],
                [1.0 - PARAM_MARGIN, t],
            ] {
                let p = reference.sphere_point(edge);
                let theta = dot3(p, reference.pole).clamp(-1.0, 1.0).acos();
                if theta > theta_supp {
                    gap_sphere = gap_sphere.min(2.0 * ((theta - theta_supp) / 2.0).sin());
                }
            }
        }
        let min_axis = semiaxes.iter().cloned().fold(f64::INFINITY, f64::min);
        let gap = (gap_sphere - 1e-3) * min_axis;
        if gap <= 0.0 {
            return Err(Error::Parameter(
                "chart images do not clear the partition-of-unity supports".into(),
            ));
        }
        let delta0 = 0.95 * gap / (2.0 * options.eps1);
        let delta0_strict = 0.5 * gap / (5.0 * options.eps1);

        // Pole-angle tests for chart-pair metadata.
        let theta_chart = options.theta_chart();
        let mut overlap_pairs = Vec::new();
        for i in 0..6 {
            for j in (i + 1)..6 {
                let ang = dot3(charts[i].pole, charts[j].pole).clamp(-1.0, 1.0).acos();
                if ang < 2.0 * theta_chart {
                    overlap_pairs.push((i, j));
                }
            }
        }
        let reach = 2.0 * (0.5 * (options.eps1 * delta0 / min_axis).min(1.0)).asin();
        let sing_sources = (0..6)
            .map(|i| {
                (0..6)
                    .filter(|&j| {
                        let ang = dot3(charts[i].pole, charts[j].pole)
                            .clamp(-1.0, 1.0)
                            .acos();
                        ang < 2.0 * theta_supp + reach + 0.05
                    })
                    .collect()
            })
            .collect();

        Ok(Atlas {
            geometry,
            options,
            charts,
            delta0,
            delta0_strict,
            gap,
            overlap_pairs,
            sing_sources,
        })
    }

    pub fn num_charts(&self) -> usize {
        self.charts.len()
    }

    pub fn chart(&self, j: usize) -> &Chart {
        &self.charts[j]
    }

    pub fn cutoff(&self) -> CutoffFamily {
        CutoffFamily {
            eps0: self.options.eps0,
            eps1: self.options.eps1,
            delta0: self.delta0,
        }
    }

    fn to_sphere(&self, r: Vec3) -> Vec3 {
        let ax = self.geometry.semiaxes();
        normalize3([r[0] / ax[0], r[1] / ax[1], r[2] / ax[2]])
    }

    /// Partition-of-unity bump of chart `j` at a surface point (unnormalized).
    pub fn pou_bump(&self, j: usize, r: Vec3) -> f64 {
        let p = self.to_sphere(r);
        let theta = dot3(p, self.charts[j].pole).clamp(-1.0, 1.0).acos();
        let plat = self.options.theta_plateau();
        let supp = self.options.theta_support();
        if theta <= plat {
            1.0
        } else if theta >= supp {
            0.0
        } else {
            smooth_step((supp - theta) / (supp - plat))
        }
    }

    /// Normalized partition-of-unity weights of all charts at a surface point.
    pub fn pou_weights(&self, r: Vec3) -> Vec<f64> {
        let mut w: Vec<f64> = (0..self.charts.len())
            .map(|j| self.pou_bump(j, r))
            .collect();
        let sum: f64 = w.iter().sum();
        debug_assert!(sum > 0.0, "partition-of-unity supports do not cover {r:?}");
        for v in w.iter_mut() {
            *v /= sum;
        }
        w
    }

    /// `omega^j` at a surface point.
    pub fn pou_weight(&self, j: usize, r: Vec3) -> f64 {
        if self.pou_bump(j, r) == 0.0 {
            return 0.0;
        }
        self.pou_weights(r)[j]
    }

    /// Chordal distance from a surface point to `supp omega^j`.
    ///
    /// Exact for the sphere. For an ellipsoid the closest point is taken
    /// along the same meridian, which slightly overestimates the distance;
    /// all containment thresholds carry margins that absorb this.
    pub fn dist_to_support(&self, j: usize, r: Vec3) -> f64 {
        let p = self.to_sphere(r);
        let theta = dot3(p, self.charts[j].pole).clamp(-1.0, 1.0).acos();
        let supp = self.options.theta_support();
        if theta <= supp {
            return 0.0;
        }
        match self.geometry {
            Geometry::Sphere => 2.0 * ((theta - supp) / 2.0).sin(),
            Geometry::Ellipsoid(ax) => {
                let pole = self.charts[j].pole;
                let tang = sub3(p, scale3(pole, dot3(p, pole)));
                let tn = norm3(tang);
                let tang = if tn > 1e-14 {
                    scale3(tang, 1.0 / tn)
                } else {
                    // antipodal; any meridian works
                    [pole[1], pole[2], pole[0]]
                };
                let q = add3(scale3(pole, supp.cos()), scale3(tang, supp.sin()));
                let qe = [q[0] * ax[0], q[1] * ax[1], q[2] * ax[2]];
                norm3(sub3(r, qe))
            }
        }
    }

    /// Transition map `r^{ji} = (r^j)^{-1} o r^i`, by damped Newton iteration
    /// on the forward map of chart `j`.
    pub fn transition_map(&self, i: usize, j: usize, u: Vec2) -> Result<Vec2> {
        let point = self.charts[i].eval(u)?.point;
        if i == j {
            return Ok(u);
        }
        if self.charts[j].inverse_analytic(point).is_none() {
            return Err(Error::NotInOverlap(format!(
                "chart {i} point ({:.4}, {:.4}) is not in the image of chart {j}",
                u[0], u[1]
            )));
        }
        let scale = norm3(self.geometry.semiaxes());
        self.charts[j].inverse_newton(point, 1e-13 * scale)
    }

    /// Second cut-off family `omega~^j_delta` on the parameter square.
    ///
    /// Equal to 1 where the surface point is within `2 eps1 delta` of the
    /// partition-of-unity support and 0 beyond `3 eps1 delta`; `delta = 0`
    /// degenerates to the characteristic function of the support preimage.
    pub fn omega_tilde(&self, j: usize, u: Vec2, delta: f64) -> f64 {
        let r = self.charts[j].eval_unchecked(u).point;
        let d = self.dist_to_support(j, r);
        if delta == 0.0 {
            return if d == 0.0 { 1.0 } else { 0.0 };
        }
        let e1 = self.options.eps1;
        let plateau = 2.2 * e1 * delta;
        let zero = 2.8 * e1 * delta;
        if d <= plateau {
            1.0
        } else if d >= zero {
            0.0
        } else {
            smooth_step((zero - d) / (zero - plateau))
        }
    }

    /// Per-chart uniform grid and active index set.
    pub fn grid(&self, j: usize, n: usize) -> ChartGrid {
        assert!(n >= 4, "grid order must be at least 4");
        let h = 1.0 / n as f64;
        let mut active = Vec::new();
        for m1 in 0..n {
            for m2 in 0..n {
                let u = [m1 as f64 * h, m2 as f64 * h];
                if self.charts[j].contains(u) {
                    let r = self.charts[j].eval_unchecked(u).point;
                    if self.pou_bump(j, r) > 0.0 {
                        active.push([m1, m2]);
                    }
                }
            }
        }
        ChartGrid { n, h, active }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_sphere_points(count: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                loop {
                    let v = [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ];
                    let n = norm3(v);
                    if n > 0.1 && n < 1.0 {
                        return scale3(v, 1.0 / n);
                    }
                }
            })
            .collect()
    }

    #[test]
    fn chart_center_is_pole() {
        let atlas = build_sphere_atlas(0.3).unwrap();
        for j in 0..6 {
            let sp = atlas.chart(j).eval([0.5, 0.5]).unwrap();
            assert!((norm3(sp.point) - 1.0).abs() < 1e-14);
            assert!(norm3(sub3(sp.point, atlas.chart(j).pole)) < 1e-14);
            assert!(norm3(sub3(sp.normal, sp.point)) < 1e-14);
        }
    }

    #[test]
    fn jacobian_positive_and_normal_unit() {
        let atlas = build_sphere_atlas(0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let j = rng.gen_range(0..6);
            let u = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
            let sp = atlas.chart(j).eval(u).unwrap();
            assert!(sp.jacobian > 0.0);
            assert!((norm3(sp.normal) - 1.0).abs() < 1e-12);
            assert!((norm3(sp.point) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn chart_eval_outside_domain_errors() {
        let atlas = build_sphere_atlas(0.3).unwrap();
        assert!(atlas.chart(0).eval([0.01, 0.5]).is_err());
        assert!(atlas.chart(0).eval([0.5, 0.97]).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let atlas = build_ellipsoid_atlas([1.3, 0.9, 1.1], 0.3).unwrap();
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let j = rng.gen_range(0..6);
            let u = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
            let chart = atlas.chart(j);
            let f = |v: Vec2| chart.eval_unchecked(v).point;
            let d1 = scale3(
                sub3(f([u[0] + h, u[1]]), f([u[0] - h, u[1]])),
                1.0 / (2.0 * h),
            );
            let d2 = scale3(
                sub3(f([u[0], u[1] + h]), f([u[0], u[1] - h])),
                1.0 / (2.0 * h),
            );
            let fd = norm3(cross3(d1, d2));
            let a = chart.eval_unchecked(u).jacobian;
            assert!(
                (fd - a).abs() < 1e-6 * a,
                "chart {j} at {u:?}: fd {fd} vs analytic {a}"
            );
        }
    }

    #[test]
    fn sphere_is_covered_and_pou_sums_to_one() {
        let atlas = build_sphere_atlas(0.15).unwrap();
        for r in random_sphere_points(10_000, 3) {
            let mut in_image = 0;
            let mut in_supp = 0;
            for j in 0..6 {
                if atlas.chart(j).inverse_analytic(r).is_some() {
                    in_image += 1;
                }
                if atlas.pou_bump(j, r) > 0.0 {
                    in_supp += 1;
                }
            }
            assert!(in_image >= 1, "point {r:?} not covered by any chart");
            assert!(in_supp >= 1, "point {r:?} not in any POU support");
            let sum: f64 = atlas.pou_weights(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pou_support_strictly_interior() {
        let atlas = build_sphere_atlas(0.15).unwrap();
        for j in 0..6 {
            let grid = atlas.grid(j, 64);
            let mut min_dist = f64::INFINITY;
            for m in &grid.active {
                let u = [m[0] as f64 * grid.h, m[1] as f64 * grid.h];
                let d = (u[0] - PARAM_MARGIN)
                    .min(1.0 - PARAM_MARGIN - u[0])
                    .min(u[1] - PARAM_MARGIN)
                    .min(1.0 - PARAM_MARGIN - u[1]);
                min_dist = min_dist.min(d);
            }
            assert!(min_dist > 0.01, "chart {j}: active set touches boundary");
        }
    }

    #[test]
    fn ellipsoid_unit_axes_coincides_with_sphere() {
        let sphere = build_sphere_atlas(0.3).unwrap();
        let ell = build_ellipsoid_atlas([1.0, 1.0, 1.0], 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let j = rng.gen_range(0..6);
            let u = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
            let a = sphere.chart(j).eval_unchecked(u);
            let b = ell.chart(j).eval_unchecked(u);
            assert!(norm3(sub3(a.point, b.point)) < 1e-14);
            assert!(norm3(sub3(a.normal, b.normal)) < 1e-14);
            assert!((a.jacobian - b.jacobian).abs() < 1e-14);
        }
    }

    #[test]
    fn ellipsoid_satisfies_implicit_equation() {
        let atlas = build_ellipsoid_atlas([2.0, 1.0, 1.0], 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let j = rng.gen_range(0..6);
            let u = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
            let p = atlas.chart(j).eval_unchecked(u).point;
            let val = (p[0] / 2.0).powi(2) + p[1] * p[1] + p[2] * p[2];
            assert!((val - 1.0).abs() < 1e-12);
        }
        // normal at (2, 0, 0) is (1, 0, 0): chart 0 center
        let sp = atlas.chart(0).eval([0.5, 0.5]).unwrap();
        assert!(norm3(sub3(sp.point, [2.0, 0.0, 0.0])) < 1e-13);
        assert!(norm3(sub3(sp.normal, [1.0, 0.0, 0.0])) < 1e-13);
    }

    #[test]
    fn nonpositive_semiaxis_is_error() {
        assert!(build_ellipsoid_atlas([1.0, -2.0, 1.0], 0.3).is_err());
        assert!(build_ellipsoid_atlas([1.0, 0.0, 1.0], 0.3).is_err());
    }

    #[test]
    fn transition_map_identity_and_roundtrip() {
        let atlas = build_sphere_atlas(0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // identity
        for _ in 0..50 {
            let i = rng.gen_range(0..6);
            let u = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
            let v = atlas.transition_map(i, i, u).unwrap();
            assert!((v[0] - u[0]).abs() < 1e-13 && (v[1] - u[1]).abs() < 1e-13);
        }
        // round trip and forward consistency on an overlap
        let mut tested = 0;
        while tested < 100 {
            let i = rng.gen_range(0..6);
            let j = rng.gen_range(0..6);
            if i == j {
                continue;
            }
            let u = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
            let Ok(v) = atlas.transition_map(i, j, u) else {
                continue;
            };
            let back = atlas.transition_map(j, i, v).unwrap();
            assert!(
                ((back[0] - u[0]).powi(2) + (back[1] - u[1]).powi(2)).sqrt() < 1e-12,
                "roundtrip {i}->{j}: {u:?} -> {v:?} -> {back:?}"
            );
            let ri = atlas.chart(i).eval_unchecked(u).point;
            let rj = atlas.chart(j).eval_unchecked(v).point;
            assert!(norm3(sub3(ri, rj)) < 1e-12);
            tested += 1;
        }
    }

    #[test]
    fn newton_inverse_matches_analytic() {
        let atlas = build_ellipsoid_atlas([1.5, 1.0, 0.8], 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tested = 0;
        while tested < 200 {
            let i = rng.gen_range(0..6);
            let u = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
            let p = atlas.chart(i).eval_unchecked(u).point;
            let j = rng.gen_range(0..6);
            let Some(exact) = atlas.chart(j).inverse_analytic(p) else {
                continue;
            };
            let newton = atlas.chart(j).inverse_newton(p, 1e-13 * 2.0).unwrap();
            assert!(
                ((newton[0] - exact[0]).powi(2) + (newton[1] - exact[1]).powi(2)).sqrt() < 1e-10,
                "{newton:?} vs {exact:?}"
            );
            tested += 1;
        }
    }

    #[test]
    fn transition_outside_overlap_errors() {
        let atlas = build_sphere_atlas(0.3).unwrap();
        // chart 0 pole (+x) is far from chart 1 image (-x pole)
        assert!(matches!(
            atlas.transition_map(0, 1, [0.5, 0.5]),
            Err(Error::NotInOverlap(_))
        ));
    }

    #[test]
    fn eta_plateau_support_and_monotonicity() {
        let atlas = build_sphere_atlas(0.3).unwrap();
        let cutoff = atlas.cutoff();
        let delta = atlas.delta0 * 0.8;
        let r = [1.0, 0.0, 0.0];
        let dir = normalize3([0.1, 0.7, 0.3]);
        let at = |d: f64| add3(r, scale3(dir, d));
        assert_eq!(cutoff.eta(r, r, delta).unwrap(), 1.0);
        assert_eq!(
            cutoff
                .eta(r, at(2.0 * cutoff.eps1 * delta), delta)
                .unwrap(),
            0.0
        );
        let mid = 0.5 * (cutoff.eps0 + cutoff.eps1) * delta;
        let v = cutoff.eta(r, at(mid), delta).unwrap();
        assert!(v > 0.0 && v < 1.0);
        // monotone nonincreasing in distance
        let mut last = 1.0;
        for k in 0..200 {
            let d = k as f64 / 199.0 * cutoff.eps1 * delta * 1.2;
            let v = cutoff.eta_dist(d, delta);
            assert!(v <= last + 1e-15);
            last = v;
        }
        // delta out of range
        assert!(cutoff.eta(r, r, 0.0).is_err());
        assert!(cutoff.eta(r, r, 2.0 * atlas.delta0).is_err());
    }

    #[test]
    fn omega_tilde_properties() {
        let atlas = build_sphere_atlas(0.3).unwrap();
        let delta = atlas.delta0 * 0.9;
        let e1 = atlas.options.eps1;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..300 {
            let j = rng.gen_range(0..6);
            let u = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
            let r = atlas.chart(j).eval_unchecked(u).point;
            let d = atlas.dist_to_support(j, r);
            let v = atlas.omega_tilde(j, u, delta);
            if d == 0.0 {
                assert_eq!(v, 1.0, "inside support must be on the plateau");
            }
            if d > 3.0 * e1 * delta {
                assert_eq!(v, 0.0, "far points must be outside the support");
            }
            // delta = 0: characteristic function
            let v0 = atlas.omega_tilde(j, u, 0.0);
            assert_eq!(v0, if d == 0.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn grid_examples() {
        let atlas = build_sphere_atlas(0.3).unwrap();
        let g = atlas.grid(0, 4);
        assert_eq!(g.n, 4);
        assert!((g.h - 0.25).abs() < 1e-16);
        for m in &g.active {
            let u = [m[0] as f64 * g.h, m[1] as f64 * g.h];
            let r = atlas.chart(0).eval_unchecked(u).point;
            assert!(atlas.pou_weight(0, r) > 0.0);
        }
        // quadratic growth of the active set
        let mut counts = Vec::new();
        for n in [16usize, 32, 64] {
            counts.push(atlas.grid(0, n).active.len() as f64);
        }
        for w in counts.windows(2) {
            let ratio = w[1] / w[0];
            assert!(
                (3.5..=4.5).contains(&ratio),
                "active-set growth ratio {ratio}"
            );
        }
    }

    #[test]
    fn surface_area_of_unit_sphere() {
        let atlas = build_sphere_atlas(0.3).unwrap();
        let n = 64;
        let h = 1.0 / n as f64;
        let mut area = 0.0;
        for j in 0..6 {
            for m in &atlas.grid(j, n).active {
                let u = [m[0] as f64 * h, m[1] as f64 * h];
                let sp = atlas.chart(j).eval_unchecked(u);
                area += h * h * atlas.pou_weight(j, sp.point) * sp.jacobian;
            }
        }
        let exact = 4.0 * std::f64::consts::PI;
        assert!(
            ((area - exact) / exact).abs() < 1e-8,
            "area {area} vs {exact}, rel {}",
            ((area - exact) / exact).abs()
        );
    }

    #[test]
    fn delta0_bounds_and_separation() {
        let atlas = build_sphere_atlas(0.3).unwrap();
        assert!(atlas.delta0 > 0.0 && atlas.delta0_strict > 0.0);
        assert!(atlas.delta0_strict < atlas.delta0);
        // Strict bound satisfies the separation inequality on sampled pairs:
        // for r outside the chart image, B(r, eps1 d0) stays clear of the
        // 4 eps1 d0 neighborhood of the support.
        let d0 = atlas.delta0_strict;
        let e1 = atlas.options.eps1;
        for r in random_sphere_points(4000, 9) {
            for j in 0..6 {
                if atlas.chart(j).inverse_analytic(r).is_none() {
                    let d = atlas.dist_to_support(j, r);
                    assert!(
                        d > 5.0 * e1 * d0,
                        "separation violated: dist {d}, bound {}",
                        5.0 * e1 * d0
                    );
                }
            }
        }
        // Working bound keeps the polar integration inside chart domains:
        // points within 2 eps1 delta0 of a support lie in the chart image.
        for r in random_sphere_points(4000, 10) {
            for j in 0..6 {
                if atlas.dist_to_support(j, r) <= 2.0 * e1 * atlas.delta0 {
                    assert!(
                        atlas.chart(j).inverse_analytic(r).is_some(),
                        "polar node region escapes chart {j}"
                    );
                }
            }
        }
    }
}
