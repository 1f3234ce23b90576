//! The two integration engines of the solver: the biperiodic trapezoidal
//! rule for the regular kernel part and the polar-coordinate rule for the
//! singular part, plus the standalone radial/angular quadrature family used
//! by the rate-verification harness.
//!
//! Radial nodes of the polar rule are the intersections of rays through the
//! singular point with the grid lines, so one coordinate of every node is an
//! exact grid coordinate and densities restrict to univariate trigonometric
//! polynomials along the node lines.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Atlas, Chart};
use crate::kernels::{kernel_k1, KernelSplit};
use crate::trig::{eval_1d_fft_order, Axis, HermiteInterpolant, TrigPoly};
use crate::{norm3, sub3, Vec2, Vec3, C64};

/// Which family of grid lines a polar ray intersects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Vertical,
    Horizontal,
}

/// Angle-dependent node-spacing weight `c(theta) = min(1/|cos|, 1/|sin|)`.
#[inline]
pub fn c_weight(theta: f64) -> f64 {
    (1.0 / theta.cos().abs()).min(1.0 / theta.sin().abs())
}

/// Branch selector; the tie at `|cos theta| = sqrt(2)/2` goes to the
/// vertical branch.
#[inline]
pub fn branch(theta: f64) -> Branch {
    if theta.cos().abs() >= FRAC_1_SQRT_2 {
        Branch::Vertical
    } else {
        Branch::Horizontal
    }
}

/// Radial nodes of one ray: signed radii and intersection points.
#[derive(Debug, Clone)]
pub struct RadialNodeSet {
    pub branch: Branch,
    pub c: f64,
    pub radii: Vec<f64>,
    pub points: Vec<Vec2>,
}

/// Intersections of the ray through `z` at angle `theta` with the `n` grid
/// lines of spacing `h`.
pub fn radial_nodes(z: Vec2, theta: f64, h: f64, n: usize) -> RadialNodeSet {
    let b = branch(theta);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut radii = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n);
    for q in 0..n {
        let g = q as f64 * h;
        match b {
            Branch::Vertical => {
                let rho = (g - z[0]) / ct;
                radii.push(rho);
                points.push([g, z[1] + rho * st]);
            }
            Branch::Horizontal => {
                let rho = (g - z[1]) / st;
                radii.push(rho);
                points.push([z[0] + rho * ct, g]);
            }
        }
    }
    RadialNodeSet {
        branch: b,
        c: c_weight(theta),
        radii,
        points,
    }
}

/// Precomputed data of one quadrature angle.
#[derive(Debug, Clone, Copy)]
pub struct AngleData {
    pub theta: f64,
    pub cos_t: f64,
    pub sin_t: f64,
    pub branch: Branch,
    pub c: f64,
}

/// Angular layout of the polar rule for one chart.
#[derive(Debug, Clone)]
pub struct PolarRule {
    /// Grid order the rule is paired with.
    pub n: usize,
    /// Number of angles.
    pub theta_count: usize,
    /// Angular spacing `2 pi / theta_count`.
    pub k: f64,
    /// Scaling exponent used to choose the angle count.
    pub alpha: f64,
    pub angles: Vec<AngleData>,
}

impl PolarRule {
    /// `theta_count ~ theta_factor * n^(1 + alpha)`, rounded to an even
    /// number so opposite angles pair up.
    pub fn new(n: usize, alpha: f64, theta_factor: f64) -> Self {
        let raw = theta_factor * (n as f64).powf(1.0 + alpha);
        let mut theta_count = raw.round() as usize;
        if theta_count % 2 == 1 {
            theta_count += 1;
        }
        theta_count = theta_count.max(8);
        let k = 2.0 * PI / theta_count as f64;
        let angles = (0..theta_count)
            .map(|p| {
                let theta = p as f64 * k;
                AngleData {
                    theta,
                    cos_t: theta.cos(),
                    sin_t: theta.sin(),
                    branch: branch(theta),
                    c: c_weight(theta),
                }
            })
            .collect();
        PolarRule {
            n,
            theta_count,
            k,
            alpha,
            angles,
        }
    }
}

/// Grid data of one chart at a fixed order: active nodes with their surface
/// quantities.
#[derive(Debug, Clone)]
pub struct ChartDiscretization {
    pub chart_index: usize,
    pub n: usize,
    pub h: f64,
    pub active: Vec<[usize; 2]>,
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub jacobians: Vec<f64>,
    /// `omega^j` at the active nodes.
    pub pou: Vec<f64>,
    /// Lower bound for the chart metric, used to bound polar node windows.
    pub metric_min: f64,
    /// Upper bound for the chart metric (largest surface stretch of one
    /// parameter cell).
    pub metric_max: f64,
}

impl ChartDiscretization {
    pub fn build(atlas: &Atlas, j: usize, n: usize) -> Self {
        let grid = atlas.grid(j, n);
        let chart = atlas.chart(j);
        let mut points = Vec::with_capacity(grid.active.len());
        let mut normals = Vec::with_capacity(grid.active.len());
        let mut jacobians = Vec::with_capacity(grid.active.len());
        let mut pou = Vec::with_capacity(grid.active.len());
        for m in &grid.active {
            let u = [m[0] as f64 * grid.h, m[1] as f64 * grid.h];
            let sp = chart.eval_unchecked(u);
            points.push(sp.point);
            normals.push(sp.normal);
            jacobians.push(sp.jacobian);
            pou.push(atlas.pou_weight(j, sp.point));
        }
        // sampled lower bound of the smallest singular value of the chart
        // differential over the domain
        let mut metric_min = f64::INFINITY;
        let mut metric_max: f64 = 0.0;
        let samples = 40;
        for a in 0..=samples {
            for b in 0..=samples {
                let u = [
                    0.05 + 0.9 * a as f64 / samples as f64,
                    0.05 + 0.9 * b as f64 / samples as f64,
                ];
                let (t1, t2) = chart.partials(u);
                let g11 = crate::dot3(t1, t1);
                let g12 = crate::dot3(t1, t2);
                let g22 = crate::dot3(t2, t2);
                let tr = g11 + g22;
                let det = g11 * g22 - g12 * g12;
                let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
                metric_min = metric_min.min((0.5 * (tr - disc)).max(0.0).sqrt());
                metric_max = metric_max.max((0.5 * (tr + disc)).sqrt());
            }
        }
        ChartDiscretization {
            chart_index: j,
            n,
            h: grid.h,
            active: grid.active,
            points,
            normals,
            jacobians,
            pou,
            metric_min,
            metric_max,
        }
    }
}

/// Trapezoidal application of the regular-kernel operator: for each target
/// surface point, `h^2 sum_m K_reg(r, x_m) a_m omega_m phi_m`.
///
/// `phi` holds the density values at the active nodes of `src`.
pub fn apply_regular_core(
    split: &KernelSplit,
    src: &ChartDiscretization,
    phi: &[C64],
    targets: &[Vec3],
) -> Vec<C64> {
    assert_eq!(phi.len(), src.active.len());
    let h2 = src.h * src.h;
    targets
        .par_iter()
        .map(|&r| {
            let mut acc = C64::new(0.0, 0.0);
            for m in 0..src.points.len() {
                let k = split.kernel_reg(r, src.points[m], src.normals[m]);
                acc += k * (src.jacobians[m] * src.pou[m]) * phi[m];
            }
            acc * h2
        })
        .collect()
}

/// Spec-shaped wrapper over [`apply_regular_core`] taking chart parameter
/// targets.
pub fn apply_regular(
    split: &KernelSplit,
    atlas: &Atlas,
    i: usize,
    j: usize,
    n: usize,
    phi: &[C64],
    targets: &[Vec2],
) -> Result<Vec<C64>> {
    let src = ChartDiscretization::build(atlas, j, n);
    let pts = targets
        .iter()
        .map(|&u| Ok(atlas.chart(i).eval(u)?.point))
        .collect::<Result<Vec<_>>>()?;
    Ok(apply_regular_core(split, &src, phi, &pts))
}

/// A target of the singular operator that passed the support-distance
/// classification, with its transition-map image precomputed.
#[derive(Debug, Clone, Copy)]
pub struct PolarTarget {
    pub r: Vec3,
    pub z: Vec2,
}

/// Density evaluation mode along radial node lines.
pub enum LineEval<'a> {
    /// Exact univariate trigonometric interpolation from line restrictions.
    Trig {
        vlines: &'a [Vec<C64>],
        hlines: &'a [Vec<C64>],
    },
    /// Piecewise Hermite interpolation of the line restrictions.
    Hermite {
        vlines: &'a [HermiteInterpolant],
        hlines: &'a [HermiteInterpolant],
    },
}

impl<'a> LineEval<'a> {
    #[inline]
    fn eval(&self, branch: Branch, q: usize, coord: f64) -> C64 {
        match (self, branch) {
            (LineEval::Trig { vlines, .. }, Branch::Vertical) => {
                eval_1d_fft_order(&vlines[q], coord.rem_euclid(1.0))
            }
            (LineEval::Trig { hlines, .. }, Branch::Horizontal) => {
                eval_1d_fft_order(&hlines[q], coord.rem_euclid(1.0))
            }
            (LineEval::Hermite { vlines, .. }, Branch::Vertical) => {
                vlines[q].eval(coord.rem_euclid(1.0)).unwrap()
            }
            (LineEval::Hermite { hlines, .. }, Branch::Horizontal) => {
                hlines[q].eval(coord.rem_euclid(1.0)).unwrap()
            }
        }
    }
}

/// Polar-rule application of the singular operator to pre-classified
/// targets: the double sum over angles and grid-line radii of
/// `c(theta) K_sing(r, node) |rho| xi(node)`, scaled by `h k / 2`.
///
/// Restricting the sweep to `include_branch` realizes the two partial
/// operators of the Hermite-accelerated variant; `None` sums both branches.
pub fn apply_singular_core(
    split: &KernelSplit,
    src_chart: &Chart,
    src: &ChartDiscretization,
    rule: &PolarRule,
    eval: &LineEval,
    targets: &[PolarTarget],
    include_branch: Option<Branch>,
) -> Vec<C64> {
    let n = src.n;
    let h = src.h;
    let delta = split.delta;
    let eps1 = split.cutoff.eps1;
    // radial window that certainly contains the kernel support
    let rho_cap = 1.05 * eps1 * delta / (0.98 * src.metric_min) + 2.0 * h;
    let scale = h * rule.k / 2.0;
    targets
        .par_iter()
        .map(|t| {
            let mut acc = C64::new(0.0, 0.0);
            for ang in &rule.angles {
                if let Some(b) = include_branch {
                    if ang.branch != b {
                        continue;
                    }
                }
                let (zb, dir) = match ang.branch {
                    Branch::Vertical => (t.z[0], ang.cos_t),
                    Branch::Horizontal => (t.z[1], ang.sin_t),
                };
                // only grid lines within the radial window can contribute
                let w = rho_cap * dir.abs();
                let q_lo = ((zb - w) / h).ceil().max(0.0) as usize;
                let q_hi = (((zb + w) / h).floor() as usize).min(n - 1);
                let mut ray = C64::new(0.0, 0.0);
                for q in q_lo..=q_hi {
                    let g = q as f64 * h;
                    let rho = (g - zb) / dir;
                    if rho == 0.0 {
                        // The weighted kernel |rho| K1 extends smoothly
                        // through the singular point; the node carries its
                        // limit value.
                        let profile =
                            weighted_kernel_limit(split, src_chart, t.r, t.z, ang, h);
                        let xi = eval.eval(
                            ang.branch,
                            q,
                            match ang.branch {
                                Branch::Vertical => t.z[1],
                                Branch::Horizontal => t.z[0],
                            },
                        );
                        ray += profile * xi;
                        continue;
                    }
                    let v = match ang.branch {
                        Branch::Vertical => [g, t.z[1] + rho * ang.sin_t],
                        Branch::Horizontal => [t.z[0] + rho * ang.cos_t, g],
                    };
                    if !src_chart.contains(v) {
                        continue;
                    }
                    let sp = src_chart.eval_unchecked(v);
                    let s = norm3(sub3(t.r, sp.point));
                    let eta = split.cutoff.eta_dist(s, delta);
                    if eta == 0.0 {
                        continue;
                    }
                    let k1 = kernel_k1(t.r, sp.point, sp.normal, split.params)
                        .expect("eta > 0 implies separated points");
                    let xi = eval.eval(
                        ang.branch,
                        q,
                        match ang.branch {
                            Branch::Vertical => v[1],
                            Branch::Horizontal => v[0],
                        },
                    );
                    ray += (eta * rho.abs() * sp.jacobian) * k1 * xi;
                }
                acc += ang.c * ray;
            }
            acc * scale
        })
        .collect()
}

/// Limit of `eta |rho| K1(r, r^j(z + rho e)) a^j` as `rho -> 0`, by a
/// symmetric average just off the singular point (even in `rho` up to
/// `O(rho^2)` errors).
pub fn weighted_kernel_limit(
    split: &KernelSplit,
    src_chart: &Chart,
    r: Vec3,
    z: Vec2,
    ang: &AngleData,
    h: f64,
) -> C64 {
    let eps = 1e-2 * h;
    let mut acc = C64::new(0.0, 0.0);
    let mut hits = 0.0;
    for sgn in [1.0, -1.0] {
        let v = [z[0] + sgn * eps * ang.cos_t, z[1] + sgn * eps * ang.sin_t];
        if !src_chart.contains(v) {
            continue;
        }
        let sp = src_chart.eval_unchecked(v);
        let s = norm3(sub3(r, sp.point));
        if s == 0.0 {
            continue;
        }
        let eta = split.cutoff.eta_dist(s, split.delta);
        let k1 = kernel_k1(r, sp.point, sp.normal, split.params).expect("s > 0");
        acc += (eta * eps * sp.jacobian) * k1;
        hits += 1.0;
    }
    if hits == 0.0 {
        C64::new(0.0, 0.0)
    } else {
        acc / hits
    }
}

/// Is the target surface point inside the region where the singular
/// operator of source chart `j` can be nonzero?
#[inline]
pub fn singular_target_active(atlas: &Atlas, j: usize, r: Vec3, delta: f64) -> bool {
    atlas.dist_to_support(j, r) <= atlas.options.eps1 * delta
}

/// Spec-shaped singular application: classifies the parameter targets of
/// chart `i`, computes their transition images and runs the polar rule with
/// exact trigonometric line evaluation.
pub fn apply_singular(
    split: &KernelSplit,
    atlas: &Atlas,
    i: usize,
    j: usize,
    rule: &PolarRule,
    density: &TrigPoly,
    targets: &[Vec2],
) -> Result<Vec<C64>> {
    let src = ChartDiscretization::build(atlas, j, density.n);
    let vlines = density.all_line_restrictions(Axis::U1);
    let hlines = density.all_line_restrictions(Axis::U2);
    let eval = LineEval::Trig {
        vlines: &vlines,
        hlines: &hlines,
    };
    let mut out = vec![C64::new(0.0, 0.0); targets.len()];
    let mut polar = Vec::new();
    let mut slots = Vec::new();
    for (idx, &u) in targets.iter().enumerate() {
        let r = atlas.chart(i).eval(u)?.point;
        if !singular_target_active(atlas, j, r, split.delta) {
            continue;
        }
        let z = atlas.transition_map(i, j, u).map_err(|e| {
            Error::Numerical(format!("transition map failed for target {idx}: {e}"))
        })?;
        polar.push(PolarTarget { r, z });
        slots.push(idx);
    }
    let vals = apply_singular_core(split, atlas.chart(j), &src, rule, &eval, &polar, None);
    for (slot, v) in slots.into_iter().zip(vals) {
        out[slot] = v;
    }
    Ok(out)
}

/// Hermite line data for one source chart: periodic interpolants of the
/// density restricted to every grid line, on a mesh refined by `m`.
pub struct HermiteLines {
    pub m: usize,
    pub d: usize,
    pub vlines: Vec<HermiteInterpolant>,
    pub hlines: Vec<HermiteInterpolant>,
}

/// Build the per-line Hermite interpolants from spectral derivatives of the
/// density on the refined mesh.
pub fn build_hermite_lines(density: &TrigPoly, m: usize, d: usize) -> Result<HermiteLines> {
    if m < 1 || d < 1 {
        return Err(Error::Parameter(format!(
            "hermite refinement requires m >= 1 and d >= 1, got ({m}, {d})"
        )));
    }
    let n = density.n;
    let intervals = n * m;
    // derivative data along both line families, orders 0..=d
    let mut vdata: Vec<Vec<Vec<C64>>> = Vec::with_capacity(d + 1);
    let mut hdata: Vec<Vec<Vec<C64>>> = Vec::with_capacity(d + 1);
    for r in 0..=d {
        vdata.push(density.derivative_values_fine(Axis::U2, r as u32, m));
        hdata.push(density.derivative_values_fine(Axis::U1, r as u32, m));
    }
    let build = |data: &Vec<Vec<Vec<C64>>>| -> Result<Vec<HermiteInterpolant>> {
        (0..n)
            .map(|q| {
                let rows: Vec<Vec<C64>> = (0..=d).map(|r| data[r][q].clone()).collect();
                HermiteInterpolant::new_periodic(&rows, intervals, d)
            })
            .collect()
    };
    Ok(HermiteLines {
        m,
        d,
        vlines: build(&vdata)?,
        hlines: build(&hdata)?,
    })
}

/// Spec-shaped Hermite-variant singular application.
pub fn apply_singular_hermite(
    split: &KernelSplit,
    atlas: &Atlas,
    i: usize,
    j: usize,
    rule: &PolarRule,
    density: &TrigPoly,
    m: usize,
    d: usize,
    targets: &[Vec2],
) -> Result<Vec<C64>> {
    let src = ChartDiscretization::build(atlas, j, density.n);
    let lines = build_hermite_lines(density, m, d)?;
    let eval = LineEval::Hermite {
        vlines: &lines.vlines,
        hlines: &lines.hlines,
    };
    let mut out = vec![C64::new(0.0, 0.0); targets.len()];
    let mut polar = Vec::new();
    let mut slots = Vec::new();
    for (idx, &u) in targets.iter().enumerate() {
        let r = atlas.chart(i).eval(u)?.point;
        if !singular_target_active(atlas, j, r, split.delta) {
            continue;
        }
        let z = atlas.transition_map(i, j, u).map_err(|e| {
            Error::Numerical(format!("transition map failed for target {idx}: {e}"))
        })?;
        polar.push(PolarTarget { r, z });
        slots.push(idx);
    }
    let vals = apply_singular_core(split, atlas.chart(j), &src, rule, &eval, &polar, None);
    for (slot, v) in slots.into_iter().zip(vals) {
        out[slot] = v;
    }
    Ok(out)
}

/// Standalone polar quadrature rule: trapezoid in the angle, shifted
/// trapezoid along each ray, with the radial sum truncated to the support of
/// the cut-off factor.
///
/// Approximates the plane integral of `psi(rho, theta) = chi(rho, theta) *
/// xi(rho e(theta))` over `rho in R`, `theta in (0, 2 pi)`.
pub fn quad_qhkg(
    chi: &dyn Fn(f64, f64) -> f64,
    xi: &TrigPoly,
    gamma: &dyn Fn(f64) -> f64,
    n: usize,
    theta_count: usize,
    rho_support: f64,
) -> C64 {
    let h = 1.0 / n as f64;
    let k = 2.0 * PI / theta_count as f64;
    let mut total = C64::new(0.0, 0.0);
    for p in 0..theta_count {
        let theta = p as f64 * k;
        let c = c_weight(theta);
        let g = gamma(theta);
        let spacing = c * h;
        let q_lo = ((-rho_support - g) / spacing).ceil() as i64;
        let q_hi = ((rho_support - g) / spacing).floor() as i64;
        let mut ray = C64::new(0.0, 0.0);
        for q in q_lo..=q_hi {
            let rho = g + q as f64 * spacing;
            let w = chi(rho, theta);
            if w == 0.0 {
                continue;
            }
            let point = [rho * theta.cos(), rho * theta.sin()];
            ray += w * xi.eval(point);
        }
        total += (c * h) * ray;
    }
    total * k
}
