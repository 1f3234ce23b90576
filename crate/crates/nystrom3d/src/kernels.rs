//! Combined-field kernel of the scattering integral equation and its
//! smooth/weakly-singular splittings.
//!
//! The kernel `K = d Phi/d nu' - i eta Phi` is split algebraically as
//! `K = K0 + K1`, where `K0` extends smoothly to the diagonal and `K1`
//! carries a `1/|r - r'|` singularity. A floating cut-off `eta_delta` then
//! produces the operative splitting `K = K_reg + K_sing` with
//! `K_reg = K0 + (1 - eta_delta) K1` smooth and `K_sing = eta_delta K1`
//! supported near the diagonal. In polar coordinates around the singular
//! point the weighted kernel `|rho| K1` is smooth, which is what the polar
//! quadrature rule integrates.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{Atlas, CutoffFamily};
use crate::{dot3, norm3, sub3, Vec2, Vec3, C64};

/// Wavenumber and coupling parameter of the combined-field equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatteringParams {
    pub kappa: f64,
    pub eta: f64,
}

impl ScatteringParams {
    /// `eta` defaults to `max(1, kappa)` when not given.
    pub fn new(kappa: f64, eta: Option<f64>) -> Result<Self> {
        if kappa <= 0.0 {
            return Err(Error::Parameter(format!("kappa must be positive: {kappa}")));
        }
        let eta = eta.unwrap_or_else(|| kappa.max(1.0));
        if eta <= 0.0 {
            return Err(Error::Parameter(format!("eta must be positive: {eta}")));
        }
        Ok(ScatteringParams { kappa, eta })
    }
}

/// `sin(x)/x`, series below the switch point.
#[inline]
fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 * (1.0 - x2 / 20.0 * (1.0 - x2 / 42.0))
    } else {
        x.sin() / x
    }
}

/// `(cos x - sinc x) / x^2`, analytic with value `-1/3` at zero.
#[inline]
fn cos_minus_sinc_over_x2(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        // sum_{k>=1} (-1)^k x^{2k-2} 2k / (2k+1)!
        let x2 = x * x;
        -1.0 / 3.0 + x2 / 30.0 - x2 * x2 / 840.0
    } else {
        (x.cos() - sinc(x)) / (x * x)
    }
}

/// Helmholtz fundamental solution `exp(i kappa |r - r'|) / (4 pi |r - r'|)`.
pub fn phi_kappa(r: Vec3, rp: Vec3, kappa: f64) -> Result<C64> {
    let s = norm3(sub3(r, rp));
    if s == 0.0 {
        return Err(Error::Singularity);
    }
    Ok(C64::from_polar(1.0, kappa * s) / (4.0 * PI * s))
}

/// Combined kernel `d Phi/d nu(r') - i eta Phi(r, r')`, evaluated directly
/// from the gradient of the fundamental solution.
pub fn kernel_k(r: Vec3, rp: Vec3, nu_p: Vec3, params: ScatteringParams) -> Result<C64> {
    let diff = sub3(rp, r);
    let s = norm3(diff);
    if s == 0.0 {
        return Err(Error::Singularity);
    }
    let dot = dot3(diff, nu_p); // (r' - r) . nu(r')
    let ks = params.kappa * s;
    let phase = C64::from_polar(1.0, ks);
    let dl = phase * C64::new(-1.0, ks) * dot / (4.0 * PI * s * s * s);
    let sl = phase / (4.0 * PI * s);
    Ok(dl - C64::new(0.0, params.eta) * sl)
}

/// Smooth part `K0` of the kernel split; extends analytically to the
/// diagonal with value `eta kappa / (4 pi)`.
pub fn kernel_k0(r: Vec3, rp: Vec3, nu_p: Vec3, params: ScatteringParams) -> C64 {
    let diff = sub3(rp, r);
    let s = norm3(diff);
    let dot = dot3(diff, nu_p);
    let k = params.kappa;
    let re = params.eta * k * sinc(k * s) / (4.0 * PI);
    let im = k * k * k * cos_minus_sinc_over_x2(k * s) * dot / (4.0 * PI);
    C64::new(re, im)
}

/// Weakly singular part `K1` of the kernel split, `O(1/|r - r'|)` at the
/// diagonal.
pub fn kernel_k1(r: Vec3, rp: Vec3, nu_p: Vec3, params: ScatteringParams) -> Result<C64> {
    let diff = sub3(rp, r);
    let s = norm3(diff);
    if s == 0.0 {
        return Err(Error::Singularity);
    }
    let dot = dot3(diff, nu_p);
    let ks = params.kappa * s;
    let eta_term = C64::new(0.0, -params.eta * ks.cos() / (4.0 * PI * s));
    let dot_term = -(ks * ks.sin() + ks.cos()) * dot / (4.0 * PI * s * s * s);
    Ok(eta_term + dot_term)
}

/// Kernel splitting at a fixed cut-off radius.
#[derive(Debug, Clone, Copy)]
pub struct KernelSplit {
    pub params: ScatteringParams,
    pub cutoff: CutoffFamily,
    pub delta: f64,
}

impl KernelSplit {
    pub fn new(params: ScatteringParams, cutoff: CutoffFamily, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta <= cutoff.delta0 * (1.0 + 1e-12)) {
            return Err(Error::Parameter(format!(
                "delta = {delta} outside (0, {}]",
                cutoff.delta0
            )));
        }
        Ok(KernelSplit {
            params,
            cutoff,
            delta,
        })
    }

    /// Regular part `K0 + (1 - eta_delta) K1`; smooth up to the diagonal.
    pub fn kernel_reg(&self, r: Vec3, rp: Vec3, nu_p: Vec3) -> C64 {
        let s = norm3(sub3(r, rp));
        let eta = self.cutoff.eta_dist(s, self.delta);
        let k0 = kernel_k0(r, rp, nu_p, self.params);
        if eta == 1.0 {
            k0
        } else {
            k0 + (1.0 - eta) * kernel_k1(r, rp, nu_p, self.params).expect("s > 0 when eta < 1")
        }
    }

    /// Singular part `eta_delta K1`; zero outside the cut-off ball.
    pub fn kernel_sing(&self, r: Vec3, rp: Vec3, nu_p: Vec3) -> Result<C64> {
        let s = norm3(sub3(r, rp));
        let eta = self.cutoff.eta_dist(s, self.delta);
        if eta == 0.0 {
            return Ok(C64::new(0.0, 0.0));
        }
        Ok(eta * kernel_k1(r, rp, nu_p, self.params)?)
    }
}

/// Smooth polar integrand of the singular operator:
/// `1/2 omega^i(r^i(u)) |rho| K^{ij}_sing(u, z + rho e(theta)) omega~^j_delta`
/// with `z = r^{ji}(u)` and the Jacobian `a^j` included in `K^{ij}`.
///
/// Returns 0 when the polar point leaves the chart domain or the support of
/// the integrand.
pub fn polar_sing_eval(
    split: &KernelSplit,
    atlas: &Atlas,
    i: usize,
    j: usize,
    u: Vec2,
    rho: f64,
    theta: f64,
) -> Result<C64> {
    let spi = atlas.chart(i).eval(u)?;
    let reach = atlas.dist_to_support(j, spi.point);
    if reach > 4.0 * atlas.options.eps1 * atlas.delta0 {
        return Err(Error::Domain(format!(
            "target is {reach:.3e} from the chart-{j} support, beyond the polar region"
        )));
    }
    let z = atlas.transition_map(i, j, u)?;
    let theta = theta.rem_euclid(2.0 * PI);
    if rho == 0.0 {
        // smooth limit of the weighted kernel through the singular point
        let eps = 1e-5;
        let a = polar_sing_eval(split, atlas, i, j, u, eps, theta)?;
        let b = polar_sing_eval(split, atlas, i, j, u, -eps, theta)?;
        return Ok(0.5 * (a + b));
    }
    let v = [z[0] + rho * theta.cos(), z[1] + rho * theta.sin()];
    if !atlas.chart(j).contains(v) {
        return Ok(C64::new(0.0, 0.0));
    }
    let spv = atlas.chart(j).eval_unchecked(v);
    let sing = split.kernel_sing(spi.point, spv.point, spv.normal)?;
    if sing == C64::new(0.0, 0.0) {
        return Ok(sing);
    }
    let w_i = atlas.pou_weight(i, spi.point);
    let wt = atlas.omega_tilde(j, v, split.delta);
    Ok(0.5 * w_i * rho.abs() * sing * spv.jacobian * wt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_sphere_atlas;
    use crate::{add3, normalize3, scale3};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn params() -> ScatteringParams {
        ScatteringParams::new(1.0, None).unwrap()
    }

    fn random_surface_pair(rng: &mut impl Rng, atlas: &Atlas) -> (Vec3, Vec3, Vec3) {
        loop {
            let i = rng.gen_range(0..6);
            let j = rng.gen_range(0..6);
            let u = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
            let v = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
            let a = atlas.chart(i).eval_unchecked(u);
            let b = atlas.chart(j).eval_unchecked(v);
            if norm3(sub3(a.point, b.point)) > 1e-6 {
                return (a.point, b.point, b.normal);
            }
        }
    }

    #[test]
    fn phi_examples() {
        // |r - r'| = 1, kappa = 2 pi: phase is exp(2 pi i) = 1
        let v = phi_kappa([0.0; 3], [1.0, 0.0, 0.0], 2.0 * PI).unwrap();
        assert!((v - C64::new(1.0 / (4.0 * PI), 0.0)).norm() < 1e-15);
        assert!((v.re - 0.079577471546).abs() < 1e-12);
        // unimodular phase: modulus 1/(4 pi |r - r'|) for any kappa
        for kappa in [0.3, 1.0, 5.7] {
            let v = phi_kappa([0.0; 3], [0.0, 1.0, 0.0], kappa).unwrap();
            assert!((v.norm() - 1.0 / (4.0 * PI)).abs() < 1e-15);
        }
        // independent evaluation at s = 1/2, kappa = 1 via the reduced
        // closed form exp(0.5 i) / (2 pi)
        let v = phi_kappa([0.0; 3], [0.0, 0.0, 0.5], 1.0).unwrap();
        let expect = C64::new(
            0.5f64.cos() / (2.0 * PI),
            0.5f64.sin() / (2.0 * PI),
        );
        assert!((v - expect).norm() < 1e-15, "{v}");
        // coincident points
        assert!(phi_kappa([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 1.0).is_err());
    }

    #[test]
    fn split_identity_k0_plus_k1() {
        let atlas = build_sphere_atlas(0.3).unwrap();
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let (r, rp, nu) = random_surface_pair(&mut rng, &atlas);
            let k = kernel_k(r, rp, nu, p).unwrap();
            let k01 = kernel_k0(r, rp, nu, p) + kernel_k1(r, rp, nu, p).unwrap();
            assert!(
                (k - k01).norm() <= 1e-13 * k.norm().max(1.0),
                "split identity broken: {k} vs {k01}"
            );
        }
    }

    #[test]
    fn perpendicular_difference_reduces_to_single_layer() {
        // (r - r') orthogonal to nu': the double-layer part vanishes and
        // K = -i eta Phi
        let p = params();
        let rp = [1.0, 0.0, 0.0];
        let nu = [1.0, 0.0, 0.0];
        let r = [1.0, 0.4, -0.2]; // difference (0, 0.4, -0.2) is tangent
        let k = kernel_k(r, rp, nu, p).unwrap();
        let expect = -C64::new(0.0, p.eta) * phi_kappa(r, rp, p.kappa).unwrap();
        assert!((k - expect).norm() < 1e-14 * expect.norm());
    }

    #[test]
    fn normal_derivative_matches_finite_differences() {
        // directional derivative of Phi in the second argument along nu'
        let p = params();
        let atlas = build_sphere_atlas(0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let (r, rp, nu) = random_surface_pair(&mut rng, &atlas);
            let h = 1e-6;
            let fd = (phi_kappa(r, add3(rp, scale3(nu, h)), p.kappa).unwrap()
                - phi_kappa(r, sub3(rp, scale3(nu, h)), p.kappa).unwrap())
                / (2.0 * h);
            let dl = kernel_k(r, rp, nu, p).unwrap()
                + C64::new(0.0, p.eta) * phi_kappa(r, rp, p.kappa).unwrap();
            assert!(
                (fd - dl).norm() < 1e-6 * dl.norm().max(1.0),
                "fd {fd} vs dl {dl}"
            );
        }
    }

    #[test]
    fn k0_diagonal_limit_by_extrapolation() {
        let p = ScatteringParams::new(1.7, Some(2.3)).unwrap();
        let atlas = build_sphere_atlas(0.3).unwrap();
        let chart = atlas.chart(2);
        let u = [0.47, 0.55];
        let sp = chart.eval_unchecked(u);
        let (t1, _) = chart.partials(u);
        let dir = normalize3(t1);
        let diag = p.eta * p.kappa / (4.0 * PI);
        let mut values = Vec::new();
        for k in 1..=6 {
            let s = 1e-2 / 2f64.powi(k);
            // approach along the surface to keep nu' honest
            let target = normalize3(add3(sp.point, scale3(dir, s)));
            let vp = chart
                .inverse_newton(target, 1e-12)
                .map(|w| chart.eval_unchecked(w));
            let vp = match vp {
                Ok(x) => x,
                Err(_) => continue,
            };
            values.push(kernel_k0(sp.point, vp.point, vp.normal, p));
        }
        // values converge to the diagonal limit, differences shrink
        let last = *values.last().unwrap();
        assert!((last - C64::new(diag, 0.0)).norm() < 1e-4);
        for w in values.windows(2) {
            assert!((w[1] - C64::new(diag, 0.0)).norm() <= (w[0] - C64::new(diag, 0.0)).norm());
        }
        // exact diagonal evaluation
        let at_diag = kernel_k0(sp.point, sp.point, sp.normal, p);
        assert!((at_diag - C64::new(diag, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn k1_is_weakly_singular() {
        let p = params();
        let atlas = build_sphere_atlas(0.3).unwrap();
        let chart = atlas.chart(0);
        let u = [0.52, 0.41];
        let sp = chart.eval_unchecked(u);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..10 {
            let ang = rng.gen_range(0.0..2.0 * PI);
            let (t1, t2) = chart.partials(u);
            let dir = normalize3(add3(scale3(t1, ang.cos()), scale3(t2, ang.sin())));
            for k in 2..=6 {
                let s = 10f64.powi(-k);
                let q = normalize3(add3(sp.point, scale3(dir, s)));
                let d = norm3(sub3(q, sp.point));
                let k1 = kernel_k1(sp.point, q, q, p).unwrap();
                assert!(
                    d * k1.norm() < 1.0,
                    "|s K1| = {} not bounded at s = {d}",
                    d * k1.norm()
                );
            }
        }
        assert!(kernel_k1(sp.point, sp.point, sp.normal, p).is_err());
    }

    #[test]
    fn eta_linearity_of_kernel() {
        let atlas = build_sphere_atlas(0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (r, rp, nu) = random_surface_pair(&mut rng, &atlas);
        let p1 = ScatteringParams::new(1.3, Some(0.9)).unwrap();
        let p2 = ScatteringParams::new(1.3, Some(1.8)).unwrap();
        let k1 = kernel_k(r, rp, nu, p1).unwrap();
        let k2 = kernel_k(r, rp, nu, p2).unwrap();
        let phi = phi_kappa(r, rp, 1.3).unwrap();
        let diff = k2 - k1;
        let expect = -C64::new(0.0, 0.9) * phi;
        assert!((diff - expect).norm() < 1e-15);
    }

    #[test]
    fn reg_sing_split_regions_and_identity() {
        let atlas = build_sphere_atlas(0.3).unwrap();
        let p = params();
        let cutoff = atlas.cutoff();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for factor in [1.0, 0.5, 0.25] {
            let delta = atlas.delta0 * factor;
            let split = KernelSplit::new(p, cutoff, delta).unwrap();
            for _ in 0..400 {
                let (r, rp, nu) = random_surface_pair(&mut rng, &atlas);
                let s = norm3(sub3(r, rp));
                let reg = split.kernel_reg(r, rp, nu);
                let sing = split.kernel_sing(r, rp, nu).unwrap();
                let k = kernel_k(r, rp, nu, p).unwrap();
                assert!(
                    (reg + sing - k).norm() <= 1e-13 * k.norm().max(1.0),
                    "delta split identity broken at s = {s}"
                );
                if s >= cutoff.eps1 * delta {
                    assert_eq!(sing, C64::new(0.0, 0.0));
                }
                if s <= cutoff.eps0 * delta {
                    let k0 = kernel_k0(r, rp, nu, p);
                    assert_eq!(reg, k0);
                }
            }
        }
    }

    #[test]
    fn polar_supported_and_periodic() {
        let atlas = build_sphere_atlas(0.3).unwrap();
        let p = params();
        let delta = atlas.delta0 * 0.8;
        let split = KernelSplit::new(p, atlas.cutoff(), delta).unwrap();
        let u = [0.5, 0.48];
        // far radius: outside the kernel support
        let far = polar_sing_eval(&split, &atlas, 0, 0, u, 0.9 * delta * 4.0, 0.7).unwrap();
        assert_eq!(far, C64::new(0.0, 0.0));
        // exact periodicity in theta
        let a = polar_sing_eval(&split, &atlas, 0, 0, u, 0.01, 1.234).unwrap();
        let b = polar_sing_eval(&split, &atlas, 0, 0, u, 0.01, 1.234 + 2.0 * PI).unwrap();
        assert_eq!(a, b);
        // small-rho limit: Cauchy differences shrink until they reach the
        // floating-point floor of the near-diagonal kernel cancellation
        // (the normal-projection factor is O(rho^2) against an absolute
        // eps-level subtraction noise)
        let mut prev: Option<C64> = None;
        let mut diffs = Vec::new();
        for k in 3..=7 {
            let v = polar_sing_eval(&split, &atlas, 0, 0, u, 10f64.powi(-k), 0.9).unwrap();
            if let Some(p) = prev {
                diffs.push((v - p).norm());
            }
            prev = Some(v);
        }
        for w in diffs.windows(2) {
            assert!(w[1] <= w[0] * 0.75 + 5e-4, "diffs {diffs:?}");
        }
        assert!(diffs.last().unwrap() < &1e-3, "diffs {diffs:?}");
    }

    #[test]
    fn polar_bounded_as_delta_shrinks() {
        let atlas = build_sphere_atlas(0.3).unwrap();
        let p = params();
        let u = [0.5, 0.5];
        let mut sups = Vec::new();
        let mut slopes = Vec::new();
        for factor in [1.0, 0.5, 0.25] {
            let delta = atlas.delta0 * factor;
            let split = KernelSplit::new(p, atlas.cutoff(), delta).unwrap();
            let mut sup: f64 = 0.0;
            let mut slope: f64 = 0.0;
            let drho = 1e-6;
            for it in 0..40 {
                let theta = it as f64 * 0.157;
                for jr in 1..=30 {
                    let rho = jr as f64 / 30.0 * delta;
                    let v = polar_sing_eval(&split, &atlas, 0, 0, u, rho, theta).unwrap();
                    sup = sup.max(v.norm());
                    let v2 =
                        polar_sing_eval(&split, &atlas, 0, 0, u, rho + drho, theta).unwrap();
                    slope = slope.max((v2 - v).norm() / drho);
                }
            }
            sups.push(sup);
            slopes.push(slope);
        }
        // sup stays bounded while the radial derivative grows like 1/delta
        assert!(sups[2] <= 2.0 * sups[0] + 1e-12, "sups {sups:?}");
        let growth = slopes[2] / slopes[0];
        assert!(
            growth < 4.0 * 2.5 && growth > 1.2,
            "derivative growth {growth} inconsistent with 1/delta scaling"
        );
    }

    #[test]
    fn polar_outside_region_is_domain_error() {
        let atlas = build_sphere_atlas(0.3).unwrap();
        let p = params();
        let split = KernelSplit::new(p, atlas.cutoff(), atlas.delta0 * 0.5).unwrap();
        // center of chart 0 is nowhere near the support of chart 2
        let r = polar_sing_eval(&split, &atlas, 0, 2, [0.5, 0.5], 0.01, 0.3);
        assert!(r.is_err());
    }
}
