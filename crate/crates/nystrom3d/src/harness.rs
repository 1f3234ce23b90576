//! Experiment driver: configuration, convergence sweeps, quadrature-rate
//! studies, Hermite-variant comparisons, report emission and the CLI.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_ellipsoid_atlas, build_sphere_atlas, Atlas};
use crate::kernels::ScatteringParams;
use crate::oracle::{adaptive_integral_polar, fit_order, MieSeries};
use crate::quadrature::{c_weight, quad_qhkg, PolarRule};
use crate::solver::{NystromContext, Rhs, SolveMethod, Variant};
use crate::trig::{freq_to_index, TrigPoly};
use crate::{normalize3, Vec3, C64};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Flat key/value experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub geometry: String,
    pub semiaxes: [f64; 3],
    pub overlap: f64,
    pub eps0: f64,
    pub eps1: f64,
    pub kappa: f64,
    pub eta: Option<f64>,
    pub incidence: Vec3,
    pub n_list: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub delta_coeff: f64,
    pub theta_factor: f64,
    pub variant: String,
    pub herm_d: usize,
    pub herm_m: Option<usize>,
    pub gmres_tol: f64,
    pub gmres_restart: usize,
    pub gmres_max_iter: usize,
    pub method: String,
    pub probe_radius: f64,
    pub probe_count: usize,
    pub seed: u64,
    pub timing: String,
    pub out_csv: Option<String>,
    pub out_json: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            geometry: "sphere".into(),
            semiaxes: [1.0, 1.0, 1.0],
            overlap: 0.3,
            eps0: 0.4,
            eps1: 0.8,
            kappa: 1.0,
            eta: None,
            incidence: [0.0, 0.0, 1.0],
            n_list: vec![16, 24, 32, 48],
            alpha: 0.5,
            beta: 1.0 / 3.0,
            delta_coeff: 2.0,
            theta_factor: 2.0,
            variant: "base".into(),
            herm_d: 2,
            herm_m: None,
            gmres_tol: 1e-12,
            gmres_restart: 50,
            gmres_max_iter: 600,
            method: "gmres".into(),
            probe_radius: 2.0,
            probe_count: 200,
            seed: 7,
            timing: "real".into(),
            out_csv: None,
            out_json: None,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got '{v}'")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected an integer, got '{v}'")))
}

impl ExperimentConfig {
    /// Parse a flat `key=value` file (with `#` comments).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = ExperimentConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", path.display(), lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "geometry" => self.geometry = value.to_string(),
            "semiaxes" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| parse_f64("semiaxes", p))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::Config("semiaxes: expected a,b,c".into()));
                }
                self.semiaxes = [parts[0], parts[1], parts[2]];
            }
            "overlap" => self.overlap = parse_f64(key, value)?,
            "eps0" => self.eps0 = parse_f64(key, value)?,
            "eps1" => self.eps1 = parse_f64(key, value)?,
            "kappa" => self.kappa = parse_f64(key, value)?,
            "eta" => self.eta = Some(parse_f64(key, value)?),
            "incidence" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| parse_f64("incidence", p))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::Config("incidence: expected x,y,z".into()));
                }
                self.incidence = normalize3([parts[0], parts[1], parts[2]]);
            }
            "n_list" => {
                self.n_list = value
                    .split(',')
                    .map(|p| parse_usize("n_list", p))
                    .collect::<Result<_>>()?;
            }
            "alpha" => self.alpha = parse_f64(key, value)?,
            "beta" => self.beta = parse_f64(key, value)?,
            "delta_coeff" => self.delta_coeff = parse_f64(key, value)?,
            "theta_factor" => self.theta_factor = parse_f64(key, value)?,
            "variant" => self.variant = value.to_string(),
            "herm_d" => self.herm_d = parse_usize(key, value)?,
            "herm_m" => {
                self.herm_m = if value == "auto" {
                    None
                } else {
                    Some(parse_usize(key, value)?)
                }
            }
            "gmres_tol" => self.gmres_tol = parse_f64(key, value)?,
            "gmres_restart" => self.gmres_restart = parse_usize(key, value)?,
            "gmres_max_iter" => self.gmres_max_iter = parse_usize(key, value)?,
            "method" => self.method = value.to_string(),
            "probe_radius" => self.probe_radius = parse_f64(key, value)?,
            "probe_count" => self.probe_count = parse_usize(key, value)?,
            "seed" => self.seed = value.parse().map_err(|_| {
                Error::Config(format!("seed: expected an integer, got '{value}'"))
            })?,
            "timing" => self.timing = value.to_string(),
            "out_csv" => self.out_csv = Some(value.to_string()),
            "out_json" => self.out_json = Some(value.to_string()),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!(
                "beta must lie in (0, 1), got {}",
                self.beta
            )));
        }
        if self.n_list.is_empty() || self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "n_list must be nonempty and strictly increasing".into(),
            ));
        }
        if self.n_list.iter().any(|&n| n < 4) {
            return Err(Error::Config("grid orders must be at least 4".into()));
        }
        match self.geometry.as_str() {
            "sphere" | "ellipsoid" => {}
            g => return Err(Error::Config(format!("unknown geometry '{g}'"))),
        }
        match self.variant.as_str() {
            "base" | "hermite" => {}
            v => return Err(Error::Config(format!("unknown variant '{v}'"))),
        }
        match self.method.as_str() {
            "gmres" | "dense" => {}
            m => return Err(Error::Config(format!("unknown method '{m}'"))),
        }
        match self.timing.as_str() {
            "real" | "zero" => {}
            t => return Err(Error::Config(format!("unknown timing mode '{t}'"))),
        }
        if self.kappa <= 0.0 {
            return Err(Error::Config("kappa must be positive".into()));
        }
        Ok(())
    }

    pub fn build_atlas(&self) -> Result<Atlas> {
        let mut atlas = match self.geometry.as_str() {
            "sphere" => build_sphere_atlas(self.overlap)?,
            "ellipsoid" => build_ellipsoid_atlas(self.semiaxes, self.overlap)?,
            g => return Err(Error::Config(format!("unknown geometry '{g}'"))),
        };
        if (self.eps0, self.eps1) != (atlas.options.eps0, atlas.options.eps1) {
            atlas = Atlas::build(
                atlas.geometry,
                crate::geometry::AtlasOptions {
                    overlap: self.overlap,
                    eps0: self.eps0,
                    eps1: self.eps1,
                },
            )?;
        }
        Ok(atlas)
    }

    pub fn params(&self) -> Result<ScatteringParams> {
        ScatteringParams::new(self.kappa, self.eta)
    }

    /// Cut-off schedule `delta = min(delta0, C h^beta)`.
    pub fn delta_for(&self, atlas: &Atlas, n: usize) -> f64 {
        let h = 1.0 / n as f64;
        atlas.delta0.min(self.delta_coeff * h.powf(self.beta))
    }

    pub fn variant_for(&self, n: usize) -> Variant {
        match self.variant.as_str() {
            "hermite" => Variant::Hermite {
                m: self.herm_m.unwrap_or_else(|| hermite_m_rule(n, self.beta, self.herm_d)),
                d: self.herm_d,
            },
            _ => Variant::Base,
        }
    }

    pub fn solve_method(&self) -> SolveMethod {
        match self.method.as_str() {
            "dense" => SolveMethod::Dense,
            _ => SolveMethod::Gmres {
                tol: self.gmres_tol,
                restart: self.gmres_restart,
                max_iter: self.gmres_max_iter,
            },
        }
    }
}

/// Smallest refinement with `m^{-(2d+2)} <= h^{1 - beta + 1}`.
pub fn hermite_m_rule(n: usize, beta: f64, d: usize) -> usize {
    let h = 1.0 / n as f64;
    let target = (2.0 - beta) / (2.0 * d as f64 + 2.0);
    (h.powf(-target)).ceil() as usize
}

/// Quasi-uniform points on a sphere of the given radius (Fibonacci lattice).
pub fn probe_points(radius: f64, count: usize) -> Vec<Vec3> {
    (0..count)
        .map(|k| {
            let t = (2.0 * k as f64 + 1.0) / (2.0 * count as f64);
            let z = 1.0 - 2.0 * t;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let phi = 2.0 * PI * (k as f64 * 0.618_033_988_749_894_9).fract();
            [radius * rho * phi.cos(), radius * rho * phi.sin(), radius * z]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub h: f64,
    pub delta: f64,
    pub theta: usize,
    pub unknowns: usize,
    pub e_l2: f64,
    pub e_linf: f64,
    pub order_l2: Option<f64>,
    pub order_linf: Option<f64>,
    pub iters: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvergenceReport {
    pub config: ExperimentConfig,
    pub rows: Vec<ConvergenceRow>,
    /// Surface-density self-convergence error of each grid against the
    /// finest one (absent for the finest row).
    pub density_self_error: Vec<Option<f64>>,
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl ConvergenceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "N,h,delta,Theta,unknowns,e_l2,e_linf,order_l2,order_linf,iters,seconds\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.n,
                fmt_f64(r.h),
                fmt_f64(r.delta),
                r.theta,
                r.unknowns,
                fmt_f64(r.e_l2),
                fmt_f64(r.e_linf),
                r.order_l2.map(fmt_f64).unwrap_or_default(),
                r.order_linf.map(fmt_f64).unwrap_or_default(),
                r.iters,
                fmt_f64(r.seconds),
            );
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QuadRow {
    pub case: String,
    pub n: usize,
    pub h: f64,
    pub delta: f64,
    pub theta: usize,
    pub error: f64,
    /// `error / (h/delta |log h| + delta)`, tracking the L2 bound.
    pub bound_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QuadReport {
    pub config: ExperimentConfig,
    pub rows: Vec<QuadRow>,
    /// Fitted order per case over the sweep.
    pub fitted_orders: Vec<(String, f64)>,
}

impl QuadReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case,N,h,delta,Theta,error,bound_ratio\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.case,
                r.n,
                fmt_f64(r.h),
                fmt_f64(r.delta),
                r.theta,
                fmt_f64(r.error),
                fmt_f64(r.bound_ratio),
            );
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HermiteRow {
    pub n: usize,
    pub h: f64,
    pub m: usize,
    pub d: usize,
    pub gap: f64,
    pub base_error: f64,
    pub hermite_error: f64,
    pub gap_exceeds_base: bool,
    pub base_iters: usize,
    pub hermite_iters: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HermiteReport {
    pub config: ExperimentConfig,
    pub rows: Vec<HermiteRow>,
}

impl HermiteReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("N,h,m,d,gap,base_error,hermite_error,gap_exceeds_base,base_iters,hermite_iters,seconds\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.n,
                fmt_f64(r.h),
                r.m,
                r.d,
                fmt_f64(r.gap),
                fmt_f64(r.base_error),
                fmt_f64(r.hermite_error),
                r.gap_exceeds_base,
                r.base_iters,
                r.hermite_iters,
                fmt_f64(r.seconds),
            );
        }
        out
    }
}

fn write_outputs(csv: &str, json: &str, cfg: &ExperimentConfig) -> Result<()> {
    if let Some(path) = &cfg.out_csv {
        std::fs::write(path, csv)?;
    }
    if let Some(path) = &cfg.out_json {
        std::fs::write(path, json)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

/// Relative field errors at the probe sphere against the Mie reference.
pub fn field_errors(
    ctx: &NystromContext,
    solution: &crate::solver::NystromSolution,
    mie: &MieSeries,
    probes: &[Vec3],
) -> Result<(f64, f64)> {
    let mut num2 = 0.0;
    let mut den2 = 0.0;
    let mut num_inf: f64 = 0.0;
    let mut den_inf: f64 = 0.0;
    for &x in probes {
        let approx = ctx.evaluate_potential(solution, x)?;
        let exact = mie.scattered_field(x)?;
        num2 += (approx - exact).norm_sqr();
        den2 += exact.norm_sqr();
        num_inf = num_inf.max((approx - exact).norm());
        den_inf = den_inf.max(exact.norm());
    }
    Ok(((num2 / den2).sqrt(), num_inf / den_inf))
}

/// Parseval distance between two per-chart weighted densities, the coarser
/// one embedded into the mode set of the finer.
pub fn density_distance(a: &[TrigPoly], b: &[TrigPoly]) -> f64 {
    let mut acc = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        let (fine, coarse) = if pa.n >= pb.n { (pa, pb) } else { (pb, pa) };
        let nf = fine.n;
        let nc = coarse.n;
        for i1 in 0..nf {
            let m1 = crate::trig::index_to_freq(i1, nf);
            for i2 in 0..nf {
                let m2 = crate::trig::index_to_freq(i2, nf);
                let cf = fine.coeffs[i1 * nf + i2];
                let lo = -(nc as i64) / 2;
                let hi = (nc as i64 + 1) / 2;
                let cc = if m1 >= lo && m1 < hi && m2 >= lo && m2 < hi {
                    coarse.coeffs[freq_to_index(m1, nc) * nc + freq_to_index(m2, nc)]
                } else {
                    C64::new(0.0, 0.0)
                };
                acc += (cf - cc).norm_sqr();
            }
        }
    }
    acc.sqrt()
}

/// Convergence sweep against the Mie oracle (sphere geometry).
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    cfg.validate()?;
    if cfg.geometry != "sphere" {
        return Err(Error::Config(
            "convergence study requires the sphere geometry (analytic reference)".into(),
        ));
    }
    let atlas = cfg.build_atlas()?;
    let params = cfg.params()?;
    let mie = MieSeries::new(params.kappa, cfg.incidence)?;
    let probes = probe_points(cfg.probe_radius, cfg.probe_count);
    let mut rows = Vec::new();
    let mut polys = Vec::new();
    for &n in &cfg.n_list {
        let start = Instant::now();
        let delta = cfg.delta_for(&atlas, n);
        let ctx = NystromContext::new(
            atlas.clone(),
            params,
            delta,
            &vec![n; atlas.num_charts()],
            cfg.alpha,
            cfg.theta_factor,
            cfg.variant_for(n),
        )?;
        let rhs = Rhs::plane_wave(&ctx, cfg.incidence)?;
        let solution = ctx.solve(&rhs, cfg.solve_method())?;
        let (e_l2, e_linf) = field_errors(&ctx, &solution, &mie, &probes)?;
        let seconds = if cfg.timing == "zero" {
            0.0
        } else {
            start.elapsed().as_secs_f64()
        };
        rows.push(ConvergenceRow {
            n,
            h: 1.0 / n as f64,
            delta,
            theta: ctx.rules[0].theta_count,
            unknowns: ctx.num_unknowns(),
            e_l2,
            e_linf,
            order_l2: None,
            order_linf: None,
            iters: solution.iterations,
            seconds,
        });
        polys.push(solution.phi_h.clone());
    }
    fill_orders(&mut rows);
    let finest = polys.last().cloned().unwrap_or_default();
    let density_self_error: Vec<Option<f64>> = polys
        .iter()
        .enumerate()
        .map(|(k, p)| {
            if k + 1 == polys.len() {
                None
            } else {
                Some(density_distance(p, &finest))
            }
        })
        .collect();
    let report = ConvergenceReport {
        config: cfg.clone(),
        rows,
        density_self_error,
    };
    write_outputs(
        &report.to_csv(),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
        cfg,
    )?;
    Ok(report)
}

fn fill_orders(rows: &mut [ConvergenceRow]) {
    for k in 1..rows.len() {
        let ratio = (rows[k].n as f64 / rows[k - 1].n as f64).ln();
        rows[k].order_l2 = Some((rows[k - 1].e_l2 / rows[k].e_l2).ln() / ratio);
        rows[k].order_linf = Some((rows[k - 1].e_linf / rows[k].e_linf).ln() / ratio);
    }
}

/// Random trigonometric polynomial normalized in the `H^r` Sobolev norm.
pub fn random_sobolev_poly(n: usize, r: f64, seed: u64) -> TrigPoly {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = TrigPoly::zero(n);
    for i1 in 0..n {
        let m1 = crate::trig::index_to_freq(i1, n) as f64;
        for i2 in 0..n {
            let m2 = crate::trig::index_to_freq(i2, n) as f64;
            let decay = (1.0 + m1 * m1 + m2 * m2).powf(-(r + 1.2) / 2.0);
            p.coeffs[i1 * n + i2] = C64::new(
                rng.gen_range(-1.0..1.0) * decay,
                rng.gen_range(-1.0..1.0) * decay,
            );
        }
    }
    let norm = p.sobolev_norm(r);
    for c in p.coeffs.iter_mut() {
        *c /= norm;
    }
    p
}

/// Rate study of the standalone polar quadrature rule.
pub fn run_quadtest(cfg: &ExperimentConfig) -> Result<QuadReport> {
    cfg.validate()?;
    let z = [0.37, 0.58];
    let mut rows = Vec::new();
    for &n in &cfg.n_list {
        let h = 1.0 / n as f64;
        let delta = cfg.delta_coeff.min(1.0) * h.powf(cfg.beta);
        let eps0 = cfg.eps0;
        let eps1 = cfg.eps1;
        let chi = move |rho: f64, theta: f64| -> f64 {
            let a = rho.abs();
            let lo = eps0 * delta;
            let hi = eps1 * delta;
            let radial = if a <= lo {
                1.0
            } else if a >= hi {
                0.0
            } else {
                crate::geometry::smooth_step((hi - a) / (hi - lo))
            };
            radial * (1.0 + 0.3 * theta.sin())
        };
        let gamma = move |theta: f64| -> f64 {
            let c = c_weight(theta);
            if crate::quadrature::branch(theta) == crate::quadrature::Branch::Vertical {
                -z[0] * c
            } else {
                -z[1] * c
            }
        };
        let theta_count = PolarRule::new(n, cfg.alpha, cfg.theta_factor).theta_count;
        let cases: Vec<(String, TrigPoly)> = vec![
            ("zero".into(), TrigPoly::zero(n)),
            ("constant".into(), TrigPoly::unit_mode(n, (0, 0))),
            ("mode_2_1".into(), TrigPoly::unit_mode(n, (2, 1))),
            ("random_h4".into(), random_sobolev_poly(n, 4.0, cfg.seed)),
            (
                "nyquist".into(),
                TrigPoly::unit_mode(n, (-(n as i64) / 2, 0)),
            ),
        ];
        for (name, xi) in cases {
            let disc = quad_qhkg(&chi, &xi, &gamma, n, theta_count, eps1 * delta);
            let error = if name == "zero" {
                debug_assert_eq!(disc, C64::new(0.0, 0.0));
                0.0
            } else {
                let exact = adaptive_integral_polar(
                    &|rho, theta| {
                        C64::new(chi(rho, theta), 0.0)
                            * xi.eval([rho * theta.cos(), rho * theta.sin()])
                    },
                    eps1 * delta,
                    1e-11,
                )?;
                (disc - exact).norm()
            };
            let bound = h / delta * h.ln().abs() + delta;
            rows.push(QuadRow {
                case: name,
                n,
                h,
                delta,
                theta: theta_count,
                error,
                bound_ratio: error / (bound * xi.sobolev_norm(0.0).max(1e-300)),
            });
        }
    }
    let mut fitted_orders = Vec::new();
    for case in ["constant", "mode_2_1", "random_h4", "nyquist"] {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.case == case && r.error > 0.0)
            .map(|r| (r.h, r.error))
            .collect();
        if pts.len() >= 2 {
            let hs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let es: Vec<f64> = pts.iter().map(|p| p.1).collect();
            fitted_orders.push((case.to_string(), fit_order(&hs, &es)));
        }
    }
    let report = QuadReport {
        config: cfg.clone(),
        rows,
        fitted_orders,
    };
    write_outputs(
        &report.to_csv(),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
        cfg,
    )?;
    Ok(report)
}

/// Solve both variants per grid order and compare the solved densities.
pub fn run_hermite_compare(cfg: &ExperimentConfig) -> Result<HermiteReport> {
    cfg.validate()?;
    if cfg.geometry != "sphere" {
        return Err(Error::Config(
            "hermite comparison requires the sphere geometry (analytic reference)".into(),
        ));
    }
    let atlas = cfg.build_atlas()?;
    let params = cfg.params()?;
    let mie = MieSeries::new(params.kappa, cfg.incidence)?;
    let probes = probe_points(cfg.probe_radius, cfg.probe_count);
    let mut rows = Vec::new();
    for &n in &cfg.n_list {
        let start = Instant::now();
        let delta = cfg.delta_for(&atlas, n);
        let d = cfg.herm_d;
        let m = cfg.herm_m.unwrap_or_else(|| hermite_m_rule(n, cfg.beta, d));
        let ns = vec![n; atlas.num_charts()];
        let base_ctx = NystromContext::new(
            atlas.clone(),
            params,
            delta,
            &ns,
            cfg.alpha,
            cfg.theta_factor,
            Variant::Base,
        )?;
        let herm_ctx = NystromContext::new(
            atlas.clone(),
            params,
            delta,
            &ns,
            cfg.alpha,
            cfg.theta_factor,
            Variant::Hermite { m, d },
        )?;
        let rhs = Rhs::plane_wave(&base_ctx, cfg.incidence)?;
        let base = base_ctx.solve(&rhs, cfg.solve_method())?;
        let herm = herm_ctx.solve(&rhs, cfg.solve_method())?;
        let gap = density_distance(&base.phi_h, &herm.phi_h);
        let (base_error, _) = field_errors(&base_ctx, &base, &mie, &probes)?;
        let (hermite_error, _) = field_errors(&herm_ctx, &herm, &mie, &probes)?;
        let seconds = if cfg.timing == "zero" {
            0.0
        } else {
            start.elapsed().as_secs_f64()
        };
        rows.push(HermiteRow {
            n,
            h: 1.0 / n as f64,
            m,
            d,
            gap,
            base_error,
            hermite_error,
            gap_exceeds_base: gap > base_error,
            base_iters: base.iterations,
            hermite_iters: herm.iterations,
            seconds,
        });
    }
    let report = HermiteReport {
        config: cfg.clone(),
        rows,
    };
    write_outputs(
        &report.to_csv(),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
        cfg,
    )?;
    Ok(report)
}

/// Single solve at the largest configured grid order; prints a summary.
pub fn run_solve(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let atlas = cfg.build_atlas()?;
    let params = cfg.params()?;
    let n = *cfg.n_list.last().expect("validated nonempty");
    let delta = cfg.delta_for(&atlas, n);
    let ctx = NystromContext::new(
        atlas.clone(),
        params,
        delta,
        &vec![n; atlas.num_charts()],
        cfg.alpha,
        cfg.theta_factor,
        cfg.variant_for(n),
    )?;
    let rhs = Rhs::plane_wave(&ctx, cfg.incidence)?;
    let solution = ctx.solve(&rhs, cfg.solve_method())?;
    println!(
        "N={n} unknowns={} delta={delta:.6} iters={} residual={:.3e}",
        ctx.num_unknowns(),
        solution.iterations,
        solution.residual
    );
    if cfg.geometry == "sphere" {
        let mie = MieSeries::new(params.kappa, cfg.incidence)?;
        let probes = probe_points(cfg.probe_radius, cfg.probe_count);
        let (e2, einf) = field_errors(&ctx, &solution, &mie, &probes)?;
        println!("field error vs reference: l2={e2:.6e} linf={einf:.6e}");
    }
    if let Some(path) = &cfg.out_json {
        #[derive(Serialize)]
        struct SolveSummary<'a> {
            config: &'a ExperimentConfig,
            unknowns: usize,
            iterations: usize,
            residual: f64,
        }
        std::fs::write(
            path,
            serde_json::to_string_pretty(&SolveSummary {
                config: cfg,
                unknowns: ctx.num_unknowns(),
                iterations: solution.iterations,
                residual: solution.residual,
            })
            .expect("summary serializes"),
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CLI
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(name = "nystrom3d", about = "High-order Nystrom scattering solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one problem at the largest configured grid order.
    Solve(RunArgs),
    /// Convergence sweep against the analytic sphere reference.
    Converge(RunArgs),
    /// Rate study of the polar quadrature rule.
    Quadtest(RunArgs),
    /// Compare the Hermite-accelerated variant against the base scheme.
    HermiteCompare(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<std::path::PathBuf>,
    /// Override single keys, e.g. --set kappa=2.0 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() {
    if let Ok(s) = std::env::var("NYSTROM_THREADS") {
        if let Ok(n) = s.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

/// Entry point shared by the binary and the tests. Returns the process exit
/// code: 0 on success, 1 on solver/oracle failure, 2 on configuration or
/// usage errors.
pub fn cli_main<I>(argv: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    init_threads();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let (args, runner): (&RunArgs, fn(&ExperimentConfig) -> Result<()>) = match &cli.command {
        Command::Solve(a) => (a, |cfg| run_solve(cfg)),
        Command::Converge(a) => (a, |cfg| run_convergence(cfg).map(summarize_convergence)),
        Command::Quadtest(a) => (a, |cfg| run_quadtest(cfg).map(summarize_quadtest)),
        Command::HermiteCompare(a) => (a, |cfg| run_hermite_compare(cfg).map(summarize_hermite)),
    };
    let cfg = match load_config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match runner(&cfg) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) | Err(e @ Error::Parameter(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn summarize_convergence(report: ConvergenceReport) {
    println!("N,h,delta,Theta,unknowns,e_l2,e_linf,order_l2,order_linf,iters,seconds");
    for r in &report.rows {
        println!(
            "{},{:.4e},{:.4e},{},{},{:.6e},{:.6e},{},{},{},{:.2}",
            r.n,
            r.h,
            r.delta,
            r.theta,
            r.unknowns,
            r.e_l2,
            r.e_linf,
            r.order_l2.map(|o| format!("{o:.2}")).unwrap_or_default(),
            r.order_linf.map(|o| format!("{o:.2}")).unwrap_or_default(),
            r.iters,
            r.seconds
        );
    }
}

fn summarize_quadtest(report: QuadReport) {
    for r in &report.rows {
        println!(
            "{:>10} N={:<4} delta={:.3e} error={:.6e} bound_ratio={:.3e}",
            r.case, r.n, r.delta, r.error, r.bound_ratio
        );
    }
    for (case, order) in &report.fitted_orders {
        println!("fitted order [{case}]: {order:.2}");
    }
}

fn summarize_hermite(report: HermiteReport) {
    for r in &report.rows {
        println!(
            "N={:<4} m={} d={} gap={:.6e} base={:.6e} hermite={:.6e} flagged={}",
            r.n, r.m, r.d, r.gap, r.base_error, r.hermite_error, r.gap_exceeds_base
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parse_and_overrides() {
        let dir = std::env::temp_dir().join("nystrom3d_cfg_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sphere.cfg");
        std::fs::write(
            &path,
            "# test config\ngeometry=sphere\nkappa=2.5\nn_list=8,12\nbeta=0.25\n",
        )
        .unwrap();
        let mut cfg = ExperimentConfig::from_file(&path).unwrap();
        assert_eq!(cfg.kappa, 2.5);
        assert_eq!(cfg.n_list, vec![8, 12]);
        cfg.set("eta", "3.0").unwrap();
        assert_eq!(cfg.eta, Some(3.0));
        assert!(cfg.set("nope", "1").is_err());
        // invalid beta rejected by validation
        cfg.set("beta", "1.5").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_config_file_is_config_error() {
        let err = ExperimentConfig::from_file(Path::new("/nonexistent/path.cfg")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn cli_exit_codes() {
        // unknown flag
        let code = cli_main(
            ["nystrom3d", "converge", "--frobnicate"]
                .iter()
                .map(|s| s.to_string()),
        );
        assert_eq!(code, 2);
        // missing config file
        let code = cli_main(
            ["nystrom3d", "converge", "--config", "/nonexistent.cfg"]
                .iter()
                .map(|s| s.to_string()),
        );
        assert_eq!(code, 2);
        // invariant violation via --set
        let code = cli_main(
            ["nystrom3d", "quadtest", "--set", "beta=1.5"]
                .iter()
                .map(|s| s.to_string()),
        );
        assert_eq!(code, 2);
    }

    #[test]
    fn csv_header_and_formatting() {
        let cfg = ExperimentConfig::default();
        let report = ConvergenceReport {
            config: cfg,
            rows: vec![ConvergenceRow {
                n: 16,
                h: 0.0625,
                delta: 0.2,
                theta: 128,
                unknowns: 400,
                e_l2: 1.0 / 3.0,
                e_linf: 0.5,
                order_l2: None,
                order_linf: None,
                iters: 11,
                seconds: 0.0,
            }],
            density_self_error: vec![None],
        };
        let csv = report.to_csv();
        assert!(csv.starts_with(
            "N,h,delta,Theta,unknowns,e_l2,e_linf,order_l2,order_linf,iters,seconds\n"
        ));
        // 17 significant digits survive a parse round trip
        let field = csv.lines().nth(1).unwrap().split(',').nth(5).unwrap();
        assert_eq!(field.parse::<f64>().unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn json_roundtrip() {
        let cfg = ExperimentConfig::default();
        let report = QuadReport {
            config: cfg,
            rows: vec![QuadRow {
                case: "mode_2_1".into(),
                n: 32,
                h: 1.0 / 32.0,
                delta: 0.3,
                theta: 362,
                error: 1e-7,
                bound_ratio: 0.2,
            }],
            fitted_orders: vec![("mode_2_1".into(), 3.4)],
        };
        let text = serde_json::to_string(&report).unwrap();
        let back: QuadReport = serde_json::from_str(&text).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn hermite_m_rule_satisfies_bound() {
        for n in [16usize, 32, 48] {
            for d in [1usize, 2] {
                let beta = 1.0 / 3.0;
                let m = hermite_m_rule(n, beta, d);
                let h = 1.0 / n as f64;
                assert!((m as f64).powi(-(2 * d as i32 + 2)) <= h.powf(2.0 - beta) * 1.0001);
                assert!(m >= 2);
            }
        }
    }

    #[test]
    fn probe_points_on_sphere() {
        let pts = probe_points(2.0, 200);
        assert_eq!(pts.len(), 200);
        for p in pts {
            assert!((crate::norm3(p) - 2.0).abs() < 1e-12);
        }
    }
}
