//! Physics residual operators.
//!
//! Strong form (pointwise):
//!   r_c = div u
//!   r_m = (u . grad) u + grad p - (1/Re) lap u
//!
//! Weak form (per control volume, via the divergence theorem):
//!   R_c = surface integral of u . n
//!   R_m = surface integral of (u (x) u + p I - (1/Re) grad u) n
//!
//! plus mean-squared boundary-condition mismatches. The operators consume
//! jets (values and input derivatives) so the same formulas serve both the
//! network and analytic manufactured solutions; the `*_adjoint` companions
//! are the hand-derived reverse maps the trainer feeds into
//! [`FieldModel::backward`].

use std::io::Write;

use crate::control_volume::{self, ControlVolume};
use crate::error::Result;
use crate::field_model::{DerivLevel, FieldJet, FieldModel, OutputAdjoint, Workspace};
use crate::geometry::{BoundarySample, Region};
use crate::Vec3;

/// An evaluable source of (u, p) and their input derivatives at interior
/// points: the trained network or an analytic manufactured solution.
pub trait FlowField: Sync {
    fn value(&self, x: &Vec3) -> ([f64; 3], f64);
    /// Values and first derivatives.
    fn jet_grad(&self, x: &Vec3) -> FieldJet;
    /// Values, first and second derivatives.
    fn jet_full(&self, x: &Vec3) -> FieldJet;
}

impl FlowField for FieldModel {
    fn value(&self, x: &Vec3) -> ([f64; 3], f64) {
        self.eval(x)
    }

    fn jet_grad(&self, x: &Vec3) -> FieldJet {
        let mut ws = Workspace::new(self, DerivLevel::Grad);
        self.jet(x, &mut ws)
    }

    fn jet_full(&self, x: &Vec3) -> FieldJet {
        let mut ws = Workspace::new(self, DerivLevel::HessFull);
        self.jet(x, &mut ws)
    }
}

/// Analytic flow with closed-form derivatives, for manufactured solutions
/// and verification oracles.
#[derive(Clone)]
pub struct AnalyticFlow {
    pub name: &'static str,
    pub velocity: fn(&Vec3) -> [f64; 3],
    pub pressure: fn(&Vec3) -> f64,
    /// grad[i][j] = d u_i / d x_j.
    pub velocity_gradient: fn(&Vec3) -> [[f64; 3]; 3],
    pub pressure_gradient: fn(&Vec3) -> [f64; 3],
    /// Slot order xx, yy, zz, xy, xz, yz per component.
    pub velocity_hessians: fn(&Vec3) -> [[f64; 6]; 3],
}

impl FlowField for AnalyticFlow {
    fn value(&self, x: &Vec3) -> ([f64; 3], f64) {
        ((self.velocity)(x), (self.pressure)(x))
    }

    fn jet_grad(&self, x: &Vec3) -> FieldJet {
        let mut jet = FieldJet::zero();
        jet.u = (self.velocity)(x);
        jet.p = (self.pressure)(x);
        jet.grad_u = (self.velocity_gradient)(x);
        jet.grad_p = (self.pressure_gradient)(x);
        jet
    }

    fn jet_full(&self, x: &Vec3) -> FieldJet {
        let mut jet = self.jet_grad(x);
        jet.hess_u = (self.velocity_hessians)(x);
        jet
    }
}

/// Check an adapter's stated derivatives against central differences of its
/// own values (the same contract the network obeys).
pub fn check_flow_derivatives(field: &dyn FlowField, points: &[Vec3]) -> Result<()> {
    let h1 = 1e-5;
    let h2 = 1e-3;
    for x in points {
        let jet = field.jet_full(x);
        for d in 0..3 {
            let mut xp = *x;
            let mut xm = *x;
            xp[d] += h1;
            xm[d] -= h1;
            let (up, pp) = field.value(&xp);
            let (um, pm) = field.value(&xm);
            for i in 0..3 {
                let fd = (up[i] - um[i]) / (2.0 * h1);
                if (jet.grad_u[i][d] - fd).abs() > 1e-5 * jet.grad_u[i][d].abs().max(1.0) {
                    return Err(crate::error::Error::Numeric(format!(
                        "flow jacobian[{i}][{d}] inconsistent with finite differences"
                    )));
                }
            }
            let fd = (pp - pm) / (2.0 * h1);
            if (jet.grad_p[d] - fd).abs() > 1e-5 * jet.grad_p[d].abs().max(1.0) {
                return Err(crate::error::Error::Numeric(
                    "pressure gradient inconsistent with finite differences".into(),
                ));
            }
        }
        for (s, (a, b)) in crate::field_model::HESS_SLOTS.iter().enumerate() {
            for i in 0..3 {
                let fd = if a == b {
                    let mut xp = *x;
                    let mut xm = *x;
                    xp[*a] += h2;
                    xm[*a] -= h2;
                    (field.value(&xp).0[i] - 2.0 * field.value(x).0[i] + field.value(&xm).0[i])
                        / (h2 * h2)
                } else {
                    let (mut pp, mut pm, mut mp, mut mm) = (*x, *x, *x, *x);
                    pp[*a] += h2;
                    pp[*b] += h2;
                    pm[*a] += h2;
                    pm[*b] -= h2;
                    mp[*a] -= h2;
                    mp[*b] += h2;
                    mm[*a] -= h2;
                    mm[*b] -= h2;
                    (field.value(&pp).0[i] - field.value(&pm).0[i] - field.value(&mp).0[i]
                        + field.value(&mm).0[i])
                        / (4.0 * h2 * h2)
                };
                if (jet.hess_u[i][s] - fd).abs() > 1e-3 * jet.hess_u[i][s].abs().max(1.0) {
                    return Err(crate::error::Error::Numeric(format!(
                        "flow hessian[{i}] slot {s} inconsistent with finite differences"
                    )));
                }
            }
        }
    }
    Ok(())
}

// ----------------------------------------------------------------------
// Boundary conditions
// ----------------------------------------------------------------------

/// Prescribed inlet velocity profile.
#[derive(Debug, Clone, PartialEq)]
pub enum InletProfile {
    Constant([f64; 3]),
    /// Axial parabolic profile u_x = 2 mean (1 - rho^2 / R^2) over the
    /// circular cross-section centered at (cy, cz).
    Poiseuille {
        center: (f64, f64),
        radius: f64,
        mean: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryConditions {
    pub inlet: InletProfile,
    pub p_out: f64,
}

impl Default for BoundaryConditions {
    fn default() -> Self {
        BoundaryConditions {
            inlet: InletProfile::Constant([1.0, 0.0, 0.0]),
            p_out: 0.0,
        }
    }
}

impl BoundaryConditions {
    pub fn inlet_velocity(&self, x: &Vec3) -> [f64; 3] {
        match &self.inlet {
            InletProfile::Constant(u) => *u,
            InletProfile::Poiseuille { center, radius, mean } => {
                let rho2 = (x.y - center.0).powi(2) + (x.z - center.1).powi(2);
                let ux = 2.0 * mean * (1.0 - rho2 / (radius * radius));
                [ux.max(0.0), 0.0, 0.0]
            }
        }
    }
}

// ----------------------------------------------------------------------
// Strong form
// ----------------------------------------------------------------------

/// div u from a jet.
pub fn strong_continuity_jet(jet: &FieldJet) -> f64 {
    jet.grad_u[0][0] + jet.grad_u[1][1] + jet.grad_u[2][2]
}

/// (u . grad) u + grad p - (1/Re) lap u from a jet.
pub fn strong_momentum_jet(jet: &FieldJet, re: f64) -> [f64; 3] {
    let lap = jet.laplacian_u();
    let mut r = [0.0; 3];
    for i in 0..3 {
        let advect =
            jet.u[0] * jet.grad_u[i][0] + jet.u[1] * jet.grad_u[i][1] + jet.u[2] * jet.grad_u[i][2];
        r[i] = advect + jet.grad_p[i] - lap[i] / re;
    }
    r
}

pub fn strong_continuity(field: &dyn FlowField, x: &Vec3) -> f64 {
    strong_continuity_jet(&field.jet_grad(x))
}

pub fn strong_momentum(field: &dyn FlowField, x: &Vec3, re: f64) -> [f64; 3] {
    strong_momentum_jet(&field.jet_full(x), re)
}

/// Adjoint of (lambda-weighted) strong residuals with respect to the jet:
/// accumulates into `adj` the contribution of `rc_bar * r_c + rm_bar . r_m`.
pub fn strong_residual_adjoint(jet: &FieldJet, re: f64, rc_bar: f64, rm_bar: [f64; 3], adj: &mut OutputAdjoint) {
    for i in 0..3 {
        adj.jac[i][i] += rc_bar;
    }
    for i in 0..3 {
        let rb = rm_bar[i];
        if rb == 0.0 {
            continue;
        }
        for j in 0..3 {
            // advection: d/d u_j and d/d (grad u_i)_j
            adj.val[j] += rb * jet.grad_u[i][j];
            adj.jac[i][j] += rb * jet.u[j];
        }
        adj.jac[3][i] += rb; // grad p term
        for s in 0..3 {
            adj.hess[i][s] -= rb / re; // Laplacian diagonal slots
        }
    }
}

// ----------------------------------------------------------------------
// Weak form
// ----------------------------------------------------------------------

/// Continuity flux integrand u . n.
pub fn continuity_flux(u: &[f64; 3], n: &Vec3) -> f64 {
    u[0] * n.x + u[1] * n.y + u[2] * n.z
}

/// Momentum flux integrand F n with F = u (x) u + p I - (1/Re) grad u.
pub fn momentum_flux(jet: &FieldJet, re: f64, n: &Vec3) -> [f64; 3] {
    let un = continuity_flux(&jet.u, n);
    let mut g = [0.0; 3];
    for i in 0..3 {
        let visc = jet.grad_u[i][0] * n.x + jet.grad_u[i][1] * n.y + jet.grad_u[i][2] * n.z;
        g[i] = jet.u[i] * un + jet.p * n[i] - visc / re;
    }
    g
}

/// Adjoint of the momentum flux: accumulates d(g_bar . g)/d(jet) into `adj`.
pub fn momentum_flux_adjoint(jet: &FieldJet, re: f64, n: &Vec3, g_bar: [f64; 3], adj: &mut OutputAdjoint) {
    let un = continuity_flux(&jet.u, n);
    let gb_dot_u = g_bar[0] * jet.u[0] + g_bar[1] * jet.u[1] + g_bar[2] * jet.u[2];
    for i in 0..3 {
        adj.val[i] += g_bar[i] * un + gb_dot_u * n[i];
        for j in 0..3 {
            adj.jac[i][j] -= g_bar[i] * n[j] / re;
        }
    }
    adj.val[3] += g_bar[0] * n.x + g_bar[1] * n.y + g_bar[2] * n.z;
}

/// Weak continuity residual over a control volume.
pub fn weak_continuity(field: &dyn FlowField, cv: &ControlVolume) -> Result<f64> {
    control_volume::surface_integral(cv, |x, n| continuity_flux(&field.value(x).0, n))
}

/// Monte Carlo standard error of [`weak_continuity`] on the same samples.
pub fn weak_continuity_error(field: &dyn FlowField, cv: &ControlVolume) -> Result<f64> {
    control_volume::mc_error_estimate(cv, |x, n| continuity_flux(&field.value(x).0, n))
}

/// Weak momentum residual over a control volume.
pub fn weak_momentum(field: &dyn FlowField, cv: &ControlVolume, re: f64) -> Result<Vec3> {
    control_volume::surface_integral_vec(cv, |x, n| {
        let g = momentum_flux(&field.jet_grad(x), re, n);
        Vec3::new(g[0], g[1], g[2])
    })
}

/// Per-component Monte Carlo standard errors of [`weak_momentum`].
pub fn weak_momentum_error(field: &dyn FlowField, cv: &ControlVolume, re: f64) -> Result<Vec3> {
    control_volume::mc_error_estimate_vec(cv, |x, n| {
        let g = momentum_flux(&field.jet_grad(x), re, n);
        Vec3::new(g[0], g[1], g[2])
    })
}

// ----------------------------------------------------------------------
// Boundary conditions
// ----------------------------------------------------------------------

/// Mean-squared boundary mismatches (L_in, L_out, L_w): velocity vector on
/// the inlet, pressure on the outlet, velocity norm on walls. Empty regions
/// contribute zero (with a warning).
pub fn bc_residuals(
    field: &dyn FlowField,
    samples: &[BoundarySample],
    conditions: &BoundaryConditions,
) -> (f64, f64, f64) {
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for s in samples {
        let (u, p) = field.value(&s.position);
        match s.region {
            Region::Inlet => {
                let target = conditions.inlet_velocity(&s.position);
                let d = [u[0] - target[0], u[1] - target[1], u[2] - target[2]];
                sums[0] += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                counts[0] += 1;
            }
            Region::Outlet => {
                sums[1] += (p - conditions.p_out).powi(2);
                counts[1] += 1;
            }
            Region::Wall => {
                sums[2] += u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
                counts[2] += 1;
            }
        }
    }
    let mut out = [0.0f64; 3];
    for (i, name) in ["inlet", "outlet", "wall"].iter().enumerate() {
        if counts[i] == 0 {
            log::warn!("bc_residuals: no {name} samples; term set to zero");
        } else {
            out[i] = sums[i] / counts[i] as f64;
        }
    }
    (out[0], out[1], out[2])
}

/// Per-CV residual diagnostics as CSV
/// (`cx,cy,cz,r,R_c,R_c_sigma,Rm_norm,Rm_sigma_norm`).
pub fn write_residual_dump_csv<W: Write>(
    field: &dyn FlowField,
    cvs: &[ControlVolume],
    re: f64,
    w: &mut W,
) -> Result<()> {
    writeln!(w, "cx,cy,cz,r,R_c,R_c_sigma,Rm_norm,Rm_sigma_norm")?;
    for cv in cvs {
        let rc = weak_continuity(field, cv)?;
        let rc_sigma = weak_continuity_error(field, cv)?;
        let rm = weak_momentum(field, cv, re)?;
        let rm_sigma = weak_momentum_error(field, cv, re)?;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            cv.center.x,
            cv.center.y,
            cv.center.z,
            cv.radius,
            rc,
            rc_sigma,
            rm.norm(),
            rm_sigma.norm()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control_volume::{build_control_volume, WallPool};
    use crate::evaluation::{oracle_fields, ReferenceField};
    use crate::geometry::{BoundingBox, LevelSetGeometry, LevelSetKind};
    use crate::seeds;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn constant_flow() -> AnalyticFlow {
        AnalyticFlow {
            name: "constant",
            velocity: |_| [0.7, -0.3, 0.2],
            pressure: |_| 0.4,
            velocity_gradient: |_| [[0.0; 3]; 3],
            pressure_gradient: |_| [0.0; 3],
            velocity_hessians: |_| [[0.0; 6]; 3],
        }
    }

    fn linear_flow() -> AnalyticFlow {
        AnalyticFlow {
            name: "linear",
            velocity: |x| [x.x, x.y, x.z],
            pressure: |_| 0.0,
            velocity_gradient: |_| [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            pressure_gradient: |_| [0.0; 3],
            velocity_hessians: |_| [[0.0; 6]; 3],
        }
    }

    fn shear_flow() -> AnalyticFlow {
        // u = (y, 0, 0), p = 0.
        AnalyticFlow {
            name: "shear",
            velocity: |x| [x.y, 0.0, 0.0],
            pressure: |_| 0.0,
            velocity_gradient: |_| [[0.0, 1.0, 0.0], [0.0; 3], [0.0; 3]],
            pressure_gradient: |_| [0.0; 3],
            velocity_hessians: |_| [[0.0; 6]; 3],
        }
    }

    fn wide_box() -> LevelSetGeometry {
        let bbox = BoundingBox::new(Vec3::zeros(), Vec3::new(4.0, 4.0, 4.0)).unwrap();
        LevelSetGeometry::new(LevelSetKind::PlaneChannel, bbox).unwrap()
    }

    fn interior_cv(seed: u64, r: f64) -> ControlVolume {
        let g = wide_box();
        let pool = WallPool::from_samples(&g, Vec::new());
        build_control_volume(&g, &pool, &Vec3::new(2.0, 2.0, 2.0), r, 4096, seed).unwrap()
    }

    #[test]
    fn continuity_of_basic_fields() {
        let x = Vec3::new(0.3, 0.8, 1.1);
        assert_eq!(strong_continuity(&constant_flow(), &x), 0.0);
        assert_eq!(strong_continuity(&linear_flow(), &x), 3.0);
    }

    #[test]
    fn momentum_of_zero_and_shear_fields() {
        let zero = AnalyticFlow {
            name: "zero",
            velocity: |_| [0.0; 3],
            pressure: |_| 0.0,
            velocity_gradient: |_| [[0.0; 3]; 3],
            pressure_gradient: |_| [0.0; 3],
            velocity_hessians: |_| [[0.0; 6]; 3],
        };
        let x = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(strong_momentum(&zero, &x, 100.0), [0.0; 3]);
        // Advection of (y,0,0) is u_x d/dx (y,0,0) = 0 and the field is
        // harmonic, so the residual vanishes identically.
        assert_eq!(strong_momentum(&shear_flow(), &x, 50.0), [0.0; 3]);
    }

    #[test]
    fn hagen_poiseuille_annihilates_strong_residuals() {
        let reference = ReferenceField::hagen_poiseuille(0.4, 0.5, 0.01, (0.5, 0.5), 5.0, 0.0).unwrap();
        let mut rng = seeds::rng(3);
        use rand::Rng;
        for _ in 0..100 {
            let theta = rng.gen_range(0.0..2.0 * PI);
            let rho = 0.4 * rng.gen_range(0.0f64..1.0).sqrt();
            let x = Vec3::new(
                rng.gen_range(0.0..5.0),
                0.5 + rho * theta.cos(),
                0.5 + rho * theta.sin(),
            );
            assert!(strong_continuity(&reference, &x).abs() < 1e-12);
            let rm = strong_momentum(&reference, &x, 100.0);
            for c in rm {
                assert!(c.abs() < 1e-10, "momentum residual {c}");
            }
        }
    }

    #[test]
    fn weak_continuity_constant_field_vanishes() {
        let cv = interior_cv(11, 0.5);
        let field = constant_flow();
        let est = weak_continuity(&field, &cv).unwrap();
        let sigma = weak_continuity_error(&field, &cv).unwrap();
        assert!(est.abs() <= 3.0 * sigma);
    }

    #[test]
    fn weak_continuity_linear_field_matches_volume() {
        let r = 0.6;
        let cv = interior_cv(12, r);
        let field = linear_flow();
        let est = weak_continuity(&field, &cv).unwrap();
        let sigma = weak_continuity_error(&field, &cv).unwrap();
        let truth = 4.0 * PI * r.powi(3);
        assert!((est - truth).abs() <= 3.0 * sigma, "est {est} truth {truth} sigma {sigma}");
    }

    #[test]
    fn weak_momentum_zero_and_uniform_fields() {
        let cv = interior_cv(13, 0.5);
        let zero = AnalyticFlow {
            name: "zero",
            velocity: |_| [0.0; 3],
            pressure: |_| 0.0,
            velocity_gradient: |_| [[0.0; 3]; 3],
            pressure_gradient: |_| [0.0; 3],
            velocity_hessians: |_| [[0.0; 6]; 3],
        };
        assert_eq!(weak_momentum(&zero, &cv, 100.0).unwrap(), Vec3::zeros());
        let uniform = AnalyticFlow {
            name: "uniform-x",
            velocity: |_| [1.0, 0.0, 0.0],
            pressure: |_| 0.0,
            velocity_gradient: |_| [[0.0; 3]; 3],
            pressure_gradient: |_| [0.0; 3],
            velocity_hessians: |_| [[0.0; 6]; 3],
        };
        let est = weak_momentum(&uniform, &cv, 100.0).unwrap();
        let sigma = weak_momentum_error(&uniform, &cv, 100.0).unwrap();
        for c in 0..3 {
            assert!(est[c].abs() <= 3.0 * sigma[c].max(1e-14), "component {c}: {}", est[c]);
        }
    }

    #[test]
    fn hagen_poiseuille_weak_residuals_within_mc_bounds() {
        // Pipe CVs, including wall-clipped ones: the exact solution
        // conserves both fluxes over any subdomain.
        let g = LevelSetGeometry::with_default_box(LevelSetKind::CircularPipe)
            .unwrap()
            .with_pipe_radius(0.4)
            .unwrap();
        let mut rng = seeds::rng(14);
        let pool = WallPool::build(&g, 200_000, &mut rng).unwrap();
        let reference = ReferenceField::hagen_poiseuille(0.4, 0.5, 0.01, (0.5, 0.5), 5.0, 0.0).unwrap();
        use rand::Rng;
        for trial in 0..20u64 {
            // Half the centers near the wall so the CVs clip it.
            let near_wall = trial % 2 == 0;
            let rho = if near_wall { 0.3 } else { 0.1 };
            let theta = rng.gen_range(0.0..2.0 * PI);
            let c = Vec3::new(
                rng.gen_range(1.0..4.0),
                0.5 + rho * theta.cos(),
                0.5 + rho * theta.sin(),
            );
            let cv = build_control_volume(&g, &pool, &c, 0.2, 4096, 100 + trial).unwrap();
            if near_wall {
                assert!(cv.k_boundary() > 0, "expected a wall-clipped CV");
            }
            let rc = weak_continuity(&reference, &cv).unwrap();
            let rc_sigma = weak_continuity_error(&reference, &cv).unwrap();
            assert!(rc.abs() <= 3.0 * rc_sigma, "trial {trial}: R_c {rc} sigma {rc_sigma}");
            let rm = weak_momentum(&reference, &cv, 100.0).unwrap();
            let rm_sigma = weak_momentum_error(&reference, &cv, 100.0).unwrap();
            for comp in 0..3 {
                assert!(
                    rm[comp].abs() <= 3.0 * rm_sigma[comp].max(1e-14),
                    "trial {trial} component {comp}: {} vs sigma {}",
                    rm[comp],
                    rm_sigma[comp]
                );
            }
        }
    }

    #[test]
    fn weak_strong_consistency_against_quadrature() {
        // For smooth fields the surface flux must match the volume integral
        // of the divergence computed by an independent quadrature.
        let mut rng = seeds::rng(15);
        use rand::Rng;
        for field in oracle_fields() {
            for trial in 0..5u64 {
                let r = rng.gen_range(0.2..0.7);
                let c = Vec3::new(
                    rng.gen_range(1.0..3.0),
                    rng.gen_range(1.0..3.0),
                    rng.gen_range(1.0..3.0),
                );
                let g = wide_box();
                let pool = WallPool::from_samples(&g, Vec::new());
                let cv = build_control_volume(&g, &pool, &c, r, 4096, 200 + trial).unwrap();
                let est = weak_continuity(&field.flow, &cv).unwrap();
                let sigma = weak_continuity_error(&field.flow, &cv).unwrap();
                let truth = crate::evaluation::ball_quadrature(&c, r, |x| {
                    strong_continuity_jet(&field.flow.jet_grad(x))
                });
                assert!(
                    (est - truth).abs() <= 3.0 * sigma.max(1e-12),
                    "{} trial {trial}: est {est} truth {truth} sigma {sigma}",
                    field.flow.name
                );
            }
        }
    }

    #[test]
    fn weak_continuity_follows_r_cubed_law() {
        let field = linear_flow(); // divergence 3
        let mut ratios = Vec::new();
        for (i, r) in [0.05f64, 0.1, 0.2].iter().enumerate() {
            let cv = interior_cv(300 + i as u64, *r);
            let est = weak_continuity(&field, &cv).unwrap();
            ratios.push(est / (4.0 * PI * r.powi(3)));
        }
        for q in &ratios {
            assert!((q - 1.0).abs() < 0.15, "normalized flux {q}");
        }
    }

    #[test]
    fn bc_residuals_exact_and_mismatched() {
        let g = LevelSetGeometry::with_default_box(LevelSetKind::CircularPipe)
            .unwrap()
            .with_pipe_radius(0.4)
            .unwrap();
        let mut rng = seeds::rng(16);
        let mut samples = g.sample_inlet_outlet(50, Region::Inlet, &mut rng).unwrap();
        samples.extend(g.sample_inlet_outlet(50, Region::Outlet, &mut rng).unwrap());
        samples.extend(g.sample_wall_surface(50, &mut rng).unwrap());

        // A constant field matching the inlet exactly.
        let field = AnalyticFlow {
            name: "uniform-x",
            velocity: |_| [1.0, 0.0, 0.0],
            pressure: |_| 0.0,
            velocity_gradient: |_| [[0.0; 3]; 3],
            pressure_gradient: |_| [0.0; 3],
            velocity_hessians: |_| [[0.0; 6]; 3],
        };
        let bc = BoundaryConditions::default();
        let (l_in, l_out, l_w) = bc_residuals(&field, &samples, &bc);
        assert_eq!(l_in, 0.0);
        assert_eq!(l_out, 0.0);
        assert_relative_eq!(l_w, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bc_residual_single_sample_mse() {
        let sample = BoundarySample {
            position: Vec3::new(0.0, 0.5, 0.5),
            normal: Vec3::new(-1.0, 0.0, 0.0),
            region: Region::Inlet,
        };
        let field = AnalyticFlow {
            name: "fast",
            velocity: |_| [2.0, 0.0, 0.0],
            pressure: |_| 0.0,
            velocity_gradient: |_| [[0.0; 3]; 3],
            pressure_gradient: |_| [0.0; 3],
            velocity_hessians: |_| [[0.0; 6]; 3],
        };
        let (l_in, l_out, l_w) = bc_residuals(&field, &[sample], &BoundaryConditions::default());
        assert_eq!(l_in, 1.0);
        assert_eq!(l_out, 0.0);
        assert_eq!(l_w, 0.0);
    }

    #[test]
    fn analytic_adapters_pass_derivative_checks() {
        let pts = [
            Vec3::new(0.3, 0.7, 1.2),
            Vec3::new(2.0, 1.5, 0.8),
            Vec3::new(1.1, 2.2, 3.0),
        ];
        for field in oracle_fields() {
            check_flow_derivatives(&field.flow, &pts).unwrap();
        }
    }

    #[test]
    fn momentum_flux_adjoint_matches_fd() {
        // Verify the hand-derived flux adjoint against finite differences on
        // the jet entries.
        let jet0 = {
            let mut j = FieldJet::zero();
            j.u = [0.4, -0.2, 0.9];
            j.p = 0.3;
            j.grad_u = [[0.1, -0.5, 0.2], [0.0, 0.3, -0.1], [0.7, 0.2, 0.05]];
            j
        };
        let n = Vec3::new(0.36, -0.48, 0.8);
        let g_bar = [0.5, -1.0, 0.25];
        let re = 40.0;
        let mut adj = OutputAdjoint::default();
        momentum_flux_adjoint(&jet0, re, &n, g_bar, &mut adj);
        let loss = |jet: &FieldJet| {
            let g = momentum_flux(jet, re, &n);
            g[0] * g_bar[0] + g[1] * g_bar[1] + g[2] * g_bar[2]
        };
        let h = 1e-7;
        for i in 0..3 {
            let mut jp = jet0;
            let mut jm = jet0;
            jp.u[i] += h;
            jm.u[i] -= h;
            let fd = (loss(&jp) - loss(&jm)) / (2.0 * h);
            assert_relative_eq!(adj.val[i], fd, epsilon = 1e-6);
            for j in 0..3 {
                let mut jp = jet0;
                let mut jm = jet0;
                jp.grad_u[i][j] += h;
                jm.grad_u[i][j] -= h;
                let fd = (loss(&jp) - loss(&jm)) / (2.0 * h);
                assert_relative_eq!(adj.jac[i][j], fd, epsilon = 1e-6);
            }
        }
        let mut jp = jet0;
        let mut jm = jet0;
        jp.p += h;
        jm.p -= h;
        let fd = (loss(&jp) - loss(&jm)) / (2.0 * h);
        assert_relative_eq!(adj.val[3], fd, epsilon = 1e-6);
    }

    #[test]
    fn strong_residual_adjoint_matches_fd() {
        let jet0 = {
            let mut j = FieldJet::zero();
            j.u = [0.4, -0.2, 0.9];
            j.p = 0.3;
            j.grad_u = [[0.1, -0.5, 0.2], [0.0, 0.3, -0.1], [0.7, 0.2, 0.05]];
            j.grad_p = [0.2, -0.6, 0.15];
            j.hess_u = [[0.3, 0.1, -0.2, 0.0, 0.0, 0.0]; 3];
            j
        };
        let re = 25.0;
        let rc_bar = 0.7;
        let rm_bar = [0.5, -0.3, 0.2];
        let mut adj = OutputAdjoint::default();
        strong_residual_adjoint(&jet0, re, rc_bar, rm_bar, &mut adj);
        let loss = |jet: &FieldJet| {
            let rc = strong_continuity_jet(jet);
            let rm = strong_momentum_jet(jet, re);
            rc_bar * rc + rm_bar[0] * rm[0] + rm_bar[1] * rm[1] + rm_bar[2] * rm[2]
        };
        let h = 1e-7;
        for i in 0..3 {
            let mut jp = jet0;
            let mut jm = jet0;
            jp.u[i] += h;
            jm.u[i] -= h;
            assert_relative_eq!(adj.val[i], (loss(&jp) - loss(&jm)) / (2.0 * h), epsilon = 1e-6);
            for j in 0..3 {
                let mut jp = jet0;
                let mut jm = jet0;
                jp.grad_u[i][j] += h;
                jm.grad_u[i][j] -= h;
                assert_relative_eq!(
                    adj.jac[i][j],
                    (loss(&jp) - loss(&jm)) / (2.0 * h),
                    epsilon = 1e-6
                );
            }
            for s in 0..6 {
                let mut jp = jet0;
                let mut jm = jet0;
                jp.hess_u[i][s] += h;
                jm.hess_u[i][s] -= h;
                assert_relative_eq!(
                    adj.hess[i][s],
                    (loss(&jp) - loss(&jm)) / (2.0 * h),
                    epsilon = 1e-6
                );
            }
        }
        for d in 0..3 {
            let mut jp = jet0;
            let mut jm = jet0;
            jp.grad_p[d] += h;
            jm.grad_p[d] -= h;
            assert_relative_eq!(adj.jac[3][d], (loss(&jp) - loss(&jm)) / (2.0 * h), epsilon = 1e-6);
        }
    }
}
