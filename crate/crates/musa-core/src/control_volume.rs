//! Clipped spherical integration subdomains.
//!
//! A control volume is a ball intersected with the fluid. Its boundary has a
//! spherical part (ball surface inside the fluid) and a boundary part (wall
//! surface inside the ball). Both parts are sampled by rejection: sphere
//! points drawn uniformly on the full sphere and filtered by containment,
//! wall points taken from a shared area-uniform pool and filtered by the
//! ball test. The acceptance ratios give the component areas, and the same
//! accepted samples are reused as the quadrature nodes, so no second
//! sampling pass ever occurs.

use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::io::Write;

use crate::error::{Error, Result};
use crate::geometry::{BoundarySample, LevelSetGeometry, random_unit};
use crate::seeds;
use crate::Vec3;

/// A point on a control-volume boundary with its outward unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub position: Vec3,
    pub normal: Vec3,
}

/// Shared pool of area-uniform wall samples with a uniform-grid index for
/// ball queries. Immutable after construction.
#[derive(Debug)]
pub struct WallPool {
    samples: Vec<BoundarySample>,
    /// CSR layout: for cell c, sample indices are order[offsets[c]..offsets[c+1]].
    offsets: Vec<u32>,
    order: Vec<u32>,
    dims: [usize; 3],
    cell_size: [f64; 3],
    origin: Vec3,
    total_wall_area: f64,
}

impl WallPool {
    /// Draw `size` wall samples from the geometry and index them.
    pub fn build(geometry: &LevelSetGeometry, size: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let samples = geometry.sample_wall_surface(size, rng)?;
        Ok(Self::from_samples(geometry, samples))
    }

    pub fn from_samples(geometry: &LevelSetGeometry, samples: Vec<BoundarySample>) -> Self {
        let bbox = geometry.bbox();
        let n = samples.len().max(1);
        // Aim at a handful of points per cell.
        let target_cells = (n / 8).clamp(1, 1 << 18);
        let volume = bbox.volume();
        let cell_edge = (volume / target_cells as f64).cbrt();
        let mut dims = [1usize; 3];
        let mut cell_size = [0.0f64; 3];
        for a in 0..3 {
            dims[a] = (bbox.extent(a) / cell_edge).ceil().max(1.0) as usize;
            cell_size[a] = bbox.extent(a) / dims[a] as f64;
        }
        let n_cells = dims[0] * dims[1] * dims[2];
        let cell_of = |p: &Vec3| -> usize {
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let t = ((p[a] - bbox.min[a]) / cell_size[a]) as isize;
                idx[a] = t.clamp(0, dims[a] as isize - 1) as usize;
            }
            (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]
        };
        let mut counts = vec![0u32; n_cells + 1];
        for s in &samples {
            counts[cell_of(&s.position) + 1] += 1;
        }
        for c in 0..n_cells {
            counts[c + 1] += counts[c];
        }
        let offsets = counts.clone();
        let mut cursor = counts;
        let mut order = vec![0u32; samples.len()];
        for (i, s) in samples.iter().enumerate() {
            let c = cell_of(&s.position);
            order[cursor[c] as usize] = i as u32;
            cursor[c] += 1;
        }
        WallPool {
            samples,
            offsets,
            order,
            dims,
            cell_size,
            origin: bbox.min,
            total_wall_area: geometry.wall_area(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[BoundarySample] {
        &self.samples
    }

    pub fn total_wall_area(&self) -> f64 {
        self.total_wall_area
    }

    /// Indices of pool samples with `|x - c| <= r`, ascending (order-fixed).
    pub fn indices_in_ball(&self, center: &Vec3, radius: f64) -> Vec<u32> {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let t0 = ((center[a] - radius - self.origin[a]) / self.cell_size[a]).floor() as isize;
            let t1 = ((center[a] + radius - self.origin[a]) / self.cell_size[a]).floor() as isize;
            lo[a] = t0.clamp(0, self.dims[a] as isize - 1) as usize;
            hi[a] = t1.clamp(0, self.dims[a] as isize - 1) as usize;
        }
        let r2 = radius * radius;
        let mut out = Vec::new();
        for ix in lo[0]..=hi[0] {
            for iy in lo[1]..=hi[1] {
                for iz in lo[2]..=hi[2] {
                    let c = (ix * self.dims[1] + iy) * self.dims[2] + iz;
                    let (s, e) = (self.offsets[c] as usize, self.offsets[c + 1] as usize);
                    for &i in &self.order[s..e] {
                        let p = &self.samples[i as usize].position;
                        if (p - center).norm_squared() <= r2 {
                            out.push(i);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Clipped sphere with its accepted boundary samples and area estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVolume {
    pub center: Vec3,
    pub radius: f64,
    /// Ball-surface samples inside the fluid; normals are (x - c)/|x - c|.
    pub sphere_samples: Vec<SurfaceSample>,
    /// Wall-pool samples inside the ball; normals from the geometry.
    pub boundary_samples: Vec<SurfaceSample>,
    /// Raw sphere draw count N_B.
    pub n_sphere_draws: usize,
    /// Wall pool size N_Omega.
    pub n_pool: usize,
    /// 4 pi r^2 * K_sph / N_B.
    pub area_sphere: f64,
    /// A(wall) * K_bdry / N_Omega.
    pub area_boundary: f64,
}

impl ControlVolume {
    pub fn k_sphere(&self) -> usize {
        self.sphere_samples.len()
    }

    pub fn k_boundary(&self) -> usize {
        self.boundary_samples.len()
    }

    pub fn total_accepted(&self) -> usize {
        self.k_sphere() + self.k_boundary()
    }
}

/// `count` points uniformly distributed on the sphere of given center and
/// radius (normalized Gaussian directions). Deterministic given the seed.
pub fn sample_sphere_uniform(center: &Vec3, radius: f64, count: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = seeds::rng(seed);
    sample_sphere_uniform_rng(center, radius, count, &mut rng)
}

pub fn sample_sphere_uniform_rng(
    center: &Vec3,
    radius: f64,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec3> {
    (0..count).map(|_| center + random_unit(rng) * radius).collect()
}

/// Construct the control volume at `center` with the given radius.
///
/// Sphere-part samples are the uniform sphere draws that pass the strict
/// containment test; boundary-part samples are the pool points inside the
/// ball. Area estimates follow from the acceptance ratios, and the accepted
/// sets are stored for reuse as quadrature nodes.
pub fn build_control_volume(
    geometry: &LevelSetGeometry,
    pool: &WallPool,
    center: &Vec3,
    radius: f64,
    n_sphere_draws: usize,
    seed: u64,
) -> Result<ControlVolume> {
    if !(radius > 0.0) {
        return Err(Error::Config("control volume radius must be positive".into()));
    }
    if !geometry.contains(center) {
        return Err(Error::Geometry(format!(
            "control volume center {:?} is outside the fluid",
            center.as_slice()
        )));
    }
    let draws = sample_sphere_uniform(center, radius, n_sphere_draws, seed);
    let sphere_samples: Vec<SurfaceSample> = draws
        .into_iter()
        .filter(|p| geometry.contains(p))
        .map(|p| SurfaceSample {
            normal: (p - center) / (p - center).norm(),
            position: p,
        })
        .collect();
    let boundary_samples: Vec<SurfaceSample> = pool
        .indices_in_ball(center, radius)
        .into_iter()
        .map(|i| {
            let s = &pool.samples()[i as usize];
            SurfaceSample {
                position: s.position,
                normal: s.normal,
            }
        })
        .collect();
    let k_sph = sphere_samples.len();
    let k_bdry = boundary_samples.len();
    if k_sph == 0 && k_bdry == 0 {
        return Err(Error::Geometry(format!(
            "degenerate control volume at {:?} (r = {radius}): no boundary samples accepted",
            center.as_slice()
        )));
    }
    if k_sph == 0 {
        log::warn!(
            "control volume at {:?} (r = {radius}) accepted no sphere samples; \
             ball surface may lie entirely in the solid",
            center.as_slice()
        );
    }
    let area_sphere = 4.0 * PI * radius * radius * k_sph as f64 / n_sphere_draws as f64;
    let area_boundary = if pool.len() == 0 {
        0.0
    } else {
        pool.total_wall_area() * k_bdry as f64 / pool.len() as f64
    };
    Ok(ControlVolume {
        center: *center,
        radius,
        sphere_samples,
        boundary_samples,
        n_sphere_draws,
        n_pool: pool.len(),
        area_sphere,
        area_boundary,
    })
}

/// Two-part area-weighted Monte Carlo surface integral of a scalar
/// integrand. An empty component contributes zero.
pub fn surface_integral<F>(cv: &ControlVolume, mut integrand: F) -> Result<f64>
where
    F: FnMut(&Vec3, &Vec3) -> f64,
{
    let mut total = 0.0;
    for (samples, area, part) in [
        (&cv.sphere_samples, cv.area_sphere, "sphere"),
        (&cv.boundary_samples, cv.area_boundary, "boundary"),
    ] {
        if samples.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        for s in samples.iter() {
            let g = integrand(&s.position, &s.normal);
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "integrand returned non-finite value at {part} sample {:?}",
                    s.position.as_slice()
                )));
            }
            sum += g;
        }
        total += area * sum / samples.len() as f64;
    }
    Ok(total)
}

/// Component-wise vector form of [`surface_integral`].
pub fn surface_integral_vec<F>(cv: &ControlVolume, mut integrand: F) -> Result<Vec3>
where
    F: FnMut(&Vec3, &Vec3) -> Vec3,
{
    let mut total = Vec3::zeros();
    for (samples, area, part) in [
        (&cv.sphere_samples, cv.area_sphere, "sphere"),
        (&cv.boundary_samples, cv.area_boundary, "boundary"),
    ] {
        if samples.is_empty() {
            continue;
        }
        let mut sum = Vec3::zeros();
        for s in samples.iter() {
            let g = integrand(&s.position, &s.normal);
            if !(g.x.is_finite() && g.y.is_finite() && g.z.is_finite()) {
                return Err(Error::Numeric(format!(
                    "integrand returned non-finite value at {part} sample {:?}",
                    s.position.as_slice()
                )));
            }
            sum += g;
        }
        total += area * sum / samples.len() as f64;
    }
    Ok(total)
}

/// Standard error of the two-part estimator from per-part sample variances:
/// sqrt(A_sph^2 s_sph^2 / K_sph + A_bdry^2 s_bdry^2 / K_bdry). Parts with
/// fewer than two samples contribute zero.
pub fn mc_error_estimate<F>(cv: &ControlVolume, mut integrand: F) -> Result<f64>
where
    F: FnMut(&Vec3, &Vec3) -> f64,
{
    let mut var = 0.0;
    for (samples, area) in [
        (&cv.sphere_samples, cv.area_sphere),
        (&cv.boundary_samples, cv.area_boundary),
    ] {
        let k = samples.len();
        if k < 2 {
            continue;
        }
        let values: Vec<f64> = samples.iter().map(|s| integrand(&s.position, &s.normal)).collect();
        let mean = values.iter().sum::<f64>() / k as f64;
        let s2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k as f64 - 1.0);
        var += area * area * s2 / k as f64;
    }
    if !var.is_finite() {
        return Err(Error::Numeric("mc_error_estimate: non-finite variance".into()));
    }
    Ok(var.sqrt())
}

/// Per-component standard errors for a vector integrand.
pub fn mc_error_estimate_vec<F>(cv: &ControlVolume, mut integrand: F) -> Result<Vec3>
where
    F: FnMut(&Vec3, &Vec3) -> Vec3,
{
    let mut var = Vec3::zeros();
    for (samples, area) in [
        (&cv.sphere_samples, cv.area_sphere),
        (&cv.boundary_samples, cv.area_boundary),
    ] {
        let k = samples.len();
        if k < 2 {
            continue;
        }
        let values: Vec<Vec3> = samples.iter().map(|s| integrand(&s.position, &s.normal)).collect();
        let mean = values.iter().sum::<Vec3>() / k as f64;
        for c in 0..3 {
            let s2 = values.iter().map(|v| (v[c] - mean[c]).powi(2)).sum::<f64>() / (k as f64 - 1.0);
            var[c] += area * area * s2 / k as f64;
        }
    }
    Ok(Vec3::new(var.x.sqrt(), var.y.sqrt(), var.z.sqrt()))
}

/// Write a set of control volumes as CSV
/// (`cx,cy,cz,r,K_sph,K_bdry,A_sph,A_bdry`).
pub fn write_cvs_csv<W: Write>(cvs: &[ControlVolume], w: &mut W) -> Result<()> {
    writeln!(w, "cx,cy,cz,r,K_sph,K_bdry,A_sph,A_bdry")?;
    for cv in cvs {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            cv.center.x,
            cv.center.y,
            cv.center.z,
            cv.radius,
            cv.k_sphere(),
            cv.k_boundary(),
            cv.area_sphere,
            cv.area_boundary
        )?;
    }
    Ok(())
}
