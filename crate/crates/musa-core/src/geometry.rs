//! Implicit representation of the fluid domain.
//!
//! A [`LevelSetGeometry`] is a closed-form level-set function restricted to
//! an axis-aligned bounding box. The fluid occupies one sign of the level
//! set (default negative) intersected with the box. The streamwise x faces
//! of the box are the inlet (min x) and outlet (max x); the level-set zero
//! surface and, optionally, the lateral box faces are no-slip walls.
//!
//! All samplers draw from an explicit seeded RNG so concurrent callers can
//! partition seeds.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::TAU;
use std::io::Write;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::Vec3;

/// Boundary-fit tolerance: wall samples satisfy `|phi| < EPS_BDRY`.
pub const EPS_BDRY: f64 = 1e-8;

/// Half-width (in distance units) of the co-area shell used for the wall
/// area estimate.
const COAREA_DELTA: f64 = 1e-3;
const COAREA_SAMPLES: usize = 4_000_000;
const FACE_AREA_SAMPLES: usize = 200_000;
/// Fixed internal seed: the cached wall area must be a pure function of the
/// geometry so that runs are reproducible.
const AREA_SEED: u64 = 0xA8EA_5EED;

const NEWTON_MAX_ITERS: usize = 20;
const FOOT_POINT_ITERS: usize = 30;
/// Ray-march step = min box extent / RAY_STEPS_PER_EXTENT.
const RAY_STEPS_PER_EXTENT: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LevelSetKind {
    Primitive,
    Gyroid,
    Diamond,
    Iwp,
    CircularPipe,
    PlaneChannel,
}

impl LevelSetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "primitive" => Ok(LevelSetKind::Primitive),
            "gyroid" => Ok(LevelSetKind::Gyroid),
            "diamond" => Ok(LevelSetKind::Diamond),
            "iwp" => Ok(LevelSetKind::Iwp),
            "circular-pipe" => Ok(LevelSetKind::CircularPipe),
            "plane-channel" => Ok(LevelSetKind::PlaneChannel),
            other => Err(Error::Config(format!(
                "unknown geometry.kind `{other}` (expected one of primitive, gyroid, \
                 diamond, iwp, circular-pipe, plane-channel)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LevelSetKind::Primitive => "primitive",
            LevelSetKind::Gyroid => "gyroid",
            LevelSetKind::Diamond => "diamond",
            LevelSetKind::Iwp => "iwp",
            LevelSetKind::CircularPipe => "circular-pipe",
            LevelSetKind::PlaneChannel => "plane-channel",
        }
    }

    /// TPMS kinds use the generic implicit-surface machinery; the pipe and
    /// plane channel have closed-form samplers and distances.
    pub fn is_tpms(&self) -> bool {
        matches!(
            self,
            LevelSetKind::Primitive | LevelSetKind::Gyroid | LevelSetKind::Diamond | LevelSetKind::Iwp
        )
    }
}

/// Which sign of the level set is fluid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FluidSign {
    Negative,
    Positive,
}

impl FluidSign {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "negative" => Ok(FluidSign::Negative),
            "positive" => Ok(FluidSign::Positive),
            other => Err(Error::Config(format!(
                "unknown geometry.fluid_sign `{other}` (expected negative or positive)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FluidSign::Negative => "negative",
            FluidSign::Positive => "positive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl BoundingBox {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        for a in 0..3 {
            if !(max[a] - min[a]).is_finite() || max[a] - min[a] <= 0.0 {
                return Err(Error::Config(format!(
                    "bounding box must have positive extent on axis {a}: [{}, {}]",
                    min[a], max[a]
                )));
            }
        }
        Ok(BoundingBox { min, max })
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn extents(&self) -> [f64; 3] {
        [self.extent(0), self.extent(1), self.extent(2)]
    }

    pub fn min_extent(&self) -> f64 {
        self.extents().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn volume(&self) -> f64 {
        self.extent(0) * self.extent(1) * self.extent(2)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    /// Distance from an interior point to the nearest box face.
    pub fn face_distance(&self, p: &Vec3) -> f64 {
        (0..3)
            .map(|a| (p[a] - self.min[a]).min(self.max[a] - p[a]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        Vec3::new(
            rng.gen_range(self.min.x..self.max.x),
            rng.gen_range(self.min.y..self.max.y),
            rng.gen_range(self.min.z..self.max.z),
        )
    }
}

/// Boundary region tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Inlet,
    Outlet,
    Wall,
}

impl Region {
    pub fn name(&self) -> &'static str {
        match self {
            Region::Inlet => "inlet",
            Region::Outlet => "outlet",
            Region::Wall => "wall",
        }
    }
}

/// A point on the domain boundary with its outward unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundarySample {
    pub position: Vec3,
    pub normal: Vec3,
    pub region: Region,
}

/// Lateral box faces that can act as walls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LateralFace {
    YMin,
    YMax,
    ZMin,
    ZMax,
}

impl LateralFace {
    fn axis(&self) -> usize {
        match self {
            LateralFace::YMin | LateralFace::YMax => 1,
            LateralFace::ZMin | LateralFace::ZMax => 2,
        }
    }

    fn outward_normal(&self) -> Vec3 {
        match self {
            LateralFace::YMin => Vec3::new(0.0, -1.0, 0.0),
            LateralFace::YMax => Vec3::new(0.0, 1.0, 0.0),
            LateralFace::ZMin => Vec3::new(0.0, 0.0, -1.0),
            LateralFace::ZMax => Vec3::new(0.0, 0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone)]
struct WallComposition {
    /// Total no-slip wall area (level-set surface + included lateral faces).
    total: f64,
    levelset: f64,
    /// Fluid-adjacent area of each included lateral face.
    faces: Vec<(LateralFace, f64)>,
    method: &'static str,
}

/// Implicit fluid domain.
#[derive(Debug)]
pub struct LevelSetGeometry {
    kind: LevelSetKind,
    bbox: BoundingBox,
    fluid_sign: FluidSign,
    pipe_radius: f64,
    lateral_walls: bool,
    eps_bdry: f64,
    wall_area: OnceLock<WallComposition>,
}

impl LevelSetGeometry {
    pub fn new(kind: LevelSetKind, bbox: BoundingBox) -> Result<Self> {
        let g = LevelSetGeometry {
            kind,
            bbox,
            fluid_sign: FluidSign::Negative,
            pipe_radius: 0.4,
            lateral_walls: true,
            eps_bdry: EPS_BDRY,
            wall_area: OnceLock::new(),
        };
        g.validate()?;
        Ok(g)
    }

    /// TPMS default: five unit cells along the streamwise direction.
    pub fn with_default_box(kind: LevelSetKind) -> Result<Self> {
        let bbox = BoundingBox::new(Vec3::zeros(), Vec3::new(5.0, 1.0, 1.0))?;
        LevelSetGeometry::new(kind, bbox)
    }

    pub fn with_fluid_sign(mut self, sign: FluidSign) -> Result<Self> {
        self.fluid_sign = sign;
        self.validate()?;
        Ok(self)
    }

    pub fn with_pipe_radius(mut self, r: f64) -> Result<Self> {
        self.pipe_radius = r;
        self.validate()?;
        Ok(self)
    }

    pub fn with_lateral_walls(mut self, on: bool) -> Self {
        self.lateral_walls = on;
        self
    }

    pub fn with_eps_bdry(mut self, eps: f64) -> Result<Self> {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::Config("eps_bdry must be positive".into()));
        }
        self.eps_bdry = eps;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            LevelSetKind::CircularPipe => {
                if !(self.pipe_radius > 0.0) {
                    return Err(Error::Config("pipe_radius must be positive".into()));
                }
                let half = 0.5 * self.bbox.extent(1).min(self.bbox.extent(2));
                if self.pipe_radius > half {
                    return Err(Error::Config(format!(
                        "pipe_radius {} exceeds half the smallest cross extent {}",
                        self.pipe_radius, half
                    )));
                }
                if self.fluid_sign == FluidSign::Positive {
                    return Err(Error::Config(
                        "fluid_sign = positive is not supported for circular-pipe".into(),
                    ));
                }
            }
            LevelSetKind::PlaneChannel => {
                if self.fluid_sign == FluidSign::Positive {
                    return Err(Error::Config(
                        "fluid_sign = positive is not supported for plane-channel".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn kind(&self) -> LevelSetKind {
        self.kind
    }

    pub fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    pub fn fluid_sign(&self) -> FluidSign {
        self.fluid_sign
    }

    pub fn pipe_radius(&self) -> f64 {
        self.pipe_radius
    }

    pub fn lateral_walls(&self) -> bool {
        self.lateral_walls
    }

    pub fn eps_bdry(&self) -> f64 {
        self.eps_bdry
    }

    /// Axis center of the pipe / channel cross-section.
    pub fn cross_center(&self) -> (f64, f64) {
        (
            0.5 * (self.bbox.min.y + self.bbox.max.y),
            0.5 * (self.bbox.min.z + self.bbox.max.z),
        )
    }

    /// Stable hash of the geometric description (FNV-1a over the canonical
    /// field string); recorded in run manifests.
    pub fn description_hash(&self) -> u64 {
        let desc = format!(
            "{};{:?};{:?};{:?};{};{}",
            self.kind.name(),
            self.bbox.min.as_slice(),
            self.bbox.max.as_slice(),
            self.fluid_sign.name(),
            self.pipe_radius,
            self.lateral_walls,
        );
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in desc.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }

    // ------------------------------------------------------------------
    // Level set and derivatives
    // ------------------------------------------------------------------

    /// Closed-form level-set value at `p`.
    pub fn level_set(&self, p: &Vec3) -> f64 {
        let (x, y, z) = (p.x, p.y, p.z);
        match self.kind {
            LevelSetKind::Primitive => {
                (TAU * x).cos() + (TAU * y).cos() + (TAU * z).cos()
            }
            LevelSetKind::Gyroid => {
                (TAU * x).sin() * (TAU * y).cos()
                    + (TAU * y).sin() * (TAU * z).cos()
                    + (TAU * z).sin() * (TAU * x).cos()
            }
            LevelSetKind::Diamond => {
                let (sx, cx) = (TAU * x).sin_cos();
                let (sy, cy) = (TAU * y).sin_cos();
                let (sz, cz) = (TAU * z).sin_cos();
                sx * sy * sz + sx * cy * cz + cx * sy * cz + cx * cy * sz
            }
            LevelSetKind::Iwp => {
                let cx = (TAU * x).cos();
                let cy = (TAU * y).cos();
                let cz = (TAU * z).cos();
                2.0 * (cx * cy + cy * cz + cz * cx)
                    - ((2.0 * TAU * x).cos() + (2.0 * TAU * y).cos() + (2.0 * TAU * z).cos())
            }
            LevelSetKind::CircularPipe => {
                let (cy, cz) = self.cross_center();
                (y - cy).powi(2) + (z - cz).powi(2) - self.pipe_radius.powi(2)
            }
            LevelSetKind::PlaneChannel => {
                let cy = 0.5 * (self.bbox.min.y + self.bbox.max.y);
                let half = 0.5 * self.bbox.extent(1);
                (y - cy).powi(2) - half.powi(2)
            }
        }
    }

    /// Analytic gradient of [`Self::level_set`].
    pub fn level_set_gradient(&self, p: &Vec3) -> Vec3 {
        let (x, y, z) = (p.x, p.y, p.z);
        match self.kind {
            LevelSetKind::Primitive => Vec3::new(
                -TAU * (TAU * x).sin(),
                -TAU * (TAU * y).sin(),
                -TAU * (TAU * z).sin(),
            ),
            LevelSetKind::Gyroid => {
                let (sx, cx) = (TAU * x).sin_cos();
                let (sy, cy) = (TAU * y).sin_cos();
                let (sz, cz) = (TAU * z).sin_cos();
                Vec3::new(
                    TAU * (cx * cy - sz * sx),
                    TAU * (-sx * sy + cy * cz),
                    TAU * (-sy * sz + cz * cx),
                )
            }
            LevelSetKind::Diamond => {
                let (sx, cx) = (TAU * x).sin_cos();
                let (sy, cy) = (TAU * y).sin_cos();
                let (sz, cz) = (TAU * z).sin_cos();
                Vec3::new(
                    TAU * (cx * sy * sz + cx * cy * cz - sx * sy * cz - sx * cy * sz),
                    TAU * (sx * cy * sz - sx * sy * cz + cx * cy * cz - cx * sy * sz),
                    TAU * (sx * sy * cz - sx * cy * sz - cx * sy * sz + cx * cy * cz),
                )
            }
            LevelSetKind::Iwp => {
                let (sx, cx) = (TAU * x).sin_cos();
                let (sy, cy) = (TAU * y).sin_cos();
                let (sz, cz) = (TAU * z).sin_cos();
                Vec3::new(
                    TAU * (-2.0 * sx * (cy + cz) + 2.0 * (2.0 * TAU * x).sin()),
                    TAU * (-2.0 * sy * (cx + cz) + 2.0 * (2.0 * TAU * y).sin()),
                    TAU * (-2.0 * sz * (cx + cy) + 2.0 * (2.0 * TAU * z).sin()),
                )
            }
            LevelSetKind::CircularPipe => {
                let (cy, cz) = self.cross_center();
                Vec3::new(0.0, 2.0 * (y - cy), 2.0 * (z - cz))
            }
            LevelSetKind::PlaneChannel => {
                let cy = 0.5 * (self.bbox.min.y + self.bbox.max.y);
                Vec3::new(0.0, 2.0 * (y - cy), 0.0)
            }
        }
    }

    /// Level set oriented so the fluid is the negative side.
    fn oriented(&self, p: &Vec3) -> f64 {
        match self.fluid_sign {
            FluidSign::Negative => self.level_set(p),
            FluidSign::Positive => -self.level_set(p),
        }
    }

    /// Unit normal of the level-set surface pointing out of the fluid.
    pub fn wall_normal(&self, p: &Vec3) -> Vec3 {
        let g = self.level_set_gradient(p);
        let n = g / g.norm();
        match self.fluid_sign {
            FluidSign::Negative => n,
            FluidSign::Positive => -n,
        }
    }

    /// True iff `p` is inside the bounding box and on the fluid side of the
    /// level set.
    pub fn contains(&self, p: &Vec3) -> bool {
        self.bbox.contains(p) && self.oriented(p) < 0.0
    }

    /// Fluid predicate on a boundary plane (box membership is not required,
    /// so points exactly on a face can be classified).
    fn fluid_side(&self, p: &Vec3) -> bool {
        self.oriented(p) < 0.0
    }

    /// Membership predicate of a declared boundary region, used to validate
    /// sampler output.
    pub fn on_region(&self, p: &Vec3, region: Region) -> bool {
        match region {
            Region::Inlet => (p.x - self.bbox.min.x).abs() <= self.eps_bdry && self.fluid_side(p),
            Region::Outlet => (p.x - self.bbox.max.x).abs() <= self.eps_bdry && self.fluid_side(p),
            Region::Wall => {
                if self.level_set(p).abs() < self.eps_bdry {
                    return true;
                }
                if !self.lateral_walls && !matches!(self.kind, LevelSetKind::PlaneChannel) {
                    return false;
                }
                let on_lateral = (p.y - self.bbox.min.y).abs() <= self.eps_bdry
                    || (p.y - self.bbox.max.y).abs() <= self.eps_bdry
                    || (p.z - self.bbox.min.z).abs() <= self.eps_bdry
                    || (p.z - self.bbox.max.z).abs() <= self.eps_bdry;
                on_lateral && self.fluid_side(p)
            }
        }
    }

    // ------------------------------------------------------------------
    // Projection and distance queries
    // ------------------------------------------------------------------

    /// Newton-project `p` onto the level-set zero surface. Returns `None`
    /// when the iteration fails to reach `|phi| < eps` within
    /// `NEWTON_MAX_ITERS`.
    pub fn project_to_surface(&self, p: &Vec3) -> Option<Vec3> {
        let mut q = *p;
        for _ in 0..NEWTON_MAX_ITERS {
            let phi = self.level_set(&q);
            if phi.abs() < self.eps_bdry {
                return Some(q);
            }
            let g = self.level_set_gradient(&q);
            let g2 = g.norm_squared();
            if g2 < 1e-30 {
                return None;
            }
            q -= g * (phi / g2);
        }
        if self.level_set(&q).abs() < self.eps_bdry {
            Some(q)
        } else {
            None
        }
    }

    /// Nearest point on the level-set surface: Newton projection followed by
    /// a damped tangential foot-point refinement.
    fn foot_point(&self, p: &Vec3) -> Option<(Vec3, f64)> {
        let mut q = self.project_to_surface(p)?;
        for _ in 0..FOOT_POINT_ITERS {
            let g = self.level_set_gradient(&q);
            let n = g / g.norm();
            let d = p - q;
            let tangential = d - n * d.dot(&n);
            if tangential.norm() < 1e-12 {
                break;
            }
            match self.project_to_surface(&(q + tangential * 0.8)) {
                Some(next) => q = next,
                None => break,
            }
        }
        Some((q, (p - q).norm()))
    }

    /// Distance from an interior point to the domain boundary (wall surface
    /// or any box face).
    pub fn distance_to_boundary(&self, p: &Vec3) -> Result<f64> {
        if !self.contains(p) {
            return Err(Error::Geometry(format!(
                "distance_to_boundary: point {:?} is outside the fluid",
                p.as_slice()
            )));
        }
        Ok(self.distance_to_boundary_unchecked(p))
    }

    fn distance_to_boundary_unchecked(&self, p: &Vec3) -> f64 {
        let d_box = self.bbox.face_distance(p);
        match self.kind {
            LevelSetKind::CircularPipe => {
                let (cy, cz) = self.cross_center();
                let rho = ((p.y - cy).powi(2) + (p.z - cz).powi(2)).sqrt();
                (self.pipe_radius - rho)
                    .min(p.x - self.bbox.min.x)
                    .min(self.bbox.max.x - p.x)
            }
            LevelSetKind::PlaneChannel => d_box,
            _ => match self.foot_point(p) {
                Some((_, d)) => d.min(d_box),
                None => d_box,
            },
        }
    }

    /// Generic (projection-based) distance path, exposed so the closed
    /// forms can be cross-checked against it.
    pub fn distance_to_boundary_generic(&self, p: &Vec3) -> Result<f64> {
        if !self.contains(p) {
            return Err(Error::Geometry("point outside fluid".into()));
        }
        let d_box = self.bbox.face_distance(p);
        let d_ls = match self.kind {
            LevelSetKind::PlaneChannel => {
                // The plates coincide with the y faces; the projection target
                // is the nearer plate.
                let cy = 0.5 * (self.bbox.min.y + self.bbox.max.y);
                0.5 * self.bbox.extent(1) - (p.y - cy).abs()
            }
            _ => self.foot_point(p).map(|(_, d)| d).unwrap_or(f64::INFINITY),
        };
        Ok(d_ls.min(d_box))
    }

    // ------------------------------------------------------------------
    // Wall area
    // ------------------------------------------------------------------

    fn wall_composition(&self) -> &WallComposition {
        self.wall_area.get_or_init(|| self.compute_wall_composition())
    }

    /// Total no-slip wall area (inlet/outlet planes excluded).
    pub fn wall_area(&self) -> f64 {
        self.wall_composition().total
    }

    /// How the wall area was obtained ("analytic" or "coarea-mc"); recorded
    /// in run metadata.
    pub fn wall_area_method(&self) -> &'static str {
        self.wall_composition().method
    }

    fn compute_wall_composition(&self) -> WallComposition {
        match self.kind {
            LevelSetKind::CircularPipe => {
                let a = TAU * self.pipe_radius * self.bbox.extent(0);
                WallComposition {
                    total: a,
                    levelset: a,
                    faces: Vec::new(),
                    method: "analytic",
                }
            }
            LevelSetKind::PlaneChannel => {
                let plates = 2.0 * self.bbox.extent(0) * self.bbox.extent(2);
                let mut faces = Vec::new();
                if self.lateral_walls {
                    let a = self.bbox.extent(0) * self.bbox.extent(1);
                    faces.push((LateralFace::ZMin, a));
                    faces.push((LateralFace::ZMax, a));
                }
                let total = plates + faces.iter().map(|(_, a)| a).sum::<f64>();
                WallComposition {
                    total,
                    levelset: plates,
                    faces,
                    method: "analytic",
                }
            }
            _ => {
                let levelset = self.coarea_levelset_area();
                let mut faces = Vec::new();
                if self.lateral_walls {
                    for (i, face) in [
                        LateralFace::YMin,
                        LateralFace::YMax,
                        LateralFace::ZMin,
                        LateralFace::ZMax,
                    ]
                    .into_iter()
                    .enumerate()
                    {
                        let a = self.lateral_face_fluid_area(face, i as u64);
                        if a > 0.0 {
                            faces.push((face, a));
                        }
                    }
                }
                let total = levelset + faces.iter().map(|(_, a)| a).sum::<f64>();
                WallComposition {
                    total,
                    levelset,
                    faces,
                    method: "coarea-mc",
                }
            }
        }
    }

    /// Monte Carlo co-area estimate of the level-set surface area inside the
    /// box: A ~ V/(2 delta) * P(|phi| / |grad phi| < delta).
    fn coarea_levelset_area(&self) -> f64 {
        let chunk = 65_536;
        let n_chunks = COAREA_SAMPLES / chunk;
        let hits: u64 = (0..n_chunks)
            .into_par_iter()
            .map(|ci| {
                let mut rng = crate::seeds::rng(crate::seeds::substream(AREA_SEED, ci as u64));
                let mut h = 0u64;
                for _ in 0..chunk {
                    let p = self.bbox.sample(&mut rng);
                    let g = self.level_set_gradient(&p).norm();
                    if g > 1e-12 && self.level_set(&p).abs() / g < COAREA_DELTA {
                        h += 1;
                    }
                }
                h
            })
            .sum();
        let frac = hits as f64 / (n_chunks * chunk) as f64;
        self.bbox.volume() * frac / (2.0 * COAREA_DELTA)
    }

    fn lateral_face_fluid_area(&self, face: LateralFace, salt: u64) -> f64 {
        let mut rng = crate::seeds::rng(crate::seeds::substream(AREA_SEED ^ 0x0FACE, salt));
        let mut hits = 0usize;
        for _ in 0..FACE_AREA_SAMPLES {
            let p = self.sample_on_lateral_face(face, &mut rng);
            if self.fluid_side(&p) {
                hits += 1;
            }
        }
        let full = match face.axis() {
            1 => self.bbox.extent(0) * self.bbox.extent(2),
            _ => self.bbox.extent(0) * self.bbox.extent(1),
        };
        full * hits as f64 / FACE_AREA_SAMPLES as f64
    }

    fn sample_on_lateral_face(&self, face: LateralFace, rng: &mut ChaCha8Rng) -> Vec3 {
        let x = rng.gen_range(self.bbox.min.x..self.bbox.max.x);
        match face {
            LateralFace::YMin => Vec3::new(x, self.bbox.min.y, rng.gen_range(self.bbox.min.z..self.bbox.max.z)),
            LateralFace::YMax => Vec3::new(x, self.bbox.max.y, rng.gen_range(self.bbox.min.z..self.bbox.max.z)),
            LateralFace::ZMin => Vec3::new(x, rng.gen_range(self.bbox.min.y..self.bbox.max.y), self.bbox.min.z),
            LateralFace::ZMax => Vec3::new(x, rng.gen_range(self.bbox.min.y..self.bbox.max.y), self.bbox.max.z),
        }
    }

    // ------------------------------------------------------------------
    // Boundary sampling
    // ------------------------------------------------------------------

    /// Draw `count` approximately area-uniform wall samples with outward
    /// normals.
    ///
    /// Pipe and plane-channel walls are sampled from exact closed-form
    /// parameterizations. TPMS walls are sampled by marching random chords
    /// through the box for level-set sign changes and Newton-projecting each
    /// bracket onto the surface; chords are weighted by the line measure
    /// through the box, which is area-uniform up to a chord-length bias that
    /// is small for these periodic surfaces.
    pub fn sample_wall_surface(&self, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<BoundarySample>> {
        if count == 0 {
            return Err(Error::Config("sample_wall_surface: count must be >= 1".into()));
        }
        let comp = self.wall_composition().clone();
        if !(comp.total > 0.0) {
            return Err(Error::Geometry("wall surface has zero area".into()));
        }
        let mut out = Vec::with_capacity(count);
        let mut failures = 0usize;
        let budget = 50 * count + 10_000;
        while out.len() < count {
            if failures > budget {
                return Err(Error::Sampling(format!(
                    "wall sampler failed to collect {count} samples within budget"
                )));
            }
            // Pick the component in proportion to its area.
            let pick = rng.gen_range(0.0..comp.total);
            if pick < comp.levelset {
                match self.sample_levelset_wall(rng) {
                    Some(s) => out.push(s),
                    None => failures += 1,
                }
            } else {
                let mut acc = comp.levelset;
                let mut chosen = None;
                for (face, a) in &comp.faces {
                    acc += a;
                    if pick < acc {
                        chosen = Some(*face);
                        break;
                    }
                }
                let face = chosen.unwrap_or(comp.faces[comp.faces.len() - 1].0);
                let p = self.sample_on_lateral_face(face, rng);
                if self.fluid_side(&p) {
                    out.push(BoundarySample {
                        position: p,
                        normal: face.outward_normal(),
                        region: Region::Wall,
                    });
                } else {
                    failures += 1;
                }
            }
        }
        Ok(out)
    }

    fn sample_levelset_wall(&self, rng: &mut ChaCha8Rng) -> Option<BoundarySample> {
        match self.kind {
            LevelSetKind::CircularPipe => {
                let theta = rng.gen_range(0.0..TAU);
                let x = rng.gen_range(self.bbox.min.x..self.bbox.max.x);
                let (cy, cz) = self.cross_center();
                let (s, c) = theta.sin_cos();
                Some(BoundarySample {
                    position: Vec3::new(x, cy + self.pipe_radius * c, cz + self.pipe_radius * s),
                    normal: Vec3::new(0.0, c, s),
                    region: Region::Wall,
                })
            }
            LevelSetKind::PlaneChannel => {
                let x = rng.gen_range(self.bbox.min.x..self.bbox.max.x);
                let z = rng.gen_range(self.bbox.min.z..self.bbox.max.z);
                let top = rng.gen_bool(0.5);
                let (y, ny) = if top {
                    (self.bbox.max.y, 1.0)
                } else {
                    (self.bbox.min.y, -1.0)
                };
                Some(BoundarySample {
                    position: Vec3::new(x, y, z),
                    normal: Vec3::new(0.0, ny, 0.0),
                    region: Region::Wall,
                })
            }
            _ => self.sample_tpms_wall(rng),
        }
    }

    /// One random chord through the box; returns the first usable surface
    /// crossing. Crossings beyond the first on the same chord are
    /// deliberately not reused so successive samples stay independent.
    fn sample_tpms_wall(&self, rng: &mut ChaCha8Rng) -> Option<BoundarySample> {
        let a = self.bbox.sample(rng);
        let dir = random_unit(rng);
        let t_exit = ray_box_exit(&self.bbox, &a, &dir);
        if !(t_exit > 0.0) {
            return None;
        }
        let dt = self.bbox.min_extent() / RAY_STEPS_PER_EXTENT;
        let steps = (t_exit / dt).ceil() as usize;
        // Start the scan at a random crossing index so early crossings are
        // not favored.
        let mut crossings: Vec<(f64, f64, f64, f64)> = Vec::new();
        let mut t_prev = 0.0;
        let mut phi_prev = self.level_set(&a);
        for k in 1..=steps {
            let t = (k as f64 * dt).min(t_exit);
            let p = a + dir * t;
            let phi = self.level_set(&p);
            if phi_prev.signum() != phi.signum() && phi_prev != 0.0 {
                crossings.push((t_prev, t, phi_prev, phi));
            }
            t_prev = t;
            phi_prev = phi;
        }
        if crossings.is_empty() {
            return None;
        }
        let (mut lo, mut hi, mut phi_lo, _) = crossings[rng.gen_range(0..crossings.len())];
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            let phi_mid = self.level_set(&(a + dir * mid));
            if phi_mid == 0.0 {
                lo = mid;
                break;
            }
            if phi_mid.signum() == phi_lo.signum() {
                lo = mid;
                phi_lo = phi_mid;
            } else {
                hi = mid;
            }
        }
        let q = self.project_to_surface(&(a + dir * (0.5 * (lo + hi))))?;
        if !self.bbox.contains(&q) {
            return None;
        }
        Some(BoundarySample {
            position: q,
            normal: self.wall_normal(&q),
            region: Region::Wall,
        })
    }

    /// Uniform samples on the fluid part of the inlet or outlet plane.
    pub fn sample_inlet_outlet(
        &self,
        count: usize,
        region: Region,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<BoundarySample>> {
        let (x, normal) = match region {
            Region::Inlet => (self.bbox.min.x, Vec3::new(-1.0, 0.0, 0.0)),
            Region::Outlet => (self.bbox.max.x, Vec3::new(1.0, 0.0, 0.0)),
            Region::Wall => {
                return Err(Error::Config(
                    "sample_inlet_outlet: region must be inlet or outlet".into(),
                ))
            }
        };
        let mut out = Vec::with_capacity(count);
        let budget = 10_000 * count.max(1);
        for attempt in 0..budget {
            if out.len() == count {
                break;
            }
            let p = Vec3::new(
                x,
                rng.gen_range(self.bbox.min.y..self.bbox.max.y),
                rng.gen_range(self.bbox.min.z..self.bbox.max.z),
            );
            if self.fluid_side(&p) {
                out.push(BoundarySample {
                    position: p,
                    normal,
                    region,
                });
            }
            // Detect an empty cross-section early.
            if attempt == 9_999 && out.is_empty() {
                return Err(Error::Geometry(format!(
                    "{} cross-section appears empty (no fluid point accepted)",
                    region.name()
                )));
            }
        }
        if out.len() < count {
            return Err(Error::Sampling(format!(
                "{} sampler collected {} of {} samples within budget",
                region.name(),
                out.len(),
                count
            )));
        }
        Ok(out)
    }

    /// Fraction of plane-face candidates that land in the fluid; measured by
    /// the same predicate the samplers use.
    pub fn cross_section_fluid_fraction(&self, x: f64, grid: usize) -> f64 {
        let mut hits = 0usize;
        for iy in 0..grid {
            for iz in 0..grid {
                let y = self.bbox.min.y + (iy as f64 + 0.5) / grid as f64 * self.bbox.extent(1);
                let z = self.bbox.min.z + (iz as f64 + 0.5) / grid as f64 * self.bbox.extent(2);
                if self.fluid_side(&Vec3::new(x, y, z)) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (grid * grid) as f64
    }

    /// Rejection-sample `count` interior fluid points.
    pub fn sample_interior(&self, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec3>> {
        let mut out = Vec::with_capacity(count);
        let mut draws = 0u64;
        let min_ratio = 1e-4;
        let check_at = 100_000u64;
        loop {
            if out.len() == count {
                return Ok(out);
            }
            draws += 1;
            let p = self.bbox.sample(rng);
            if self.contains(&p) {
                out.push(p);
            }
            if draws >= check_at && (out.len() as f64) < min_ratio * draws as f64 {
                return Err(Error::Geometry(format!(
                    "interior sampler acceptance ratio below {min_ratio} after {draws} draws"
                )));
            }
        }
    }
}

/// Hydraulic diameter of a cross-section: 4 * area / perimeter.
pub fn hydraulic_diameter(area: f64, perimeter: f64) -> Result<f64> {
    if !(area > 0.0) || !(perimeter > 0.0) {
        return Err(Error::Numeric(
            "hydraulic_diameter: area and perimeter must be positive".into(),
        ));
    }
    Ok(4.0 * area / perimeter)
}

/// Reynolds number U0 * L0 / nu.
pub fn reynolds(u0: f64, l0: f64, nu: f64) -> Result<f64> {
    if !(nu > 0.0) {
        return Err(Error::Numeric("reynolds: nu must be positive".into()));
    }
    Ok(u0 * l0 / nu)
}

/// Isotropic random unit vector (normalized Gaussian method).
pub fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(gaussian(rng), gaussian(rng), gaussian(rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Standard normal via Box-Muller.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Parameter along `dir` at which the ray starting at `origin` exits `bbox`
/// (origin assumed inside).
fn ray_box_exit(bbox: &BoundingBox, origin: &Vec3, dir: &Vec3) -> f64 {
    let mut t_exit = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            continue;
        }
        let t1 = (bbox.min[a] - origin[a]) / dir[a];
        let t2 = (bbox.max[a] - origin[a]) / dir[a];
        t_exit = t_exit.min(t1.max(t2));
    }
    t_exit
}

/// Write boundary samples as CSV (`x,y,z,nx,ny,nz,region`).
pub fn write_samples_csv<W: Write>(samples: &[BoundarySample], w: &mut W) -> Result<()> {
    writeln!(w, "x,y,z,nx,ny,nz,region")?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.position.x, s.position.y, s.position.z, s.normal.x, s.normal.y, s.normal.z,
            s.region.name()
        )?;
    }
    Ok(())
}
