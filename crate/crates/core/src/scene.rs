//! Scene description (triangle mesh, materials, antennas) and the procedural
//! indoor layout generator.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ga::Versor;

pub type Vec3 = Vector3<f64>;

pub const DEFAULT_FREQUENCY_HZ: f64 = 3.5e9;
/// Minimum clearance between an antenna and any face.
pub const ANTENNA_CLEARANCE_M: f64 = 0.1;
const MIN_FACE_AREA: f64 = 1e-9;
const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub name: String,
    pub eps_r: f64,
    pub sigma: f64,
    pub thickness_m: f64,
}

impl Material {
    pub fn new(name: &str, eps_r: f64, sigma: f64, thickness_m: f64) -> Self {
        Self { name: name.to_string(), eps_r, sigma, thickness_m }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_r >= 1.0 && self.sigma >= 0.0 && self.thickness_m > 0.0) {
            return Err(Error::Argument(format!("invalid material {self:?}")));
        }
        Ok(())
    }
}

/// Indices into [`standard_materials`].
pub mod material_index {
    pub const CEILING_BOARD: usize = 0;
    pub const FLOOR_BOARD: usize = 1;
    pub const CONCRETE: usize = 2;
    pub const DRYWALL: usize = 3;
    pub const WOOD: usize = 4;
    pub const GLASS: usize = 5;
}

/// Building materials used by the generator, in a fixed order.
///
/// The layered drywall (two 1.3 cm boards around an 8.9 cm air gap) is
/// represented by its two lossy boards only; the air gap neither attenuates
/// nor reflects in the single-slab model.
pub fn standard_materials() -> Vec<Material> {
    vec![
        Material::new("ITU Ceiling Board", 1.5, 0.002148, 0.0095),
        Material::new("ITU Floor Board", 3.66, 0.02392, 0.03),
        Material::new("Concrete", 7.0, 0.015, 0.30),
        Material::new("ITU Layered Drywall", 2.94, 0.028148, 0.026),
        Material::new("ITU Wood", 1.99, 0.017998, 0.03),
        Material::new("ITU Glass", 6.27, 0.019154, 0.003),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Face {
    pub v: [[f64; 3]; 3],
    pub material: usize,
}

impl Face {
    pub fn vertex(&self, i: usize) -> Vec3 {
        Vec3::from(self.v[i])
    }

    pub fn centroid(&self) -> Vec3 {
        (self.vertex(0) + self.vertex(1) + self.vertex(2)) / 3.0
    }

    /// Unnormalized normal following the vertex winding.
    pub fn cross(&self) -> Vec3 {
        (self.vertex(1) - self.vertex(0)).cross(&(self.vertex(2) - self.vertex(0)))
    }

    pub fn area(&self) -> f64 {
        0.5 * self.cross().norm()
    }

    /// Unit normal and offset `d` with `n·x = d` on the face plane.
    pub fn plane(&self) -> (Vec3, f64) {
        let n = self.cross().normalize();
        (n, n.dot(&self.vertex(0)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Antenna {
    pub pos: [f64; 3],
    pub ori: [f64; 3],
}

impl Antenna {
    pub fn position(&self) -> Vec3 {
        Vec3::from(self.pos)
    }

    pub fn orientation(&self) -> Vec3 {
        Vec3::from(self.ori)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub frequency_hz: f64,
    pub materials: Vec<Material>,
    pub faces: Vec<Face>,
    pub tx: Vec<Antenna>,
    pub rx: Vec<Antenna>,
}

fn finite3(p: &[f64; 3]) -> bool {
    p.iter().all(|x| x.is_finite())
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency_hz > 0.0 && self.frequency_hz.is_finite()) {
            return Err(Error::Argument(format!("frequency must be positive, got {}", self.frequency_hz)));
        }
        for m in &self.materials {
            m.validate()?;
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f.material >= self.materials.len() {
                return Err(Error::Format(format!("face {i} references missing material {}", f.material)));
            }
            if !f.v.iter().all(finite3) {
                return Err(Error::Format(format!("face {i} has non-finite vertices")));
            }
            if f.area() <= MIN_FACE_AREA {
                return Err(Error::Degenerate(format!("face {i} has area {:.3e} m²", f.area())));
            }
        }
        for (kind, list) in [("tx", &self.tx), ("rx", &self.rx)] {
            for (i, a) in list.iter().enumerate() {
                if !finite3(&a.pos) {
                    return Err(Error::Format(format!("{kind} {i} has a non-finite position")));
                }
                if (a.orientation().norm() - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(Error::Format(format!("{kind} {i} orientation is not unit length")));
                }
            }
        }
        Ok(())
    }

    /// The scene restricted to one transmitter and the given receiver.
    pub fn link(&self, tx_idx: usize, rx: Antenna) -> Result<Scene> {
        let tx = *self
            .tx
            .get(tx_idx)
            .ok_or_else(|| Error::Argument(format!("tx index {tx_idx} out of range ({} tx)", self.tx.len())))?;
        Ok(Scene { tx: vec![tx], rx: vec![rx], ..self.clone() })
    }

    /// Axis-aligned bounds of the mesh (or of the antennas for an empty mesh).
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        let mut grow = |p: Vec3| {
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        };
        if self.faces.is_empty() {
            self.tx.iter().chain(&self.rx).for_each(|a| grow(a.position()));
        } else {
            for f in &self.faces {
                (0..3).for_each(|i| grow(f.vertex(i)));
            }
        }
        (lo, hi)
    }

    /// Applies a Euclidean motion to every vertex and antenna.
    pub fn transformed(&self, g: &Versor) -> Scene {
        let point = |p: [f64; 3]| g.transform_point(p);
        let dir = |d: [f64; 3]| g.transform_direction(d);
        let ant = |a: &Antenna| Antenna { pos: point(a.pos), ori: dir(a.ori) };
        Scene {
            frequency_hz: self.frequency_hz,
            materials: self.materials.clone(),
            faces: self
                .faces
                .iter()
                .map(|f| Face { v: [point(f.v[0]), point(f.v[1]), point(f.v[2])], material: f.material })
                .collect(),
            tx: self.tx.iter().map(ant).collect(),
            rx: self.rx.iter().map(ant).collect(),
        }
    }

    /// Smallest distance from `p` to any face.
    pub fn clearance(&self, p: &Vec3) -> f64 {
        self.faces
            .iter()
            .map(|f| point_triangle_distance(p, &f.vertex(0), &f.vertex(1), &f.vertex(2)))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Euclidean distance between a point and a triangle.
pub fn point_triangle_distance(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let (ab, ac, ap) = (b - a, c - a, p - a);
    let (d1, d2) = (ab.dot(&ap), ac.dot(&ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let (d3, d4) = (ab.dot(&bp), ac.dot(&bp));
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (p - (a + ab * v)).norm();
    }
    let cp = p - c;
    let (d5, d6) = (ab.dot(&cp), ac.dot(&cp));
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (p - (a + ac * w)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let (v, w) = (vb * denom, vc * denom);
    (p - (a + ab * v + ac * w)).norm()
}

/// Bounds and materials of procedurally generated floor plans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub rooms_min: usize,
    pub rooms_max: usize,
    pub room_width_m: (f64, f64),
    pub room_depth_m: (f64, f64),
    pub height_m: (f64, f64),
    pub door_width_m: f64,
    pub door_height_m: f64,
    /// Largest allowed building extent along x, y, z.
    pub bounds_m: [f64; 3],
    pub exterior_material: usize,
    pub interior_material: usize,
    pub floor_material: usize,
    pub ceiling_material: usize,
    pub exterior_thickness_m: Option<f64>,
    pub interior_thickness_m: Option<f64>,
    pub tx_per_scene: usize,
    pub rx_per_scene: usize,
    pub frequency_hz: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        use material_index::*;
        Self {
            rooms_min: 1,
            rooms_max: 3,
            room_width_m: (3.0, 5.0),
            room_depth_m: (3.0, 5.0),
            height_m: (2.5, 3.0),
            door_width_m: 0.9,
            door_height_m: 2.1,
            bounds_m: [16.0, 6.0, 3.5],
            exterior_material: CONCRETE,
            interior_material: DRYWALL,
            floor_material: CONCRETE,
            ceiling_material: CONCRETE,
            exterior_thickness_m: None,
            interior_thickness_m: None,
            tx_per_scene: 5,
            rx_per_scene: 10,
            frequency_hz: DEFAULT_FREQUENCY_HZ,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |r: (f64, f64)| r.0 > 0.0 && r.0 <= r.1;
        if self.rooms_min == 0 || self.rooms_min > self.rooms_max {
            return Err(Error::Argument(format!("room count range {}..={}", self.rooms_min, self.rooms_max)));
        }
        if !positive(self.room_width_m) || !positive(self.room_depth_m) || !positive(self.height_m) {
            return Err(Error::Argument("room size ranges must be positive and ordered".into()));
        }
        if self.rooms_max as f64 * self.room_width_m.1 > self.bounds_m[0]
            || self.room_depth_m.1 > self.bounds_m[1]
            || self.height_m.1 > self.bounds_m[2]
        {
            return Err(Error::Argument("rooms do not fit inside the bounds".into()));
        }
        if self.door_width_m + 2.0 * ANTENNA_CLEARANCE_M >= self.room_depth_m.0 || self.door_height_m >= self.height_m.0 {
            return Err(Error::Argument("doors do not fit inside the interior walls".into()));
        }
        if 2.0 * ANTENNA_CLEARANCE_M >= self.room_width_m.0.min(self.room_depth_m.0).min(self.height_m.0) {
            return Err(Error::Argument("rooms too small for antenna clearance".into()));
        }
        let n = standard_materials().len();
        for m in [self.exterior_material, self.interior_material, self.floor_material, self.ceiling_material] {
            if m >= n {
                return Err(Error::Argument(format!("material index {m} out of range")));
            }
        }
        if !(self.frequency_hz > 0.0) {
            return Err(Error::Argument("frequency must be positive".into()));
        }
        Ok(())
    }
}

/// Two triangles covering the rectangle `a, b, c, d` (in winding order).
fn quad(a: Vec3, b: Vec3, c: Vec3, d: Vec3, material: usize) -> [Face; 2] {
    let arr = |p: Vec3| [p.x, p.y, p.z];
    [
        Face { v: [arr(a), arr(b), arr(c)], material },
        Face { v: [arr(a), arr(c), arr(d)], material },
    ]
}

/// Uniform random unit vector.
pub fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-6 {
            let u = v / n;
            return [u.x, u.y, u.z];
        }
    }
}

/// Samples a point inside `[lo, hi]` at least [`ANTENNA_CLEARANCE_M`] away from
/// every face of `scene`.
pub fn sample_free_point<R: Rng + ?Sized>(rng: &mut R, scene: &Scene, lo: Vec3, hi: Vec3) -> Result<Vec3> {
    for _ in 0..10_000 {
        let p = Vec3::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y), rng.gen_range(lo.z..hi.z));
        if scene.clearance(&p) >= ANTENNA_CLEARANCE_M {
            return Ok(p);
        }
    }
    Err(Error::Argument("could not place an antenna with the required clearance".into()))
}

/// A row of `1..=3` axis-aligned rooms along x with doors in the shared walls.
///
/// Exterior faces wind outwards; interior wall faces point along +x.
pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, spec: &GeneratorSpec) -> Result<Scene> {
    spec.validate()?;
    let rooms = rng.gen_range(spec.rooms_min..=spec.rooms_max);
    let widths: Vec<f64> = (0..rooms).map(|_| rng.gen_range(spec.room_width_m.0..=spec.room_width_m.1)).collect();
    let depth = rng.gen_range(spec.room_depth_m.0..=spec.room_depth_m.1);
    let height = rng.gen_range(spec.height_m.0..=spec.height_m.1);
    let length: f64 = widths.iter().sum();

    let mut materials = standard_materials();
    if let Some(t) = spec.exterior_thickness_m {
        materials[spec.exterior_material].thickness_m = t;
    }
    if let Some(t) = spec.interior_thickness_m {
        materials[spec.interior_material].thickness_m = t;
    }

    let p = Vec3::new;
    let (l, w, h) = (length, depth, height);
    let mut faces = Vec::new();
    faces.extend(quad(p(0., 0., 0.), p(0., w, 0.), p(l, w, 0.), p(l, 0., 0.), spec.floor_material));
    faces.extend(quad(p(0., 0., h), p(l, 0., h), p(l, w, h), p(0., w, h), spec.ceiling_material));
    let ext = spec.exterior_material;
    faces.extend(quad(p(0., 0., 0.), p(l, 0., 0.), p(l, 0., h), p(0., 0., h), ext));
    faces.extend(quad(p(0., w, 0.), p(0., w, h), p(l, w, h), p(l, w, 0.), ext));
    faces.extend(quad(p(0., 0., 0.), p(0., 0., h), p(0., w, h), p(0., w, 0.), ext));
    faces.extend(quad(p(l, 0., 0.), p(l, w, 0.), p(l, w, h), p(l, 0., h), ext));

    let mut x = 0.0;
    for &wi in &widths[..rooms - 1] {
        x += wi;
        let (dw, dh) = (spec.door_width_m, spec.door_height_m);
        let y0 = rng.gen_range(ANTENNA_CLEARANCE_M..(w - dw - ANTENNA_CLEARANCE_M));
        let y1 = y0 + dw;
        let int = spec.interior_material;
        faces.extend(quad(p(x, 0., 0.), p(x, y0, 0.), p(x, y0, h), p(x, 0., h), int));
        faces.extend(quad(p(x, y1, 0.), p(x, w, 0.), p(x, w, h), p(x, y1, h), int));
        faces.extend(quad(p(x, y0, dh), p(x, y1, dh), p(x, y1, h), p(x, y0, h), int));
    }

    let mut scene = Scene { frequency_hz: spec.frequency_hz, materials, faces, tx: Vec::new(), rx: Vec::new() };
    let m = ANTENNA_CLEARANCE_M + 1e-6;
    let (lo, hi) = (p(m, m, m), p(l - m, w - m, h - m));
    for _ in 0..spec.tx_per_scene {
        let pos = sample_free_point(rng, &scene, lo, hi)?;
        let ori = random_unit(rng);
        scene.tx.push(Antenna { pos: [pos.x, pos.y, pos.z], ori });
    }
    for _ in 0..spec.rx_per_scene {
        let pos = sample_free_point(rng, &scene, lo, hi)?;
        let ori = random_unit(rng);
        scene.rx.push(Antenna { pos: [pos.x, pos.y, pos.z], ori });
    }
    Ok(scene)
}
