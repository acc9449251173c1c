//! Image-method ray tracer over triangle meshes with Fresnel reflection and
//! single-slab transmission. Produces non-coherent received power and RMS
//! delay spread for a transmitter/receiver pair.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Material, Scene, Vec3};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;
/// Segment endpoints closer than this to a face do not count as crossings.
pub const INTERSECTION_EPS_M: f64 = 1e-9;
/// Barycentric slack for reflection points on triangle edges.
pub const BARYCENTRIC_TOL: f64 = 1e-9;
const COPLANAR_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceOptions {
    pub max_reflections: usize,
    pub max_transmissions: usize,
    /// Only the strongest paths contribute to power and delay spread.
    pub keep_paths: usize,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self { max_reflections: 3, max_transmissions: 1, keep_paths: 25 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InteractionKind {
    Reflect,
    Transmit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub face: usize,
    pub kind: InteractionKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathTrace {
    /// Interactions in order from transmitter to receiver.
    pub interactions: Vec<Interaction>,
    /// Transmitter, every interaction point, receiver.
    pub points: Vec<Vec3>,
    pub length_m: f64,
    pub delay_s: f64,
    /// Power gain `|a_p|²`.
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkResult {
    pub power_db: f64,
    pub delay_spread_s: f64,
    /// Retained paths, strongest first.
    pub paths: Vec<PathTrace>,
}

pub fn wavelength(frequency_hz: f64) -> f64 {
    SPEED_OF_LIGHT / frequency_hz
}

/// Free-space power gain `(λ / 4πd)²`.
pub fn friis_gain(distance_m: f64, frequency_hz: f64) -> f64 {
    (wavelength(frequency_hz) / (4.0 * std::f64::consts::PI * distance_m)).powi(2)
}

/// Unpolarized power reflection and slab transmission coefficients.
///
/// Reflection is the average of the TE and TM single-interface power
/// coefficients. Transmission passes two interfaces per polarization and
/// attenuates by the imaginary part of the normal propagation constant
/// across the slab thickness; multiple internal reflections are ignored.
pub fn fresnel_coefficients(material: &Material, angle: f64, frequency_hz: f64) -> Result<(f64, f64)> {
    if !(0.0..std::f64::consts::FRAC_PI_2).contains(&angle) {
        return Err(Error::Argument(format!("incidence angle {angle} outside [0, π/2)")));
    }
    Ok(fresnel_from_cos(material, angle.cos(), frequency_hz))
}

fn fresnel_from_cos(material: &Material, cos_t: f64, frequency_hz: f64) -> (f64, f64) {
    let omega = 2.0 * std::f64::consts::PI * frequency_hz;
    let eta = Complex64::new(material.eps_r, -material.sigma / (omega * VACUUM_PERMITTIVITY));
    let sin2 = 1.0 - cos_t * cos_t;
    let root = (eta - sin2).sqrt();
    let c = Complex64::new(cos_t, 0.0);
    let te = ((c - root) / (c + root)).norm_sqr();
    let tm = ((eta * c - root) / (eta * c + root)).norm_sqr();
    let k0 = omega / SPEED_OF_LIGHT;
    let absorption = (-2.0 * k0 * root.im.abs() * material.thickness_m).exp();
    let reflect = 0.5 * (te + tm);
    let transmit = 0.5 * ((1.0 - te).powi(2) + (1.0 - tm).powi(2)) * absorption;
    (reflect.clamp(0.0, 1.0), transmit.clamp(0.0, 1.0))
}

/// `10 log10 Σ gains`; `-inf` for no paths.
pub fn received_power_db(paths: &[PathTrace]) -> f64 {
    let total: f64 = paths.iter().map(|p| p.gain).sum();
    if total > 0.0 {
        10.0 * total.log10()
    } else {
        f64::NEG_INFINITY
    }
}

/// Power-weighted standard deviation of path delays.
pub fn delay_spread(paths: &[PathTrace]) -> f64 {
    let w: f64 = paths.iter().map(|p| p.gain).sum();
    if w <= 0.0 {
        return 0.0;
    }
    let m1 = paths.iter().map(|p| p.gain * p.delay_s).sum::<f64>() / w;
    let m2 = paths.iter().map(|p| p.gain * (p.delay_s - m1).powi(2)).sum::<f64>() / w;
    m2.max(0.0).sqrt()
}

struct FaceGeom {
    a: Vec3,
    e1: Vec3,
    e2: Vec3,
    n: Vec3,
    d: f64,
    /// Faces sharing a plane share an id.
    plane_id: usize,
    // barycentric helpers
    d00: f64,
    d01: f64,
    d11: f64,
    inv_den: f64,
}

impl FaceGeom {
    fn mirror(&self, p: &Vec3) -> Vec3 {
        p - self.n * (2.0 * (self.n.dot(p) - self.d))
    }

    fn contains(&self, p: &Vec3) -> bool {
        let v2 = p - self.a;
        let d20 = v2.dot(&self.e1);
        let d21 = v2.dot(&self.e2);
        let v = (self.d11 * d20 - self.d01 * d21) * self.inv_den;
        let w = (self.d00 * d21 - self.d01 * d20) * self.inv_den;
        v >= -BARYCENTRIC_TOL && w >= -BARYCENTRIC_TOL && v + w <= 1.0 + BARYCENTRIC_TOL
    }

    /// Möller–Trumbore: parameter `t ∈ [0,1]` where `o + t·dir` crosses the triangle.
    fn segment_hit(&self, o: &Vec3, dir: &Vec3) -> Option<f64> {
        let p = dir.cross(&self.e2);
        let det = self.e1.dot(&p);
        if det.abs() < 1e-15 * dir.norm() * self.e1.norm() * self.e2.norm() {
            return None;
        }
        let inv = 1.0 / det;
        let s = o - self.a;
        let u = s.dot(&p) * inv;
        if !(0.0..=1.0).contains(&u) {
            return None;
        }
        let q = s.cross(&self.e1);
        let v = dir.dot(&q) * inv;
        if v < 0.0 || u + v > 1.0 {
            return None;
        }
        let t = self.e2.dot(&q) * inv;
        (0.0..=1.0).contains(&t).then_some(t)
    }
}

/// Mirror images of one transmitter for every admissible reflection sequence.
pub struct Tracer<'a> {
    scene: &'a Scene,
    faces: Vec<FaceGeom>,
    tx: Vec3,
    /// (face sequence, image chain) with `images[0] = tx`.
    sequences: Vec<(Vec<usize>, Vec<Vec3>)>,
    opts: TraceOptions,
}

impl<'a> Tracer<'a> {
    pub fn new(scene: &'a Scene, tx: Vec3, opts: TraceOptions) -> Result<Self> {
        let faces = face_geometry(scene)?;
        let mut sequences: Vec<(Vec<usize>, Vec<Vec3>)> = vec![(Vec::new(), vec![tx])];
        let mut frontier = 0..1;
        for _ in 0..opts.max_reflections {
            let start = sequences.len();
            for idx in frontier.clone() {
                let (seq, imgs): (Vec<usize>, Vec<Vec3>) = sequences[idx].clone();
                for (f, geom) in faces.iter().enumerate() {
                    if let Some(&last) = seq.last() {
                        if faces[last].plane_id == geom.plane_id {
                            continue;
                        }
                    }
                    let mut s = seq.clone();
                    s.push(f);
                    let mut im = imgs.clone();
                    im.push(geom.mirror(imgs.last().unwrap()));
                    sequences.push((s, im));
                }
            }
            frontier = start..sequences.len();
        }
        Ok(Self { scene, faces, tx, sequences, opts })
    }

    /// All valid paths to `rx`, sorted lexicographically by interaction list.
    pub fn trace(&self, rx: Vec3) -> Result<Vec<PathTrace>> {
        let mut out = Vec::new();
        for (seq, images) in &self.sequences {
            if let Some(path) = self.validate(seq, images, rx)? {
                out.push(path);
            }
        }
        out.sort_by(|a, b| a.interactions.cmp(&b.interactions));
        Ok(out)
    }

    /// Traces, keeps the strongest paths and aggregates power and delay spread.
    pub fn link(&self, rx: Vec3) -> Result<LinkResult> {
        let mut paths = self.trace(rx)?;
        paths.sort_by(|a, b| b.gain.total_cmp(&a.gain).then_with(|| a.interactions.cmp(&b.interactions)));
        paths.truncate(self.opts.keep_paths);
        Ok(LinkResult { power_db: received_power_db(&paths), delay_spread_s: delay_spread(&paths), paths })
    }

    /// Gain of a path with the given interaction list after moving the
    /// receiver to `rx`, without re-checking that the path stays valid.
    /// Returns `None` when a reflection plane no longer separates the
    /// endpoints.
    pub fn path_gain_at(&self, interactions: &[Interaction], rx: Vec3) -> Option<f64> {
        let reflect: Vec<usize> =
            interactions.iter().filter(|i| i.kind == InteractionKind::Reflect).map(|i| i.face).collect();
        let k = reflect.len();
        let mut images = Vec::with_capacity(k + 1);
        images.push(self.tx);
        for &f in &reflect {
            let last = *images.last().unwrap();
            images.push(self.faces[f].mirror(&last));
        }
        let mut pts = vec![Vec3::zeros(); k + 2];
        pts[0] = self.tx;
        pts[k + 1] = rx;
        let mut target = rx;
        for j in (0..k).rev() {
            let f = &self.faces[reflect[j]];
            let img = images[j + 1];
            let (st, si) = (f.n.dot(&target) - f.d, f.n.dot(&img) - f.d);
            if st * si >= 0.0 {
                return None;
            }
            let p = target + (img - target) * (st / (st - si));
            pts[j + 1] = p;
            target = p;
        }
        let freq = self.scene.frequency_hz;
        let mut gain = 1.0;
        let mut length = 0.0;
        for w in pts.windows(2) {
            length += (w[1] - w[0]).norm();
        }
        if length <= 0.0 {
            return None;
        }
        let mut seg = 0;
        for inter in interactions {
            let dir = (pts[seg + 1] - pts[seg]).normalize();
            let f = &self.faces[inter.face];
            let cos_t = dir.dot(&f.n).abs().min(1.0);
            let (r2, t2) = fresnel_from_cos(&self.scene.materials[self.scene.faces[inter.face].material], cos_t, freq);
            match inter.kind {
                InteractionKind::Reflect => {
                    gain *= r2;
                    seg += 1;
                }
                InteractionKind::Transmit => gain *= t2,
            }
        }
        Some(gain * friis_gain(length, freq))
    }

    fn validate(&self, seq: &[usize], images: &[Vec3], rx: Vec3) -> Result<Option<PathTrace>> {
        let k = seq.len();
        let mut pts = vec![Vec3::zeros(); k + 2];
        pts[0] = self.tx;
        pts[k + 1] = rx;
        let mut target = rx;
        for j in (0..k).rev() {
            let f = &self.faces[seq[j]];
            let img = images[j + 1];
            let (st, si) = (f.n.dot(&target) - f.d, f.n.dot(&img) - f.d);
            if st * si >= 0.0 {
                return Ok(None);
            }
            let p = target + (img - target) * (st / (st - si));
            if !f.contains(&p) {
                return Ok(None);
            }
            pts[j + 1] = p;
            target = p;
        }
        let mut interactions = Vec::with_capacity(k + self.opts.max_transmissions);
        let mut gain = 1.0;
        let mut length = 0.0;
        let mut transmissions = 0;
        let freq = self.scene.frequency_hz;
        for s in 0..=k {
            let (a, b) = (pts[s], pts[s + 1]);
            let dir = b - a;
            let len = dir.norm();
            if len <= INTERSECTION_EPS_M {
                if k == 0 {
                    return Err(Error::Degenerate("transmitter and receiver coincide".into()));
                }
                return Ok(None);
            }
            length += len;
            let mut hits: Vec<(f64, usize)> = Vec::new();
            for (fi, f) in self.faces.iter().enumerate() {
                if let Some(t) = f.segment_hit(&a, &dir) {
                    if t * len > INTERSECTION_EPS_M && (1.0 - t) * len > INTERSECTION_EPS_M {
                        hits.push((t, fi));
                    }
                }
            }
            transmissions += hits.len();
            if transmissions > self.opts.max_transmissions {
                return Ok(None);
            }
            hits.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            let unit = dir / len;
            for (_, fi) in hits {
                let f = &self.faces[fi];
                let cos_t = unit.dot(&f.n).abs().min(1.0);
                let (_, t2) = fresnel_from_cos(&self.scene.materials[self.scene.faces[fi].material], cos_t, freq);
                gain *= t2;
                interactions.push(Interaction { face: fi, kind: InteractionKind::Transmit });
            }
            if s < k {
                let fi = seq[s];
                let f = &self.faces[fi];
                let cos_t = unit.dot(&f.n).abs().min(1.0);
                let (r2, _) = fresnel_from_cos(&self.scene.materials[self.scene.faces[fi].material], cos_t, freq);
                gain *= r2;
                interactions.push(Interaction { face: fi, kind: InteractionKind::Reflect });
            }
        }
        gain *= friis_gain(length, freq);
        Ok(Some(PathTrace { interactions, points: pts, length_m: length, delay_s: length / SPEED_OF_LIGHT, gain }))
    }
}

fn face_geometry(scene: &Scene) -> Result<Vec<FaceGeom>> {
    let mut planes: Vec<(Vec3, f64)> = Vec::new();
    let mut out = Vec::with_capacity(scene.faces.len());
    for (i, face) in scene.faces.iter().enumerate() {
        if face.material >= scene.materials.len() {
            return Err(Error::Argument(format!("face {i} references missing material {}", face.material)));
        }
        let a = face.vertex(0);
        let (e1, e2) = (face.vertex(1) - a, face.vertex(2) - a);
        let cross = e1.cross(&e2);
        if cross.norm() <= 2e-9 {
            return Err(Error::Degenerate(format!("face {i} has zero area")));
        }
        let n = cross.normalize();
        let d = n.dot(&a);
        let plane_id = planes
            .iter()
            .position(|(m, e)| {
                (m.dot(&n) > 1.0 - COPLANAR_TOL && (e - d).abs() < COPLANAR_TOL)
                    || (m.dot(&n) < -1.0 + COPLANAR_TOL && (e + d).abs() < COPLANAR_TOL)
            })
            .unwrap_or_else(|| {
                planes.push((n, d));
                planes.len() - 1
            });
        let (d00, d01, d11) = (e1.dot(&e1), e1.dot(&e2), e2.dot(&e2));
        out.push(FaceGeom { a, e1, e2, n, d, plane_id, d00, d01, d11, inv_den: 1.0 / (d00 * d11 - d01 * d01) });
    }
    Ok(out)
}

/// All valid paths between `scene.tx[tx_idx]` and `scene.rx[rx_idx]` with at
/// most `max_reflections` reflections and `max_transmissions` transmissions.
pub fn trace_paths(
    scene: &Scene,
    tx_idx: usize,
    rx_idx: usize,
    max_reflections: usize,
    max_transmissions: usize,
) -> Result<Vec<PathTrace>> {
    let tx = scene.tx.get(tx_idx).ok_or_else(|| Error::Argument(format!("tx index {tx_idx} out of range")))?;
    let rx = scene.rx.get(rx_idx).ok_or_else(|| Error::Argument(format!("rx index {rx_idx} out of range")))?;
    let opts = TraceOptions { max_reflections, max_transmissions, keep_paths: usize::MAX };
    Tracer::new(scene, tx.position(), opts)?.trace(rx.position())
}

/// Power and delay spread of one link with the given options.
pub fn simulate_link(scene: &Scene, tx: Vec3, rx: Vec3, opts: TraceOptions) -> Result<LinkResult> {
    Tracer::new(scene, tx, opts)?.link(rx)
}

/// Recomputes `|a_p|²` from the path geometry and the scene materials.
pub fn path_gain(path: &PathTrace, scene: &Scene) -> Result<f64> {
    let mut length = 0.0;
    for w in path.points.windows(2) {
        length += (w[1] - w[0]).norm();
    }
    if length <= 0.0 {
        return Err(Error::Degenerate("zero-length path".into()));
    }
    let mut gain = friis_gain(length, scene.frequency_hz);
    // interaction points are listed in path order; transmissions lie inside segments
    let mut seg = 0;
    for inter in &path.interactions {
        let face = scene
            .faces
            .get(inter.face)
            .ok_or_else(|| Error::Argument(format!("path references missing face {}", inter.face)))?;
        let n = face.cross().normalize();
        let dir = (path.points[seg + 1] - path.points[seg]).normalize();
        let cos_t = dir.dot(&n).abs().min(1.0);
        let (r2, t2) = fresnel_from_cos(&scene.materials[face.material], cos_t, scene.frequency_hz);
        match inter.kind {
            InteractionKind::Reflect => {
                gain *= r2;
                seg += 1;
            }
            InteractionKind::Transmit => gain *= t2,
        }
    }
    Ok(gain)
}
