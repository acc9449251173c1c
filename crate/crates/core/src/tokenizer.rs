//! Scene tokenization: one token per mesh face, per antenna and per link, each
//! carrying a fixed number of multivector channels and scalar channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ga::{
    embed_direction, embed_plane, embed_point, extract_direction, extract_point, Multivector, Versor, DIM,
};
use crate::scene::{Antenna, Face, Material, Scene};

pub const MV_CHANNELS: usize = 5;
pub const SCALAR_CHANNELS: usize = 8;
/// Width of the material one-hot; covers the standard material table with spares.
pub const MATERIAL_SLOTS: usize = SCALAR_CHANNELS;
/// Delay spreads are stored in units of 10 ns.
pub const DELAY_SCALE: f64 = 1e8;

pub const TX_FLAG: usize = 0;
pub const RX_FLAG: usize = 1;
pub const POWER_SLOT: usize = 0;
pub const DELAY_SLOT: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    MeshFace,
    Antenna,
    Link,
    Origin,
}

impl TokenKind {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            TokenKind::MeshFace => 0,
            TokenKind::Antenna => 1,
            TokenKind::Link => 2,
            TokenKind::Origin => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Predictive,
    Diffusion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub mv: [Multivector; MV_CHANNELS],
    pub scalars: [f64; SCALAR_CHANNELS],
    pub kind: TokenKind,
}

impl Token {
    fn new(kind: TokenKind) -> Self {
        Self { mv: [Multivector::ZERO; MV_CHANNELS], scalars: [0.0; SCALAR_CHANNELS], kind }
    }
}

/// Channel values of one link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub power_db: f64,
    pub delay_spread_s: f64,
}

/// Affine standardization of received power in dB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for PowerNorm {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl PowerNorm {
    pub fn fit(values_db: &[f64]) -> Result<Self> {
        if values_db.is_empty() {
            return Err(Error::Argument("cannot fit power statistics to no values".into()));
        }
        let n = values_db.len() as f64;
        let mean = values_db.iter().sum::<f64>() / n;
        let var = values_db.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, h_db: f64) -> f64 {
        (h_db - self.mean) / self.std
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        x * self.std + self.mean
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// Faces, transmitter, receiver, link, then the origin token in diffusion mode.
    pub tokens: Vec<Token>,
    pub mode: Mode,
    /// Index of the origin token (diffusion mode only).
    pub origin: Option<usize>,
    /// Embedded gravity direction `(0, 0, 1)`, carried by the origin token.
    pub gravity: Multivector,
    pub materials: Vec<Material>,
    pub frequency_hz: f64,
    pub norm: PowerNorm,
    /// Whether the link token carries channel values.
    pub has_channel: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_faces(&self) -> usize {
        self.tokens.iter().filter(|t| t.kind == TokenKind::MeshFace).count()
    }

    pub fn link_index(&self) -> Result<usize> {
        self.tokens
            .iter()
            .position(|t| t.kind == TokenKind::Link)
            .ok_or_else(|| Error::Argument("sequence has no link token".into()))
    }

    /// Multivector channels as a flat `[tokens, MV_CHANNELS, 16]` array.
    pub fn mv_array(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * MV_CHANNELS * DIM);
        for t in &self.tokens {
            for m in &t.mv {
                out.extend_from_slice(m.components());
            }
        }
        out
    }

    /// Scalar channels followed by the token-kind one-hot, `[tokens, SCALAR_CHANNELS + 4]`.
    pub fn scalar_array(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * (SCALAR_CHANNELS + TokenKind::COUNT));
        for t in &self.tokens {
            out.extend_from_slice(&t.scalars);
            let mut kind = [0.0; TokenKind::COUNT];
            kind[t.kind.index()] = 1.0;
            out.extend_from_slice(&kind);
        }
        out
    }

    /// Applies a versor to every multivector channel.
    pub fn transformed(&self, g: &Versor) -> TokenSequence {
        let mut out = self.clone();
        for t in &mut out.tokens {
            for m in &mut t.mv {
                *m = g.sandwich(m);
            }
        }
        out.gravity = g.sandwich(&self.gravity);
        out
    }

    /// Grade involution on every multivector channel.
    pub fn involuted(&self) -> TokenSequence {
        let mut out = self.clone();
        for t in &mut out.tokens {
            for m in &mut t.mv {
                *m = m.grade_involution();
            }
        }
        out
    }
}

fn face_token(face: &Face, n_materials: usize) -> Result<Token> {
    if face.material >= n_materials || face.material >= MATERIAL_SLOTS {
        return Err(Error::Format(format!("face material {} out of range", face.material)));
    }
    let mut t = Token::new(TokenKind::MeshFace);
    let c = face.centroid();
    t.mv[0] = embed_point([c.x, c.y, c.z]);
    for i in 0..3 {
        t.mv[1 + i] = embed_point(face.v[i]);
    }
    let cross = face.cross();
    let n = cross.normalize();
    t.mv[4] = embed_plane([n.x, n.y, n.z], n.dot(&face.vertex(0)))?;
    t.scalars[face.material] = 1.0;
    Ok(t)
}

fn antenna_token(a: &Antenna, flag: usize) -> Token {
    let mut t = Token::new(TokenKind::Antenna);
    t.mv[0] = embed_point(a.pos);
    t.mv[1] = embed_direction(a.ori);
    t.scalars[flag] = 1.0;
    t
}

fn link_token(tx: &Antenna, rx: &Antenna, channel: Option<&Channel>, norm: &PowerNorm) -> Token {
    let mut t = Token::new(TokenKind::Link);
    t.mv[0] = embed_point(tx.pos);
    t.mv[1] = embed_point(rx.pos);
    t.mv[2] = embed_direction([rx.pos[0] - tx.pos[0], rx.pos[1] - tx.pos[1], rx.pos[2] - tx.pos[2]]);
    if let Some(ch) = channel {
        t.scalars[POWER_SLOT] = norm.normalize(ch.power_db);
        t.scalars[DELAY_SLOT] = ch.delay_spread_s * DELAY_SCALE;
    }
    t
}

fn origin_token() -> Token {
    let mut t = Token::new(TokenKind::Origin);
    t.mv[0] = embed_point([0.0; 3]);
    t.mv[1] = embed_direction([0.0, 0.0, 1.0]);
    t
}

/// Tokenizes a scene with exactly one transmitter and one receiver.
pub fn tokenize_scene(scene: &Scene, channel: Option<&Channel>, mode: Mode, norm: &PowerNorm) -> Result<TokenSequence> {
    if scene.tx.len() != 1 || scene.rx.len() != 1 {
        return Err(Error::Argument(format!(
            "tokenization needs exactly one tx and one rx, got {} and {}",
            scene.tx.len(),
            scene.rx.len()
        )));
    }
    let mut tokens = Vec::with_capacity(scene.faces.len() + 4);
    for face in &scene.faces {
        tokens.push(face_token(face, scene.materials.len())?);
    }
    tokens.push(antenna_token(&scene.tx[0], TX_FLAG));
    tokens.push(antenna_token(&scene.rx[0], RX_FLAG));
    tokens.push(link_token(&scene.tx[0], &scene.rx[0], channel, norm));
    let origin = match mode {
        Mode::Predictive => None,
        Mode::Diffusion => {
            tokens.push(origin_token());
            Some(tokens.len() - 1)
        }
    };
    Ok(TokenSequence {
        tokens,
        mode,
        origin,
        gravity: embed_direction([0.0, 0.0, 1.0]),
        materials: scene.materials.clone(),
        frequency_hz: scene.frequency_hz,
        norm: *norm,
        has_channel: channel.is_some(),
    })
}

/// Tokenizes the link from `scene.tx[tx_idx]` to `rx`.
pub fn tokenize_link(
    scene: &Scene,
    tx_idx: usize,
    rx: Antenna,
    channel: Option<&Channel>,
    mode: Mode,
    norm: &PowerNorm,
) -> Result<TokenSequence> {
    tokenize_scene(&scene.link(tx_idx, rx)?, channel, mode, norm)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse of [`tokenize_scene`]. Materials are decoded by argmax over the
/// slots of known materials.
pub fn detokenize(seq: &TokenSequence) -> Result<(Scene, Option<Channel>)> {
    let n_mat = seq.materials.len().clamp(1, MATERIAL_SLOTS);
    let mut faces = Vec::new();
    let mut tx = Vec::new();
    let mut rx = Vec::new();
    let mut channel = None;
    for t in &seq.tokens {
        match t.kind {
            TokenKind::MeshFace => {
                let v = [extract_point(&t.mv[1])?, extract_point(&t.mv[2])?, extract_point(&t.mv[3])?];
                faces.push(Face { v, material: argmax(&t.scalars[..n_mat]) });
            }
            TokenKind::Antenna => {
                let a = Antenna { pos: extract_point(&t.mv[0])?, ori: extract_direction(&t.mv[1]) };
                if t.scalars[TX_FLAG] >= t.scalars[RX_FLAG] {
                    tx.push(a);
                } else {
                    rx.push(a);
                }
            }
            TokenKind::Link => {
                if seq.has_channel {
                    channel = Some(Channel {
                        power_db: seq.norm.denormalize(t.scalars[POWER_SLOT]),
                        delay_spread_s: t.scalars[DELAY_SLOT] / DELAY_SCALE,
                    });
                }
            }
            TokenKind::Origin => {}
        }
    }
    let scene = Scene { frequency_hz: seq.frequency_hz, materials: seq.materials.clone(), faces, tx, rx };
    Ok((scene, channel))
}

/// Exchanges the transmitter and receiver roles.
pub fn reciprocity_flip(seq: &TokenSequence) -> Result<TokenSequence> {
    let antennas: Vec<usize> = (0..seq.len()).filter(|&i| seq.tokens[i].kind == TokenKind::Antenna).collect();
    let links: Vec<usize> = (0..seq.len()).filter(|&i| seq.tokens[i].kind == TokenKind::Link).collect();
    if antennas.len() != 2 || links.len() != 1 {
        return Err(Error::Unsupported(format!(
            "reciprocity flip needs one tx, one rx and one link, got {} antennas and {} links",
            antennas.len(),
            links.len()
        )));
    }
    let mut out = seq.clone();
    for &i in &antennas {
        out.tokens[i].scalars.swap(TX_FLAG, RX_FLAG);
    }
    let link = &mut out.tokens[links[0]];
    link.mv.swap(0, 1);
    link.mv[2] = -link.mv[2];
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, GeneratorSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(seed: u64, rooms: usize) -> Scene {
        let spec = GeneratorSpec { rooms_min: rooms, rooms_max: rooms, tx_per_scene: 1, rx_per_scene: 1, ..Default::default() };
        generate_scene(&mut ChaCha8Rng::seed_from_u64(seed), &spec).unwrap()
    }

    #[test]
    fn token_counts() {
        let mut s = scene(1, 1);
        s.faces.truncate(10);
        let norm = PowerNorm::default();
        assert_eq!(tokenize_scene(&s, None, Mode::Predictive, &norm).unwrap().len(), 13);
        assert_eq!(tokenize_scene(&s, None, Mode::Diffusion, &norm).unwrap().len(), 14);
        s.faces.clear();
        assert_eq!(tokenize_scene(&s, None, Mode::Predictive, &norm).unwrap().len(), 3);
        s.rx.clear();
        assert!(matches!(tokenize_scene(&s, None, Mode::Predictive, &norm), Err(Error::Argument(_))));
    }

    #[test]
    fn round_trip() {
        let s = scene(2, 3);
        let norm = PowerNorm { mean: -70.0, std: 9.0 };
        let ch = Channel { power_db: -63.5, delay_spread_s: 1.7e-8 };
        let seq = tokenize_scene(&s, Some(&ch), Mode::Diffusion, &norm).unwrap();
        let (back, chb) = detokenize(&seq).unwrap();
        assert_eq!(back.faces.len(), s.faces.len());
        for (a, b) in back.faces.iter().zip(&s.faces) {
            assert_eq!(a.material, b.material);
            for i in 0..3 {
                for k in 0..3 {
                    assert!((a.v[i][k] - b.v[i][k]).abs() < 1e-6);
                }
            }
        }
        assert!((back.rx[0].pos[0] - s.rx[0].pos[0]).abs() < 1e-12);
        let chb = chb.unwrap();
        assert!((chb.power_db - ch.power_db).abs() < 1e-12);
        assert!((chb.delay_spread_s - ch.delay_spread_s).abs() < 1e-20);
    }

    #[test]
    fn flip_is_an_involution() {
        let s = scene(3, 2);
        let seq = tokenize_scene(&s, None, Mode::Predictive, &PowerNorm::default()).unwrap();
        let f = reciprocity_flip(&seq).unwrap();
        let n = s.faces.len();
        assert_eq!(f.tokens[n].scalars[RX_FLAG], 1.0);
        assert_eq!(f.tokens[n + 1].scalars[TX_FLAG], 1.0);
        assert_eq!(f.tokens[n + 2].mv[2], -seq.tokens[n + 2].mv[2]);
        assert_eq!(f.tokens[..n], seq.tokens[..n]);
        assert_eq!(reciprocity_flip(&f).unwrap(), seq);
    }

    #[test]
    fn normalization_is_affine() {
        let norm = PowerNorm { mean: -60.0, std: 7.5 };
        assert_eq!(norm.normalize(-60.0), 0.0);
        assert!((norm.denormalize(norm.normalize(-43.3)) + 43.3).abs() < 1e-12);
        assert!(PowerNorm::fit(&[]).is_err());
    }
}
