//! Primitive parameterization.
//!
//! Parameters are stored raw (pre-activation) in structure-of-arrays form:
//! position in scene units, log-scale, rotation angle, opacity logit and RGB
//! color. Opacity is `sigmoid(tau)` and scale is `exp(kappa)`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Opacity at or below which a primitive counts as dead.
pub const DEAD_OPACITY: f64 = 1.0 / 255.0;

/// Largest log-scale accepted by [`activate_scale`].
pub const MAX_LOG_SCALE: f64 = 80.0;

const BINARY_MAGIC: &[u8; 4] = b"GSPS";
const BINARY_VERSION: u32 = 1;

/// One attribute group. Each group carries its own learning rate and its own
/// optimizer clock per primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attr {
    Position,
    Scale,
    Rotation,
    Opacity,
    Color,
}

impl Attr {
    pub const ALL: [Attr; 5] = [
        Attr::Position,
        Attr::Scale,
        Attr::Rotation,
        Attr::Opacity,
        Attr::Color,
    ];

    /// Scalars per primitive.
    pub const fn dim(self) -> usize {
        match self {
            Attr::Position | Attr::Scale => 2,
            Attr::Rotation | Attr::Opacity => 1,
            Attr::Color => 3,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Attr::Position => "position",
            Attr::Scale => "scale",
            Attr::Rotation => "rotation",
            Attr::Opacity => "opacity",
            Attr::Color => "color",
        }
    }
}

/// Flat per-attribute arrays, row-major per primitive. Used for parameters,
/// gradients and optimizer moments alike.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttrArrays {
    pub position: Vec<f64>,
    pub scale: Vec<f64>,
    pub rotation: Vec<f64>,
    pub opacity: Vec<f64>,
    pub color: Vec<f64>,
}

impl AttrArrays {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![0.0; 2 * n],
            scale: vec![0.0; 2 * n],
            rotation: vec![0.0; n],
            opacity: vec![0.0; n],
            color: vec![0.0; 3 * n],
        }
    }

    /// Number of primitives (rows).
    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    pub fn get(&self, attr: Attr) -> &[f64] {
        match attr {
            Attr::Position => &self.position,
            Attr::Scale => &self.scale,
            Attr::Rotation => &self.rotation,
            Attr::Opacity => &self.opacity,
            Attr::Color => &self.color,
        }
    }

    pub fn get_mut(&mut self, attr: Attr) -> &mut [f64] {
        match attr {
            Attr::Position => &mut self.position,
            Attr::Scale => &mut self.scale,
            Attr::Rotation => &mut self.rotation,
            Attr::Opacity => &mut self.opacity,
            Attr::Color => &mut self.color,
        }
    }

    fn vec_mut(&mut self, attr: Attr) -> &mut Vec<f64> {
        match attr {
            Attr::Position => &mut self.position,
            Attr::Scale => &mut self.scale,
            Attr::Rotation => &mut self.rotation,
            Attr::Opacity => &mut self.opacity,
            Attr::Color => &mut self.color,
        }
    }

    pub fn row(&self, attr: Attr, i: usize) -> &[f64] {
        let d = attr.dim();
        &self.get(attr)[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, attr: Attr, i: usize) -> &mut [f64] {
        let d = attr.dim();
        &mut self.get_mut(attr)[i * d..(i + 1) * d]
    }

    /// Appends `n` zero rows.
    pub fn push_zero_rows(&mut self, n: usize) {
        for attr in Attr::ALL {
            let v = self.vec_mut(attr);
            v.resize(v.len() + n * attr.dim(), 0.0);
        }
    }

    /// Appends a copy of row `src`.
    pub fn push_copy_of(&mut self, src: usize) {
        for attr in Attr::ALL {
            let d = attr.dim();
            let v = self.vec_mut(attr);
            v.extend_from_within(src * d..(src + 1) * d);
        }
    }

    /// Keeps only rows where `keep[i]` is true, preserving order.
    pub fn retain_rows(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        for attr in Attr::ALL {
            let d = attr.dim();
            let v = self.vec_mut(attr);
            let mut w = 0;
            for (i, &k) in keep.iter().enumerate() {
                if k {
                    v.copy_within(i * d..(i + 1) * d, w * d);
                    w += 1;
                }
            }
            v.truncate(w * d);
        }
    }

    /// True when every group has consistent length for `self.len()` rows.
    pub fn is_consistent(&self) -> bool {
        let n = self.len();
        Attr::ALL.iter().all(|&a| self.get(a).len() == n * a.dim())
    }

    pub fn fill(&mut self, value: f64) {
        for attr in Attr::ALL {
            self.get_mut(attr).fill(value);
        }
    }
}

/// One primitive in raw parameter space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawPrimitive {
    pub position: [f64; 2],
    pub log_scale: [f64; 2],
    pub rotation: f64,
    pub opacity_logit: f64,
    pub color: [f64; 3],
    /// Fixed blending-order key; smaller is closer.
    pub depth: f64,
}

impl RawPrimitive {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }
}

/// All primitives of a scene.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrimitiveSet {
    pub params: AttrArrays,
    pub depth: Vec<f64>,
    pub alive: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct JsonDump {
    primitives: Vec<RawPrimitive>,
    alive: Vec<bool>,
}

impl PrimitiveSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_raw(prims: &[RawPrimitive]) -> Self {
        let mut set = Self::new();
        for p in prims {
            set.push(*p);
        }
        set
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn push(&mut self, p: RawPrimitive) {
        self.params.position.extend_from_slice(&p.position);
        self.params.scale.extend_from_slice(&p.log_scale);
        self.params.rotation.push(p.rotation);
        self.params.opacity.push(p.opacity_logit);
        self.params.color.extend_from_slice(&p.color);
        self.depth.push(p.depth);
        self.alive.push(true);
    }

    pub fn get(&self, i: usize) -> RawPrimitive {
        let a = &self.params;
        RawPrimitive {
            position: [a.position[2 * i], a.position[2 * i + 1]],
            log_scale: [a.scale[2 * i], a.scale[2 * i + 1]],
            rotation: a.rotation[i],
            opacity_logit: a.opacity[i],
            color: [a.color[3 * i], a.color[3 * i + 1], a.color[3 * i + 2]],
            depth: self.depth[i],
        }
    }

    pub fn set(&mut self, i: usize, p: RawPrimitive) {
        let a = &mut self.params;
        a.position[2 * i..2 * i + 2].copy_from_slice(&p.position);
        a.scale[2 * i..2 * i + 2].copy_from_slice(&p.log_scale);
        a.rotation[i] = p.rotation;
        a.opacity[i] = p.opacity_logit;
        a.color[3 * i..3 * i + 3].copy_from_slice(&p.color);
        self.depth[i] = p.depth;
    }

    pub fn position(&self, i: usize) -> [f64; 2] {
        [self.params.position[2 * i], self.params.position[2 * i + 1]]
    }

    pub fn log_scale(&self, i: usize) -> [f64; 2] {
        [self.params.scale[2 * i], self.params.scale[2 * i + 1]]
    }

    /// Activated scale, without the overflow check of [`activate_scale`].
    pub fn scale(&self, i: usize) -> [f64; 2] {
        let k = self.log_scale(i);
        [k[0].exp(), k[1].exp()]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.params.opacity[i])
    }

    pub fn set_opacity(&mut self, i: usize, o: f64) {
        self.params.opacity[i] = logit(o);
    }

    pub fn color(&self, i: usize) -> [f64; 3] {
        let c = &self.params.color;
        [c[3 * i], c[3 * i + 1], c[3 * i + 2]]
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    /// Keeps rows where `keep[i]` holds.
    pub fn retain(&mut self, keep: &[bool]) {
        self.params.retain_rows(keep);
        let mut it = keep.iter();
        self.depth.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.alive.retain(|_| *it.next().unwrap());
    }

    pub fn is_consistent(&self) -> bool {
        let n = self.len();
        self.params.is_consistent() && self.params.len() == n && self.alive.len() == n
    }

    /// Flat little-endian binary: 16-byte header (magic, version u32, count
    /// u64) followed by each field array in declaration order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&BINARY_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for attr in Attr::ALL {
            for x in self.params.get(attr) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        for x in &self.depth {
            w.write_all(&x.to_le_bytes())?;
        }
        let alive: Vec<u8> = self.alive.iter().map(|&a| a as u8).collect();
        w.write_all(&alive)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let bad = |msg: &str| LabError::Parse(format!("primitive binary: {msg}"));
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        if &header[0..4] != BINARY_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != BINARY_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf).map_err(|_| bad("truncated body"))?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let params = AttrArrays {
            position: read_f64s(2 * n)?,
            scale: read_f64s(2 * n)?,
            rotation: read_f64s(n)?,
            opacity: read_f64s(n)?,
            color: read_f64s(3 * n)?,
        };
        let depth = read_f64s(n)?;
        let mut alive = vec![0u8; n];
        r.read_exact(&mut alive).map_err(|_| bad("truncated alive flags"))?;
        Ok(Self {
            params,
            depth,
            alive: alive.into_iter().map(|a| a != 0).collect(),
        })
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
        self.write_binary(std::io::BufWriter::new(f))
            .map_err(|e| LabError::io(path, e))
    }

    pub fn load_binary(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
        Self::read_binary(std::io::BufReader::new(f))
    }

    /// Human-readable dump for debugging.
    pub fn to_json(&self) -> Result<String> {
        let dump = JsonDump {
            primitives: (0..self.len()).map(|i| self.get(i)).collect(),
            alive: self.alive.clone(),
        };
        Ok(serde_json::to_string_pretty(&dump)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let dump: JsonDump = serde_json::from_str(s)?;
        let mut set = Self::from_raw(&dump.primitives);
        if dump.alive.len() != set.len() {
            return Err(LabError::Parse("alive flags length mismatch".into()));
        }
        set.alive = dump.alive;
        Ok(set)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`].
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `sigmoid(tau)`; rejects non-finite logits.
pub fn activate_opacity(tau: f64) -> Result<f64> {
    if !tau.is_finite() {
        return Err(LabError::Domain(format!("opacity logit {tau} is not finite")));
    }
    Ok(sigmoid(tau))
}

/// d sigmoid / d tau = o (1 - o).
pub fn opacity_derivative(tau: f64) -> Result<f64> {
    let o = activate_opacity(tau)?;
    Ok(o * (1.0 - o))
}

/// `exp(kappa)` componentwise. The derivative is the value itself.
pub fn activate_scale(kappa: [f64; 2]) -> Result<[f64; 2]> {
    for k in kappa {
        if !k.is_finite() {
            return Err(LabError::Domain(format!("log-scale {k} is not finite")));
        }
        if k > MAX_LOG_SCALE {
            return Err(LabError::Domain(format!("log-scale {k} overflows")));
        }
    }
    Ok([kappa[0].exp(), kappa[1].exp()])
}

/// Symmetric 2x2 matrix `[[xx, xy], [xy, yy]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn inverse(&self) -> Option<Sym2> {
        let det = self.det();
        if !(det.is_finite() && det > 0.0) {
            return None;
        }
        Some(Sym2 {
            xx: self.yy / det,
            xy: -self.xy / det,
            yy: self.xx / det,
        })
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> [f64; 2] {
        let mean = 0.5 * (self.xx + self.yy);
        let half_diff = 0.5 * (self.xx - self.yy);
        let r = half_diff.hypot(self.xy);
        [mean - r, mean + r]
    }

    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.xx * v[0] + self.xy * v[1],
            self.xy * v[0] + self.yy * v[1],
        ]
    }

    pub fn quad(&self, v: [f64; 2]) -> f64 {
        self.xx * v[0] * v[0] + 2.0 * self.xy * v[0] * v[1] + self.yy * v[1] * v[1]
    }
}

/// `R diag(s^2) R^T` for rotation angle `rot`.
pub fn build_covariance(scale: [f64; 2], rot: f64) -> Result<Sym2> {
    if !(scale[0] > 0.0 && scale[1] > 0.0) {
        return Err(LabError::Domain(format!(
            "scale {scale:?} must be strictly positive"
        )));
    }
    let (s, c) = rot.sin_cos();
    let (a, b) = (scale[0] * scale[0], scale[1] * scale[1]);
    Ok(Sym2 {
        xx: c * c * a + s * s * b,
        xy: c * s * (a - b),
        yy: s * s * a + c * c * b,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActiveSummary {
    pub active: usize,
    pub dead: usize,
    pub mask: Vec<bool>,
}

/// Splits alive primitives into active (`opacity > threshold`) and dead.
pub fn classify_active(set: &PrimitiveSet, threshold: f64) -> ActiveSummary {
    let mask: Vec<bool> = (0..set.len())
        .map(|i| set.alive[i] && set.opacity(i) > threshold)
        .collect();
    let active = mask.iter().filter(|&&m| m).count();
    ActiveSummary {
        active,
        dead: set.alive_count() - active,
        mask,
    }
}
