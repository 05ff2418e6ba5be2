//! Synthetic scenes with exact ground-truth conditions.
//!
//! A scene is a flat background plus one to three shapes, each with a
//! distinct class. Every class owns a narrow intensity band and brighter
//! shapes are nearer, so the painter's order over depth ranks is the class
//! order. The image encodes depth as intensity, which is what the depth
//! extractor relies on.
//!
//! Conditions are rasterized from the scene description, never extracted
//! from the rendered image.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::reward::ConditionKind;
use crate::rng::{self, tag};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CNDS";
const VERSION: u32 = 1;

/// Number of distinct caption ids.
pub const CAPTION_VOCAB: usize = 8;

/// Intensity jump (in `[0, 1]` units) that saturates the soft-edge map.
pub const SOFT_EDGE_CONTRAST: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Geometry {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Circle { cx: f64, cy: f64, r: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Geometry {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Geometry::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Geometry::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Geometry::Triangle { pts } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let d0 = edge(pts[0], pts[1]);
                let d1 = edge(pts[1], pts[2]);
                let d2 = edge(pts[2], pts[0]);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneShape {
    pub geometry: Geometry,
    pub class: u8,
    /// Painting order; higher ranks are nearer and painted later.
    pub depth_rank: u8,
    /// Brightness in `[0, 1]`.
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background: f64,
    pub shapes: Vec<SceneShape>,
}

/// Per-pixel rasterization of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    /// Index of the visible region: 0 for background, `i + 1` for shape `i`.
    pub region: Vec<u8>,
    pub classes: Vec<u8>,
    /// Brightness in `[0, 1]`; doubles as normalized depth.
    pub intensity: Vec<f64>,
}

/// Centre of the intensity band owned by `class` among `classes`.
pub fn band_center(class: u8, classes: usize) -> f64 {
    0.05 + 0.9 * class as f64 / (classes - 1) as f64
}

pub fn band_half_width(classes: usize) -> f64 {
    (0.15 * 0.9 / (classes - 1) as f64).min(0.04)
}

impl SceneSpec {
    /// Draws a random scene. Shapes use distinct classes from `1..classes`.
    pub fn random(height: usize, width: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let hw = band_half_width(classes);
        let jitter = |c: u8, rng: &mut ChaCha8Rng| band_center(c, classes) + rng.random_range(-hw..hw);
        let background = jitter(0, rng);
        let max_shapes = 3.min(classes - 1);
        let count = rng.random_range(1..=max_shapes);
        let mut pool: Vec<u8> = (1..classes as u8).collect();
        pool.shuffle(rng);
        let mut picked: Vec<u8> = pool[..count].to_vec();
        picked.sort_unstable();
        let (h, w) = (height as f64, width as f64);
        let shapes = picked
            .iter()
            .enumerate()
            .map(|(rank, &class)| {
                let geometry = match rng.random_range(0..3) {
                    0 => {
                        let sw = rng.random_range(w * 0.3..w * 0.6);
                        let sh = rng.random_range(h * 0.3..h * 0.6);
                        let x0 = rng.random_range(0.0..w - sw).floor();
                        let y0 = rng.random_range(0.0..h - sh).floor();
                        Geometry::Rect {
                            x0,
                            y0,
                            x1: (x0 + sw).round(),
                            y1: (y0 + sh).round(),
                        }
                    }
                    1 => {
                        let r = rng.random_range(h.min(w) * 0.15..h.min(w) * 0.3);
                        Geometry::Circle {
                            cx: rng.random_range(r..w - r),
                            cy: rng.random_range(r..h - r),
                            r,
                        }
                    }
                    _ => {
                        let size = rng.random_range(h.min(w) * 0.4..h.min(w) * 0.7);
                        let x0 = rng.random_range(0.0..w - size);
                        let y0 = rng.random_range(0.0..h - size);
                        let apex = rng.random_range(x0..x0 + size);
                        Geometry::Triangle {
                            pts: [(apex, y0), (x0, y0 + size), (x0 + size, y0 + size)],
                        }
                    }
                };
                SceneShape {
                    geometry,
                    class,
                    depth_rank: rank as u8,
                    intensity: jitter(class, rng),
                }
            })
            .collect();
        Self {
            height,
            width,
            background,
            shapes,
        }
    }

    /// Painter's algorithm over depth ranks, sampling pixel centres.
    pub fn rasterize(&self) -> Raster {
        let n = self.height * self.width;
        let mut region = vec![0u8; n];
        let mut classes = vec![0u8; n];
        let mut intensity = vec![self.background; n];
        let mut order: Vec<usize> = (0..self.shapes.len()).collect();
        order.sort_by_key(|&i| self.shapes[i].depth_rank);
        for i in order {
            let s = &self.shapes[i];
            for y in 0..self.height {
                for x in 0..self.width {
                    if s.geometry.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        let p = y * self.width + x;
                        region[p] = i as u8 + 1;
                        classes[p] = s.class;
                        intensity[p] = s.intensity;
                    }
                }
            }
        }
        Raster {
            region,
            classes,
            intensity,
        }
    }

    /// Caption id: the set of shape classes present, as a bitmask folded
    /// into the caption vocabulary. Id 0 never occurs for a real scene.
    pub fn caption(&self) -> u32 {
        let mask: u32 = self.shapes.iter().map(|s| 1u32 << (s.class - 1)).sum();
        (mask % CAPTION_VOCAB as u32).max(1)
    }
}

impl Raster {
    pub fn image(&self, height: usize, width: usize) -> Tensor {
        Tensor::from_parts(
            vec![1, height, width],
            self.intensity.iter().map(|u| 2.0 * u - 1.0).collect(),
        )
    }

    /// 1 where a 4-neighbour belongs to a different region.
    pub fn border(&self, height: usize, width: usize) -> Vec<f64> {
        let mut out = vec![0.0; height * width];
        for y in 0..height {
            for x in 0..width {
                let p = y * width + x;
                let differs = neighbours4(y, x, height, width).any(|q| self.region[q] != self.region[p]);
                if differs {
                    out[p] = 1.0;
                }
            }
        }
        out
    }

    /// Largest intensity jump to any 8-neighbour, scaled by
    /// [`SOFT_EDGE_CONTRAST`] and capped at 1.
    pub fn soft_edges(&self, height: usize, width: usize) -> Vec<f64> {
        let mut out = vec![0.0; height * width];
        for y in 0..height {
            for x in 0..width {
                let p = y * width + x;
                let jump = neighbours8(y, x, height, width)
                    .map(|q| (self.intensity[q] - self.intensity[p]).abs())
                    .fold(0.0, f64::max);
                out[p] = (jump / SOFT_EDGE_CONTRAST).min(1.0);
            }
        }
        out
    }
}

fn neighbours4(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)]
        .into_iter()
        .filter_map(move |(dy, dx)| offset(y, x, dy, dx, h, w))
}

fn neighbours8(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    (-1i64..=1)
        .flat_map(|dy| (-1i64..=1).map(move |dx| (dy, dx)))
        .filter(|&d| d != (0, 0))
        .filter_map(move |(dy, dx)| offset(y, x, dy, dx, h, w))
}

fn offset(y: usize, x: usize, dy: i64, dx: i64, h: usize, w: usize) -> Option<usize> {
    let ny = y as i64 + dy;
    let nx = x as i64 + dx;
    (ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64).then(|| ny as usize * w + nx as usize)
}

/// Ground-truth condition of a sample.
#[derive(Clone, Debug, PartialEq)]
pub enum ConditionMap {
    /// Integer class per pixel.
    Classes(Vec<u8>),
    /// One value per pixel in `[0, 1]`.
    Dense(Vec<f64>),
}

impl ConditionMap {
    pub fn rasterize(raster: &Raster, kind: ConditionKind, height: usize, width: usize) -> Self {
        match kind {
            ConditionKind::SegMask { .. } => ConditionMap::Classes(raster.classes.clone()),
            ConditionKind::BinaryEdge => ConditionMap::Dense(raster.border(height, width)),
            ConditionKind::SoftEdge => ConditionMap::Dense(raster.soft_edges(height, width)),
            ConditionKind::DepthMap => ConditionMap::Dense(raster.intensity.clone()),
        }
    }

    pub fn classes(&self) -> Option<&[u8]> {
        match self {
            ConditionMap::Classes(c) => Some(c),
            ConditionMap::Dense(_) => None,
        }
    }

    pub fn dense(&self) -> Option<&[f64]> {
        match self {
            ConditionMap::Dense(d) => Some(d),
            ConditionMap::Classes(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedSample {
    /// `1×H×W` image in `[-1, 1]`.
    pub image: Tensor,
    pub condition: ConditionMap,
    pub caption: u32,
}

impl ConditionedSample {
    /// The condition as denoiser input: one-hot `K×H×W` for class maps,
    /// `1×H×W` otherwise.
    pub fn hint(&self, kind: ConditionKind) -> Tensor {
        let (h, w) = (self.image.shape()[1], self.image.shape()[2]);
        condition_tensor(&self.condition, kind, h, w)
    }
}

pub fn condition_tensor(cond: &ConditionMap, kind: ConditionKind, h: usize, w: usize) -> Tensor {
    match cond {
        ConditionMap::Classes(c) => {
            let k = kind.hint_channels();
            let hw = h * w;
            let mut data = vec![0.0; k * hw];
            for (p, &class) in c.iter().enumerate() {
                data[class as usize * hw + p] = 1.0;
            }
            Tensor::from_parts(vec![k, h, w], data)
        }
        ConditionMap::Dense(d) => Tensor::from_parts(vec![1, h, w], d.clone()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: ConditionKind,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<ConditionedSample>,
}

/// Plain-text `key=value` description of a generated dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

/// Scene `index` of the dataset generated with `seed`.
pub fn scene_for(seed: u64, index: usize, height: usize, width: usize, classes: usize) -> SceneSpec {
    let mut r = rng::stream(seed, &[tag::SCENE, index as u64]);
    SceneSpec::random(height, width, classes, &mut r)
}

/// Number of classes scenes are drawn from. Non-segmentation kinds use the
/// default four-class palette.
fn palette_classes(kind: ConditionKind, classes: usize) -> usize {
    match kind {
        ConditionKind::SegMask { classes } => classes,
        _ => classes,
    }
}

pub fn generate_dataset(
    n: usize,
    height: usize,
    width: usize,
    kind: ConditionKind,
    classes: usize,
    seed: u64,
) -> Result<(Dataset, Manifest)> {
    if n == 0 {
        return Err(Error::config("dataset needs at least one sample"));
    }
    if height < 16 || width < 16 {
        return Err(Error::config(format!("canvas {height}x{width} is smaller than 16x16")));
    }
    let classes = palette_classes(kind, classes);
    if classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {classes}")));
    }
    if let ConditionKind::SegMask { classes: k } = kind {
        if k < 2 {
            return Err(Error::config("segmentation needs K >= 2"));
        }
    }
    if classes > 255 {
        return Err(Error::config("at most 255 classes fit in a class byte"));
    }
    let samples = par::map(n, |i| {
        let scene = scene_for(seed, i, height, width, classes);
        let raster = scene.rasterize();
        ConditionedSample {
            image: raster.image(height, width),
            condition: ConditionMap::rasterize(&raster, kind, height, width),
            caption: scene.caption(),
        }
    });
    let dataset = Dataset {
        kind,
        height,
        width,
        samples,
    };
    let mut manifest = Manifest::default();
    manifest.push("seed", seed);
    manifest.push("samples", n);
    manifest.push("height", height);
    manifest.push("width", width);
    manifest.push("kind", kind.name());
    manifest.push("classes", classes);
    manifest.push("content_hash", format!("{:016x}", fnv1a(&dataset.to_bytes())));
    Ok((dataset, manifest))
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Disjoint train/validation/test index lists.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn hash(indices: &[usize]) -> u64 {
        let bytes: Vec<u8> = indices.iter().flat_map(|&i| (i as u64).to_le_bytes()).collect();
        fnv1a(&bytes)
    }
}

/// Shuffles `0..n` and cuts it by `fractions` (largest-remainder rounding).
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let ideal: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..3).collect();
    by_remainder.sort_by(|&a, &b| {
        (ideal[b] - ideal[b].floor())
            .partial_cmp(&(ideal[a] - ideal[a].floor()))
            .unwrap()
            .then(a.cmp(&b))
    });
    for &i in &by_remainder {
        if rest == 0 {
            break;
        }
        if ideal[i] > sizes[i] as f64 {
            sizes[i] += 1;
            rest -= 1;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SPLIT]));
    let val_start = sizes[0];
    let test_start = sizes[0] + sizes[1];
    Ok(Split {
        train: order[..val_start].to_vec(),
        val: order[val_start..test_start].to_vec(),
        test: order[test_start..].to_vec(),
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            kind: self.kind,
            height: self.height,
            width: self.width,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(24 + self.samples.len() * (4 + 16 * hw));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&(self.kind.classes() as u32).to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&s.caption.to_le_bytes());
            for v in s.image.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            match &s.condition {
                ConditionMap::Classes(c) => out.extend_from_slice(c),
                ConditionMap::Dense(d) => {
                    for v in d {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n = cur.u32()? as usize;
        let height = cur.u32()? as usize;
        let width = cur.u32()? as usize;
        let tag = cur.take(1)?[0];
        let classes = cur.u32()? as usize;
        let kind = ConditionKind::from_tag(tag, classes).ok_or_else(|| bad(format!("unknown kind tag {tag}")))?;
        let hw = height * width;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let caption = cur.u32()?;
            let image = (0..hw).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            let condition = match kind {
                ConditionKind::SegMask { classes } => {
                    let c = cur.take(hw)?.to_vec();
                    if let Some(&bad_class) = c.iter().find(|&&v| v as usize >= classes) {
                        return Err(Error::ClassOutOfRange {
                            index: bad_class as usize,
                            classes,
                        });
                    }
                    ConditionMap::Classes(c)
                }
                _ => ConditionMap::Dense((0..hw).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?),
            };
            samples.push(ConditionedSample {
                image: Tensor::from_parts(vec![1, height, width], image),
                condition,
                caption,
            });
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Dataset {
            kind,
            height,
            width,
            samples,
        })
    }

    /// Fraction of pixels carrying each class, over the whole dataset.
    pub fn class_frequencies(&self) -> Option<Vec<f64>> {
        let k = self.kind.classes();
        let mut counts = vec![0usize; k];
        let mut total = 0usize;
        for s in &self.samples {
            for &c in s.condition.classes()? {
                counts[c as usize] += 1;
                total += 1;
            }
        }
        Some(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn captions(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.caption).collect()
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "dataset file",
        detail: detail.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SEG: ConditionKind = ConditionKind::SegMask { classes: 4 };

    #[test]
    fn generation_is_deterministic() {
        let (a, ma) = generate_dataset(20, 16, 16, SEG, 4, 3).unwrap();
        let (b, mb) = generate_dataset(20, 16, 16, SEG, 4, 3).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ma, mb);
        let (c, _) = generate_dataset(20, 16, 16, SEG, 4, 4).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn file_round_trip_is_byte_identical() {
        for kind in [SEG, ConditionKind::SoftEdge, ConditionKind::BinaryEdge, ConditionKind::DepthMap] {
            let (d, _) = generate_dataset(5, 16, 20, kind, 4, 1).unwrap();
            let bytes = d.to_bytes();
            let back = Dataset::from_bytes(&bytes).unwrap();
            assert_eq!(back, d);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let (d, _) = generate_dataset(2, 16, 16, SEG, 4, 1).unwrap();
        let bytes = d.to_bytes();
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Dataset::from_bytes(&wrong).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Dataset::from_bytes(&extra).is_err());
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_dataset(0, 16, 16, SEG, 4, 0).is_err());
        assert!(generate_dataset(4, 8, 16, SEG, 4, 0).is_err());
        assert!(generate_dataset(4, 16, 16, ConditionKind::SegMask { classes: 1 }, 1, 0).is_err());
    }

    #[test]
    fn full_canvas_rectangle_gives_uniform_mask() {
        let scene = SceneSpec {
            height: 16,
            width: 16,
            background: 0.05,
            shapes: vec![SceneShape {
                geometry: Geometry::Rect {
                    x0: 0.0,
                    y0: 0.0,
                    x1: 16.0,
                    y1: 16.0,
                },
                class: 2,
                depth_rank: 0,
                intensity: 0.65,
            }],
        };
        let r = scene.rasterize();
        assert!(r.classes.iter().all(|&c| c == 2));
        assert!(r.border(16, 16).iter().all(|&b| b == 0.0));
        let miou = crate::metrics::miou(&r.classes, &r.classes, 4).unwrap();
        assert_eq!(miou, 1.0);
    }

    #[test]
    fn conditions_rerasterize_bitwise() {
        let seed = 17;
        for kind in [SEG, ConditionKind::SoftEdge, ConditionKind::BinaryEdge, ConditionKind::DepthMap] {
            let (d, _) = generate_dataset(10, 16, 16, kind, 4, seed).unwrap();
            for (i, s) in d.samples.iter().enumerate() {
                let raster = scene_for(seed, i, 16, 16, 4).rasterize();
                assert_eq!(ConditionMap::rasterize(&raster, kind, 16, 16), s.condition);
                assert!(raster.image(16, 16).bit_eq(&s.image));
            }
        }
    }

    #[test]
    fn scenes_respect_invariants() {
        for i in 0..200 {
            let scene = scene_for(5, i, 16, 16, 4);
            let mut ranks: Vec<u8> = scene.shapes.iter().map(|s| s.depth_rank).collect();
            ranks.dedup();
            assert_eq!(ranks.len(), scene.shapes.len());
            let r = scene.rasterize();
            assert!(r.classes.iter().all(|&c| c < 4));
            assert!(r.intensity.iter().all(|&u| (0.0..=1.0).contains(&u)));
            for s in &scene.shapes {
                match s.geometry {
                    Geometry::Rect { x0, y0, x1, y1 } => {
                        assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 16.0 && y1 <= 16.0)
                    }
                    Geometry::Circle { cx, cy, r } => {
                        assert!(cx - r >= 0.0 && cy - r >= 0.0 && cx + r <= 16.0 && cy + r <= 16.0)
                    }
                    Geometry::Triangle { pts } => {
                        assert!(pts.iter().all(|&(x, y)| (0.0..=16.0).contains(&x) && (0.0..=16.0).contains(&y)))
                    }
                }
            }
        }
    }

    #[test]
    fn classes_are_balanced_over_large_sets() {
        let (d, _) = generate_dataset(500, 16, 16, SEG, 4, 2).unwrap();
        let freq = d.class_frequencies().unwrap();
        assert!(freq.iter().all(|&f| f >= 0.05), "{freq:?}");
    }

    #[test]
    fn split_edge_cases() {
        let s = split(10, [1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(s.train.len(), 10);
        assert!(s.val.is_empty() && s.test.is_empty());
        assert!(split(10, [0.5, 0.6, 0.0], 0).is_err());
        assert!(split(10, [-0.1, 0.6, 0.5], 0).is_err());
    }

    #[test]
    fn split_sizes_are_within_rounding() {
        for n in [1usize, 7, 33, 100, 257] {
            let f = [0.7, 0.2, 0.1];
            let s = split(n, f, 3).unwrap();
            for (part, frac) in [(&s.train, f[0]), (&s.val, f[1]), (&s.test, f[2])] {
                assert!((part.len() as f64 - n as f64 * frac).abs() < 1.0);
            }
        }
    }

    #[test]
    fn split_is_a_partition() {
        for n in [5usize, 19, 64, 101] {
            let s = split(n, [0.6, 0.25, 0.15], n as u64).unwrap();
            let all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            let set: BTreeSet<usize> = all.iter().copied().collect();
            assert_eq!(all.len(), n);
            assert_eq!(set, (0..n).collect());
            assert_eq!(s, split(n, [0.6, 0.25, 0.15], n as u64).unwrap());
        }
    }
}
