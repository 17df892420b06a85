//! Synthetic depth scenes and the raw tensor file format.
//!
//! A scene is a stack of axis-aligned rectangles and discs, each at its own
//! depth, composited front-to-back over a background at depth 1. Intensity is
//! a fixed monotone function of depth (nearer is brighter) plus pixel noise,
//! so depth is recoverable from shading.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::mix_seed;
use crate::numerics::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const TENSOR_VERSION: u32 = 1;
pub const BACKGROUND_DEPTH: f64 = 1.0;

/// Rendered intensity for a noise-free pixel at `depth`.
pub fn intensity(depth: f64) -> f64 {
    1.0 - 0.8 * depth
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub depth: Tensor,
    /// Generator seed; `None` for scenes loaded from disk.
    pub seed: Option<u64>,
}

impl Scene {
    pub fn dims(&self) -> (usize, usize) {
        self.depth.dims2().expect("depth is rank 2")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub count: usize,
    /// Validation scenes, indexed after the `count` training scenes.
    #[serde(default)]
    pub val_count: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range for the number of shapes per scene.
    pub num_shapes: (usize, usize),
    /// Range that shape depths are drawn from; must lie in (0, 1].
    pub depth_levels: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn toy_default() -> Self {
        Self {
            count: 256,
            val_count: 64,
            height: 64,
            width: 64,
            num_shapes: (1, 4),
            depth_levels: (0.1, 0.9),
            noise_std: 0.02,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.count == 0 {
            return bad("dataset count must be at least 1".into());
        }
        if self.height == 0 || self.width == 0 {
            return bad(format!("zero-area image {}x{}", self.height, self.width));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if self.num_shapes.0 > self.num_shapes.1 {
            return bad(format!("num_shapes range {:?} is empty", self.num_shapes));
        }
        let (lo, hi) = self.depth_levels;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("depth_levels {:?} must satisfy 0 < lo <= hi <= 1", self.depth_levels));
        }
        Ok(())
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.count
    }

    pub fn val_indices(&self) -> std::ops::Range<usize> {
        self.count..self.count + self.val_count
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ShapeKind {
    /// Half-open pixel box `[y0, y1) x [x0, x1)`.
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
    /// Pixels whose centres lie within `radius` of `(cy, cx)`.
    Disc { cy: f64, cx: f64, radius: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub depth: f64,
}

impl Shape {
    pub fn covers(&self, y: usize, x: usize) -> bool {
        match self.kind {
            ShapeKind::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            ShapeKind::Disc { cy, cx, radius } => {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                dy * dy + dx * dx <= radius * radius
            }
        }
    }
}

/// Paints shapes far-to-near over the background, then shades and adds noise.
pub fn render(height: usize, width: usize, shapes: &[Shape], noise_std: f64, rng: &mut ChaCha8Rng) -> Result<Scene> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidConfig(format!("zero-area image {height}x{width}")));
    }
    let mut order: Vec<&Shape> = shapes.iter().collect();
    order.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    let mut depth = vec![BACKGROUND_DEPTH; height * width];
    for shape in order {
        for y in 0..height {
            for x in 0..width {
                if shape.covers(y, x) {
                    depth[y * width + x] = shape.depth;
                }
            }
        }
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidConfig(format!("noise_std: {e}")))?;
    let image = depth
        .iter()
        .map(|&d| (intensity(d) + noise.sample(rng)).clamp(0.0, 1.0))
        .collect();
    Ok(Scene {
        image: Tensor::new(vec![1, height, width], image)?,
        depth: Tensor::new(vec![height, width], depth)?,
        seed: None,
    })
}

fn random_shape(spec: &DatasetSpec, depth: f64, rng: &mut ChaCha8Rng) -> Shape {
    let (h, w) = (spec.height, spec.width);
    let kind = if rng.gen_bool(0.5) {
        let span = |extent: usize, rng: &mut ChaCha8Rng| {
            let max_len = (extent / 2).max(1);
            let min_len = (extent / 8).clamp(1, max_len);
            let len = rng.gen_range(min_len..=max_len);
            let start = rng.gen_range(0..=extent - len);
            (start, start + len)
        };
        let (y0, y1) = span(h, rng);
        let (x0, x1) = span(w, rng);
        ShapeKind::Rect { y0, x0, y1, x1 }
    } else {
        let short = h.min(w) as f64;
        ShapeKind::Disc {
            cy: rng.gen_range(0.0..h as f64),
            cx: rng.gen_range(0.0..w as f64),
            radius: rng.gen_range(short / 8.0..=short / 3.0),
        }
    };
    Shape { kind, depth }
}

/// Samples a scene's shape list; depths are distinct unless the range is a point.
pub fn scene_shapes(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let k = rng.gen_range(spec.num_shapes.0..=spec.num_shapes.1);
    let (lo, hi) = spec.depth_levels;
    let mut depths: Vec<f64> = Vec::with_capacity(k);
    while depths.len() < k {
        let d = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        if lo == hi || !depths.contains(&d) {
            depths.push(d);
        }
    }
    depths.into_iter().map(|d| random_shape(spec, d, rng)).collect()
}

pub fn generate_scene(spec: &DatasetSpec, index: usize) -> Result<Scene> {
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::InvalidConfig(format!("zero-area image {}x{}", spec.height, spec.width)));
    }
    let seed = mix_seed(spec.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = scene_shapes(spec, &mut rng);
    let mut scene = render(spec.height, spec.width, &shapes, spec.noise_std, &mut rng)?;
    scene.seed = Some(seed);
    Ok(scene)
}

pub fn generate_range(spec: &DatasetSpec, indices: std::ops::Range<usize>) -> Result<Vec<Scene>> {
    indices.map(|i| generate_scene(spec, i)).collect()
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&[t.shape().len() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read, context: &str) -> Result<Tensor> {
    let malformed = |reason: String| Error::MalformedHeader {
        context: context.to_string(),
        reason,
    };
    let mut exact = |buf: &mut [u8], what: &str| {
        r.read_exact(buf).map_err(|_| malformed(format!("truncated while reading {what}")))
    };
    let mut magic = [0u8; 4];
    exact(&mut magic, "magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(malformed(format!("bad magic {magic:?}")));
    }
    let mut v = [0u8; 4];
    exact(&mut v, "version")?;
    let version = u32::from_le_bytes(v);
    if version != TENSOR_VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let mut rank = [0u8; 1];
    exact(&mut rank, "rank")?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut d = [0u8; 8];
        exact(&mut d, "extent")?;
        let extent = u64::from_le_bytes(d);
        if extent == 0 || extent > (1 << 32) {
            return Err(malformed(format!("invalid extent {extent}")));
        }
        shape.push(extent as usize);
    }
    let len: usize = shape.iter().product();
    let mut values = Vec::with_capacity(len.min(1 << 24));
    let mut buf = [0u8; 8];
    for _ in 0..len {
        exact(&mut buf, "values")?;
        values.push(f64::from_le_bytes(buf));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| malformed(e.to_string()))? != 0 {
        return Err(malformed("trailing bytes after tensor data".into()));
    }
    Ok(Tensor::new(shape, values)?)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut BufReader::new(file), &path.display().to_string())
}

pub fn save_pair(scene: &Scene, image_path: &Path, depth_path: &Path) -> Result<()> {
    save_tensor(image_path, &scene.image)?;
    save_tensor(depth_path, &scene.depth)
}

/// Validates a loaded image/depth pair: `C x H x W` image, `H x W` depth,
/// strictly positive depths.
pub fn validate_pair(image: Tensor, depth: Tensor) -> Result<Scene> {
    let (h, w) = depth
        .dims2()
        .map_err(|_| Error::ShapeMismatch(format!("depth must be rank 2, got {:?}", depth.shape())))?;
    match image.shape() {
        &[_, ih, iw] if ih == h && iw == w => {}
        other => {
            return Err(Error::ShapeMismatch(format!(
                "image shape {other:?} does not match depth shape [{h}, {w}]"
            )))
        }
    }
    if let Some((index, &value)) = depth.values().iter().enumerate().find(|(_, &d)| !(d > 0.0)) {
        return Err(Error::NonPositiveDepth { index, value });
    }
    Ok(Scene {
        image,
        depth,
        seed: None,
    })
}

pub fn load_pair(image_path: &Path, depth_path: &Path) -> Result<Scene> {
    validate_pair(load_tensor(image_path)?, load_tensor(depth_path)?)
}

/// Writes `image<TAB>depth` lines. Paths are written as given.
pub fn write_manifest(path: &Path, pairs: &[(PathBuf, PathBuf)]) -> Result<()> {
    let mut out = String::new();
    for (img, depth) in pairs {
        out.push_str(&format!("{}\t{}\n", img.display(), depth.display()));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a manifest; relative entries resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(img), Some(depth), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::MalformedHeader {
                context: path.display().to_string(),
                reason: format!("line {} is not two tab-separated paths", lineno + 1),
            });
        };
        pairs.push((base.join(img), base.join(depth)));
    }
    Ok(pairs)
}

pub fn load_manifest(path: &Path) -> Result<Vec<Scene>> {
    read_manifest(path)?.iter().map(|(i, d)| load_pair(i, d)).collect()
}
