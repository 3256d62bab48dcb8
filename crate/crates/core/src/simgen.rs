//! Procedural template/source pairs: random primitive shapes on mid-gray,
//! a jittered and defected redraw, a global similarity pose and a lighting
//! gain. Also the on-disk dataset layout.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{self, DefectMap, ImageBuf, Plane};
use crate::registration::{self, PoseSim2};
use crate::spectral;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const BACKGROUND: f64 = 0.5;
const SUPERSAMPLE: usize = 4;
const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
    Line,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Rectangle,
        ShapeKind::Ellipse,
        ShapeKind::Triangle,
        ShapeKind::Line,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub image_size: usize,
    pub n_shapes: [usize; 2],
    pub shape_kinds: Vec<ShapeKind>,
    pub jitter_px: [f64; 2],
    pub n_defects: [usize; 2],
    pub defect_area_frac: [f64; 2],
    pub translation_px: [f64; 2],
    pub rotation_deg: [f64; 2],
    pub scale: [f64; 2],
    pub lighting_gain: [f64; 2],
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            n_shapes: [5, 15],
            shape_kinds: ShapeKind::ALL.to_vec(),
            jitter_px: [0.0, 3.0],
            n_defects: [1, 3],
            defect_area_frac: [0.0005, 0.01],
            translation_px: [-50.0, 50.0],
            rotation_deg: [0.0, 180.0],
            scale: [0.8, 1.2],
            lighting_gain: [0.8, 1.2],
            seed: 0,
        }
    }
}

fn ordered(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::InvalidConfig(format!("{name}: invalid range {r:?}")));
    }
    Ok(())
}

impl GenConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !spectral::is_pow2(self.image_size) || self.image_size < 32 {
            return Err(Error::InvalidConfig(format!(
                "image_size must be a power of two ≥ 32, got {}",
                self.image_size
            )));
        }
        if self.n_shapes[0] > self.n_shapes[1] || self.n_defects[0] > self.n_defects[1] {
            return Err(Error::InvalidConfig("count ranges must be ordered".into()));
        }
        if self.shape_kinds.is_empty() {
            return Err(Error::InvalidConfig("shape_kinds is empty".into()));
        }
        ordered("jitter_px", self.jitter_px)?;
        ordered("defect_area_frac", self.defect_area_frac)?;
        ordered("translation_px", self.translation_px)?;
        ordered("rotation_deg", self.rotation_deg)?;
        ordered("scale", self.scale)?;
        ordered("lighting_gain", self.lighting_gain)?;
        if self.jitter_px[0] < 0.0 || self.lighting_gain[0] <= 0.0 {
            return Err(Error::InvalidConfig("jitter and gain must be nonnegative/positive".into()));
        }
        if self.defect_area_frac[0] < 0.0 || self.defect_area_frac[1] > 0.01 {
            return Err(Error::InvalidConfig(format!(
                "defect_area_frac must lie in [0, 0.01], got {:?}",
                self.defect_area_frac
            )));
        }
        if self.n_defects[1] > 0 && self.defect_area_frac[1] <= 0.0 {
            return Err(Error::InvalidConfig("defects requested with zero area budget".into()));
        }
        if self.scale[0] < registration::MIN_SCALE || self.scale[1] > registration::MAX_SCALE {
            return Err(Error::InvalidConfig(format!(
                "scale range {:?} leaves [{}, {}]",
                self.scale,
                registration::MIN_SCALE,
                registration::MAX_SCALE
            )));
        }
        let half = self.image_size as f64 / 2.0;
        if self.translation_px[0] < -half || self.translation_px[1] > half {
            return Err(Error::InvalidConfig(format!(
                "translation range {:?} exceeds half the image",
                self.translation_px
            )));
        }
        if self.rotation_deg[0] < 0.0 || self.rotation_deg[1] > 360.0 {
            return Err(Error::InvalidConfig("rotation_deg must lie in [0, 360]".into()));
        }
        Ok(())
    }
}

/// Geometry in pixel coordinates (x = column, y = row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Geometry {
    Rectangle { cx: f64, cy: f64, half_w: f64, half_h: f64, angle: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Triangle { pts: [(f64, f64); 3] },
    Line { p0: (f64, f64), p1: (f64, f64), half_width: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub geometry: Geometry,
    pub intensity: f64,
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

impl Geometry {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Geometry::Rectangle { cx, cy, half_w, half_h, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                u.abs() <= half_w && v.abs() <= half_h
            }
            Geometry::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = (c * dx + s * dy) / rx;
                let v = (-s * dx + c * dy) / ry;
                u * u + v * v <= 1.0
            }
            Geometry::Triangle { pts } => {
                let p = (x, y);
                let d0 = cross(pts[0], pts[1], p);
                let d1 = cross(pts[1], pts[2], p);
                let d2 = cross(pts[2], pts[0], p);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
            Geometry::Line { p0, p1, half_width } => {
                let (vx, vy) = (p1.0 - p0.0, p1.1 - p0.1);
                let len2 = vx * vx + vy * vy;
                let t = if len2 > 0.0 {
                    (((x - p0.0) * vx + (y - p0.1) * vy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (qx, qy) = (p0.0 + t * vx - x, p0.1 + t * vy - y);
                qx * qx + qy * qy <= half_width * half_width
            }
        }
    }

    /// (x_min, y_min, x_max, y_max)
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        match *self {
            Geometry::Rectangle { cx, cy, half_w, half_h, .. } => {
                let r = half_w.hypot(half_h);
                (cx - r, cy - r, cx + r, cy + r)
            }
            Geometry::Ellipse { cx, cy, rx, ry, .. } => {
                let r = rx.max(ry);
                (cx - r, cy - r, cx + r, cy + r)
            }
            Geometry::Triangle { pts } => {
                let xs = pts.map(|p| p.0);
                let ys = pts.map(|p| p.1);
                (
                    xs.iter().copied().fold(f64::INFINITY, f64::min),
                    ys.iter().copied().fold(f64::INFINITY, f64::min),
                    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                )
            }
            Geometry::Line { p0, p1, half_width } => (
                p0.0.min(p1.0) - half_width,
                p0.1.min(p1.1) - half_width,
                p0.0.max(p1.0) + half_width,
                p0.1.max(p1.1) + half_width,
            ),
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Geometry {
        match *self {
            Geometry::Rectangle { cx, cy, half_w, half_h, angle } => Geometry::Rectangle {
                cx: cx + dx,
                cy: cy + dy,
                half_w,
                half_h,
                angle,
            },
            Geometry::Ellipse { cx, cy, rx, ry, angle } => Geometry::Ellipse {
                cx: cx + dx,
                cy: cy + dy,
                rx,
                ry,
                angle,
            },
            Geometry::Triangle { pts } => Geometry::Triangle {
                pts: pts.map(|(x, y)| (x + dx, y + dy)),
            },
            Geometry::Line { p0, p1, half_width } => Geometry::Line {
                p0: (p0.0 + dx, p0.1 + dy),
                p1: (p1.0 + dx, p1.1 + dy),
                half_width,
            },
        }
    }

    pub fn kind(&self) -> ShapeKind {
        match self {
            Geometry::Rectangle { .. } => ShapeKind::Rectangle,
            Geometry::Ellipse { .. } => ShapeKind::Ellipse,
            Geometry::Triangle { .. } => ShapeKind::Triangle,
            Geometry::Line { .. } => ShapeKind::Line,
        }
    }
}

/// Per-pixel coverage of `g` estimated on a SUPERSAMPLE² grid.
fn for_each_coverage(g: &Geometry, size: usize, mut f: impl FnMut(usize, usize, f64)) {
    let (x0, y0, x1, y1) = g.bbox();
    let clamp = |v: f64| v.floor().clamp(0.0, size as f64 - 1.0) as usize;
    if x1 < 0.0 || y1 < 0.0 || x0 > size as f64 || y0 > size as f64 {
        return;
    }
    let n = SUPERSAMPLE as f64;
    for r in clamp(y0)..=clamp(y1) {
        for c in clamp(x0)..=clamp(x1) {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let y = r as f64 - 0.5 + (sy as f64 + 0.5) / n;
                    let x = c as f64 - 0.5 + (sx as f64 + 0.5) / n;
                    if g.contains(x, y) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                f(r, c, hits as f64 / (n * n));
            }
        }
    }
}

/// Paints shapes in order over a mid-gray canvas with coverage blending.
pub fn render(shapes: &[Shape], size: usize) -> Plane {
    let mut canvas = Plane::filled(size, size, BACKGROUND);
    paint(&mut canvas, shapes);
    canvas
}

fn paint(canvas: &mut Plane, shapes: &[Shape]) {
    let size = canvas.height();
    for s in shapes {
        for_each_coverage(&s.geometry, size, |r, c, a| {
            let v = canvas.get(r, c);
            canvas.set(r, c, v * (1.0 - a) + s.intensity * a);
        });
    }
}

/// Pixels at least half covered by any shape.
pub fn rasterize_mask(shapes: &[Shape], size: usize) -> Plane {
    let mut mask = Plane::zeros(size, size);
    for s in shapes {
        for_each_coverage(&s.geometry, size, |r, c, a| {
            if a >= 0.5 {
                mask.set(r, c, 1.0);
            }
        });
    }
    mask
}

fn random_geometry(rng: &mut ChaCha8Rng, kind: ShapeKind, center: (f64, f64), extent: f64) -> Geometry {
    let (cx, cy) = center;
    let angle = rng.gen_range(0.0..PI);
    match kind {
        ShapeKind::Rectangle => Geometry::Rectangle {
            cx,
            cy,
            half_w: extent * rng.gen_range(0.4..1.0),
            half_h: extent * rng.gen_range(0.4..1.0),
            angle,
        },
        ShapeKind::Ellipse => Geometry::Ellipse {
            cx,
            cy,
            rx: extent * rng.gen_range(0.4..1.0),
            ry: extent * rng.gen_range(0.4..1.0),
            angle,
        },
        ShapeKind::Triangle => {
            let base = rng.gen_range(0.0..2.0 * PI);
            let pts = [0.0, 1.0, 2.0].map(|k: f64| {
                let a = base + k * 2.0 * PI / 3.0 + rng.gen_range(-0.5..0.5);
                let r = extent * rng.gen_range(0.6..1.2);
                (cx + r * a.cos(), cy + r * a.sin())
            });
            Geometry::Triangle { pts }
        }
        ShapeKind::Line => {
            let (s, c) = angle.sin_cos();
            let len = extent * rng.gen_range(1.0..2.0);
            Geometry::Line {
                p0: (cx - len * c, cy - len * s),
                p1: (cx + len * c, cy + len * s),
                half_width: (extent * rng.gen_range(0.08..0.2)).max(0.75),
            }
        }
    }
}

/// Intensity at least 0.2 away from the mid-gray background.
fn random_intensity(rng: &mut ChaCha8Rng) -> f64 {
    if rng.gen_bool(0.5) {
        rng.gen_range(0.05..0.3)
    } else {
        rng.gen_range(0.7..0.95)
    }
}

/// The shapes of one template scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub size: usize,
    pub shapes: Vec<Shape>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gen_scene(seed: u64, cfg: &GenConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = rng_for(seed, 0);
    let size = cfg.image_size;
    let n = rng.gen_range(cfg.n_shapes[0]..=cfg.n_shapes[1]);
    let sz = size as f64;
    let shapes = (0..n)
        .map(|_| {
            let kind = cfg.shape_kinds[rng.gen_range(0..cfg.shape_kinds.len())];
            let center = (rng.gen_range(0.1 * sz..0.9 * sz), rng.gen_range(0.1 * sz..0.9 * sz));
            let extent = rng.gen_range(0.04 * sz..0.14 * sz);
            Shape {
                geometry: random_geometry(&mut rng, kind, center, extent),
                intensity: random_intensity(&mut rng),
            }
        })
        .collect();
    Ok(Scene { size, shapes })
}

pub fn gen_template(seed: u64, cfg: &GenConfig) -> Result<ImageBuf> {
    let scene = gen_scene(seed, cfg)?;
    Ok(ImageBuf::from_plane(render(&scene.shapes, scene.size)))
}

#[derive(Debug, Clone)]
pub struct SamplePair {
    pub template: ImageBuf,
    pub source: ImageBuf,
    /// Binary, in the source frame.
    pub gt_mask: DefectMap,
    pub gt_pose: PoseSim2,
    pub seed: u64,
}

/// Everything drawn for one pair, including the defected render before the
/// global pose and gain are applied.
#[derive(Debug, Clone)]
pub struct PairRecord {
    pub pair: SamplePair,
    pub scene: Scene,
    pub jittered: Vec<Shape>,
    pub defects: Vec<Shape>,
    pub defected_render: Plane,
    pub gain: f64,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

pub fn gen_pair(seed: u64, cfg: &GenConfig) -> Result<SamplePair> {
    Ok(gen_pair_record(seed, cfg)?.pair)
}

pub fn gen_pair_record(seed: u64, cfg: &GenConfig) -> Result<PairRecord> {
    let scene = gen_scene(seed, cfg)?;
    let size = scene.size;
    let sz = size as f64;
    let template = render(&scene.shapes, size);
    let mut rng = rng_for(seed, 1);

    let jittered: Vec<Shape> = scene
        .shapes
        .iter()
        .map(|s| {
            let mag = uniform(&mut rng, cfg.jitter_px);
            let dir = rng.gen_range(0.0..2.0 * PI);
            Shape {
                geometry: s.geometry.translated(mag * dir.cos(), mag * dir.sin()),
                intensity: s.intensity,
            }
        })
        .collect();
    let base = render(&jittered, size);

    let pose = PoseSim2::from_degrees(
        uniform(&mut rng, cfg.rotation_deg),
        uniform(&mut rng, cfg.scale),
        uniform(&mut rng, cfg.translation_px),
        uniform(&mut rng, cfg.translation_px),
    );
    let gain = uniform(&mut rng, cfg.lighting_gain);
    let n_defects = rng.gen_range(cfg.n_defects[0]..=cfg.n_defects[1]);
    let area = (size * size) as f64;

    let mut accepted = None;
    for _ in 0..MAX_ATTEMPTS {
        if n_defects == 0 {
            accepted = Some((Vec::new(), Plane::zeros(size, size)));
            break;
        }
        let budget = uniform(&mut rng, cfg.defect_area_frac) * area / n_defects as f64;
        let mut defects = Vec::with_capacity(n_defects);
        for _ in 0..n_defects {
            let kind = cfg.shape_kinds[rng.gen_range(0..cfg.shape_kinds.len())];
            // keep defects where the posed source still sees them
            let center = (rng.gen_range(0.3 * sz..0.7 * sz), rng.gen_range(0.3 * sz..0.7 * sz));
            let extent = (budget / PI).sqrt().max(1.0);
            let geometry = random_geometry(&mut rng, kind, center, extent);
            let under = mean_under(&base, &geometry);
            let mut intensity = random_intensity(&mut rng);
            if (intensity - under).abs() < 0.3 {
                intensity = if under > 0.5 { 0.05 } else { 0.95 };
            }
            defects.push(Shape { geometry, intensity });
        }
        let mask_pre = rasterize_mask(&defects, size);
        let mask = registration::warp_plane(&mask_pre, &pose)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        let frac = mask.sum() / area;
        if frac > 0.0 && frac >= cfg.defect_area_frac[0] && frac <= cfg.defect_area_frac[1] {
            accepted = Some((defects, mask));
            break;
        }
    }
    let (defects, gt_mask) = accepted.ok_or_else(|| {
        Error::Generation(format!(
            "seed {seed}: no defect draw met the area bounds after {MAX_ATTEMPTS} attempts"
        ))
    })?;

    let mut defected = base;
    paint(&mut defected, &defects);
    let source = registration::warp_plane(&defected, &pose)?.map(|v| (v * gain).clamp(0.0, 1.0));
    Ok(PairRecord {
        pair: SamplePair {
            template: ImageBuf::from_plane(template),
            source: ImageBuf::from_plane(source),
            gt_mask,
            gt_pose: pose,
            seed,
        },
        scene,
        jittered,
        defects,
        defected_render: defected,
        gain,
    })
}

fn mean_under(p: &Plane, g: &Geometry) -> f64 {
    let (mut acc, mut wsum) = (0.0, 0.0);
    for_each_coverage(g, p.height(), |r, c, a| {
        acc += a * p.get(r, c);
        wsum += a;
    });
    if wsum > 0.0 {
        acc / wsum
    } else {
        BACKGROUND
    }
}

/// Seed of pair `index` in a dataset drawn with `dataset_seed`.
pub fn pair_seed(dataset_seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = dataset_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gen_dataset(cfg: &GenConfig, count: usize) -> Result<Vec<SamplePair>> {
    use rayon::prelude::*;
    cfg.validate()?;
    (0..count as u64)
        .into_par_iter()
        .map(|i| gen_pair(pair_seed(cfg.seed, i), cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub theta_deg: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl From<PoseSim2> for PoseRecord {
    fn from(p: PoseSim2) -> Self {
        Self {
            theta_deg: p.theta_deg(),
            scale: p.scale,
            tx: p.tx,
            ty: p.ty,
        }
    }
}

impl From<&PoseRecord> for PoseSim2 {
    fn from(p: &PoseRecord) -> Self {
        PoseSim2::from_degrees(p.theta_deg, p.scale, p.tx, p.ty)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub id: String,
    pub seed: u64,
    pub pose: PoseRecord,
    /// Exact pose bits, so reads reproduce the generated pose exactly.
    pub pose_bits: [u64; 4],
    pub config: GenConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub count: usize,
    pub config: GenConfig,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub id: String,
    pub template: ImageBuf,
    pub source: ImageBuf,
    pub gt_mask: Option<DefectMap>,
    /// Absent for captures without per-pair metadata.
    pub gt_pose: Option<PoseSim2>,
    pub seed: Option<u64>,
}

impl LoadedPair {
    pub fn has_pose(&self) -> bool {
        self.gt_pose.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Option<Manifest>,
    pub pairs: Vec<LoadedPair>,
}

pub fn pair_id(index: usize) -> String {
    format!("{index:05}")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::corrupt(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))
}

fn gray_of(img: &ImageBuf) -> Result<Plane> {
    spectral::to_grayscale(img)
}

pub fn write_dataset(pairs: &[SamplePair], cfg: &GenConfig, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let id = pair_id(i);
        image::write_png_gray(&dir.join(format!("{id}_template.png")), &gray_of(&pair.template)?)?;
        image::write_png_gray(&dir.join(format!("{id}_source.png")), &gray_of(&pair.source)?)?;
        image::write_png_gray(&dir.join(format!("{id}_mask.png")), &pair.gt_mask)?;
        let p = pair.gt_pose;
        let meta = PairMeta {
            id: id.clone(),
            seed: pair.seed,
            pose: p.into(),
            pose_bits: [p.theta.to_bits(), p.scale.to_bits(), p.tx.to_bits(), p.ty.to_bits()],
            config: cfg.clone(),
        };
        write_json(&dir.join(format!("{id}_meta.json")), &meta)?;
        ids.push(id);
    }
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        count: ids.len(),
        config: cfg.clone(),
        ids,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn binarize(p: Plane) -> Plane {
    p.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

/// Loads one pair; `need_meta` makes a missing `{id}_meta.json` an error.
pub fn load_pair(dir: &Path, id: &str, need_meta: bool) -> Result<LoadedPair> {
    let file = |suffix: &str| -> PathBuf { dir.join(format!("{id}_{suffix}")) };
    let template = image::read_image(&file("template.png"))?;
    let source = image::read_image(&file("source.png"))?;
    template.ensure_same_shape(&source, id)?;
    let mask_path = file("mask.png");
    let gt_mask = if mask_path.exists() {
        Some(binarize(image::read_png_gray(&mask_path)?))
    } else {
        None
    };
    let meta_path = file("meta.json");
    let (gt_pose, seed) = if meta_path.exists() {
        let meta: PairMeta = read_json(&meta_path)?;
        let b = meta.pose_bits;
        let pose = PoseSim2 {
            theta: f64::from_bits(b[0]),
            scale: f64::from_bits(b[1]),
            tx: f64::from_bits(b[2]),
            ty: f64::from_bits(b[3]),
        };
        (Some(pose), Some(meta.seed))
    } else if need_meta {
        return Err(Error::io(
            &meta_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    } else {
        (None, None)
    };
    Ok(LoadedPair {
        id: id.to_string(),
        template,
        source,
        gt_mask,
        gt_pose,
        seed,
    })
}

/// Manifest (if any) and pair ids of a dataset directory, without loading
/// images. Directories lacking `manifest.json` are indexed by their
/// `{id}_template.png` files.
pub fn dataset_index(dir: &Path) -> Result<(Option<Manifest>, Vec<String>)> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let manifest: Manifest = read_json(&manifest_path)?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: DATASET_FORMAT_VERSION,
                found: manifest.format_version,
            });
        }
        if manifest.count != manifest.ids.len() {
            return Err(Error::corrupt(&manifest_path, "count disagrees with id list"));
        }
        let ids = manifest.ids.clone();
        return Ok((Some(manifest), ids));
    }
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix("_template.png"))
                .map(str::to_string)
        })
        .collect();
    ids.sort();
    Ok((None, ids))
}

/// Reads a generated dataset, or any directory of `{id}_template.png` /
/// `{id}_source.png` (optionally `{id}_mask.png`) triples without metadata.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let (manifest, ids) = dataset_index(dir)?;
    let need_meta = manifest.is_some();
    let pairs = ids
        .iter()
        .map(|id| load_pair(dir, id, need_meta))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GenConfig {
        GenConfig {
            image_size: 64,
            translation_px: [-8.0, 8.0],
            ..GenConfig::default()
        }
    }

    #[test]
    fn template_is_deterministic_and_nondegenerate() {
        let cfg = small_cfg();
        let a = gen_template(3, &cfg).unwrap();
        assert_eq!(a, gen_template(3, &cfg).unwrap());
        assert_ne!(a, gen_template(4, &cfg).unwrap());
        let p = a.channel(0);
        assert!(p.max() > p.min());
    }

    #[test]
    fn fixed_shape_count() {
        let cfg = GenConfig {
            n_shapes: [5, 5],
            ..small_cfg()
        };
        assert_eq!(gen_scene(1, &cfg).unwrap().shapes.len(), 5);
    }

    #[test]
    fn disabled_perturbations_reproduce_template() {
        let cfg = GenConfig {
            jitter_px: [0.0, 0.0],
            n_defects: [0, 0],
            translation_px: [0.0, 0.0],
            rotation_deg: [0.0, 0.0],
            scale: [1.0, 1.0],
            lighting_gain: [1.0, 1.0],
            ..small_cfg()
        };
        let p = gen_pair(9, &cfg).unwrap();
        assert_eq!(p.source, p.template);
        assert_eq!(p.gt_mask.sum(), 0.0);
    }

    #[test]
    fn source_is_posed_defected_render() {
        let cfg = small_cfg();
        let r = gen_pair_record(5, &cfg).unwrap();
        let warped = registration::warp_plane(&r.defected_render, &r.pair.gt_pose).unwrap();
        let expect = warped.map(|v| (v * r.gain).clamp(0.0, 1.0));
        assert!(expect.max_abs_diff(&r.pair.source.channel(0)) < 1e-12);
        let frac = r.pair.gt_mask.sum() / (64.0 * 64.0);
        assert!(frac > 0.0 && frac <= 0.01);
    }

    #[test]
    fn rejects_oversized_defect_budget() {
        let cfg = GenConfig {
            defect_area_frac: [0.0, 0.02],
            ..small_cfg()
        };
        assert!(matches!(gen_pair(0, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let pairs = gen_dataset(&cfg, 3).unwrap();
        let m = write_dataset(&pairs, &cfg, dir.path()).unwrap();
        assert_eq!(m.count, 3);
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.pairs.len(), 3);
        for (a, b) in pairs.iter().zip(&ds.pairs) {
            assert_eq!(b.gt_pose, Some(a.gt_pose));
            let d = a.source.channel(0).max_abs_diff(&b.source.channel(0));
            assert!(d <= 1.0 / 255.0);
            assert_eq!(b.gt_mask.as_ref().unwrap(), &a.gt_mask);
        }
    }

    #[test]
    fn loads_directory_without_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let t = gen_template(1, &small_cfg()).unwrap().channel(0);
        image::write_png_gray(&dir.path().join("a_template.png"), &t).unwrap();
        image::write_png_gray(&dir.path().join("a_source.png"), &t).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert!(ds.manifest.is_none());
        assert_eq!(ds.pairs.len(), 1);
        assert!(!ds.pairs[0].has_pose());
        assert!(ds.pairs[0].gt_mask.is_none());
    }
}
