//! Procedural street scenes with pixel-exact depth and semantic labels.
//!
//! Scenes are sets of axis-aligned boxes standing on a ground plane, seen by a
//! horizontal pinhole camera. Every pixel is resolved by an explicit ray test,
//! so labels and depth are occlusion-consistent by construction. Domains differ
//! only photometrically ([`DomainStyle`]); geometry never depends on style.

use std::fmt;

use atdt_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub const D_MIN: f64 = 1.0;
pub const D_MAX: f64 = 100.0;
pub const NUM_CLASSES: usize = 6;
/// Width in pixels at which camera intrinsics are specified.
pub const REFERENCE_WIDTH: f64 = 64.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Class {
    Ground = 0,
    Sky = 1,
    Building = 2,
    Vehicle = 3,
    Pole = 4,
    Sign = 5,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [
        Class::Ground,
        Class::Sky,
        Class::Building,
        Class::Vehicle,
        Class::Pole,
        Class::Sign,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Ground => "ground",
            Class::Sky => "sky",
            Class::Building => "building",
            Class::Vehicle => "vehicle",
            Class::Pole => "pole",
            Class::Sign => "sign",
        }
    }

    /// Base albedo before per-instance jitter and domain palette shift.
    fn base_albedo(self) -> [f64; 3] {
        match self {
            Class::Ground => [0.38, 0.37, 0.36],
            Class::Sky => [0.55, 0.72, 0.92],
            Class::Building => [0.62, 0.45, 0.33],
            Class::Vehicle => [0.78, 0.12, 0.12],
            Class::Pole => [0.22, 0.22, 0.24],
            Class::Sign => [0.92, 0.82, 0.12],
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

/// Axis-aligned box. `position` is the minimum corner `(x, y, z)` in world
/// units (x right, y up, z forward from the camera); `size` its extents.
/// GROUND and SKY are carried as markers with nominal extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: Class,
    pub position: [f64; 3],
    pub size: [f64; 3],
    pub albedo: [f64; 3],
}

impl Primitive {
    fn max_corner(&self) -> [f64; 3] {
        [
            self.position[0] + self.size[0],
            self.position[1] + self.size[1],
            self.position[2] + self.size[2],
        ]
    }

    fn is_box(&self) -> bool {
        !matches!(self.kind, Class::Ground | Class::Sky)
    }
}

/// Horizontal pinhole camera. Intrinsics are in pixels at [`REFERENCE_WIDTH`]
/// and scale with the render width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub height: f64,
    pub focal: f64,
    pub principal_point: [f64; 2],
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            height: 1.6,
            focal: 64.0,
            principal_point: [32.0, 26.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    pub camera: Camera,
}

impl SceneSpec {
    pub fn count(&self, kind: Class) -> usize {
        self.primitives.iter().filter(|p| p.kind == kind).count()
    }
}

/// Inclusive range of instances per class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountRange {
    pub min: u32,
    pub max: u32,
}

impl CountRange {
    pub const fn new(min: u32, max: u32) -> Self {
        CountRange { min, max }
    }

    pub const fn none() -> Self {
        CountRange { min: 0, max: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarConfig {
    pub buildings: CountRange,
    pub vehicles: CountRange,
    pub poles: CountRange,
    pub signs: CountRange,
    /// Half width of the road; vehicles stay on it, poles and signs line it.
    pub road_half_width: f64,
    /// Nearest and farthest z of object fronts.
    pub near: f64,
    pub far: f64,
    pub camera: Camera,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            buildings: CountRange::new(1, 4),
            vehicles: CountRange::new(0, 3),
            poles: CountRange::new(1, 4),
            signs: CountRange::new(1, 3),
            road_half_width: 4.0,
            near: 4.0,
            far: 70.0,
            camera: Camera::default(),
        }
    }
}

impl GrammarConfig {
    /// A grammar without objects: scenes hold only ground and sky.
    pub fn empty() -> Self {
        GrammarConfig {
            buildings: CountRange::none(),
            vehicles: CountRange::none(),
            poles: CountRange::none(),
            signs: CountRange::none(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("buildings", self.buildings),
            ("vehicles", self.vehicles),
            ("poles", self.poles),
            ("signs", self.signs),
        ] {
            if r.min > r.max {
                return Err(Error::Config(format!("empty {name} range {}..={}", r.min, r.max)));
            }
        }
        if !(self.near >= D_MIN + 1.0 && self.near < self.far && self.far + 20.0 <= D_MAX) {
            return Err(Error::Config(format!(
                "placement depth range [{}, {}] must satisfy {} < near < far <= {}",
                self.near,
                self.far,
                D_MIN + 1.0,
                D_MAX - 20.0
            )));
        }
        if self.road_half_width <= 0.0 || self.camera.height <= 0.0 || self.camera.focal <= 0.0 {
            return Err(Error::Config(
                "road width, camera height and focal must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Photometric appearance of a domain. Affects only the rendered image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainStyle {
    pub domain: Domain,
    /// Per-class RGB offset added to the albedo, indexed by class id.
    pub palette_shift: [[f64; 3]; NUM_CLASSES],
    pub texture_amplitude: f64,
    pub tint: [f64; 3],
    pub noise_sigma: f64,
}

impl Default for DomainStyle {
    fn default() -> Self {
        Self::domain_a()
    }
}

impl DomainStyle {
    pub fn domain_a() -> Self {
        DomainStyle {
            domain: Domain::A,
            palette_shift: [[0.0; 3]; NUM_CLASSES],
            texture_amplitude: 0.04,
            tint: [1.0, 1.0, 1.0],
            noise_sigma: 0.01,
        }
    }

    /// Roughly a hue rotation of every class colour, a warm tint, stronger
    /// texture and more sensor noise.
    pub fn domain_b() -> Self {
        DomainStyle {
            domain: Domain::B,
            palette_shift: [
                [0.02, 0.06, -0.06],  // ground
                [0.30, -0.20, -0.42], // sky
                [-0.30, 0.15, 0.22],  // building
                [-0.62, 0.55, 0.10],  // vehicle
                [0.30, 0.28, 0.20],   // pole
                [-0.75, 0.00, 0.70],  // sign
            ],
            texture_amplitude: 0.12,
            tint: [1.05, 0.95, 0.85],
            noise_sigma: 0.03,
        }
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }
}

/// One rendered scene. All maps are single samples (no batch axis).
#[derive(Clone, Debug)]
pub struct Sample {
    pub seed: u64,
    pub domain: Domain,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]` in world units.
    pub depth: Tensor,
    /// `[1, H, W]` integer class ids.
    pub labels: Tensor,
    /// `[1, H, W]` in `{0, 1}`.
    pub valid_mask: Tensor,
}

// ---------------------------------------------------------------- generate

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn count(rng: &mut ChaCha8Rng, r: CountRange) -> u32 {
    rng.gen_range(r.min..=r.max)
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    let mut c = base;
    let shared = uniform(rng, -amount, amount);
    for v in &mut c {
        *v = (*v + shared + uniform(rng, -amount / 3.0, amount / 3.0)).clamp(0.0, 1.0);
    }
    c
}

/// Screen-space bounding box `(u0, v0, u1, v1)` of a box at the reference width.
fn project_bounds(p: &Primitive, cam: &Camera) -> (f64, f64, f64, f64) {
    let mx = p.max_corner();
    let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &x in &[p.position[0], mx[0]] {
        for &y in &[p.position[1], mx[1]] {
            for &z in &[p.position[2], mx[2]] {
                let u = cam.principal_point[0] + cam.focal * x / z;
                let v = cam.principal_point[1] - cam.focal * (y - cam.height) / z;
                u0 = u0.min(u);
                u1 = u1.max(u);
                v0 = v0.min(v);
                v1 = v1.max(v);
            }
        }
    }
    (u0, v0, u1, v1)
}

fn in_frustum(p: &Primitive, cam: &Camera) -> bool {
    let (u0, v0, u1, v1) = project_bounds(p, cam);
    let h = REFERENCE_WIDTH;
    u1 > 0.5 && u0 < REFERENCE_WIDTH - 0.5 && v1 > 0.5 && v0 < h - 0.5
}

/// Samples a box until it is at least partly visible; falls back to the
/// image centre line, which is always visible for the configured depths.
fn place(rng: &mut ChaCha8Rng, cam: &Camera, mut sample: impl FnMut(&mut ChaCha8Rng) -> Primitive) -> Primitive {
    for _ in 0..32 {
        let p = sample(rng);
        if in_frustum(&p, cam) {
            return p;
        }
    }
    let mut p = sample(rng);
    p.position[0] = -p.size[0] / 2.0;
    p
}

/// Deterministic scene from `seed`.
pub fn generate_scene(seed: u64, grammar: &GrammarConfig) -> Result<SceneSpec> {
    grammar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = grammar.camera.clone();
    let road = grammar.road_half_width;
    let (near, far) = (grammar.near, grammar.far);
    let mut prims = vec![
        Primitive {
            kind: Class::Ground,
            position: [-D_MAX, 0.0, 0.0],
            size: [2.0 * D_MAX, 0.0, D_MAX],
            albedo: jitter(&mut rng, Class::Ground.base_albedo(), 0.05),
        },
        Primitive {
            kind: Class::Sky,
            position: [-D_MAX, 0.0, D_MAX],
            size: [2.0 * D_MAX, D_MAX, 0.0],
            albedo: jitter(&mut rng, Class::Sky.base_albedo(), 0.05),
        },
    ];

    for _ in 0..count(&mut rng, grammar.buildings) {
        prims.push(place(&mut rng, &cam, |r| {
            let w = uniform(r, 4.0, 10.0);
            let side = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            let inner = road + uniform(r, 1.5, 8.0);
            let x0 = if side > 0.0 { inner } else { -inner - w };
            Primitive {
                kind: Class::Building,
                position: [x0, 0.0, uniform(r, near + 6.0, far)],
                size: [w, uniform(r, 4.0, 16.0), uniform(r, 6.0, 15.0)],
                albedo: jitter(r, Class::Building.base_albedo(), 0.12),
            }
        }));
    }
    for _ in 0..count(&mut rng, grammar.vehicles) {
        prims.push(place(&mut rng, &cam, |r| {
            let w = uniform(r, 1.7, 2.1);
            Primitive {
                kind: Class::Vehicle,
                position: [
                    uniform(r, -road + 0.3, road - 0.3 - w),
                    0.0,
                    uniform(r, near + 1.0, 0.6 * far),
                ],
                size: [w, uniform(r, 1.3, 1.9), uniform(r, 3.5, 4.8)],
                albedo: jitter(r, Class::Vehicle.base_albedo(), 0.08),
            }
        }));
    }
    let mut poles = Vec::new();
    for _ in 0..count(&mut rng, grammar.poles) {
        let p = place(&mut rng, &cam, |r| {
            let side = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            Primitive {
                kind: Class::Pole,
                position: [
                    side * uniform(r, road + 0.3, road + 1.5),
                    0.0,
                    uniform(r, near + 1.0, 0.5 * far),
                ],
                size: [0.45, uniform(r, 3.5, 5.5), 0.45],
                albedo: jitter(r, Class::Pole.base_albedo(), 0.05),
            }
        });
        poles.push(p.clone());
        prims.push(p);
    }
    for i in 0..count(&mut rng, grammar.signs) as usize {
        let sign = match poles.get(i) {
            // mounted on a pole, facing the camera
            Some(pole) => {
                let top = pole.max_corner()[1];
                let s = uniform(&mut rng, 1.3, 1.8);
                let cx = pole.position[0] + pole.size[0] / 2.0;
                Primitive {
                    kind: Class::Sign,
                    position: [cx - s / 2.0, top - s, pole.position[2] - 0.1],
                    size: [s, s, 0.1],
                    albedo: jitter(&mut rng, Class::Sign.base_albedo(), 0.05),
                }
            }
            None => place(&mut rng, &cam, |r| {
                let s = uniform(r, 1.3, 1.8);
                let side = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
                Primitive {
                    kind: Class::Sign,
                    position: [
                        side * uniform(r, road, road + 1.5) - s / 2.0,
                        uniform(r, 2.0, 3.5),
                        uniform(r, near + 1.0, 0.5 * far),
                    ],
                    size: [s, s, 0.1],
                    albedo: jitter(r, Class::Sign.base_albedo(), 0.05),
                }
            }),
        };
        prims.push(sign);
    }
    Ok(SceneSpec {
        seed,
        primitives: prims,
        camera: cam,
    })
}

// ------------------------------------------------------------------ render

/// Which face of a box a ray entered through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Face {
    Front,
    Side,
    Top,
    Bottom,
}

impl Face {
    fn shade(self) -> f64 {
        match self {
            Face::Front => 1.0,
            Face::Side => 0.72,
            Face::Top => 1.12,
            Face::Bottom => 0.55,
        }
    }
}

/// Ray/box slab test. `origin` is the camera centre, `dir` has `dir.z = 1`, so
/// the returned parameter is the planar depth of the hit.
fn intersect(origin: [f64; 3], dir: [f64; 3], p: &Primitive) -> Option<(f64, Face)> {
    let mx = p.max_corner();
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut face = Face::Front;
    for axis in 0..3 {
        let (lo, hi) = (p.position[axis], mx[axis]);
        if dir[axis].abs() < 1e-12 {
            if origin[axis] < lo || origin[axis] > hi {
                return None;
            }
            continue;
        }
        let (mut t0, mut t1) = ((lo - origin[axis]) / dir[axis], (hi - origin[axis]) / dir[axis]);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_enter {
            t_enter = t0;
            face = match axis {
                0 => Face::Side,
                1 if dir[1] < 0.0 => Face::Top,
                1 => Face::Bottom,
                _ => Face::Front,
            };
        }
        t_exit = t_exit.min(t1);
    }
    (t_enter <= t_exit && t_enter > 0.0).then_some((t_enter, face))
}

/// Result of tracing one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub class: Class,
    pub depth: f64,
    /// Index into `SceneSpec::primitives`.
    pub primitive: usize,
    pub world: [f64; 3],
    face_shade: f64,
}

/// Nearest surface along the ray through pixel centre `(row, col)`.
pub fn trace(scene: &SceneSpec, row: usize, col: usize, height: usize, width: usize) -> Hit {
    let cam = &scene.camera;
    let scale = width as f64 / REFERENCE_WIDTH;
    let f = cam.focal * scale;
    let (cx, cy) = (
        cam.principal_point[0] * scale,
        cam.principal_point[1] * height as f64 / REFERENCE_WIDTH,
    );
    let dir = [(col as f64 + 0.5 - cx) / f, -(row as f64 + 0.5 - cy) / f, 1.0];
    let origin = [0.0, cam.height, 0.0];

    let mut best: Option<Hit> = None;
    for (i, p) in scene.primitives.iter().enumerate().filter(|(_, p)| p.is_box()) {
        if let Some((t, face)) = intersect(origin, dir, p) {
            if t <= D_MAX && best.is_none_or(|b| t < b.depth) {
                best = Some(Hit {
                    class: p.kind,
                    depth: t,
                    primitive: i,
                    world: [dir[0] * t, cam.height + dir[1] * t, t],
                    face_shade: face.shade(),
                });
            }
        }
    }
    let ground_idx = scene
        .primitives
        .iter()
        .position(|p| p.kind == Class::Ground)
        .unwrap_or(0);
    let sky_idx = scene.primitives.iter().position(|p| p.kind == Class::Sky).unwrap_or(1);
    if dir[1] < 0.0 {
        let t = (cam.height / -dir[1]).min(D_MAX);
        if best.is_none_or(|b| t < b.depth) {
            best = Some(Hit {
                class: Class::Ground,
                depth: t,
                primitive: ground_idx,
                world: [dir[0] * t, 0.0, t],
                face_shade: 0.9,
            });
        }
    }
    let mut hit = best.unwrap_or(Hit {
        class: Class::Sky,
        depth: D_MAX,
        primitive: sky_idx,
        world: [dir[0] * D_MAX, cam.height + dir[1] * D_MAX, D_MAX],
        face_shade: 1.0 - 0.25 * dir[1].clamp(0.0, 1.0),
    });
    hit.depth = hit.depth.clamp(D_MIN, D_MAX);
    hit
}

/// Smooth deterministic texture in world coordinates, roughly in [-1, 1].
fn texture(world: [f64; 3], primitive: usize) -> f64 {
    let phase = primitive as f64 * 1.618;
    let [x, y, z] = world;
    0.6 * (2.9 * x + 1.3 * y + phase).sin() * (2.1 * z + 0.7 * y - phase).cos()
        + 0.4 * (7.3 * y + 5.1 * x + 3.7 * z + phase).sin()
}

const FOG_DISTANCE: f64 = 160.0;

pub fn render(scene: &SceneSpec, style: &DomainStyle, resolution: (usize, usize)) -> Result<Sample> {
    let (h, w) = resolution;
    contract!(
        (32..=128).contains(&h) && (32..=128).contains(&w),
        "resolution {}x{} outside 32..=128",
        h,
        w
    );
    let hw = h * w;
    let mut image = vec![0.0; 3 * hw];
    let mut depth = vec![0.0; hw];
    let mut labels = vec![0.0; hw];
    let domain_salt = match style.domain {
        Domain::A => 0xA5A5_0001_u64,
        Domain::B => 0x5A5A_0002_u64,
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(scene.seed ^ domain_salt.rotate_left(17));
    let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let shifted = |p: &Primitive| -> [f64; 3] {
        let s = style.palette_shift[p.kind.id()];
        [p.albedo[0] + s[0], p.albedo[1] + s[1], p.albedo[2] + s[2]]
    };
    let sky_idx = scene.primitives.iter().position(|p| p.kind == Class::Sky);
    let fog = sky_idx.map_or([0.7, 0.75, 0.8], |i| shifted(&scene.primitives[i]));

    for row in 0..h {
        for col in 0..w {
            let hit = trace(scene, row, col, h, w);
            let i = row * w + col;
            depth[i] = hit.depth;
            labels[i] = hit.class.id() as f64;
            let base = scene.primitives.get(hit.primitive).map_or(fog, &shifted);
            let tex = if hit.class == Class::Sky {
                0.0
            } else {
                style.texture_amplitude * texture(hit.world, hit.primitive)
            };
            let fog_w = if hit.class == Class::Sky {
                0.0
            } else {
                1.0 - (-hit.depth / FOG_DISTANCE).exp()
            };
            for ch in 0..3 {
                let lit = base[ch] * hit.face_shade + tex;
                let v = (1.0 - fog_w) * lit + fog_w * fog[ch];
                let v = v * style.tint[ch] + noise.sample(&mut noise_rng);
                image[ch * hw + i] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Sample {
        seed: scene.seed,
        domain: style.domain,
        image: Tensor::new(vec![3, h, w], image)?,
        depth: Tensor::new(vec![1, h, w], depth)?,
        labels: Tensor::new(vec![1, h, w], labels)?,
        valid_mask: Tensor::full(&[1, h, w], 1.0),
    })
}

// ------------------------------------------------------------------- proxy

/// Settings of the emulated stereo proxy labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    pub noise_sigma: f64,
    pub hole_fraction: f64,
    /// Disparity quantization in sub-pixel steps per pixel.
    pub subpixel_levels: f64,
    /// Focal length times stereo baseline, in pixel-units.
    pub focal_baseline: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            noise_sigma: 0.05,
            hole_fraction: 0.1,
            subpixel_levels: 128.0,
            focal_baseline: 32.0,
        }
    }
}

/// Degrades ground-truth depth the way filtered stereo matching would:
/// multiplicative noise, disparity quantization, and clustered invalid holes.
/// Labels and image are copied unchanged. A noise-free proxy skips
/// quantization, so `sigma = 0, holes = 0` reproduces the ground truth.
pub fn make_proxy_depth(sample: &Sample, noise_sigma: f64, hole_fraction: f64, seed: u64) -> Result<Sample> {
    let cfg = ProxyConfig {
        noise_sigma,
        hole_fraction,
        ..ProxyConfig::default()
    };
    make_proxy_depth_with(sample, &cfg, seed)
}

pub fn make_proxy_depth_with(sample: &Sample, cfg: &ProxyConfig, seed: u64) -> Result<Sample> {
    contract!(
        (0.0..0.5).contains(&cfg.hole_fraction),
        "hole fraction {} outside [0, 0.5)",
        cfg.hole_fraction
    );
    contract!(cfg.noise_sigma >= 0.0, "negative proxy noise");
    let shape = sample.depth.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ sample.seed.rotate_left(29));
    let mut out = sample.clone();

    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(1.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for d in out.depth.data_mut() {
            let noisy = (*d * noise.sample(&mut rng)).max(D_MIN);
            let disparity = cfg.focal_baseline / noisy;
            let q = (disparity * cfg.subpixel_levels).round().max(1.0) / cfg.subpixel_levels;
            *d = cfg.focal_baseline / q;
        }
    }

    let target = (cfg.hole_fraction * (h * w) as f64).round() as usize;
    let mask = out.valid_mask.data_mut();
    mask.iter_mut().for_each(|m| *m = 1.0);
    let mut holes = 0;
    while holes < target {
        let (cy, cx) = (rng.gen_range(0..h) as f64, rng.gen_range(0..w) as f64);
        let r = uniform(&mut rng, 1.5, 0.08 * w as f64 + 2.0);
        let (r0, r1) = (
            (cy - r).floor().max(0.0) as usize,
            ((cy + r).ceil() as usize).min(h - 1),
        );
        let (c0, c1) = (
            (cx - r).floor().max(0.0) as usize,
            ((cx + r).ceil() as usize).min(w - 1),
        );
        'blob: for y in r0..=r1 {
            for x in c0..=c1 {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                if dy * dy + dx * dx <= r * r && mask[y * w + x] == 1.0 {
                    mask[y * w + x] = 0.0;
                    holes += 1;
                    if holes == target {
                        break 'blob;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abs_rel(a: &Sample, b: &Sample) -> f64 {
        let (mut s, mut n) = (0.0, 0.0);
        for ((p, g), m) in a.depth.data().iter().zip(b.depth.data()).zip(a.valid_mask.data()) {
            if *m > 0.0 {
                s += (p - g).abs() / g;
                n += 1.0;
            }
        }
        s / n
    }

    #[test]
    fn generation_is_deterministic() {
        let g = GrammarConfig::default();
        assert_eq!(generate_scene(42, &g).unwrap(), generate_scene(42, &g).unwrap());
        assert_ne!(generate_scene(42, &g).unwrap(), generate_scene(43, &g).unwrap());
    }

    #[test]
    fn empty_grammar_has_only_ground_and_sky() {
        let s = generate_scene(9, &GrammarConfig::empty()).unwrap();
        let kinds: Vec<Class> = s.primitives.iter().map(|p| p.kind).collect();
        assert_eq!(kinds, vec![Class::Ground, Class::Sky]);
        let sample = render(&s, &DomainStyle::domain_a(), (64, 64)).unwrap();
        assert!(sample.labels.data().iter().all(|&l| l == 0.0 || l == 1.0));
    }

    #[test]
    fn degenerate_range_is_config_error() {
        let g = GrammarConfig {
            vehicles: CountRange::new(3, 1),
            ..GrammarConfig::default()
        };
        assert!(matches!(generate_scene(1, &g), Err(Error::Config(_))));
    }

    #[test]
    fn counts_within_ranges_and_visible() {
        let g = GrammarConfig::default();
        for seed in 0..200 {
            let s = generate_scene(seed, &g).unwrap();
            let b = s.count(Class::Building) as u32;
            assert!((g.buildings.min..=g.buildings.max).contains(&b));
            assert!(s.count(Class::Vehicle) as u32 <= g.vehicles.max);
            for p in s.primitives.iter().filter(|p| p.is_box()) {
                assert!(in_frustum(p, &s.camera), "seed {seed}: {p:?}");
                assert!(p.position[2] >= D_MIN && p.max_corner()[2] <= D_MAX);
            }
        }
    }

    #[test]
    fn nearer_primitive_wins() {
        let cam = Camera::default();
        let wall = |kind, z: f64| Primitive {
            kind,
            position: [-3.0, 0.0, z],
            size: [6.0, 4.0, 1.0],
            albedo: [0.5; 3],
        };
        let mut prims = generate_scene(0, &GrammarConfig::empty()).unwrap().primitives;
        prims.push(wall(Class::Building, 20.0));
        prims.push(wall(Class::Vehicle, 10.0));
        let scene = SceneSpec {
            seed: 0,
            primitives: prims,
            camera: cam,
        };
        let s = render(&scene, &DomainStyle::domain_a(), (64, 64)).unwrap();
        // pixel straight ahead slightly below the horizon sees the near wall
        let idx = 28 * 64 + 32;
        assert_eq!(s.labels.data()[idx], Class::Vehicle.id() as f64);
        assert!((s.depth.data()[idx] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn style_changes_only_the_image() {
        let s = generate_scene(5, &GrammarConfig::default()).unwrap();
        let a = render(&s, &DomainStyle::domain_a(), (64, 64)).unwrap();
        let b = render(&s, &DomainStyle::domain_b(), (64, 64)).unwrap();
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.image, b.image);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sky_pixels_sit_at_max_depth() {
        let s = generate_scene(11, &GrammarConfig::default()).unwrap();
        let a = render(&s, &DomainStyle::domain_a(), (64, 64)).unwrap();
        for (l, d) in a.labels.data().iter().zip(a.depth.data()) {
            if *l == Class::Sky.id() as f64 {
                assert_eq!(*d, D_MAX);
            }
            assert!((D_MIN..=D_MAX).contains(d));
        }
        assert!(a.valid_mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn pinhole_extent() {
        // a camera-facing plate of width s at depth d spans focal*s/d pixels
        for &(s, d) in &[(4.0, 10.0), (2.0, 8.0), (6.0, 30.0)] {
            let mut prims = generate_scene(0, &GrammarConfig::empty()).unwrap().primitives;
            prims.push(Primitive {
                kind: Class::Sign,
                position: [-s / 2.0, 1.0, d],
                size: [s, 1.2, 0.1],
                albedo: [0.5; 3],
            });
            let scene = SceneSpec {
                seed: 0,
                primitives: prims,
                camera: Camera::default(),
            };
            let sample = render(&scene, &DomainStyle::domain_a(), (64, 64)).unwrap();
            let row = 26; // horizon row: y = camera height lies inside the plate
            let width = (0..64)
                .filter(|&c| sample.labels.data()[row * 64 + c] == Class::Sign.id() as f64)
                .count() as f64;
            let expected = 64.0 * s / d;
            assert!((width - expected).abs() <= 1.0, "s={s} d={d}: {width} vs {expected}");
        }
    }

    #[test]
    fn proxy_without_noise_is_identity() {
        let s = generate_scene(3, &GrammarConfig::default()).unwrap();
        let a = render(&s, &DomainStyle::domain_a(), (64, 64)).unwrap();
        let p = make_proxy_depth(&a, 0.0, 0.0, 1).unwrap();
        assert_eq!(p.depth, a.depth);
        assert!(p.valid_mask.data().iter().all(|&m| m == 1.0));
        assert_eq!(p.labels, a.labels);
        assert_eq!(p.image, a.image);
    }

    #[test]
    fn proxy_hole_fraction() {
        let s = generate_scene(4, &GrammarConfig::default()).unwrap();
        let a = render(&s, &DomainStyle::domain_a(), (64, 64)).unwrap();
        for seed in 0..10 {
            let p = make_proxy_depth(&a, 0.05, 0.2, seed).unwrap();
            let mean = p.valid_mask.data().iter().sum::<f64>() / 4096.0;
            assert!((mean - 0.8).abs() <= 0.02, "{mean}");
            assert_eq!(p.labels, a.labels);
            assert_eq!(p.image, a.image);
        }
        assert!(make_proxy_depth(&a, 0.05, 0.5, 0).is_err());
    }

    #[test]
    fn proxy_noise_level_matches_half_normal_mean() {
        // E|N(1, s^2) - 1| = s * sqrt(2 / pi)
        let expected = 0.05 * (2.0 / std::f64::consts::PI).sqrt();
        let (mut total, mut n) = (0.0, 0.0);
        for seed in 0..20 {
            let s = generate_scene(seed, &GrammarConfig::default()).unwrap();
            let a = render(&s, &DomainStyle::domain_a(), (64, 64)).unwrap();
            let p = make_proxy_depth(&a, 0.05, 0.0, seed).unwrap();
            total += abs_rel(&p, &a);
            n += 1.0;
        }
        let mean = total / n;
        assert!((mean - expected).abs() < 0.003, "{mean} vs {expected}");
    }
}
