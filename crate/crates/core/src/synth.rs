//! Deterministic synthetic corpus: videos of a moving primary shape that is
//! present in (nearly) every frame, plus transient look-alike distractors
//! whose colours are blended toward the primary's. Masks mark the primary
//! only. Static saliency-style images carry one shape each.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, CorpusIndex, SequenceEntry, Split};
use crate::error::{Error, Result};
use crate::netpbm::{self, GrayImage, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
    ];

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of half-extent `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
            // Apex up, base of width 2r at dy = r.
            ShapeKind::Triangle => (-r..=r).contains(&dy) && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Motion {
    /// Centre at frame 0, pixels.
    pub start: [f64; 2],
    /// Pixels per frame; the object bounces off the frame borders.
    pub velocity: [f64; 2],
}

impl Motion {
    pub fn center(&self, t: usize, half_extent: f64, frame_size: [usize; 2]) -> [f64; 2] {
        let mut c = [0.0; 2];
        for axis in 0..2 {
            let lo = half_extent;
            let hi = (frame_size[axis] as f64 - half_extent).max(lo);
            c[axis] = bounce(self.start[axis] + self.velocity[axis] * t as f64, lo, hi);
        }
        c
    }
}

fn bounce(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let m = (x - lo).rem_euclid(2.0 * span);
    lo + if m <= span { m } else { 2.0 * span - m }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimarySpec {
    pub shape: ShapeKind,
    pub color: Rgb,
    pub size: f64,
    pub motion: Motion,
    /// Fraction of frames containing the primary.
    pub presence_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistractorSpec {
    pub shape: ShapeKind,
    pub base_color: Rgb,
    /// 0 keeps `base_color`, 1 copies the primary's colour.
    pub color_similarity: f64,
    pub size: f64,
    pub motion: Motion,
    /// Half-open interval of the video, as fractions of its length.
    pub lifetime: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// `[width, height]`.
    pub frame_size: [usize; 2],
    pub length: usize,
    /// Background colours at the left and right edges.
    pub background: [Rgb; 2],
    pub primary: PrimarySpec,
    pub distractors: Vec<DistractorSpec>,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv(c: Rgb) -> [f64; 3] {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let chroma = max - min;
    let hue = if chroma == 0.0 {
        0.0
    } else if max == c[0] {
        60.0 * ((c[1] - c[2]) / chroma).rem_euclid(6.0)
    } else if max == c[1] {
        60.0 * ((c[2] - c[0]) / chroma + 2.0)
    } else {
        60.0 * ((c[0] - c[1]) / chroma + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { chroma / max };
    [hue, sat, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> Rgb {
    let chroma = v * s;
    let sector = h.rem_euclid(360.0) / 60.0;
    let x = chroma * (1.0 - (sector.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match sector as u32 {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    let m = v - chroma;
    [r + m, g + m, b + m]
}

/// Frames `floor(a T) .. floor(b T)` of a fractional interval `[a, b)`.
pub fn lifetime_frames(lifetime: [f64; 2], length: usize) -> std::ops::Range<usize> {
    let t = length as f64;
    let start = (lifetime[0] * t).floor() as usize;
    let end = ((lifetime[1] * t).floor() as usize).min(length);
    start..end.max(start)
}

/// Whether the primary is present in frame `t`: spreads `floor(rate T)` frames evenly.
pub fn primary_present(rate: f64, t: usize) -> bool {
    ((t + 1) as f64 * rate).floor() > (t as f64 * rate).floor()
}

impl SceneSpec {
    pub fn primary_presence(&self) -> usize {
        (0..self.length)
            .filter(|&t| primary_present(self.primary.presence_rate, t))
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.frame_size;
        if w == 0 || h == 0 {
            return Err(Error::usage("frame size must be positive"));
        }
        if self.length < 2 {
            return Err(Error::usage(format!(
                "a video needs at least 2 frames, got {}",
                self.length
            )));
        }
        if !(0.0..=1.0).contains(&self.primary.presence_rate) {
            return Err(Error::usage("primary presence_rate must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::usage("noise_sigma must be nonnegative"));
        }
        if self.primary.size <= 0.0 || self.distractors.iter().any(|d| d.size <= 0.0) {
            return Err(Error::usage("object sizes must be positive"));
        }
        let primary = self.primary_presence();
        for (i, d) in self.distractors.iter().enumerate() {
            let [a, b] = d.lifetime;
            if !(0.0 <= a && a < b && b <= 1.0) {
                return Err(Error::usage(format!(
                    "distractor {i}: lifetime {:?} is not a subinterval of [0, 1)",
                    d.lifetime
                )));
            }
            if !(0.0..=1.0).contains(&d.color_similarity) {
                return Err(Error::usage(format!(
                    "distractor {i}: color_similarity must lie in [0, 1]"
                )));
            }
            let frames = lifetime_frames(d.lifetime, self.length).len();
            if frames >= primary {
                return Err(Error::usage(format!(
                    "distractor {i} appears in {frames} frames, primary in only {primary}; \
                     the primary must be the most frequent object"
                )));
            }
        }
        Ok(())
    }

    /// Distractor hue moved toward the primary's hue by `color_similarity`
    /// along the shorter arc; saturation and value stay those of `base_color`.
    pub fn distractor_color(&self, d: &DistractorSpec) -> Rgb {
        let [bh, bs, bv] = rgb_to_hsv(d.base_color);
        let [ph, _, _] = rgb_to_hsv(self.primary.color);
        let mut delta = ph - bh;
        if delta > 180.0 {
            delta -= 360.0;
        } else if delta < -180.0 {
            delta += 360.0;
        }
        hsv_to_rgb([(bh + d.color_similarity * delta).rem_euclid(360.0), bs, bv])
    }

    /// Rasterises every frame and its primary-object mask.
    pub fn render(&self) -> Result<Vec<(RgbImage, GrayImage)>> {
        self.validate()?;
        let [w, h] = self.frame_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise_sigma.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::usage(format!("noise: {e}")))?;
        let mut out = Vec::with_capacity(self.length);
        for t in 0..self.length {
            let mut canvas = vec![[0.0f64; 3]; w * h];
            for y in 0..h {
                for x in 0..w {
                    let a = (x as f64 + 0.5) / w as f64;
                    let [left, right] = &self.background;
                    canvas[y * w + x] =
                        std::array::from_fn(|k| (1.0 - a) * left[k] + a * right[k]);
                }
            }
            for d in &self.distractors {
                if lifetime_frames(d.lifetime, self.length).contains(&t) {
                    let center = d.motion.center(t, d.size, self.frame_size);
                    paint(&mut canvas, w, h, d.shape, center, d.size, self.distractor_color(d), None);
                }
            }
            let mut mask = vec![0u8; w * h];
            if primary_present(self.primary.presence_rate, t) {
                let p = &self.primary;
                let center = p.motion.center(t, p.size, self.frame_size);
                paint(&mut canvas, w, h, p.shape, center, p.size, p.color, Some(&mut mask));
            }
            let mut pixels = Vec::with_capacity(w * h * 3);
            for px in &canvas {
                for &v in px {
                    let noisy = if self.noise_sigma > 0.0 {
                        v + noise.sample(&mut rng)
                    } else {
                        v
                    };
                    pixels.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
            out.push((
                RgbImage {
                    width: w,
                    height: h,
                    pixels,
                },
                GrayImage {
                    width: w,
                    height: h,
                    pixels: mask,
                },
            ));
        }
        Ok(out)
    }
}

#[allow(clippy::too_many_arguments)]
fn paint(
    canvas: &mut [Rgb],
    w: usize,
    h: usize,
    shape: ShapeKind,
    center: [f64; 2],
    size: f64,
    color: Rgb,
    mut mask: Option<&mut Vec<u8>>,
) {
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - center[0];
            let dy = y as f64 + 0.5 - center[1];
            if shape.contains(dx, dy, size) {
                canvas[y * w + x] = color;
                if let Some(m) = mask.as_deref_mut() {
                    m[y * w + x] = 255;
                }
            }
        }
    }
}

/// Writes a rendered video under `root/name` and returns its index entry.
pub fn generate_video(spec: &SceneSpec, root: &Path, name: &str, split: Split) -> Result<SequenceEntry> {
    let frames = spec.render()?;
    write_sequence(root, name, &frames)?;
    let scene_path = root.join(name).join("scene.json");
    let text = serde_json::to_string_pretty(spec).map_err(|e| Error::json(&scene_path, e))?;
    fs::write(&scene_path, text + "\n").map_err(|e| Error::io(&scene_path, e))?;
    Ok(SequenceEntry {
        name: name.to_string(),
        split,
        length: spec.length,
    })
}

fn write_sequence(root: &Path, name: &str, frames: &[(RgbImage, GrayImage)]) -> Result<()> {
    corpus::create_sequence_dirs(root, name)?;
    for (i, (frame, mask)) in frames.iter().enumerate() {
        netpbm::write_ppm(&corpus::frame_path(root, name, i), frame)?;
        netpbm::write_pgm(&corpus::mask_path(root, name, i), mask)?;
    }
    Ok(())
}

/// Knobs for randomly drawn scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub frame_size: [usize; 2],
    pub length: usize,
    pub distractors: usize,
    pub color_similarity: [f64; 2],
    /// Fraction of the video each distractor is visible for.
    pub distractor_lifetime: f64,
    pub size: [f64; 2],
    pub speed: [f64; 2],
    pub presence_rate: f64,
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frame_size: [96, 96],
            length: 24,
            distractors: 2,
            color_similarity: [0.6, 0.85],
            distractor_lifetime: 0.3,
            size: [11.0, 16.0],
            speed: [0.5, 2.0],
            presence_rate: 1.0,
            noise_sigma: 0.03,
        }
    }
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> Rgb {
    // Saturated: one channel high, one low, one anywhere.
    let mut c = [rng.gen_range(0.75..1.0), rng.gen_range(0.0..0.25), rng.gen_range(0.0..1.0)];
    let perm = rng.gen_range(0..6);
    let order = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]][perm];
    c = [c[order[0]], c[order[1]], c[order[2]]];
    c
}

fn random_background<R: Rng + ?Sized>(rng: &mut R) -> [Rgb; 2] {
    let base: Rgb = std::array::from_fn(|_| rng.gen_range(0.25..0.55));
    let other: Rgb = std::array::from_fn(|k| (base[k] + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0));
    [base, other]
}

fn random_motion<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig, size: f64) -> Motion {
    let [w, h] = cfg.frame_size;
    let speed = rng.gen_range(cfg.speed[0]..=cfg.speed[1]);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    Motion {
        start: [
            rng.gen_range(size..=(w as f64 - size).max(size)),
            rng.gen_range(size..=(h as f64 - size).max(size)),
        ],
        velocity: [speed * angle.cos(), speed * angle.sin()],
    }
}

/// Draws one random scene; distractor lifetimes are spread over the video.
pub fn random_scene<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> SceneSpec {
    let size = rng.gen_range(cfg.size[0]..=cfg.size[1]);
    let primary = PrimarySpec {
        shape: ShapeKind::ALL[rng.gen_range(0..4)],
        color: random_color(rng),
        size,
        motion: random_motion(rng, cfg, size),
        presence_rate: cfg.presence_rate,
    };
    let life = cfg.distractor_lifetime.clamp(0.0, 1.0);
    let distractors = (0..cfg.distractors)
        .map(|_| {
            let dsize = rng.gen_range(cfg.size[0]..=cfg.size[1]);
            let start = rng.gen_range(0.0..=(1.0 - life).max(0.0));
            DistractorSpec {
                shape: ShapeKind::ALL[rng.gen_range(0..4)],
                base_color: random_color(rng),
                color_similarity: rng.gen_range(cfg.color_similarity[0]..=cfg.color_similarity[1]),
                size: dsize,
                motion: random_motion(rng, cfg, dsize),
                lifetime: [start, (start + life).min(1.0)],
            }
        })
        .collect();
    SceneSpec {
        frame_size: cfg.frame_size,
        length: cfg.length,
        background: random_background(rng),
        primary,
        distractors,
        noise_sigma: cfg.noise_sigma,
        seed: rng.gen(),
    }
}

/// Size and composition of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub train_videos: usize,
    pub test_videos: usize,
    pub static_images: usize,
    pub scene: SceneConfig,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            train_videos: 5,
            test_videos: 3,
            static_images: 40,
            scene: SceneConfig::default(),
            seed: 7,
        }
    }
}

pub const STATIC_SEQUENCE: &str = "static";

/// Writes `n` single-shape saliency images as the `static` sequence.
pub fn generate_static_set(root: &Path, n: usize, seed: u64, frame_size: [usize; 2]) -> Result<SequenceEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Sizes are set for a 96-pixel frame and scale with the shorter side.
    let scale = frame_size[0].min(frame_size[1]) as f64 / 96.0;
    let cfg = SceneConfig {
        frame_size,
        length: 2,
        distractors: 0,
        size: [10.0 * scale, 22.0 * scale],
        ..SceneConfig::default()
    };
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let mut scene = random_scene(&cfg, &mut rng);
        scene.primary.motion.velocity = [0.0, 0.0];
        let first = scene.render()?.swap_remove(0);
        frames.push(first);
    }
    write_sequence(root, STATIC_SEQUENCE, &frames)?;
    Ok(SequenceEntry {
        name: STATIC_SEQUENCE.to_string(),
        split: Split::Static,
        length: n,
    })
}

/// Generates the full corpus (train and test videos plus static images) and its index.
pub fn generate_corpus(root: &Path, spec: &CorpusSpec) -> Result<CorpusIndex> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut index = CorpusIndex::new(spec.scene.frame_size);
    for (split, count, prefix) in [
        (Split::Train, spec.train_videos, "train"),
        (Split::Test, spec.test_videos, "test"),
    ] {
        for i in 0..count {
            let scene = random_scene(&spec.scene, &mut rng);
            let name = format!("{prefix}_{i:03}");
            index.sequences.push(generate_video(&scene, root, &name, split)?);
        }
    }
    let static_seed = rng.gen();
    index.sequences.push(generate_static_set(
        root,
        spec.static_images,
        static_seed,
        spec.scene.frame_size,
    )?);
    index.save(root)?;
    Ok(index)
}
