//! Synthetic ground-truth worlds and noisy detection streams.
//!
//! A world is a set of objects moving smoothly inside the unit square. Each
//! object carries a class, a latent appearance vector and a per-frame box and
//! mask. [`corrupt`] turns a world into what a detector would report: misses,
//! duplicates, false positives, softened class scores, box jitter and
//! appearance noise.

mod io;

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};

pub use io::{
    load_detections_jsonl, load_gt_jsonl, read_detections, read_gt, save_detections_jsonl, save_gt_jsonl,
    write_detections, write_gt,
};

/// Maximum detections kept per frame.
pub const MAX_DETECTIONS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Independent objects with random entry, exit and motion.
    Random,
    /// Two same-class objects whose paths cross mid-sequence, plus random extras.
    Crossing,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Random => "random",
            Scenario::Crossing => "crossing",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub grid: usize,
    pub appearance_dim: usize,
    pub appearance_scale: f64,
    pub size_range: (f64, f64),
    pub speed_range: (f64, f64),
    /// Standard deviation of the per-frame heading change, radians.
    pub turn_noise: f64,
    pub initial_presence: f64,
    pub entry_prob: f64,
    pub exit_prob: f64,
    pub scenario: Scenario,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            frames: 10,
            min_objects: 1,
            max_objects: 4,
            grid: 24,
            appearance_dim: 8,
            appearance_scale: 0.05,
            size_range: (0.15, 0.3),
            speed_range: (0.01, 0.04),
            turn_noise: 0.15,
            initial_presence: 0.8,
            entry_prob: 0.15,
            exit_prob: 0.03,
            scenario: Scenario::Random,
            seed: 0,
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")))
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.num_classes == 0 || self.appearance_dim == 0 || self.grid == 0 {
            return Err(Error::invalid("frames, num_classes, appearance_dim and grid must be ≥ 1"));
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::invalid("size_range must satisfy 0 < lo ≤ hi < 1"));
        }
        if self.speed_range.0 < 0.0 || self.speed_range.0 > self.speed_range.1 {
            return Err(Error::invalid("speed_range must satisfy 0 ≤ lo ≤ hi"));
        }
        check_prob("initial_presence", self.initial_presence)?;
        check_prob("entry_prob", self.entry_prob)?;
        check_prob("exit_prob", self.exit_prob)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtFrame {
    pub bbox: BBox,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtObject {
    pub id: u32,
    pub class: usize,
    pub appearance: Vec<f64>,
    /// One entry per frame; `None` while the object is absent.
    pub frames: Vec<Option<GtFrame>>,
}

impl GtObject {
    pub fn present(&self, t: usize) -> bool {
        self.frames.get(t).is_some_and(|f| f.is_some())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSequence {
    pub frames: usize,
    pub grid: usize,
    pub num_classes: usize,
    pub appearance_dim: usize,
    pub objects: Vec<GtObject>,
}

impl GroundTruthSequence {
    /// Per-pixel object id for frame `t`. Objects are painted in id order, so
    /// a later object owns contested cells.
    pub fn instance_map(&self, t: usize) -> Vec<Option<u32>> {
        let mut map = vec![None; self.grid * self.grid];
        for obj in &self.objects {
            if let Some(Some(f)) = obj.frames.get(t) {
                for (cell, &on) in map.iter_mut().zip(f.mask.cells()) {
                    if on == 1 {
                        *cell = Some(obj.id);
                    }
                }
            }
        }
        map
    }

    pub fn object(&self, id: u32) -> Option<&GtObject> {
        self.objects.iter().find(|o| o.id == id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    /// Derived from the ground-truth object with this id.
    Object(u32),
    FalsePositive,
    /// Loaded from a file that carries no provenance.
    Unknown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// `C + 1` scores, background last.
    pub scores: Vec<f64>,
    pub mask: Mask,
    pub appearance: Vec<f64>,
    pub source: Provenance,
}

impl Detection {
    pub fn num_classes(&self) -> usize {
        self.scores.len() - 1
    }

    /// Highest foreground score and its class; ties go to the lower class.
    pub fn top_foreground(&self) -> (usize, f64) {
        let fg = &self.scores[..self.scores.len() - 1];
        let mut best = (0, f64::NEG_INFINITY);
        for (k, &s) in fg.iter().enumerate() {
            if s > best.1 {
                best = (k, s);
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DetectionSequence {
    pub frames: Vec<Vec<Detection>>,
}

impl DetectionSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

struct Motion {
    bbox: BBox,
    heading: f64,
    speed: f64,
    turn_noise: f64,
}

impl Motion {
    /// Advances one frame, reflecting off the borders of the unit square.
    fn advance(&mut self, z: f64) {
        self.heading += self.turn_noise * z;
        let b = &mut self.bbox;
        b.cx += self.speed * self.heading.cos();
        b.cy += self.speed * self.heading.sin();
        let (hx, hy) = (0.5 * b.w, 0.5 * b.h);
        if b.cx < hx {
            b.cx = 2.0 * hx - b.cx;
            self.heading = PI - self.heading;
        } else if b.cx > 1.0 - hx {
            b.cx = 2.0 * (1.0 - hx) - b.cx;
            self.heading = PI - self.heading;
        }
        if b.cy < hy {
            b.cy = 2.0 * hy - b.cy;
            self.heading = -self.heading;
        } else if b.cy > 1.0 - hy {
            b.cy = 2.0 * (1.0 - hy) - b.cy;
            self.heading = -self.heading;
        }
        b.cx = b.cx.clamp(hx, 1.0 - hx);
        b.cy = b.cy.clamp(hy, 1.0 - hy);
    }
}

struct RawObject {
    class: usize,
    appearance: Vec<f64>,
    boxes: Vec<Option<BBox>>,
}

fn sample_appearance(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..cfg.appearance_dim)
        .map(|_| cfg.appearance_scale * normal(rng))
        .collect()
}

/// Draw order for one random object: class, appearance (A normals), w, h, cx,
/// cy, heading, speed, then per frame one uniform for the presence chain
/// followed by one normal for the heading change.
fn sample_random_object(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> RawObject {
    let class = rng.gen_range(0..cfg.num_classes);
    let appearance = sample_appearance(cfg, rng);
    let (lo, hi) = cfg.size_range;
    let w = rng.gen_range(lo..=hi);
    let h = rng.gen_range(lo..=hi);
    let cx = rng.gen_range(0.5 * w..=1.0 - 0.5 * w);
    let cy = rng.gen_range(0.5 * h..=1.0 - 0.5 * h);
    let heading = rng.gen_range(0.0..2.0 * PI);
    let speed = rng.gen_range(cfg.speed_range.0..=cfg.speed_range.1);
    let mut motion = Motion {
        bbox: BBox::new(cx, cy, w, h),
        heading,
        speed,
        turn_noise: cfg.turn_noise,
    };
    let schedule = presence_schedule(cfg, rng, |rng| normal(rng), &mut motion);
    RawObject {
        class,
        appearance,
        boxes: schedule,
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Chain {
    NotYet,
    Present,
    Gone,
}

fn presence_schedule(
    cfg: &WorldConfig,
    rng: &mut ChaCha8Rng,
    mut turn: impl FnMut(&mut ChaCha8Rng) -> f64,
    motion: &mut Motion,
) -> Vec<Option<BBox>> {
    let mut state = Chain::NotYet;
    let mut out = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let u: f64 = rng.gen();
        let z = turn(rng);
        if t > 0 {
            motion.advance(z);
        }
        state = match state {
            Chain::NotYet => {
                let p = if t == 0 { cfg.initial_presence } else { cfg.entry_prob };
                if u < p {
                    Chain::Present
                } else {
                    Chain::NotYet
                }
            }
            Chain::Present if u < cfg.exit_prob => Chain::Gone,
            s => s,
        };
        out.push((state == Chain::Present).then_some(motion.bbox));
    }
    out
}

/// Two same-class objects moving toward each other along nearly the same
/// row, crossing at the middle frame. Both are present in every frame.
fn sample_crossing_pair(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> [RawObject; 2] {
    let class = rng.gen_range(0..cfg.num_classes);
    let row = rng.gen_range(0.3..0.7);
    let (lo, hi) = cfg.size_range;
    let span = 0.6;
    let step = if cfg.frames > 1 {
        span / (cfg.frames - 1) as f64
    } else {
        0.0
    };
    let mut make = |dir: f64| {
        let appearance = sample_appearance(cfg, rng);
        let w = rng.gen_range(lo..=hi);
        let h = rng.gen_range(lo..=hi);
        let dy = rng.gen_range(-0.05..0.05);
        let boxes = (0..cfg.frames)
            .map(|t| {
                let cx = 0.5 - dir * 0.5 * span + dir * step * t as f64;
                Some(BBox::new(cx, row + dy, w, h).clamped_to_unit(lo))
            })
            .collect();
        RawObject {
            class,
            appearance,
            boxes,
        }
    };
    let a = make(1.0);
    let b = make(-1.0);
    [a, b]
}

/// Samples a ground-truth world.
///
/// Sampling order: object count uniform in `[min_objects, max_objects]`, then
/// each object per [`sample_random_object`]'s schedule. For the crossing
/// scenario the crossing pair is drawn first (class, row, then per object:
/// appearance, w, h, row offset) and the extra object count is uniform in
/// `[0, max_objects − 2]`. Objects that never become present are dropped and
/// ids are assigned consecutively to the rest.
pub fn generate_sequence(cfg: &WorldConfig) -> Result<GroundTruthSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut raw = Vec::new();
    match cfg.scenario {
        Scenario::Random => {
            let lo = cfg.min_objects.min(cfg.max_objects);
            let n = rng.gen_range(lo..=cfg.max_objects);
            for _ in 0..n {
                raw.push(sample_random_object(cfg, &mut rng));
            }
        }
        Scenario::Crossing => {
            if cfg.max_objects >= 2 {
                raw.extend(sample_crossing_pair(cfg, &mut rng));
                let extra = rng.gen_range(0..=cfg.max_objects - 2);
                for _ in 0..extra {
                    raw.push(sample_random_object(cfg, &mut rng));
                }
            }
        }
    }
    let objects = raw
        .into_iter()
        .filter(|o| o.boxes.iter().any(|b| b.is_some()))
        .enumerate()
        .map(|(i, o)| GtObject {
            id: i as u32,
            class: o.class,
            appearance: o.appearance,
            frames: o
                .boxes
                .into_iter()
                .map(|b| {
                    b.map(|bbox| GtFrame {
                        mask: Mask::ellipse(&bbox, cfg.grid),
                        bbox,
                    })
                })
                .collect(),
        })
        .collect();
    Ok(GroundTruthSequence {
        frames: cfg.frames,
        grid: cfg.grid,
        num_classes: cfg.num_classes,
        appearance_dim: cfg.appearance_dim,
        objects,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub miss_prob: f64,
    /// Mean number of new false positives per frame (Poisson).
    pub fp_rate: f64,
    /// Probability that a false positive reappears in the next frame.
    pub fp_persistence: f64,
    /// Class-score softening; 0 gives one-hot scores.
    pub class_temperature: f64,
    /// Box jitter relative to box size.
    pub box_jitter: f64,
    pub appearance_noise: f64,
    pub duplicate_prob: f64,
    /// Scale of false-positive appearance vectors.
    pub fp_appearance_scale: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            miss_prob: 0.1,
            fp_rate: 0.3,
            fp_persistence: 0.4,
            class_temperature: 0.5,
            box_jitter: 0.05,
            appearance_noise: 0.01,
            duplicate_prob: 0.05,
            fp_appearance_scale: 0.05,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            miss_prob: 0.0,
            fp_rate: 0.0,
            fp_persistence: 0.0,
            class_temperature: 0.0,
            box_jitter: 0.0,
            appearance_noise: 0.0,
            duplicate_prob: 0.0,
            fp_appearance_scale: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_prob("miss_prob", self.miss_prob)?;
        check_prob("fp_persistence", self.fp_persistence)?;
        check_prob("duplicate_prob", self.duplicate_prob)?;
        let sigmas = [
            self.fp_rate,
            self.class_temperature,
            self.box_jitter,
            self.appearance_noise,
            self.fp_appearance_scale,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::invalid("noise rates and scales must be finite and ≥ 0"));
        }
        Ok(())
    }
}

/// `C + 1` scores peaked at `class`: softmax of `[k = class]/T + zₖ`.
/// `T = 0` yields the exact one-hot vector. Always draws `C + 1` normals.
fn class_scores(class: usize, num_classes: usize, temperature: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let z: Vec<f64> = (0..=num_classes).map(|_| normal(rng)).collect();
    if temperature == 0.0 {
        let mut s = vec![0.0; num_classes + 1];
        s[class] = 1.0;
        return s;
    }
    let logits: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(k, zk)| if k == class { 1.0 / temperature + zk } else { *zk })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Relative jitter: centers move by `σ·size·z`, sizes scale by `exp(σ·z)`.
/// Always draws four normals.
fn jitter_box(b: &BBox, sigma: f64, rng: &mut ChaCha8Rng) -> BBox {
    let z: [f64; 4] = [normal(rng), normal(rng), normal(rng), normal(rng)];
    if sigma == 0.0 {
        return *b;
    }
    BBox::new(
        b.cx + sigma * b.w * z[0],
        b.cy + sigma * b.h * z[1],
        b.w * (sigma * z[2]).exp(),
        b.h * (sigma * z[3]).exp(),
    )
    .clamped_to_unit(0.02)
}

fn noisy_appearance(latent: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    latent
        .iter()
        .map(|&x| {
            let z = normal(rng);
            if sigma == 0.0 {
                x
            } else {
                x + sigma * z
            }
        })
        .collect()
}

struct FpStream {
    bbox: BBox,
    class: usize,
    appearance: Vec<f64>,
}

/// Corrupts ground truth into a detection stream.
///
/// Per frame: each present object (id order) draws a miss uniform; if kept,
/// four box-jitter normals, `C + 1` score normals, `A` appearance normals and
/// a duplicate uniform (a duplicate repeats the three draws with doubled
/// jitter). Then each false-positive stream from the previous frame draws a
/// persistence uniform and, if it continues, jitter, score and appearance
/// draws. Finally a Poisson count of new false positives, each drawing size,
/// position, class, appearance and scores. Frames with more than
/// [`MAX_DETECTIONS`] keep the highest top-foreground scores, in their
/// original order.
pub fn corrupt(gt: &GroundTruthSequence, noise: &NoiseConfig, seed: u64) -> Result<DetectionSequence> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = gt.num_classes;
    let a_dim = gt.appearance_dim;
    let poisson = if noise.fp_rate > 0.0 {
        Some(Poisson::new(noise.fp_rate).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let mut streams: Vec<FpStream> = Vec::new();
    let mut frames = Vec::with_capacity(gt.frames);
    for t in 0..gt.frames {
        let mut dets = Vec::new();
        for obj in &gt.objects {
            let Some(Some(f)) = obj.frames.get(t) else { continue };
            let u: f64 = rng.gen();
            if u < noise.miss_prob {
                continue;
            }
            let bbox = jitter_box(&f.bbox, noise.box_jitter, &mut rng);
            let scores = class_scores(obj.class, c, noise.class_temperature, &mut rng);
            let appearance = noisy_appearance(&obj.appearance, noise.appearance_noise, &mut rng);
            dets.push(Detection {
                mask: Mask::ellipse(&bbox, gt.grid),
                bbox,
                scores,
                appearance,
                source: Provenance::Object(obj.id),
            });
            let u_dup: f64 = rng.gen();
            if u_dup < noise.duplicate_prob {
                let bbox = jitter_box(&f.bbox, 2.0 * noise.box_jitter.max(0.05), &mut rng);
                let scores = class_scores(obj.class, c, noise.class_temperature * 1.5, &mut rng);
                let appearance = noisy_appearance(&obj.appearance, noise.appearance_noise * 2.0, &mut rng);
                dets.push(Detection {
                    mask: Mask::ellipse(&bbox, gt.grid),
                    bbox,
                    scores,
                    appearance,
                    source: Provenance::Object(obj.id),
                });
            }
        }

        let mut next_streams = Vec::new();
        for s in streams.drain(..) {
            let u: f64 = rng.gen();
            if u >= noise.fp_persistence {
                continue;
            }
            let bbox = jitter_box(&s.bbox, noise.box_jitter.max(0.05), &mut rng);
            let scores = class_scores(s.class, c, noise.class_temperature.max(0.5), &mut rng);
            let appearance = noisy_appearance(&s.appearance, noise.appearance_noise, &mut rng);
            dets.push(Detection {
                mask: Mask::ellipse(&bbox, gt.grid),
                bbox,
                scores,
                appearance,
                source: Provenance::FalsePositive,
            });
            next_streams.push(FpStream { bbox, ..s });
        }
        let n_new = poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        for _ in 0..n_new {
            let w = rng.gen_range(0.08..=0.3);
            let h = rng.gen_range(0.08..=0.3);
            let cx = rng.gen_range(0.5 * w..=1.0 - 0.5 * w);
            let cy = rng.gen_range(0.5 * h..=1.0 - 0.5 * h);
            let bbox = BBox::new(cx, cy, w, h);
            let class = rng.gen_range(0..c.max(1));
            let appearance: Vec<f64> = (0..a_dim).map(|_| noise.fp_appearance_scale * normal(&mut rng)).collect();
            let scores = class_scores(class, c, noise.class_temperature.max(0.5), &mut rng);
            dets.push(Detection {
                mask: Mask::ellipse(&bbox, gt.grid),
                bbox,
                scores,
                appearance: appearance.clone(),
                source: Provenance::FalsePositive,
            });
            next_streams.push(FpStream {
                bbox,
                class,
                appearance,
            });
        }
        streams = next_streams;
        frames.push(truncate_detections(dets));
    }
    Ok(DetectionSequence { frames })
}

/// Keeps the [`MAX_DETECTIONS`] highest top-foreground scores, preserving order.
pub fn truncate_detections(dets: Vec<Detection>) -> Vec<Detection> {
    if dets.len() <= MAX_DETECTIONS {
        return dets;
    }
    let keep = kept_indices(&dets, MAX_DETECTIONS);
    let mut keep_flags = vec![false; dets.len()];
    for i in keep {
        keep_flags[i] = true;
    }
    dets.into_iter()
        .zip(keep_flags)
        .filter_map(|(d, k)| k.then_some(d))
        .collect()
}

/// Indices (ascending) of the `cap` detections with the highest top
/// foreground score; ties keep the earlier detection.
pub fn kept_indices(dets: &[Detection], cap: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .top_foreground()
            .1
            .partial_cmp(&dets[a].top_foreground().1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(cap);
    order.sort_unstable();
    order
}

/// A ground-truth world together with its detection stream.
#[derive(Clone, Debug)]
pub struct LabeledSequence {
    pub gt: GroundTruthSequence,
    pub detections: DetectionSequence,
    pub scenario: Scenario,
}

/// World and noise settings for sampling many labeled sequences from seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub world: WorldConfig,
    pub noise: NoiseConfig,
    /// Fraction of sequences using the crossing scenario.
    pub crossing_fraction: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self::crossing_suite()
    }
}

impl SuiteConfig {
    /// Desk-scale training/evaluation suite: 5 classes, at most 6 objects,
    /// 10 frames, crossing pairs in half of the sequences.
    pub fn crossing_suite() -> Self {
        Self {
            world: WorldConfig {
                num_classes: 5,
                frames: 10,
                min_objects: 1,
                max_objects: 6,
                grid: 12,
                ..WorldConfig::default()
            },
            noise: NoiseConfig::default(),
            crossing_fraction: 0.5,
        }
    }

    /// Sequence for `seed`; the scenario choice and both the world and the
    /// corruption are pure functions of the seed.
    pub fn sample(&self, seed: u64) -> Result<LabeledSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
        let crossing = rng.gen::<f64>() < self.crossing_fraction;
        let scenario = if crossing { Scenario::Crossing } else { Scenario::Random };
        let world = WorldConfig {
            seed,
            scenario,
            ..self.world.clone()
        };
        let gt = generate_sequence(&world)?;
        let detections = corrupt(&gt, &self.noise, seed.wrapping_mul(0x9E37_79B9).wrapping_add(1))?;
        Ok(LabeledSequence { gt, detections, scenario })
    }
}
