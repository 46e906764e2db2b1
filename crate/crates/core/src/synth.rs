//! Deterministic synthetic tracking world: colored shapes moving over a
//! cluttered canvas, with programmatic descriptions, distractors, occluders,
//! and canned benchmark profiles.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crop::{crop_resize, search_window, template_window};
use crate::error::{Error, Result};
use crate::geom::BBox;
use crate::tensor::Tensor;

pub const CANVAS: usize = 160;
pub const BACKGROUND: f32 = 0.08;
pub const DEFAULT_LENGTH: usize = 40;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Square,
        ShapeKind::Circle,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl ColorName {
    pub const ALL: [ColorName; 6] = [
        ColorName::Red,
        ColorName::Green,
        ColorName::Blue,
        ColorName::Yellow,
        ColorName::Magenta,
        ColorName::Cyan,
    ];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            ColorName::Red => [1.0, 0.0, 0.0],
            ColorName::Green => [0.0, 1.0, 0.0],
            ColorName::Blue => [0.0, 0.0, 1.0],
            ColorName::Yellow => [1.0, 1.0, 0.0],
            ColorName::Magenta => [1.0, 0.0, 1.0],
            ColorName::Cyan => [0.0, 1.0, 1.0],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
            ColorName::Magenta => "magenta",
            ColorName::Cyan => "cyan",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    pub fn extent(self) -> f32 {
        match self {
            SizeClass::Small => 16.0,
            SizeClass::Large => 28.0,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Motion {
    Linear { dx: f32, dy: f32 },
    Sine { dx: f32, amp: f32, period: f32 },
    RandomWalk { step: f32 },
}

/// (shape, color, size) — the attributes a description can name.
pub type AttrTuple = (ShapeKind, ColorName, SizeClass);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    pub color: ColorName,
    pub size: SizeClass,
    pub x0: f32,
    pub y0: f32,
    pub motion: Motion,
}

impl ObjectSpec {
    pub fn attrs(&self) -> AttrTuple {
        (self.shape, self.color, self.size)
    }
}

/// Frames [start, end) where the target is drawn over completely.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccluderSpec {
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub target: ObjectSpec,
    pub distractors: Vec<ObjectSpec>,
    pub clutter: f32,
    pub occluders: Vec<OccluderSpec>,
    pub length: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrackSequence {
    pub frames: Vec<Tensor<f32>>, // each (3, CANVAS, CANVAS), values in [0,1]
    pub gt: Vec<BBox>,
    pub description: String,
    pub spec: SceneSpec,
}

/// Template grammar: "the {size} {color} {shape}", plus a motion clause for
/// directed linear motion.
pub fn describe(spec: &SceneSpec) -> String {
    let t = &spec.target;
    let mut s = format!("the {} {} {}", t.size.word(), t.color.word(), t.shape.word());
    if let Motion::Linear { dx, dy } = t.motion {
        if dx != 0.0 || dy != 0.0 {
            let dir = if dx.abs() >= dy.abs() {
                if dx > 0.0 { "right" } else { "left" }
            } else if dy > 0.0 {
                "down"
            } else {
                "up"
            };
            s.push_str(" moving ");
            s.push_str(dir);
        }
    }
    s
}

/// Invert [`describe`]: recover the attribute tuple from a description.
pub fn parse_description(desc: &str) -> Option<AttrTuple> {
    let words: Vec<&str> = desc.split_whitespace().collect();
    if words.len() < 4 || words[0] != "the" {
        return None;
    }
    let size = SizeClass::ALL_WORDS.iter().find(|(w, _)| *w == words[1])?.1;
    let color = ColorName::ALL.iter().find(|c| c.word() == words[2])?;
    let shape = ShapeKind::ALL.iter().find(|s| s.word() == words[3])?;
    Some((*shape, *color, size))
}

impl SizeClass {
    const ALL_WORDS: [(&'static str, SizeClass); 2] =
        [("small", SizeClass::Small), ("large", SizeClass::Large)];
}

fn clamp_center(c: f32, extent: f32) -> f32 {
    let half = extent * 0.5;
    c.clamp(half, CANVAS as f32 - half)
}

/// Per-frame center positions of an object, clamped to keep it on canvas.
fn integrate(obj: &ObjectSpec, length: usize, rng: &mut ChaCha8Rng) -> Vec<(f32, f32)> {
    let e = obj.size.extent();
    let mut out = Vec::with_capacity(length);
    let (mut x, mut y) = (clamp_center(obj.x0, e), clamp_center(obj.y0, e));
    for k in 0..length {
        match obj.motion {
            Motion::Linear { dx, dy } => {
                if k > 0 {
                    x = clamp_center(x + dx, e);
                    y = clamp_center(y + dy, e);
                }
                out.push((x, y));
            }
            Motion::Sine { dx, amp, period } => {
                if k > 0 {
                    x = clamp_center(x + dx, e);
                }
                let phase = 2.0 * std::f32::consts::PI * k as f32 / period.max(1.0);
                out.push((x, clamp_center(obj.y0 + amp * phase.sin(), e)));
            }
            Motion::RandomWalk { step } => {
                if k > 0 {
                    x = clamp_center(x + rng.gen_range(-step..=step), e);
                    y = clamp_center(y + rng.gen_range(-step..=step), e);
                }
                out.push((x, y));
            }
        }
    }
    out
}

fn inside(shape: ShapeKind, cx: f32, cy: f32, e: f32, px: f32, py: f32) -> bool {
    let (dx, dy) = (px - cx, py - cy);
    let half = e * 0.5;
    match shape {
        ShapeKind::Square => dx.abs() <= half && dy.abs() <= half,
        ShapeKind::Circle => dx * dx + dy * dy <= half * half,
        ShapeKind::Triangle => {
            // up-pointing isoceles in the e×e box
            if dy < -half || dy > half {
                return false;
            }
            let t = (dy + half) / e; // 0 at apex row, 1 at base
            dx.abs() <= half * t
        }
        ShapeKind::Cross => {
            let arm = e / 6.0;
            (dx.abs() <= half && dy.abs() <= arm) || (dx.abs() <= arm && dy.abs() <= half)
        }
    }
}

fn draw_shape(frame: &mut [f32], shape: ShapeKind, cx: f32, cy: f32, e: f32, rgb: [f32; 3]) {
    let half = e * 0.5;
    let x_lo = ((cx - half).floor().max(0.0)) as usize;
    let x_hi = ((cx + half).ceil().min(CANVAS as f32)) as usize;
    let y_lo = ((cy - half).floor().max(0.0)) as usize;
    let y_hi = ((cy + half).ceil().min(CANVAS as f32)) as usize;
    let hw = CANVAS * CANVAS;
    for py in y_lo..y_hi {
        for px in x_lo..x_hi {
            if inside(shape, cx, cy, e, px as f32 + 0.5, py as f32 + 0.5) {
                for c in 0..3 {
                    frame[c * hw + py * CANVAS + px] = rgb[c];
                }
            }
        }
    }
}

/// Render the full sequence. Pure function of the spec (including its seed).
pub fn render_sequence(spec: &SceneSpec) -> TrackSequence {
    let mut walk_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x57A1_C0DE);
    let target_pos = integrate(&spec.target, spec.length, &mut walk_rng);
    let distractor_pos: Vec<Vec<(f32, f32)>> = spec
        .distractors
        .iter()
        .map(|d| integrate(d, spec.length, &mut walk_rng))
        .collect();

    // static clutter: dim gray speckle squares
    let mut clutter_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xC1_077E2);
    let n_clutter = (spec.clutter.clamp(0.0, 1.0) * 12.0).round() as usize;
    let clutter: Vec<(f32, f32, f32, f32)> = (0..n_clutter)
        .map(|_| {
            (
                clutter_rng.gen_range(0.0..CANVAS as f32),
                clutter_rng.gen_range(0.0..CANVAS as f32),
                clutter_rng.gen_range(3.0..9.0),
                clutter_rng.gen_range(0.16..0.3),
            )
        })
        .collect();

    let hw = CANVAS * CANVAS;
    let e_t = spec.target.size.extent();
    let mut frames = Vec::with_capacity(spec.length);
    let mut gt = Vec::with_capacity(spec.length);
    for k in 0..spec.length {
        let mut data = vec![BACKGROUND; 3 * hw];
        for &(cx, cy, side, v) in &clutter {
            draw_shape(&mut data, ShapeKind::Square, cx, cy, side, [v, v, v]);
        }
        for (d, pos) in spec.distractors.iter().zip(&distractor_pos) {
            let (cx, cy) = pos[k];
            draw_shape(&mut data, d.shape, cx, cy, d.size.extent(), d.color.rgb());
        }
        let (tx, ty) = target_pos[k];
        draw_shape(&mut data, spec.target.shape, tx, ty, e_t, spec.target.color.rgb());
        if spec.occluders.iter().any(|o| k >= o.start && k < o.end) {
            // full overdraw of the target region
            let g = 0.45;
            draw_shape(&mut data, ShapeKind::Square, tx, ty, e_t * 1.3, [g, g, g]);
        }
        frames.push(Tensor::new(vec![3, CANVAS, CANVAS], data).expect("canvas shape"));
        gt.push(BBox::new(tx, ty, e_t, e_t));
    }
    TrackSequence { frames, gt, description: describe(spec), spec: spec.clone() }
}

/// One training example: crops plus the ground truth mapped into the window.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub template: Tensor<f32>, // 3×64×64
    pub search: Tensor<f32>,   // 3×160×160
    /// None = pair arrived without a description (MISSING).
    pub description: Option<String>,
    /// Target box in search-window pixels.
    pub gt_window: BBox,
    /// Target box in template-crop pixels (pool-fallback source).
    pub template_box: BBox,
}

/// Sample training pairs from rendered sequences: template crop from frame
/// i, jittered search crop from frame j, |i-j| <= 20, description dropped
/// with probability `lang_missing_fraction`.
pub fn make_training_pairs(
    sequences: &[TrackSequence],
    count: usize,
    lang_missing_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainPair>> {
    if !(0.0..=1.0).contains(&lang_missing_fraction) {
        return Err(Error::Config(format!(
            "lang_missing_fraction {lang_missing_fraction} outside [0,1]"
        )));
    }
    if sequences.is_empty() {
        return Err(Error::Config("no sequences to sample pairs from".into()));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let seq = &sequences[rng.gen_range(0..sequences.len())];
        let len = seq.frames.len();
        let i = rng.gen_range(0..len);
        let lo = i.saturating_sub(20);
        let hi = (i + 20).min(len - 1);
        let j = rng.gen_range(lo..=hi);

        let gt_i = seq.gt[i];
        let gt_j = seq.gt[j];
        let tw = template_window(&gt_i, crate::supernet::TEMPLATE_SIZE);
        let template = crop_resize(&seq.frames[i], &tw)?;
        let template_box = tw.frame_to_window(&gt_i);

        let s = gt_j.scale();
        let jx = rng.gen_range(-s..s);
        let jy = rng.gen_range(-s..s);
        let sw = search_window(gt_j.cx + jx, gt_j.cy + jy, s, crate::supernet::SEARCH_SIZE);
        let search = crop_resize(&seq.frames[j], &sw)?;
        let gt_window = sw.frame_to_window(&gt_j);

        let missing = rng.gen_bool(lang_missing_fraction);
        out.push(TrainPair {
            template,
            search,
            description: if missing { None } else { Some(seq.description.clone()) },
            gt_window,
            template_box,
        });
    }
    Ok(out)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Easy,
    Distract,
    Occlude,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "easy" => Ok(Profile::Easy),
            "distract" => Ok(Profile::Distract),
            "occlude" => Ok(Profile::Occlude),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub profile: Profile,
    pub n: usize,
    pub seed: u64,
    pub fingerprint: String,
    pub specs: Vec<SceneSpec>,
}

impl Manifest {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        serde_json::from_str(&body).map_err(Error::from)
    }

    pub fn render_all(&self) -> Vec<TrackSequence> {
        self.specs.iter().map(render_sequence).collect()
    }

    pub fn sequence_name(&self, idx: usize) -> String {
        format!("{}-{:03}", self.name, idx)
    }
}

fn random_motion(rng: &mut ChaCha8Rng, max_speed: f32) -> Motion {
    match rng.gen_range(0..3) {
        0 => {
            // axis-dominant so the description's direction word is stable
            let speed = rng.gen_range(0.8..max_speed);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            if rng.gen_bool(0.5) {
                Motion::Linear { dx: speed * sign, dy: rng.gen_range(-0.2..0.2) }
            } else {
                Motion::Linear { dx: rng.gen_range(-0.2..0.2), dy: speed * sign }
            }
        }
        1 => Motion::Sine {
            dx: rng.gen_range(0.5..max_speed),
            amp: rng.gen_range(5.0..15.0),
            period: rng.gen_range(12.0..30.0),
        },
        _ => Motion::RandomWalk { step: rng.gen_range(0.5..2.0) },
    }
}

fn random_attrs(rng: &mut ChaCha8Rng) -> (ShapeKind, ColorName, SizeClass) {
    (
        ShapeKind::ALL[rng.gen_range(0..4)],
        ColorName::ALL[rng.gen_range(0..6)],
        if rng.gen_bool(0.5) { SizeClass::Small } else { SizeClass::Large },
    )
}

fn place(rng: &mut ChaCha8Rng, extent: f32) -> (f32, f32) {
    let half = extent * 0.5 + 2.0;
    (
        rng.gen_range(half..CANVAS as f32 - half),
        rng.gen_range(half..CANVAS as f32 - half),
    )
}

fn spec_for(profile: Profile, rng: &mut ChaCha8Rng, seq_seed: u64, length: usize) -> SceneSpec {
    let (shape, color, size) = random_attrs(rng);
    let e = size.extent();
    let (x0, y0) = place(rng, e);
    let target = ObjectSpec { shape, color, size, x0, y0, motion: random_motion(rng, 2.5) };

    let mut distractors = Vec::new();
    let mut occluders = Vec::new();
    let clutter;
    match profile {
        Profile::Easy => {
            clutter = 0.15;
        }
        Profile::Distract => {
            clutter = 0.3;
            let n = rng.gen_range(2..=3);
            for _ in 0..n {
                // same shape, different color: only language (or template
                // color) can tell them apart
                let other_color = loop {
                    let c = ColorName::ALL[rng.gen_range(0..6)];
                    if c != color {
                        break c;
                    }
                };
                let d_size = if rng.gen_bool(0.5) { SizeClass::Small } else { SizeClass::Large };
                let (dx0, dy0) = loop {
                    let p = place(rng, d_size.extent());
                    let dist = ((p.0 - x0).powi(2) + (p.1 - y0).powi(2)).sqrt();
                    if dist > (e + d_size.extent()) * 0.9 {
                        break p;
                    }
                };
                distractors.push(ObjectSpec {
                    shape,
                    color: other_color,
                    size: d_size,
                    x0: dx0,
                    y0: dy0,
                    motion: random_motion(rng, 1.5),
                });
            }
        }
        Profile::Occlude => {
            clutter = 0.2;
            let dur = rng.gen_range(4..=10usize).min(length / 4);
            let start = rng.gen_range(length / 4..length - dur);
            occluders.push(OccluderSpec { start, end: start + dur });
        }
    }
    SceneSpec { target, distractors, clutter, occluders, length, seed: seq_seed }
}

fn gen_fingerprint(profile: Profile, n: usize, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(format!("gen-data:{profile:?}:{n}:{seed}"));
    hex::encode(&h.finalize()[..16])
}

/// Deterministic benchmark manifest; sequences render lazily from specs.
pub fn build_benchmark(name: &str, n: usize, profile: Profile, seed: u64) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Config("benchmark needs at least one sequence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<SceneSpec> = (0..n)
        .map(|k| {
            let seq_seed = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(k as u64);
            spec_for(profile, &mut rng, seq_seed, DEFAULT_LENGTH)
        })
        .collect();
    Ok(Manifest {
        name: name.to_string(),
        profile,
        n,
        seed,
        fingerprint: gen_fingerprint(profile, n, seed),
        specs,
    })
}

/// Persist rendered frames in the checkpoint container format.
pub fn save_sequence_frames(seq: &TrackSequence, path: &std::path::Path) -> Result<()> {
    let named: Vec<(String, &Tensor<f32>)> = seq
        .frames
        .iter()
        .enumerate()
        .map(|(k, f)| (format!("frame.{k:04}"), f))
        .collect();
    crate::tensor::checkpoint::save_tensors(path, named.iter().map(|(n, t)| (n, *t)))
}

pub fn load_sequence_frames(path: &std::path::Path) -> Result<Vec<Tensor<f32>>> {
    let map = crate::tensor::checkpoint::load_tensors(path)?;
    Ok(map.into_values().collect())
}
