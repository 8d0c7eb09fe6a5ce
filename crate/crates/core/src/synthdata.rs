//! Procedural dyadic clip pairs.
//!
//! Each stream shows one bright square moving along a periodic trajectory on
//! a dark background. A class is a (leader primitive, assistant primitive)
//! pair; the default table is a 3x2 product so that neither stream alone
//! identifies the class.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const CLIP_MAGIC: &[u8; 4] = b"DYD1";
pub const CLIP_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 2 * 5 + 1 + 8;
const BACKGROUND: f32 = 0.1;
const FOREGROUND: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrimitiveKind {
    Still,
    HorizontalOscillation,
    VerticalOscillation,
    Circular,
    Zigzag,
    ExpandContract,
}

/// A periodic motion. `amplitude` is in pixels (for expand-contract: the
/// change in side length); `phase` is in frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionPrimitive {
    pub kind: PrimitiveKind,
    pub amplitude: f64,
    pub period: usize,
    pub phase: usize,
}

impl MotionPrimitive {
    pub fn new(kind: PrimitiveKind, amplitude: f64, period: usize) -> Self {
        MotionPrimitive {
            kind,
            amplitude,
            period,
            phase: 0,
        }
    }

    pub fn with_phase(mut self, phase: usize) -> Self {
        self.phase = phase;
        self
    }

    /// Square centre `(x, y)` and side length at `frame`, before bounds checks.
    pub fn placement(&self, frame: usize, height: usize, width: usize) -> (f64, f64, f64) {
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let side = height as f64 / 4.0;
        let a = self.amplitude;
        let u = ((frame + self.phase) % self.period) as f64 / self.period as f64;
        let theta = 2.0 * std::f64::consts::PI * u;
        match self.kind {
            PrimitiveKind::Still => (cx, cy, side),
            PrimitiveKind::HorizontalOscillation => (cx + a * theta.sin(), cy, side),
            PrimitiveKind::VerticalOscillation => (cx, cy + a * theta.sin(), side),
            PrimitiveKind::Circular => (cx + a * theta.cos(), cy + a * theta.sin(), side),
            PrimitiveKind::Zigzag => (cx + a * triangle(u), cy + 0.5 * a * triangle(2.0 * u), side),
            PrimitiveKind::ExpandContract => (cx, cy, side + a * theta.sin()),
        }
    }

    fn validate(&self, frames: usize, height: usize, width: usize) -> Result<()> {
        if self.period < 2 {
            return Err(Error::Generation(format!(
                "period must be >= 2, got {}",
                self.period
            )));
        }
        if !self.amplitude.is_finite() || self.amplitude < 0.0 {
            return Err(Error::Generation(format!(
                "invalid amplitude {}",
                self.amplitude
            )));
        }
        for f in 0..frames.min(self.period) {
            let (x, y, s) = self.placement(f, height, width);
            let h = s / 2.0;
            if s < 1.0
                || x - h < 0.0
                || y - h < 0.0
                || x + h > width as f64
                || y + h > height as f64
            {
                return Err(Error::Generation(format!(
                    "{:?} (amplitude {}) leaves the {height}x{width} frame at frame {f}",
                    self.kind, self.amplitude
                )));
            }
        }
        Ok(())
    }
}

/// Triangle wave with period 1 and range [-1, 1], zero at u = 0.
fn triangle(u: f64) -> f64 {
    let v = (u + 0.25).rem_euclid(1.0);
    4.0 * (v - 0.5).abs() - 1.0
}

/// Length of the overlap of `[a, b]` with the unit pixel `[p, p + 1]`.
fn coverage(a: f64, b: f64, p: usize) -> f64 {
    let p = p as f64;
    (b.min(p + 1.0) - a.max(p)).max(0.0)
}

/// Renders a `[3, t, h, w]` clip: anti-aliased square, Gaussian noise,
/// clamped to [0, 1].
pub fn render_clip(
    primitive: &MotionPrimitive,
    frames: usize,
    height: usize,
    width: usize,
    sigma: f64,
    seed: u64,
) -> Result<Tensor<f32>> {
    if frames < 8 || height < 8 || width < 8 {
        return Err(Error::Generation(format!(
            "clips need at least 8 frames and 8x8 pixels, got {frames}x{height}x{width}"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Generation(format!(
            "noise sigma must be finite and >= 0, got {sigma}"
        )));
    }
    primitive.validate(frames, height, width)?;
    let plane = height * width;
    let mut frame_pixels = vec![0f32; frames * plane];
    let mut cols = vec![0f64; width];
    for f in 0..frames {
        let (x, y, s) = primitive.placement(f, height, width);
        let (x0, x1, y0, y1) = (x - s / 2.0, x + s / 2.0, y - s / 2.0, y + s / 2.0);
        for (c, col) in cols.iter_mut().enumerate() {
            *col = coverage(x0, x1, c);
        }
        let out = &mut frame_pixels[f * plane..(f + 1) * plane];
        for r in 0..height {
            let cy = coverage(y0, y1, r);
            for c in 0..width {
                let cov = (cy * cols[c]) as f32;
                out[r * width + c] = BACKGROUND + (FOREGROUND - BACKGROUND) * cov;
            }
        }
    }
    let mut data = Vec::with_capacity(3 * frames * plane);
    for _ in 0..3 {
        data.extend_from_slice(&frame_pixels);
    }
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).expect("sigma validated");
        for v in &mut data {
            *v = (*v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::new(vec![3, frames, height, width], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: usize,
    pub leader: MotionPrimitive,
    pub assistant: MotionPrimitive,
}

/// Named class tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassTable {
    /// Leader {horizontal, vertical, circular} x assistant {zigzag, expand-contract}.
    Default,
    /// Leader {horizontal, vertical} x assistant horizontal at relative phase
    /// {0, half a period}: only the timing between the streams separates
    /// classes.
    Tight,
    /// Leader horizontal at two amplitudes x assistant {small, large
    /// expand-contract, zigzag}: classes differ in motion scale.
    MotionScale,
}

impl ClassTable {
    pub fn classes(self) -> Vec<ClassSpec> {
        use PrimitiveKind::*;
        const P: usize = 8;
        let pairs: Vec<(MotionPrimitive, MotionPrimitive)> = match self {
            ClassTable::Default => {
                let leaders = [HorizontalOscillation, VerticalOscillation, Circular];
                let assistants = [Zigzag, ExpandContract];
                leaders
                    .iter()
                    .flat_map(|&l| {
                        assistants.iter().map(move |&a| {
                            (
                                MotionPrimitive::new(l, 6.0, P),
                                MotionPrimitive::new(a, 6.0, P),
                            )
                        })
                    })
                    .collect()
            }
            ClassTable::Tight => {
                let leaders = [HorizontalOscillation, VerticalOscillation];
                leaders
                    .iter()
                    .flat_map(|&l| {
                        [0, P / 2].into_iter().map(move |phase| {
                            (
                                MotionPrimitive::new(l, 6.0, P),
                                MotionPrimitive::new(HorizontalOscillation, 6.0, P)
                                    .with_phase(phase),
                            )
                        })
                    })
                    .collect()
            }
            ClassTable::MotionScale => {
                let leaders = [
                    MotionPrimitive::new(HorizontalOscillation, 1.5, P),
                    MotionPrimitive::new(HorizontalOscillation, 6.0, P),
                ];
                let assistants = [
                    MotionPrimitive::new(ExpandContract, 1.5, P),
                    MotionPrimitive::new(ExpandContract, 5.0, P),
                    MotionPrimitive::new(Zigzag, 6.0, P),
                ];
                leaders
                    .iter()
                    .flat_map(|&l| assistants.iter().map(move |&a| (l, a)))
                    .collect()
            }
        };
        pairs
            .into_iter()
            .enumerate()
            .map(|(id, (leader, assistant))| ClassSpec {
                id,
                leader,
                assistant,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyncMode {
    /// Independent random phase per stream.
    Async,
    /// One random phase shared by both streams.
    Sync,
}

impl SyncMode {
    fn code(self) -> u8 {
        match self {
            SyncMode::Async => 0,
            SyncMode::Sync => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SyncMode::Async),
            1 => Some(SyncMode::Sync),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipPair {
    pub leader: Tensor<f32>,
    pub assistant: Tensor<f32>,
    pub label: usize,
    pub seed: u64,
    pub sync: SyncMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub table: ClassTable,
    /// Use only the first `classes` entries of the table (all when `None`).
    pub classes: Option<usize>,
    /// Clips per class, train and test together.
    pub per_class: usize,
    /// Clips per class held out for testing.
    pub test_per_class: usize,
    pub sync: SyncMode,
    /// Random phase offsets are drawn uniformly from `0..jitter` frames.
    pub jitter: usize,
    pub sigma: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            table: ClassTable::Default,
            classes: None,
            per_class: 50,
            test_per_class: 10,
            sync: SyncMode::Async,
            jitter: 8,
            sigma: 0.05,
            frames: 16,
            height: 32,
            width: 32,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn class_specs(&self) -> Result<Vec<ClassSpec>> {
        let all = self.table.classes();
        let n = self.classes.unwrap_or(all.len());
        if n < 2 || n > all.len() {
            return Err(Error::Config(format!(
                "{:?} table has {} classes, requested {n}",
                self.table,
                all.len()
            )));
        }
        Ok(all.into_iter().take(n).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.class_specs()?;
        if self.per_class == 0 || self.test_per_class > self.per_class {
            return Err(Error::Config(format!(
                "need 0 < per_class and test_per_class <= per_class, got {} and {}",
                self.per_class, self.test_per_class
            )));
        }
        if self.jitter == 0 {
            return Err(Error::Config("jitter must be at least 1 frame".into()));
        }
        Ok(())
    }

    pub fn num_records(&self) -> Result<usize> {
        Ok(self.class_specs()?.len() * self.per_class)
    }
}

/// Seed of record `index` under `master`.
pub fn record_seed(master: u64, index: usize) -> u64 {
    // splitmix64 finaliser over the combined key
    let mut z = master ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-record metadata: what gets written to the manifest plus the drawn phases.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordPlan {
    pub index: usize,
    pub label: usize,
    pub seed: u64,
    pub split: Split,
    pub leader_phase: usize,
    pub assistant_phase: usize,
}

/// Labels, seeds, splits and phases for every record, in file order
/// (class-major).
pub fn plan_records(spec: &DatasetSpec) -> Result<Vec<RecordPlan>> {
    spec.validate()?;
    let classes = spec.class_specs()?;
    let mut out = Vec::with_capacity(classes.len() * spec.per_class);
    for class in &classes {
        for i in 0..spec.per_class {
            let index = out.len();
            let seed = record_seed(spec.seed, index);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let leader_phase = rng.gen_range(0..spec.jitter);
            let assistant_phase = match spec.sync {
                SyncMode::Async => rng.gen_range(0..spec.jitter),
                SyncMode::Sync => leader_phase,
            };
            out.push(RecordPlan {
                index,
                label: class.id,
                seed,
                split: if i >= spec.per_class - spec.test_per_class {
                    Split::Test
                } else {
                    Split::Train
                },
                leader_phase,
                assistant_phase,
            });
        }
    }
    Ok(out)
}

pub fn render_record(spec: &DatasetSpec, plan: &RecordPlan) -> Result<ClipPair> {
    let classes = spec.class_specs()?;
    let class = &classes[plan.label];
    let leader = class
        .leader
        .with_phase(class.leader.phase + plan.leader_phase);
    let assistant = class
        .assistant
        .with_phase(class.assistant.phase + plan.assistant_phase);
    let noise_seed = plan.seed.wrapping_add(1);
    Ok(ClipPair {
        leader: render_clip(
            &leader,
            spec.frames,
            spec.height,
            spec.width,
            spec.sigma,
            noise_seed,
        )?,
        assistant: render_clip(
            &assistant,
            spec.frames,
            spec.height,
            spec.width,
            spec.sigma,
            record_seed(noise_seed, 1),
        )?,
        label: plan.label,
        seed: plan.seed,
        sync: spec.sync,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub label: usize,
    pub seed: u64,
    pub sync: SyncMode,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    pub fn class_counts(&self) -> Vec<usize> {
        let k = self.records.iter().map(|r| r.label + 1).max().unwrap_or(0);
        let mut counts = vec![0; k];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("manifest records serialise"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let r: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
            if !seen.insert(r.path.clone()) {
                return Err(Error::format(path, format!("duplicate path {}", r.path)));
            }
            records.push(r);
        }
        Ok(Manifest { records })
    }
}

/// Renders every record, writes clip files under `out/clips/` and the
/// manifest at `out/manifest.jsonl`.
pub fn generate_dataset(spec: &DatasetSpec, out: &Path) -> Result<Manifest> {
    let plans = plan_records(spec)?;
    let clip_dir = out.join("clips");
    fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    let mut manifest = Manifest::default();
    for plan in &plans {
        let pair = render_record(spec, plan)?;
        let rel = format!("clips/{:05}.dyd", plan.index);
        write_clip_pair(&out.join(&rel), &pair)?;
        manifest.records.push(ManifestRecord {
            path: rel,
            label: plan.label,
            seed: plan.seed,
            sync: spec.sync,
            split: plan.split,
        });
    }
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn encode_clip_pair(pair: &ClipPair) -> Result<Vec<u8>> {
    let s = pair.leader.shape();
    if s.len() != 4 || pair.assistant.shape() != s {
        return Err(Error::shape(
            "write_clip_pair",
            format!(
                "leader {s:?} and assistant {:?} must both be [c, t, h, w]",
                pair.assistant.shape()
            ),
        ));
    }
    let narrow = |v: usize, what: &str| {
        u16::try_from(v)
            .map_err(|_| Error::Data(format!("{what} {v} does not fit the clip header")))
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * pair.leader.len() + 4);
    buf.extend_from_slice(CLIP_MAGIC);
    buf.push(CLIP_VERSION);
    for (v, what) in s.iter().zip(["channels", "frames", "height", "width"]) {
        buf.extend_from_slice(&narrow(*v, what)?.to_le_bytes());
    }
    buf.extend_from_slice(&narrow(pair.label, "label")?.to_le_bytes());
    buf.push(pair.sync.code());
    buf.extend_from_slice(&pair.seed.to_le_bytes());
    for v in pair.leader.data().iter().chain(pair.assistant.data()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf[HEADER_LEN..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn write_clip_pair(path: &Path, pair: &ClipPair) -> Result<()> {
    let bytes = encode_clip_pair(pair)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn decode_clip_pair(path: &Path, bytes: &[u8]) -> Result<ClipPair> {
    let bad = |detail: String| Error::format(path, detail);
    if bytes.len() < HEADER_LEN + 4 {
        return Err(bad(format!(
            "truncated: {} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != CLIP_MAGIC {
        return Err(bad("bad magic, not a clip-pair file".into()));
    }
    if bytes[4] != CLIP_VERSION {
        return Err(bad(format!(
            "unsupported clip-pair version {} (expected {CLIP_VERSION})",
            bytes[4]
        )));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
    let dims = [u16_at(5), u16_at(7), u16_at(9), u16_at(11)];
    let label = u16_at(13);
    let sync = SyncMode::from_code(bytes[15])
        .ok_or_else(|| bad(format!("unknown sync mode {}", bytes[15])))?;
    let seed = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let n: usize = dims.iter().product();
    if n == 0 {
        return Err(bad(format!("zero extent in header {dims:?}")));
    }
    let payload_len = 2 * n * 4;
    if bytes.len() != HEADER_LEN + payload_len + 4 {
        return Err(bad(format!(
            "truncated or oversized: expected {} bytes for extents {dims:?}, found {}",
            HEADER_LEN + payload_len + 4,
            bytes.len()
        )));
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + payload_len];
    let stored = u32::from_le_bytes(
        bytes[HEADER_LEN + payload_len..]
            .try_into()
            .expect("4 bytes"),
    );
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(bad(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let (l, a) = floats.split_at(n);
    Ok(ClipPair {
        leader: Tensor::new(dims.to_vec(), l.to_vec())?,
        assistant: Tensor::new(dims.to_vec(), a.to_vec())?,
        label,
        seed,
        sync,
    })
}

pub fn read_clip_pair(path: &Path) -> Result<ClipPair> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_clip_pair(path, &bytes)
}

/// A manifest with its clips loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<ClipPair>,
    pub test: Vec<ClipPair>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = Manifest::read(&root.join(MANIFEST_FILE))?;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for r in &manifest.records {
            let pair = read_clip_pair(&root.join(&r.path))?;
            if pair.label != r.label {
                return Err(Error::Data(format!(
                    "{}: manifest label {} disagrees with file label {}",
                    r.path, r.label, pair.label
                )));
            }
            match r.split {
                Split::Train => train.push(pair),
                Split::Test => test.push(pair),
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            train,
            test,
        })
    }

    /// Renders `spec` straight into memory, without touching disk.
    pub fn in_memory(spec: &DatasetSpec) -> Result<Self> {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        let mut manifest = Manifest::default();
        for plan in plan_records(spec)? {
            let pair = render_record(spec, &plan)?;
            manifest.records.push(ManifestRecord {
                path: format!("clips/{:05}.dyd", plan.index),
                label: plan.label,
                seed: plan.seed,
                sync: spec.sync,
                split: plan.split,
            });
            match plan.split {
                Split::Train => train.push(pair),
                Split::Test => test.push(pair),
            }
        }
        Ok(Dataset {
            root: PathBuf::new(),
            manifest,
            train,
            test,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.class_counts().len()
    }
}

/// Which pixels a nearest-neighbour probe looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelView {
    Joint,
    Leader,
    Assistant,
}

/// Test accuracy of a 1-nearest-neighbour classifier (squared Euclidean
/// distance on raw pixels; ties go to the earliest training clip).
pub fn nearest_neighbour_accuracy(
    train: &[ClipPair],
    test: &[ClipPair],
    view: PixelView,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(
            "nearest-neighbour probe needs non-empty train and test sets".into(),
        ));
    }
    let dist = |a: &Tensor<f32>, b: &Tensor<f32>| -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| {
                let d = (*x - *y) as f64;
                d * d
            })
            .sum()
    };
    let mut correct = 0;
    for q in test {
        let mut best = (f64::INFINITY, usize::MAX);
        for r in train {
            let d = match view {
                PixelView::Joint => dist(&q.leader, &r.leader) + dist(&q.assistant, &r.assistant),
                PixelView::Leader => dist(&q.leader, &r.leader),
                PixelView::Assistant => dist(&q.assistant, &r.assistant),
            };
            if d < best.0 {
                best = (d, r.label);
            }
        }
        correct += usize::from(best.1 == q.label);
    }
    Ok(correct as f64 / test.len() as f64)
}
