//! Synthetic shape-classification benchmark with a controllable domain shift.
//!
//! Every image contains one object whose shape determines the label, drawn
//! over a domain-specific background with domain-specific colors, noise and
//! distractor blobs. The object mask is exact, so attention localization can
//! be scored against it.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfda_tensor::{Real, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Result, SfdaError};

/// Shapes available to the generator, indexed by class id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
    LShape,
    Diamond,
    TShape,
    Hexagon,
    Star,
    Frame,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 12] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Bar,
        ShapeKind::LShape,
        ShapeKind::Diamond,
        ShapeKind::TShape,
        ShapeKind::Hexagon,
        ShapeKind::Star,
        ShapeKind::Frame,
    ];

    /// Membership test in the shape's canonical frame (unit radius, y down).
    fn contains(self, u: f64, v: f64) -> bool {
        let (au, av) = (u.abs(), v.abs());
        match self {
            ShapeKind::Disk => u * u + v * v <= 1.0,
            ShapeKind::Square => au <= 0.8 && av <= 0.8,
            ShapeKind::Triangle => {
                // apex up at (0, -1), base at v = 0.75
                v <= 0.75 && v >= -1.0 && au <= (v + 1.0) * 0.55
            }
            ShapeKind::Cross => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.36..=1.0).contains(&r2)
            }
            ShapeKind::Bar => au <= 1.0 && av <= 0.32,
            ShapeKind::LShape => ((-0.8..=-0.2).contains(&u) && av <= 0.9) || ((0.3..=0.9).contains(&v) && au <= 0.8),
            ShapeKind::Diamond => au + av <= 1.0,
            ShapeKind::TShape => ((-0.9..=-0.35).contains(&v) && au <= 0.9) || (au <= 0.28 && av <= 0.9),
            ShapeKind::Hexagon => av <= 0.866 && au + av / 3f64.sqrt() <= 1.0,
            ShapeKind::Star => {
                let r = (u * u + v * v).sqrt();
                let phi = v.atan2(u) + PI / 2.0;
                let lobe = ((1.0 + (5.0 * phi).cos()) / 2.0).powi(3);
                r <= 0.42 + 0.58 * lobe
            }
            ShapeKind::Frame => {
                let m = au.max(av);
                (0.55..=0.9).contains(&m)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorRange {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl ColorRange {
    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let mut c = [0.0; 3];
        for i in 0..3 {
            c[i] = if self.hi[i] > self.lo[i] {
                rng.gen_range(self.lo[i]..self.hi[i])
            } else {
                self.lo[i]
            };
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundPalette {
    /// One flat color per image.
    Solid(ColorRange),
    /// A base color modulated by oriented sinusoidal stripes.
    Textured {
        base: ColorRange,
        amplitude: f64,
        min_period: f64,
        max_period: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub background_palette: BackgroundPalette,
    pub object_palette: ColorRange,
    /// Colors of the distractor blobs.
    pub clutter_palette: ColorRange,
    /// Standard deviation of per-pixel noise.
    pub noise_level: f64,
    pub clutter_count: usize,
    /// Minimum max-channel distance between object color and mean background color.
    pub min_contrast: f64,
}

impl DomainSpec {
    /// Light solid backgrounds, warm objects, no distractors.
    pub fn default_source() -> Self {
        DomainSpec {
            name: "source".to_string(),
            background_palette: BackgroundPalette::Solid(ColorRange {
                lo: [0.7, 0.7, 0.7],
                hi: [1.0, 1.0, 1.0],
            }),
            object_palette: Self::WARM,
            clutter_palette: Self::CLUTTER,
            noise_level: 0.02,
            clutter_count: 0,
            min_contrast: 0.3,
        }
    }

    /// Darker backgrounds, three distractor blobs and twice the noise. The
    /// objects keep their colors, so only context and statistics shift.
    pub fn default_target() -> Self {
        DomainSpec {
            name: "target".to_string(),
            background_palette: BackgroundPalette::Solid(ColorRange {
                lo: [0.6, 0.6, 0.6],
                hi: [0.9, 0.9, 0.9],
            }),
            object_palette: Self::WARM,
            clutter_palette: Self::CLUTTER,
            noise_level: 0.04,
            clutter_count: 3,
            min_contrast: 0.3,
        }
    }

    const WARM: ColorRange = ColorRange {
        lo: [0.45, 0.1, 0.0],
        hi: [0.75, 0.35, 0.2],
    };

    const CLUTTER: ColorRange = ColorRange {
        lo: [0.2, 0.2, 0.2],
        hi: [0.9, 0.9, 0.9],
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `C×S×S`, channel-major, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// Shape class id. In open-set targets, ids `>= num_classes` are unknown.
    pub label: usize,
    /// `S×S`, 1 on object pixels.
    pub mask: Vec<u8>,
    pub domain: DomainTag,
}

impl Sample {
    pub fn mask_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m != 0).count() as f64 / self.mask.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Closed,
    Partial,
    Open,
}

impl std::str::FromStr for SplitMode {
    type Err = SfdaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(SplitMode::Closed),
            "partial" => Ok(SplitMode::Partial),
            "open" => Ok(SplitMode::Open),
            other => Err(SfdaError::Config(format!(
                "invalid split mode `{}` (closed|partial|open)",
                other
            ))),
        }
    }
}

impl std::fmt::Display for SplitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitMode::Closed => "closed",
            SplitMode::Partial => "partial",
            SplitMode::Open => "open",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub shared_classes: Vec<usize>,
    pub source_only_classes: Vec<usize>,
    pub target_unknown_classes: Vec<usize>,
}

impl SplitSpec {
    pub fn closed(k: usize) -> Self {
        SplitSpec {
            mode: SplitMode::Closed,
            shared_classes: (0..k).collect(),
            source_only_classes: Vec::new(),
            target_unknown_classes: Vec::new(),
        }
    }

    /// Number of classes the classifier predicts (the source label space).
    pub fn num_source_classes(&self) -> usize {
        self.shared_classes.len() + self.source_only_classes.len()
    }

    pub fn source_classes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .shared_classes
            .iter()
            .chain(&self.source_only_classes)
            .copied()
            .collect();
        v.sort_unstable();
        v
    }

    pub fn target_classes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .shared_classes
            .iter()
            .chain(&self.target_unknown_classes)
            .copied()
            .collect();
        v.sort_unstable();
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub domain: DomainTag,
    pub partition: Partition,
    /// Size of the classifier's label space.
    pub num_classes: usize,
    pub image_side: usize,
    pub channels: usize,
    pub seed: u64,
    pub split: SplitSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_unknown(&self, label: usize) -> bool {
        label >= self.num_classes
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Stacks the selected images into a `B×C×S×S` tensor.
    pub fn batch_images<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let per = self.channels * self.image_side * self.image_side;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.samples[i].image.iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor::new(
            vec![indices.len(), self.channels, self.image_side, self.image_side],
            data,
        )
        .expect("images have C·S·S values")
    }
}

/// Train and eval partitions of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub train: Dataset,
    pub eval: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub source: DomainData,
    pub target: DomainData,
    pub split: SplitSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub eval: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { train: 2000, eval: 500 }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Per-sample seed, so any index range can be generated independently.
pub fn sample_seed(seed: u64, stream: &str, index: usize) -> u64 {
    splitmix(splitmix(seed ^ name_hash(stream)) ^ index as u64)
}

const MIN_MASK: f64 = 0.05;
const MAX_MASK: f64 = 0.60;

fn render_mask(kind: ShapeKind, side: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let s = side as f64;
    loop {
        let radius = rng.gen_range(0.22 * s..0.34 * s);
        let margin = radius * 0.9;
        let cx = rng.gen_range(margin..(s - margin).max(margin + 1e-9));
        let cy = rng.gen_range(margin..(s - margin).max(margin + 1e-9));
        let theta: f64 = rng.gen_range(-0.35..0.35);
        let (sin, cos) = theta.sin_cos();
        let mut mask = vec![0u8; side * side];
        for y in 0..side {
            for x in 0..side {
                let dx = (x as f64 + 0.5 - cx) / radius;
                let dy = (y as f64 + 0.5 - cy) / radius;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                if kind.contains(u, v) {
                    mask[y * side + x] = 1;
                }
            }
        }
        let frac = mask.iter().filter(|&&m| m != 0).count() as f64 / (side * side) as f64;
        if (MIN_MASK..=MAX_MASK).contains(&frac) {
            return mask;
        }
    }
}

fn render_sample(spec: &DomainSpec, label: usize, side: usize, domain: DomainTag, rng: &mut ChaCha8Rng) -> Sample {
    let n = side * side;
    let mut px = vec![[0.0f64; 3]; n];
    let bg_mean = match &spec.background_palette {
        BackgroundPalette::Solid(range) => {
            let c = range.sample(rng);
            px.iter_mut().for_each(|p| *p = c);
            c
        }
        BackgroundPalette::Textured {
            base,
            amplitude,
            min_period,
            max_period,
        } => {
            let c = base.sample(rng);
            let angle = rng.gen_range(0.0..PI);
            let period = if max_period > min_period {
                rng.gen_range(*min_period..*max_period)
            } else {
                *min_period
            };
            let phase = rng.gen_range(0.0..2.0 * PI);
            let (sa, ca) = angle.sin_cos();
            for y in 0..side {
                for x in 0..side {
                    let t = 2.0 * PI * (x as f64 * ca + y as f64 * sa) / period + phase;
                    let m = amplitude * t.sin();
                    px[y * side + x] = [c[0] + m, c[1] + m, c[2] + m];
                }
            }
            c
        }
    };

    for _ in 0..spec.clutter_count {
        let color = spec.clutter_palette.sample(rng);
        let s = side as f64;
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let (rx, ry) = (rng.gen_range(0.06 * s..0.14 * s), rng.gen_range(0.06 * s..0.14 * s));
        for y in 0..side {
            for x in 0..side {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    px[y * side + x] = color;
                }
            }
        }
    }

    let mut color = spec.object_palette.sample(rng);
    for _ in 0..100 {
        let contrast = (0..3).map(|i| (color[i] - bg_mean[i]).abs()).fold(0.0, f64::max);
        if contrast >= spec.min_contrast {
            break;
        }
        color = spec.object_palette.sample(rng);
    }
    let mask = render_mask(ShapeKind::ALL[label], side, rng);
    for (p, &m) in px.iter_mut().zip(&mask) {
        if m != 0 {
            *p = color;
        }
    }

    // uniform noise with standard deviation `noise_level`
    let half_width = spec.noise_level * 3f64.sqrt();
    let mut image = vec![0f32; 3 * n];
    for (i, p) in px.iter().enumerate() {
        for ch in 0..3 {
            let noise = if half_width > 0.0 {
                rng.gen_range(-half_width..half_width)
            } else {
                0.0
            };
            image[ch * n + i] = (p[ch] + noise).clamp(0.0, 1.0) as f32;
        }
    }
    Sample {
        image,
        label,
        mask,
        domain,
    }
}

fn generate_from_classes(
    spec: &DomainSpec,
    n: usize,
    classes: &[usize],
    side: usize,
    seed: u64,
    domain: DomainTag,
    stream: &str,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(SfdaError::Contract("cannot generate an empty dataset".into()));
    }
    if classes.is_empty() {
        return Err(SfdaError::Contract("no classes to draw from".into()));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= ShapeKind::ALL.len()) {
        return Err(SfdaError::Config(format!(
            "class {} needs a shape generator; only {} exist",
            c,
            ShapeKind::ALL.len()
        )));
    }
    let stream = format!("{}/{}", spec.name, stream);
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, &stream, i));
            let label = classes[rng.gen_range(0..classes.len())];
            render_sample(spec, label, side, domain, &mut rng)
        })
        .collect())
}

/// Generates `n` samples with labels uniform over `0..k`.
pub fn generate(spec: &DomainSpec, n: usize, k: usize, seed: u64) -> Result<Vec<Sample>> {
    let classes: Vec<usize> = (0..k).collect();
    generate_from_classes(spec, n, &classes, 32, seed, DomainTag::Source, "train")
}

/// Same as [`generate`] with an explicit image side and domain tag.
pub fn generate_with(
    spec: &DomainSpec,
    n: usize,
    k: usize,
    side: usize,
    seed: u64,
    domain: DomainTag,
) -> Result<Vec<Sample>> {
    let classes: Vec<usize> = (0..k).collect();
    generate_from_classes(spec, n, &classes, side, seed, domain, "train")
}

pub fn partial_target_classes(k: usize) -> usize {
    (k * 25).div_ceil(65)
}

pub fn open_unknown_classes(k: usize) -> usize {
    k.div_ceil(3)
}

/// Builds the label-space split for `mode` over `k` source classes.
pub fn split_spec(mode: SplitMode, k: usize) -> Result<SplitSpec> {
    if k < 2 {
        return Err(SfdaError::Config(format!("need at least 2 classes, got {}", k)));
    }
    if mode != SplitMode::Closed && k < 4 {
        return Err(SfdaError::Config(format!(
            "{:?} split needs at least 4 classes, got {}",
            mode, k
        )));
    }
    let spec = match mode {
        SplitMode::Closed => SplitSpec::closed(k),
        SplitMode::Partial => {
            let shared = partial_target_classes(k);
            SplitSpec {
                mode,
                shared_classes: (0..shared).collect(),
                source_only_classes: (shared..k).collect(),
                target_unknown_classes: Vec::new(),
            }
        }
        SplitMode::Open => SplitSpec {
            mode,
            shared_classes: (0..k).collect(),
            source_only_classes: Vec::new(),
            target_unknown_classes: (k..k + open_unknown_classes(k)).collect(),
        },
    };
    if let Some(&c) = spec.target_classes().iter().chain(&spec.source_classes()).max() {
        if c >= ShapeKind::ALL.len() {
            return Err(SfdaError::Config(format!(
                "{:?} split over {} classes needs {} shapes, only {} exist",
                mode,
                k,
                c + 1,
                ShapeKind::ALL.len()
            )));
        }
    }
    Ok(spec)
}

/// Generates source and target domains (train and eval each) for a split.
pub fn make_split(
    mode: SplitMode,
    k: usize,
    sizes: SplitSizes,
    seed: u64,
    source_spec: &DomainSpec,
    target_spec: &DomainSpec,
    image_side: usize,
) -> Result<Benchmark> {
    let split = split_spec(mode, k)?;
    let make = |spec: &DomainSpec, classes: &[usize], domain, partition, n| -> Result<Dataset> {
        let stream = match partition {
            Partition::Train => "train",
            Partition::Eval => "eval",
        };
        Ok(Dataset {
            domain,
            partition,
            num_classes: k,
            image_side,
            channels: 3,
            seed,
            split: split.clone(),
            samples: generate_from_classes(spec, n, classes, image_side, seed, domain, stream)?,
        })
    };
    let (src, tgt) = (split.source_classes(), split.target_classes());
    Ok(Benchmark {
        source: DomainData {
            train: make(source_spec, &src, DomainTag::Source, Partition::Train, sizes.train)?,
            eval: make(source_spec, &src, DomainTag::Source, Partition::Eval, sizes.eval)?,
        },
        target: DomainData {
            train: make(target_spec, &tgt, DomainTag::Target, Partition::Train, sizes.train)?,
            eval: make(target_spec, &tgt, DomainTag::Target, Partition::Eval, sizes.eval)?,
        },
        split,
    })
}

/// The default benchmark: closed set, default domain specs, 32×32 images.
pub fn default_benchmark(k: usize, sizes: SplitSizes, seed: u64) -> Result<Benchmark> {
    make_split(
        SplitMode::Closed,
        k,
        sizes,
        seed,
        &DomainSpec::default_source(),
        &DomainSpec::default_target(),
        32,
    )
}

// ---------------------------------------------------------------- file format
//
// | offset  | size | content                                       |
// |---------|------|-----------------------------------------------|
// | 0       | 8    | magic `SFDADSET`                              |
// | 8       | 4    | version `u32` LE (1)                          |
// | 12      | 8    | manifest length `L`, `u64` LE                 |
// | 20      | L    | JSON manifest                                 |
// | 20 + L  | ...  | images: n·C·S·S `f32` LE                      |
// |         | ...  | masks: n·S·S bytes (0 or 1)                   |
// |         | ...  | labels: n `u32` LE                            |
//
// The manifest records the section sizes and the SHA-256 of the payload.

pub const DATASET_MAGIC: &[u8; 8] = b"SFDADSET";
const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub num_classes: usize,
    pub image_side: usize,
    pub channels: usize,
    pub seed: u64,
    pub domain: DomainTag,
    pub partition: Partition,
    pub split: SplitSpec,
    pub images_bytes: u64,
    pub masks_bytes: u64,
    pub labels_bytes: u64,
    pub sha256: String,
}

fn fmt_err(offset: usize, detail: impl Into<String>) -> SfdaError {
    SfdaError::Format {
        offset,
        detail: detail.into(),
    }
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut payload = Vec::new();
    for s in &ds.samples {
        for &v in &s.image {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let images_bytes = payload.len() as u64;
    for s in &ds.samples {
        payload.extend_from_slice(&s.mask);
    }
    let masks_bytes = payload.len() as u64 - images_bytes;
    for s in &ds.samples {
        payload.extend_from_slice(&(s.label as u32).to_le_bytes());
    }
    let labels_bytes = payload.len() as u64 - images_bytes - masks_bytes;
    let manifest = DatasetManifest {
        count: ds.samples.len(),
        num_classes: ds.num_classes,
        image_side: ds.image_side,
        channels: ds.channels,
        seed: ds.seed,
        domain: ds.domain,
        partition: ds.partition,
        split: ds.split.clone(),
        images_bytes,
        masks_bytes,
        labels_bytes,
        sha256: hex::encode(Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(fmt_err(
            0,
            format!("header: expected {} bytes, found {}", HEADER_LEN, bytes.len()),
        ));
    }
    if &bytes[..8] != DATASET_MAGIC {
        return Err(fmt_err(0, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(fmt_err(8, format!("unsupported version {}", version)));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let payload_start = (HEADER_LEN as u64)
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| {
            fmt_err(
                12,
                format!("manifest length {} exceeds file size {}", mlen, bytes.len()),
            )
        })? as usize;
    let m: DatasetManifest = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])
        .map_err(|e| fmt_err(HEADER_LEN, format!("manifest: {}", e)))?;

    let per_image = (m.channels as u64)
        .checked_mul(m.image_side as u64)
        .and_then(|v| v.checked_mul(m.image_side as u64));
    let want_images = per_image
        .and_then(|v| v.checked_mul(m.count as u64))
        .and_then(|v| v.checked_mul(4));
    let want_masks = (m.image_side as u64)
        .checked_mul(m.image_side as u64)
        .and_then(|v| v.checked_mul(m.count as u64));
    let want_labels = (m.count as u64).checked_mul(4);
    if want_images != Some(m.images_bytes) || want_masks != Some(m.masks_bytes) || want_labels != Some(m.labels_bytes) {
        return Err(fmt_err(
            HEADER_LEN,
            "manifest section sizes disagree with count, channels and image side",
        ));
    }
    let expected = m.images_bytes as u128 + m.masks_bytes as u128 + m.labels_bytes as u128;
    let payload = &bytes[payload_start..];
    if payload.len() as u128 != expected {
        return Err(fmt_err(
            payload_start,
            format!("payload: expected {} bytes, found {}", expected, payload.len()),
        ));
    }
    let digest = hex::encode(Sha256::digest(payload));
    if digest != m.sha256 {
        return Err(fmt_err(
            payload_start,
            format!("payload hash {} does not match manifest {}", digest, m.sha256),
        ));
    }
    if m.channels != 3 {
        return Err(fmt_err(
            HEADER_LEN,
            format!("expected 3 channels, manifest says {}", m.channels),
        ));
    }

    let img_len = m.channels * m.image_side * m.image_side;
    let mask_len = m.image_side * m.image_side;
    let (images, rest) = payload.split_at(m.images_bytes as usize);
    let (masks, labels) = rest.split_at(m.masks_bytes as usize);
    let domain = m.domain;
    let mut samples = Vec::with_capacity(m.count);
    for i in 0..m.count {
        let image: Vec<f32> = images[i * img_len * 4..(i + 1) * img_len * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mask = masks[i * mask_len..(i + 1) * mask_len].to_vec();
        if let Some(p) = mask.iter().position(|&v| v > 1) {
            return Err(fmt_err(
                payload_start + m.images_bytes as usize + i * mask_len + p,
                "mask byte is not 0 or 1",
            ));
        }
        let label = u32::from_le_bytes(labels[i * 4..(i + 1) * 4].try_into().unwrap()) as usize;
        samples.push(Sample {
            image,
            label,
            mask,
            domain,
        });
    }
    Ok(Dataset {
        domain,
        partition: m.partition,
        num_classes: m.num_classes,
        image_side: m.image_side,
        channels: m.channels,
        seed: m.seed,
        split: m.split,
        samples,
    })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    std::fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

/// File names of the four partitions inside a benchmark directory.
pub const BENCHMARK_FILES: [&str; 4] = [
    "source_train.sfds",
    "source_eval.sfds",
    "target_train.sfds",
    "target_eval.sfds",
];

pub fn save_benchmark(dir: &Path, b: &Benchmark) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let parts = [&b.source.train, &b.source.eval, &b.target.train, &b.target.eval];
    for (name, ds) in BENCHMARK_FILES.iter().zip(parts) {
        save_dataset(&dir.join(name), ds)?;
    }
    Ok(())
}

pub fn load_benchmark(dir: &Path) -> Result<Benchmark> {
    let load = |i: usize| -> Result<Dataset> {
        let path = dir.join(BENCHMARK_FILES[i]);
        load_dataset(&path).map_err(|e| match e {
            SfdaError::Io(io) => SfdaError::Io(std::io::Error::new(io.kind(), format!("{}: {}", path.display(), io))),
            other => other,
        })
    };
    let (st, se, tt, te) = (load(0)?, load(1)?, load(2)?, load(3)?);
    let split = st.split.clone();
    let consistent = [&se, &tt, &te].iter().all(|d| {
        d.split == split
            && d.num_classes == st.num_classes
            && d.image_side == st.image_side
            && d.channels == st.channels
    });
    if !consistent {
        return Err(SfdaError::Manifest(format!(
            "partitions in {} disagree on split, classes or image size",
            dir.display()
        )));
    }
    Ok(Benchmark {
        source: DomainData { train: st, eval: se },
        target: DomainData { train: tt, eval: te },
        split,
    })
}
