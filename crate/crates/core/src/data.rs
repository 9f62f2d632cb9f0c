//! Synthetic factor-controlled images and on-disk dataset formats.
//!
//! Two layouts share one JSON manifest (`manifest.json`):
//!
//! * packed: a single blob starting with the magic `MASTDS1`, then
//!   little-endian `u32` record count and `u32` side, then per record
//!   `3·side²` bytes of interleaved 8-bit RGB, a `u16` label and four `u8`
//!   factor codes (shape, hue, scale, position; 255 when unknown);
//! * ppm: one binary PPM (`P6`, maxval 255) per record, labels and factors in
//!   the manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MastError, Result};
use crate::image::{Image, CHANNELS};

pub const PACKED_MAGIC: &[u8; 7] = b"MASTDS1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PACKED_FILE: &str = "data.mastds";
pub const FORMAT_VERSION: u32 = 1;
/// Factor code for records without that annotation.
pub const UNKNOWN_FACTOR: u8 = u8::MAX;

const HUE_BINS: usize = 8;
const SCALE_BINS: usize = 3;
const BACKGROUND: f32 = 0.25;

/// Generative factors of a synthetic image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Shape,
    Hue,
    Scale,
    Position,
}

impl Factor {
    pub const ALL: [Factor; 4] = [Factor::Shape, Factor::Hue, Factor::Scale, Factor::Position];

    pub fn levels(self) -> usize {
        match self {
            Factor::Shape => 4,
            Factor::Hue => HUE_BINS,
            Factor::Scale => SCALE_BINS,
            Factor::Position => 4,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Result<Factor> {
        match s.trim().to_ascii_lowercase().as_str() {
            "shape" => Ok(Factor::Shape),
            "hue" | "color" => Ok(Factor::Hue),
            "scale" | "size" => Ok(Factor::Scale),
            "position" | "quadrant" => Ok(Factor::Position),
            other => Err(MastError::config("label_factor", format!("unknown factor `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];

    /// Whether offset `(dx, dy)`, in units of the shape radius, is inside.
    fn contains(self, dx: f32, dy: f32) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= 1.0,
            ShapeKind::Square => dx.abs() <= 0.8 && dy.abs() <= 0.8,
            // apex up, base at dy = 0.8
            ShapeKind::Triangle => dy <= 0.8 && dy >= -1.0 && dx.abs() <= (dy + 1.0) * 0.5,
            ShapeKind::Cross => (dx.abs() <= 1.0 && dy.abs() <= 0.3) || (dy.abs() <= 1.0 && dx.abs() <= 0.3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub side: usize,
    pub label_factor: Factor,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            side: 32,
            label_factor: Factor::Hue,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub image: Image,
    pub label: u16,
    /// Codes for shape, hue, scale and position.
    pub factors: [u8; 4],
}

/// Records held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub side: usize,
    pub num_classes: usize,
    pub label_factor: Option<Factor>,
    pub seed: Option<u64>,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn images(&self) -> Vec<Image> {
        self.records.iter().map(|r| r.image.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label as usize).collect()
    }

    /// Deterministic split: records are shuffled with `seed`, the first
    /// `train_fraction` go to the first part.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        let part = |ids: &[usize]| Dataset {
            records: ids.iter().map(|&i| self.records[i].clone()).collect(),
            ..self.shell()
        };
        (part(&idx[..cut]), part(&idx[cut..]))
    }

    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            records: self.records.iter().take(n).cloned().collect(),
            ..self.shell()
        }
    }

    fn shell(&self) -> Dataset {
        Dataset {
            side: self.side,
            num_classes: self.num_classes,
            label_factor: self.label_factor,
            seed: self.seed,
            records: Vec::new(),
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor() as i32;
    let f = h6 - sector as f32;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hue bin centers, as fractions of the color circle.
pub fn hue_center(bin: usize) -> f32 {
    (bin as f32 + 0.5) / HUE_BINS as f32
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

/// Renders one image from its factor codes; `rng` adds within-bin jitter and
/// background noise. Values are already on the 8-bit grid.
pub fn render<R: Rng + ?Sized>(rng: &mut R, side: usize, factors: [u8; 4]) -> Image {
    let [shape, hue, scale, pos] = factors.map(usize::from);
    let s = side as f32;
    let jitter_h = rng.gen_range(-0.25..0.25) / HUE_BINS as f32;
    let color = hsv_to_rgb(hue_center(hue) + jitter_h, rng.gen_range(0.75..0.95), rng.gen_range(0.8..1.0));
    let radius = s * [0.12, 0.17, 0.22][scale] * rng.gen_range(0.95..1.05);
    let (qx, qy) = (pos % 2, pos / 2);
    let cx = s * (0.25 + 0.5 * qx as f32) + rng.gen_range(-s / 32.0..s / 32.0);
    let cy = s * (0.25 + 0.5 * qy as f32) + rng.gen_range(-s / 32.0..s / 32.0);
    let kind = ShapeKind::ALL[shape];
    let mut data = vec![0.0f32; CHANNELS * side * side];
    for y in 0..side {
        for x in 0..side {
            // 3×3 supersampled coverage
            let mut cover = 0.0;
            for sy in 0..3 {
                for sx in 0..3 {
                    let px = x as f32 + (sx as f32 + 0.5) / 3.0;
                    let py = y as f32 + (sy as f32 + 0.5) / 3.0;
                    if kind.contains((px - cx) / radius, (py - cy) / radius) {
                        cover += 1.0 / 9.0;
                    }
                }
            }
            let bg = BACKGROUND + rng.gen_range(-0.02..0.02);
            for c in 0..CHANNELS {
                let v = bg * (1.0 - cover) + color[c] * cover;
                data[(c * side + y) * side + x] = dequantize(quantize(v));
            }
        }
    }
    Image::new(side, side, data).expect("consistent size")
}

/// Draws the synthetic dataset. Non-label factors are independent and
/// uniform; the label factor is stratified so classes are balanced within 1.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let classes = spec.label_factor.levels();
    if spec.n_samples < classes {
        return Err(MastError::config(
            "n_samples",
            format!("need at least {classes} samples for {classes} classes"),
        ));
    }
    if spec.side < crate::model::min_input_extent() {
        return Err(MastError::config(
            "side",
            format!("must be at least {}", crate::model::min_input_extent()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..spec.n_samples).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let li = spec.label_factor.index();
    let records = labels
        .into_iter()
        .map(|label| {
            let mut factors = [0u8; 4];
            for f in Factor::ALL {
                factors[f.index()] = if f.index() == li {
                    label as u8
                } else {
                    rng.gen_range(0..f.levels()) as u8
                };
            }
            Record {
                image: render(&mut rng, spec.side, factors),
                label: label as u16,
                factors,
            }
        })
        .collect();
    Ok(Dataset {
        side: spec.side,
        num_classes: classes,
        label_factor: Some(spec.label_factor),
        seed: Some(seed),
        records,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Packed,
    Ppm,
}

/// JSON description of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub layout: Layout,
    /// Packed blob (packed layout) relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob: Option<String>,
    /// Image files (ppm layout) relative to the manifest.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub files: Vec<String>,
    pub count: usize,
    pub side: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub label_factor: Option<Factor>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub labels: Vec<u16>,
    pub factors: Vec<[u8; 4]>,
}

impl DatasetManifest {
    fn check(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(MastError::Format(format!(
                "unsupported dataset format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.labels.len() != self.count || self.factors.len() != self.count {
            return Err(MastError::Format("manifest label/factor counts disagree with record count".into()));
        }
        match self.layout {
            Layout::Packed if self.blob.is_none() => Err(MastError::Format("packed manifest without blob".into())),
            Layout::Ppm if self.files.len() != self.count => {
                Err(MastError::Format("manifest file list disagrees with record count".into()))
            }
            _ => Ok(()),
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| MastError::io("creating directory", dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| MastError::io("creating file", path, e))?;
    f.write_all(bytes).map_err(|e| MastError::io("writing file", path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| MastError::io("reading file", path, e))
}

fn interleaved(img: &Image) -> Vec<u8> {
    let n = img.height() * img.width();
    let mut out = Vec::with_capacity(CHANNELS * n);
    for i in 0..n {
        for c in 0..CHANNELS {
            out.push(quantize(img.plane(c)[i]));
        }
    }
    out
}

fn from_interleaved(side_h: usize, side_w: usize, bytes: &[u8]) -> Image {
    let n = side_h * side_w;
    let mut data = vec![0.0; CHANNELS * n];
    for i in 0..n {
        for c in 0..CHANNELS {
            data[c * n + i] = dequantize(bytes[i * CHANNELS + c]);
        }
    }
    Image::new(side_h, side_w, data).expect("consistent size")
}

/// Packed blob bytes.
pub fn encode_packed(ds: &Dataset) -> Result<Vec<u8>> {
    let per = CHANNELS * ds.side * ds.side;
    let mut out = Vec::with_capacity(15 + ds.len() * (per + 6));
    out.extend_from_slice(PACKED_MAGIC);
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.side as u32).to_le_bytes());
    for r in &ds.records {
        if r.image.height() != ds.side || r.image.width() != ds.side {
            return Err(MastError::dim("packed layout needs square images of the dataset side"));
        }
        out.extend_from_slice(&interleaved(&r.image));
        out.extend_from_slice(&r.label.to_le_bytes());
        out.extend_from_slice(&r.factors);
    }
    Ok(out)
}

fn manifest_for(ds: &Dataset, layout: Layout) -> DatasetManifest {
    DatasetManifest {
        format_version: FORMAT_VERSION,
        layout,
        blob: (layout == Layout::Packed).then(|| PACKED_FILE.to_string()),
        files: match layout {
            Layout::Ppm => (0..ds.len()).map(|i| format!("images/{i:06}.ppm")).collect(),
            Layout::Packed => Vec::new(),
        },
        count: ds.len(),
        side: ds.side,
        num_classes: ds.num_classes,
        label_factor: ds.label_factor,
        seed: ds.seed,
        labels: ds.records.iter().map(|r| r.label).collect(),
        factors: ds.records.iter().map(|r| r.factors).collect(),
    }
}

/// Writes `ds` into directory `dir` and returns the manifest path.
pub fn save(ds: &Dataset, dir: &Path, layout: Layout) -> Result<PathBuf> {
    let manifest = manifest_for(ds, layout);
    match layout {
        Layout::Packed => write_file(&dir.join(PACKED_FILE), &encode_packed(ds)?)?,
        Layout::Ppm => {
            for (r, name) in ds.records.iter().zip(&manifest.files) {
                write_file(&dir.join(name), &encode_ppm(&r.image))?;
            }
        }
    }
    let path = dir.join(MANIFEST_FILE);
    write_file(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(&interleaved(img));
    out
}

/// Parses a binary `P6` PPM with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err("not a binary PPM (P6)".into());
    }
    let num = |t: String| t.parse::<usize>().map_err(|_| format!("bad header number `{t}`"));
    let w = num(token()?)?;
    let h = num(token()?)?;
    if num(token()?)? != 255 {
        return Err("only maxval 255 is supported".into());
    }
    let body = &bytes[(pos + 1).min(bytes.len())..];
    if body.len() != CHANNELS * w * h {
        return Err(format!("expected {} pixel bytes, found {}", CHANNELS * w * h, body.len()));
    }
    Ok(from_interleaved(h, w, body))
}

/// Resolves a dataset path: a manifest file, a directory holding one, or a
/// bare packed blob.
fn resolve(path: &Path) -> Result<(Option<DatasetManifest>, PathBuf)> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let bytes = read_file(&manifest_path)?;
    if bytes.starts_with(PACKED_MAGIC) {
        return Ok((None, manifest_path));
    }
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    manifest.check()?;
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((Some(manifest), base))
}

/// Random access over a dataset's records, decoding on demand.
pub struct Loader {
    side: usize,
    num_classes: usize,
    label_factor: Option<Factor>,
    seed: Option<u64>,
    source: Source,
}

enum Source {
    Packed { blob: Vec<u8>, count: usize },
    Ppm { base: PathBuf, manifest: DatasetManifest },
}

const PACKED_HEADER: usize = 15;

impl Loader {
    pub fn open(path: &Path) -> Result<Self> {
        let (manifest, base) = resolve(path)?;
        match manifest {
            None => {
                let blob = read_file(&base)?;
                let (count, side) = packed_header(&blob)?;
                let mut labels_max = 0;
                for i in 0..count {
                    if let Some(rec) = packed_tail(&blob, side, i) {
                        labels_max = labels_max.max(rec.0 as usize + 1);
                    }
                }
                Ok(Self {
                    side,
                    num_classes: labels_max,
                    label_factor: None,
                    seed: None,
                    source: Source::Packed { blob, count },
                })
            }
            Some(m) if m.layout == Layout::Packed => {
                let blob_path = base.join(m.blob.as_deref().unwrap_or(PACKED_FILE));
                let blob = read_file(&blob_path)?;
                let (count, side) = packed_header(&blob)?;
                if count != m.count || side != m.side {
                    return Err(MastError::Format("packed header disagrees with manifest".into()));
                }
                Ok(Self {
                    side,
                    num_classes: m.num_classes,
                    label_factor: m.label_factor,
                    seed: m.seed,
                    source: Source::Packed { blob, count },
                })
            }
            Some(m) => Ok(Self {
                side: m.side,
                num_classes: m.num_classes,
                label_factor: m.label_factor,
                seed: m.seed,
                source: Source::Ppm { base, manifest: m },
            }),
        }
    }

    pub fn len(&self) -> usize {
        match &self.source {
            Source::Packed { count, .. } => *count,
            Source::Ppm { manifest, .. } => manifest.count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn get(&self, index: usize) -> Result<Record> {
        if index >= self.len() {
            return Err(MastError::contract(format!("record {index} out of range ({})", self.len())));
        }
        let rec = match &self.source {
            Source::Packed { blob, .. } => {
                let per = CHANNELS * self.side * self.side;
                let start = PACKED_HEADER + index * (per + 6);
                let bytes = blob.get(start..start + per + 6).ok_or_else(|| MastError::CorruptRecord {
                    index,
                    reason: "record extends past the end of the blob".into(),
                })?;
                Record {
                    image: from_interleaved(self.side, self.side, &bytes[..per]),
                    label: u16::from_le_bytes([bytes[per], bytes[per + 1]]),
                    factors: [bytes[per + 2], bytes[per + 3], bytes[per + 4], bytes[per + 5]],
                }
            }
            Source::Ppm { base, manifest } => {
                let path = base.join(&manifest.files[index]);
                let bytes = fs::read(&path).map_err(|e| MastError::CorruptRecord {
                    index,
                    reason: format!("{}: {e}", path.display()),
                })?;
                let image = decode_ppm(&bytes).map_err(|reason| MastError::CorruptRecord { index, reason })?;
                if image.height() != self.side || image.width() != self.side {
                    return Err(MastError::CorruptRecord {
                        index,
                        reason: format!("image is {}x{}, dataset side is {}", image.height(), image.width(), self.side),
                    });
                }
                Record {
                    image,
                    label: manifest.labels[index],
                    factors: manifest.factors[index],
                }
            }
        };
        if self.num_classes > 0 && rec.label as usize >= self.num_classes {
            return Err(MastError::CorruptRecord {
                index,
                reason: format!("label {} outside {} classes", rec.label, self.num_classes),
            });
        }
        Ok(rec)
    }

    /// Streams records, optionally in a seeded shuffled order.
    pub fn iter(&self, shuffle: Option<u64>) -> impl Iterator<Item = Result<Record>> + '_ {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order.into_iter().map(move |i| self.get(i))
    }

    pub fn load_all(&self) -> Result<Dataset> {
        Ok(Dataset {
            side: self.side,
            num_classes: self.num_classes,
            label_factor: self.label_factor,
            seed: self.seed,
            records: self.iter(None).collect::<Result<_>>()?,
        })
    }
}

fn packed_header(blob: &[u8]) -> Result<(usize, usize)> {
    if blob.len() < PACKED_HEADER || !blob.starts_with(PACKED_MAGIC) {
        return Err(MastError::Format("missing MASTDS1 header".into()));
    }
    let count = u32::from_le_bytes(blob[7..11].try_into().expect("4 bytes")) as usize;
    let side = u32::from_le_bytes(blob[11..15].try_into().expect("4 bytes")) as usize;
    Ok((count, side))
}

fn packed_tail(blob: &[u8], side: usize, i: usize) -> Option<(u16, [u8; 4])> {
    let per = CHANNELS * side * side;
    let at = PACKED_HEADER + i * (per + 6) + per;
    let b = blob.get(at..at + 6)?;
    Some((u16::from_le_bytes([b[0], b[1]]), [b[2], b[3], b[4], b[5]]))
}

/// Opens and fully decodes a dataset.
pub fn load(path: &Path) -> Result<Dataset> {
    Loader::open(path)?.load_all()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, f: Factor) -> SyntheticSpec {
        SyntheticSpec {
            n_samples: n,
            side: 16,
            label_factor: f,
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate(&small(40, Factor::Shape), 3).unwrap();
        let b = generate(&small(40, Factor::Shape), 3).unwrap();
        assert_eq!(encode_packed(&a).unwrap(), encode_packed(&b).unwrap());
        let c = generate(&small(40, Factor::Shape), 4).unwrap();
        assert_ne!(encode_packed(&a).unwrap(), encode_packed(&c).unwrap());
    }

    #[test]
    fn label_factor_is_balanced() {
        let ds = generate(&small(800, Factor::Hue), 1).unwrap();
        let mut counts = [0; 8];
        for r in &ds.records {
            counts[r.label as usize] += 1;
            assert_eq!(r.factors[Factor::Hue.index()] as u16, r.label);
        }
        assert!(counts.iter().all(|&c| (99..=101).contains(&c)), "{counts:?}");
        let ds = generate(&small(10, Factor::Scale), 1).unwrap();
        let mut counts = [0; 3];
        ds.records.iter().for_each(|r| counts[r.label as usize] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn hue_recoverable_from_mean_chroma() {
        // classify each image by the hue angle of its mean color minus the
        // background; bins are equal arcs of the color circle
        let ds = generate(
            &SyntheticSpec {
                n_samples: 400,
                side: 32,
                label_factor: Factor::Hue,
            },
            9,
        )
        .unwrap();
        let mut correct = 0;
        for r in &ds.records {
            let m = r.image.mean_rgb();
            let [rr, gg, bb] = m.map(|v| (v - BACKGROUND) as f64);
            let (mx, mn) = (rr.max(gg).max(bb), rr.min(gg).min(bb));
            let d = mx - mn;
            let hue = if mx == rr {
                ((gg - bb) / d).rem_euclid(6.0)
            } else if mx == gg {
                (bb - rr) / d + 2.0
            } else {
                (rr - gg) / d + 4.0
            } / 6.0;
            let bin = ((hue * 8.0).floor() as usize).min(7);
            correct += usize::from(bin == r.label as usize);
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc >= 0.95, "{acc}");
    }

    #[test]
    fn pixel_values_in_unit_range() {
        let ds = generate(&small(20, Factor::Position), 2).unwrap();
        for r in &ds.records {
            assert!(r.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(matches!(generate(&small(5, Factor::Hue), 0), Err(MastError::Config { .. })));
    }

    #[test]
    fn packed_round_trip_and_shuffle_stability() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small(30, Factor::Shape), 5).unwrap();
        let manifest = save(&ds, dir.path(), Layout::Packed).unwrap();
        let back = load(&manifest).unwrap();
        assert_eq!(back, ds);
        assert_eq!(load(dir.path()).unwrap(), ds);
        // bare blob
        let bare = load(&dir.path().join(PACKED_FILE)).unwrap();
        assert_eq!(bare.records, ds.records);

        let loader = Loader::open(dir.path()).unwrap();
        let a: Vec<u16> = loader.iter(Some(11)).map(|r| r.unwrap().label).collect();
        let b: Vec<u16> = loader.iter(Some(11)).map(|r| r.unwrap().label).collect();
        assert_eq!(a, b);
        let natural: Vec<u16> = loader.iter(None).map(|r| r.unwrap().label).collect();
        assert_ne!(a, natural);
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small(12, Factor::Hue), 6).unwrap();
        save(&ds, dir.path(), Layout::Ppm).unwrap();
        assert_eq!(load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn corrupt_records_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small(6, Factor::Shape), 7).unwrap();
        save(&ds, dir.path(), Layout::Packed).unwrap();
        let blob = dir.path().join(PACKED_FILE);
        let bytes = fs::read(&blob).unwrap();
        // cut the last record short
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        match load(dir.path()) {
            Err(MastError::CorruptRecord { index, .. }) => assert_eq!(index, 5),
            other => panic!("{other:?}"),
        }

        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path(), Layout::Ppm).unwrap();
        fs::write(dir.path().join("images/000002.ppm"), b"P6\n16 16\n255\nxx").unwrap();
        match load(dir.path()) {
            Err(MastError::CorruptRecord { index, .. }) => assert_eq!(index, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unsupported_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small(4, Factor::Shape), 8).unwrap();
        let path = save(&ds, dir.path(), Layout::Packed).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&path, text).unwrap();
        assert!(matches!(load(dir.path()), Err(MastError::Format(_))));
    }
}
