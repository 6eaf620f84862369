//! Weather corpus ingestion: manifest parsing, image preprocessing, cue-box
//! rasterization and unpaired batch sampling.
//!
//! A manifest is UTF-8 text with an optional `#cues:` header naming the cue
//! vocabulary, followed by one tab-separated record per line:
//!
//! ```text
//! #cues: background,sky,cloud
//! sunny/0001.png	sunny	1:0,0,300,120;2:40,10,90,50
//! cloudy/0002.jpg	cloudy
//! ```

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use image::{DynamicImage, ImageBuffer, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image_tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherClass {
    Sunny,
    Cloudy,
    Foggy,
    Rainy,
    Snowy,
}

impl WeatherClass {
    pub const ALL: [WeatherClass; 5] = [
        WeatherClass::Sunny,
        WeatherClass::Cloudy,
        WeatherClass::Foggy,
        WeatherClass::Rainy,
        WeatherClass::Snowy,
    ];
    pub const COUNT: usize = 5;

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            WeatherClass::Sunny => "sunny",
            WeatherClass::Cloudy => "cloudy",
            WeatherClass::Foggy => "foggy",
            WeatherClass::Rainy => "rainy",
            WeatherClass::Snowy => "snowy",
        }
    }

    /// Cue names that typically signal this class in the default vocabulary.
    pub fn default_cues(self) -> &'static [&'static str] {
        match self {
            WeatherClass::Sunny => &["sky"],
            WeatherClass::Cloudy => &["sky", "cloud"],
            WeatherClass::Foggy => &["sky", "fog"],
            WeatherClass::Rainy => &["sky", "cloud", "rain-streak", "wet-ground"],
            WeatherClass::Snowy => &["sky", "snow-cover"],
        }
    }
}

impl fmt::Display for WeatherClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeatherClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| invalid(format!("unknown weather class {s:?}")))
    }
}

/// Ordered cue-class names. Index 0 is always the background class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueVocabulary {
    names: Vec<String>,
}

impl Default for CueVocabulary {
    fn default() -> Self {
        Self {
            names: [
                "background",
                "sky",
                "cloud",
                "fog",
                "rain-streak",
                "snow-cover",
                "wet-ground",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

impl CueVocabulary {
    pub const BACKGROUND: usize = 0;

    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let names: Vec<String> = names.iter().map(|s| s.as_ref().trim().to_string()).collect();
        if names.len() < 2 {
            return Err(invalid("cue vocabulary needs background plus at least one cue"));
        }
        if names[0] != "background" {
            return Err(invalid(format!(
                "first cue class must be \"background\", got {:?}",
                names[0]
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(invalid("empty cue class name"));
            }
            if names[..i].contains(n) {
                return Err(invalid(format!("duplicate cue class {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Parses a cue reference given either as an index or a name.
    pub fn resolve(&self, token: &str) -> Result<usize> {
        let token = token.trim();
        let idx = match token.parse::<usize>() {
            Ok(i) => i,
            Err(_) => self
                .index_of(token)
                .ok_or_else(|| invalid(format!("unknown cue class {token:?}")))?,
        };
        if idx >= self.len() {
            return Err(invalid(format!(
                "cue class {idx} out of range for {} classes",
                self.len()
            )));
        }
        Ok(idx)
    }

    /// Cue indices relevant to translating between two weather classes: the
    /// union of both classes' default cues that exist in this vocabulary.
    pub fn relevant_for(&self, a: WeatherClass, b: WeatherClass) -> Vec<usize> {
        let mut out: Vec<usize> = a
            .default_cues()
            .iter()
            .chain(b.default_cues())
            .filter_map(|n| self.index_of(n))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Axis-aligned weather-cue box in source pixel space, half-open on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CueBox {
    pub cue_class: usize,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl CueBox {
    pub fn validate(&self, height: u32, width: u32, n_s: usize) -> Result<()> {
        if self.cue_class >= n_s {
            return Err(invalid(format!(
                "cue class {} out of range for {n_s} classes",
                self.cue_class
            )));
        }
        if !(self.x0 < self.x1 && self.x1 <= width && self.y0 < self.y1 && self.y1 <= height) {
            return Err(invalid(format!(
                "box ({},{},{},{}) outside {width}x{height} image",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        Ok(())
    }
}

/// One-hot cue segmentation target, stored as a per-pixel class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMapTarget {
    pub n_s: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

impl SegMapTarget {
    pub fn background(n_s: usize, height: usize, width: usize) -> Self {
        Self {
            n_s,
            height,
            width,
            labels: vec![CueVocabulary::BACKGROUND; height * width],
        }
    }

    pub fn label(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x]
    }

    /// Dense N_s×H×W grid of {0, 1}.
    pub fn one_hot(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0f32; self.n_s * hw];
        for (p, &c) in self.labels.iter().enumerate() {
            out[c * hw + p] = 1.0;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub relative_path: String,
    pub image_path: PathBuf,
    pub class: WeatherClass,
    pub boxes: Vec<CueBox>,
    /// Source image size as (height, width).
    pub source_size: (u32, u32),
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub vocabulary: CueVocabulary,
    pub records: Vec<Record>,
    by_class: [Vec<usize>; WeatherClass::COUNT],
}

impl DatasetIndex {
    pub fn new(root: PathBuf, vocabulary: CueVocabulary, records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(invalid("no records"));
        }
        let mut by_class: [Vec<usize>; WeatherClass::COUNT] = Default::default();
        for (i, r) in records.iter().enumerate() {
            by_class[r.class.code()].push(i);
        }
        Ok(Self {
            root,
            vocabulary,
            records,
            by_class,
        })
    }

    pub fn class_records(&self, class: WeatherClass) -> &[usize] {
        &self.by_class[class.code()]
    }

    pub fn class_counts(&self) -> Vec<(WeatherClass, usize)> {
        WeatherClass::ALL
            .into_iter()
            .map(|c| (c, self.by_class[c.code()].len()))
            .filter(|(_, n)| *n > 0)
            .collect()
    }
}

/// A manifest line before path resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub relative_path: String,
    pub class: WeatherClass,
    pub boxes: Vec<CueBox>,
}

pub struct Manifest {
    pub vocabulary: CueVocabulary,
    pub entries: Vec<ManifestEntry>,
}

pub fn parse_manifest(text: &str, origin: &Path) -> Result<Manifest> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut vocabulary = CueVocabulary::default();
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#cues:") {
            if !entries.is_empty() {
                return Err(parse_err(lineno, "#cues header after records".into()));
            }
            let names: Vec<&str> = rest.split(',').collect();
            vocabulary = CueVocabulary::new(&names).map_err(|e| parse_err(lineno, e.to_string()))?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 || fields[0].trim().is_empty() {
            return Err(parse_err(
                lineno,
                format!("expected <path>\\t<class>[\\t<boxes>], got {line:?}"),
            ));
        }
        let class: WeatherClass = fields[1].parse()?;
        let boxes = match fields.get(2) {
            Some(spec) => parse_boxes(spec, &vocabulary).map_err(|m| parse_err(lineno, m))?,
            None => Vec::new(),
        };
        entries.push(ManifestEntry {
            relative_path: fields[0].trim().to_string(),
            class,
            boxes,
        });
    }
    Ok(Manifest {
        vocabulary,
        entries,
    })
}

fn parse_boxes(spec: &str, vocab: &CueVocabulary) -> std::result::Result<Vec<CueBox>, String> {
    let mut boxes = Vec::new();
    for group in spec.split(';').map(str::trim).filter(|g| !g.is_empty()) {
        let (cls, coords) = group
            .split_once(':')
            .ok_or_else(|| format!("box group {group:?} lacks ':'"))?;
        let cue_class = vocab.resolve(cls).map_err(|e| e.to_string())?;
        let c: Vec<u32> = coords
            .split(',')
            .map(|v| v.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format!("bad box coordinates {coords:?}: {e}"))?;
        if c.len() != 4 {
            return Err(format!("box {group:?} needs 4 coordinates"));
        }
        boxes.push(CueBox {
            cue_class,
            x0: c[0],
            y0: c[1],
            x1: c[2],
            y1: c[3],
        });
    }
    Ok(boxes)
}

pub fn render_manifest(vocab: &CueVocabulary, entries: &[ManifestEntry]) -> String {
    let mut out = format!("#cues: {}\n", vocab.names().join(","));
    for e in entries {
        out.push_str(&e.relative_path);
        out.push('\t');
        out.push_str(e.class.name());
        out.push('\t');
        let groups: Vec<String> = e
            .boxes
            .iter()
            .map(|b| format!("{}:{},{},{},{}", b.cue_class, b.x0, b.y0, b.x1, b.y1))
            .collect();
        out.push_str(&groups.join(";"));
        out.push('\n');
    }
    out
}

/// Loads a manifest and resolves its image paths against `root`. Image headers
/// are read to validate every cue box against the source dimensions.
pub fn load_dataset(root: &Path, manifest: &Path) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(manifest).map_err(|source| Error::Load {
        path: manifest.to_path_buf(),
        source,
    })?;
    let Manifest {
        vocabulary,
        entries,
    } = parse_manifest(&text, manifest)?;
    let mut records = Vec::with_capacity(entries.len());
    for e in entries {
        let image_path = root.join(&e.relative_path);
        if !image_path.is_file() {
            return Err(Error::Load {
                path: image_path,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "image not found"),
            });
        }
        let (w, h) = image::image_dimensions(&image_path).map_err(|source| Error::Image {
            path: image_path.clone(),
            source,
        })?;
        for b in &e.boxes {
            b.validate(h, w, vocabulary.len())
                .map_err(|err| invalid(format!("{}: {err}", image_path.display())))?;
        }
        records.push(Record {
            relative_path: e.relative_path,
            image_path,
            class: e.class,
            boxes: e.boxes,
            source_size: (h, w),
        });
    }
    DatasetIndex::new(root.to_path_buf(), vocabulary, records)
}

/// Lists `root/<class_name>/**/<image>` files as manifest entries without
/// cue boxes, sorted by path.
pub fn scan_class_tree(root: &Path) -> Result<Vec<ManifestEntry>> {
    if !root.is_dir() {
        return Err(Error::Load {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        });
    }
    let mut entries = Vec::new();
    for class in WeatherClass::ALL {
        let dir = root.join(class.name());
        if !dir.is_dir() {
            continue;
        }
        let mut files = Vec::new();
        collect_images(&dir, &mut files)?;
        files.sort();
        for f in files {
            let rel = f
                .strip_prefix(root)
                .expect("walked below root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            entries.push(ManifestEntry {
                relative_path: rel,
                class,
                boxes: Vec::new(),
            });
        }
    }
    Ok(entries)
}

pub(crate) fn is_image_path(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp")
    )
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_images(&path, out)?;
        } else if is_image_path(&path) {
            out.push(path);
        }
    }
    Ok(())
}

/// Converts a decoded raster to a normalized 3×H×W tensor of `target_size`
/// (height, width). Non-RGB8 inputs are converted and a note is returned.
pub fn preprocess_image(
    raw: &DynamicImage,
    target_size: (usize, usize),
) -> Result<(ImageTensor, Option<String>)> {
    if raw.width() == 0 || raw.height() == 0 {
        return Err(invalid("image has zero extent"));
    }
    let (rgb, warning) = match raw {
        DynamicImage::ImageRgb8(img) => (img.clone(), None),
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) => (
            raw.to_rgb8(),
            Some("grayscale input replicated to 3 channels".to_string()),
        ),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_) => (
            raw.to_rgb8(),
            Some("grayscale+alpha input replicated to 3 channels, alpha dropped".to_string()),
        ),
        DynamicImage::ImageRgba8(_) | DynamicImage::ImageRgba16(_) | DynamicImage::ImageRgba32F(_) => {
            (raw.to_rgb8(), Some("alpha channel dropped".to_string()))
        }
        _ => (raw.to_rgb8(), Some("converted to 8-bit RGB".to_string())),
    };
    Ok((resize_rgb(&rgb, target_size), warning))
}

fn resize_rgb(img: &RgbImage, (th, tw): (usize, usize)) -> ImageTensor {
    if (img.height() as usize, img.width() as usize) == (th, tw) {
        return ImageTensor::from_rgb8(img);
    }
    // f32 resampling clamps to [0, 1], so resample unit-range values.
    let levels: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_fn(img.width(), img.height(), |x, y| {
            let p = img.get_pixel(x, y).0;
            Rgb([p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0])
        });
    let resized = image::imageops::resize(
        &levels,
        tw as u32,
        th as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut data = vec![0f32; 3 * th * tw];
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            data[(c * th + y as usize) * tw + x as usize] = (px.0[c] * 2.0 - 1.0).clamp(-1.0, 1.0);
        }
    }
    ImageTensor {
        height: th,
        width: tw,
        data,
    }
}

pub fn load_image(path: &Path, target_size: (usize, usize)) -> Result<ImageTensor> {
    let raw = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (img, warning) = preprocess_image(&raw, target_size)?;
    if let Some(w) = warning {
        log::warn!("{}: {w}", path.display());
    }
    Ok(img)
}

/// Paints cue boxes onto a background grid of `target_size`. A target pixel
/// takes a box's class when its center, mapped back to source space, falls in
/// the box; later boxes overwrite earlier ones.
pub fn rasterize_cues(
    boxes: &[CueBox],
    source_size: (usize, usize),
    target_size: (usize, usize),
    n_s: usize,
) -> Result<SegMapTarget> {
    let (sh, sw) = source_size;
    let (th, tw) = target_size;
    if sh == 0 || sw == 0 || th == 0 || tw == 0 {
        return Err(invalid("rasterization sizes must be nonzero"));
    }
    let mut target = SegMapTarget::background(n_s, th, tw);
    for b in boxes {
        b.validate(sh as u32, sw as u32, n_s)?;
        let rows = covered_range(b.y0 as usize, b.y1 as usize, sh, th);
        let cols = covered_range(b.x0 as usize, b.x1 as usize, sw, tw);
        for y in rows {
            for x in cols.clone() {
                target.labels[y * tw + x] = b.cue_class;
            }
        }
    }
    Ok(target)
}

/// Target indices j with lo <= (j + 0.5) * src / dst < hi, in exact integer form.
fn covered_range(lo: usize, hi: usize, src: usize, dst: usize) -> std::ops::Range<usize> {
    // (2j + 1) * src >= 2 * lo * dst  and  (2j + 1) * src < 2 * hi * dst
    let first = |bound: usize| -> usize {
        // smallest j with (2j+1)*src >= 2*bound*dst
        let need = 2 * bound * dst;
        if need <= src {
            0
        } else {
            (need - src).div_ceil(2 * src)
        }
    };
    let start = first(lo).min(dst);
    let end = first(hi).min(dst);
    start..end.max(start)
}

/// Images from two domains, sampled independently.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x_images: Vec<ImageTensor>,
    pub y_images: Vec<ImageTensor>,
    pub x_seg_targets: Vec<SegMapTarget>,
    pub y_seg_targets: Vec<SegMapTarget>,
    pub x_class: WeatherClass,
    pub y_class: WeatherClass,
    pub x_records: Vec<usize>,
    pub y_records: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x_images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_images.is_empty()
    }
}

/// Decodes and preprocesses records on first use and keeps them in memory.
pub struct ImageCache {
    target_size: (usize, usize),
    entries: Mutex<HashMap<usize, Arc<(ImageTensor, SegMapTarget)>>>,
}

impl ImageCache {
    pub fn new(target_size: (usize, usize)) -> Self {
        Self {
            target_size,
            entries: Mutex::new(HashMap::new()),
        }
    }

    pub fn target_size(&self) -> (usize, usize) {
        self.target_size
    }

    pub fn get(&self, index: &DatasetIndex, record: usize) -> Result<Arc<(ImageTensor, SegMapTarget)>> {
        if let Some(hit) = self.entries.lock().expect("cache lock").get(&record) {
            return Ok(hit.clone());
        }
        let r = index
            .records
            .get(record)
            .ok_or_else(|| invalid(format!("record {record} out of range")))?;
        let img = load_image(&r.image_path, self.target_size)?;
        let (sh, sw) = r.source_size;
        let seg = rasterize_cues(
            &r.boxes,
            (sh as usize, sw as usize),
            self.target_size,
            index.vocabulary.len(),
        )?;
        let entry = Arc::new((img, seg));
        self.entries
            .lock()
            .expect("cache lock")
            .insert(record, entry.clone());
        Ok(entry)
    }
}

/// Record indices for one unpaired batch: uniform with replacement within
/// each domain, deterministic in `seed`.
pub fn sample_unpaired_indices(
    index: &DatasetIndex,
    domain_x: WeatherClass,
    domain_y: WeatherClass,
    batch_size: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if domain_x == domain_y {
        return Err(invalid(format!(
            "source and target domains are both {domain_x}"
        )));
    }
    if batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let xs = index.class_records(domain_x);
    let ys = index.class_records(domain_y);
    for (pool, class) in [(xs, domain_x), (ys, domain_y)] {
        if pool.is_empty() {
            return Err(invalid(format!("domain {class} has no images")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..batch_size)
        .map(|_| xs[rng.random_range(0..xs.len())])
        .collect();
    let y = (0..batch_size)
        .map(|_| ys[rng.random_range(0..ys.len())])
        .collect();
    Ok((x, y))
}

pub fn sample_unpaired_batch(
    index: &DatasetIndex,
    cache: &ImageCache,
    domain_x: WeatherClass,
    domain_y: WeatherClass,
    batch_size: usize,
    seed: u64,
) -> Result<Batch> {
    let (xr, yr) = sample_unpaired_indices(index, domain_x, domain_y, batch_size, seed)?;
    let mut batch = Batch {
        x_images: Vec::with_capacity(batch_size),
        y_images: Vec::with_capacity(batch_size),
        x_seg_targets: Vec::with_capacity(batch_size),
        y_seg_targets: Vec::with_capacity(batch_size),
        x_class: domain_x,
        y_class: domain_y,
        x_records: xr.clone(),
        y_records: yr.clone(),
    };
    for r in xr {
        let e = cache.get(index, r)?;
        batch.x_images.push(e.0.clone());
        batch.x_seg_targets.push(e.1.clone());
    }
    for r in yr {
        let e = cache.get(index, r)?;
        batch.y_images.push(e.0.clone());
        batch.y_seg_targets.push(e.1.clone());
    }
    Ok(batch)
}
