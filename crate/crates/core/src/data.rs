//! Synthetic dataset generators, manifest ingestion, the multi-dataset batch
//! composer and denoising-query construction.
//!
//! Manifests are line-delimited JSON: a header declaring the datasets
//! followed by one record per line. Pixels travel inline (base64 RGB, 8-bit)
//! or as a PNG path relative to the manifest; serialization always inlines,
//! so one ingest pass normalizes a manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::captions::{parse_caption, HoiTriplet};
use crate::model::BoundModel;
use crate::{Error, Result};

pub type Image = Array3<f64>;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Supervision kind of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Detection,
    ActionImage,
    ActionVideo,
    Caption,
}

/// Batch-plan grouping: the two action kinds share one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanGroup {
    Detection,
    Action,
    Caption,
}

impl DatasetKind {
    pub fn group(&self) -> PlanGroup {
        match self {
            DatasetKind::Detection => PlanGroup::Detection,
            DatasetKind::ActionImage | DatasetKind::ActionVideo => PlanGroup::Action,
            DatasetKind::Caption => PlanGroup::Caption,
        }
    }
}

/// Declared properties of one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub kind: DatasetKind,
    /// Global verb ids owned by this dataset (action/caption kinds).
    #[serde(default)]
    pub verb_class_ids: Vec<usize>,
    /// Object class designated as "person" in this dataset's label space.
    #[serde(default)]
    pub person_class_id: Option<usize>,
    #[serde(default = "default_weight")]
    pub sampling_weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

impl DatasetSpec {
    /// Multi-hot mask over `c_a` global verb classes.
    pub fn verb_mask(&self, c_a: usize) -> Vec<bool> {
        let mut mask = vec![false; c_a];
        for &id in &self.verb_class_ids {
            if id < c_a {
                mask[id] = true;
            }
        }
        mask
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxAnn {
    pub cxcywh: [f64; 4],
    pub class: usize,
}

/// One training sample with its dataset-typed annotation.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: String,
    pub dataset: String,
    pub image: Image,
    pub annotation: ImageAnnotation,
}

#[derive(Debug, Clone)]
pub enum ImageAnnotation {
    Boxes(Vec<BoxAnn>),
    /// Positive global verb ids.
    Verbs(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct VideoRecord {
    pub id: String,
    pub dataset: String,
    pub frames: Vec<Image>,
    pub verb_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CaptionRecord {
    pub id: String,
    pub dataset: String,
    pub image: Image,
    pub caption: String,
    pub triplets: Vec<HoiTriplet>,
    /// Indices into the negative bank, parallel to `triplets`; assigned when
    /// the bank is built for a run.
    pub triplet_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub enum Record {
    Detection(ImageRecord),
    ActionImage(ImageRecord),
    ActionVideo(VideoRecord),
    Caption(CaptionRecord),
}

impl Record {
    pub fn kind(&self) -> DatasetKind {
        match self {
            Record::Detection(_) => DatasetKind::Detection,
            Record::ActionImage(_) => DatasetKind::ActionImage,
            Record::ActionVideo(_) => DatasetKind::ActionVideo,
            Record::Caption(_) => DatasetKind::Caption,
        }
    }

    pub fn dataset(&self) -> &str {
        match self {
            Record::Detection(r) | Record::ActionImage(r) => &r.dataset,
            Record::ActionVideo(r) => &r.dataset,
            Record::Caption(r) => &r.dataset,
        }
    }

    pub fn id(&self) -> &str {
        match self {
            Record::Detection(r) | Record::ActionImage(r) => &r.id,
            Record::ActionVideo(r) => &r.id,
            Record::Caption(r) => &r.id,
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

/// Class palette: the class id picks the fill color of its rectangles.
const PALETTE: &[[f64; 3]] = &[
    [0.9, 0.15, 0.15],
    [0.15, 0.8, 0.2],
    [0.2, 0.3, 0.9],
    [0.9, 0.85, 0.1],
    [0.85, 0.2, 0.85],
    [0.1, 0.85, 0.85],
    [0.95, 0.55, 0.1],
    [0.55, 0.25, 0.75],
];

/// Verb glyph palette, distinct from the class palette.
const VERB_PALETTE: &[[f64; 3]] = &[
    [1.0, 1.0, 1.0],
    [0.7, 0.4, 0.1],
    [0.3, 0.6, 0.4],
    [0.5, 0.5, 1.0],
    [1.0, 0.6, 0.8],
    [0.4, 0.9, 0.6],
    [0.8, 0.8, 0.4],
    [0.6, 0.2, 0.3],
];

const BACKGROUND: f64 = 0.05;

fn blank_canvas(h: usize, w: usize) -> Image {
    Array3::from_elem((h, w, 3), BACKGROUND)
}

fn draw_rect(img: &mut Image, cxcywh: &[f64; 4], color: [f64; 3]) {
    let (h, w, _) = img.dim();
    let x1 = ((cxcywh[0] - cxcywh[2] / 2.0) * w as f64).max(0.0) as usize;
    let x2 = (((cxcywh[0] + cxcywh[2] / 2.0) * w as f64).ceil() as usize).min(w);
    let y1 = ((cxcywh[1] - cxcywh[3] / 2.0) * h as f64).max(0.0) as usize;
    let y2 = (((cxcywh[1] + cxcywh[3] / 2.0) * h as f64).ceil() as usize).min(h);
    for y in y1..y2 {
        for x in x1..x2 {
            for c in 0..3 {
                img[[y, x, c]] = color[c];
            }
        }
    }
}

fn sample_box(rng: &mut ChaCha8Rng, existing: &[[f64; 4]]) -> [f64; 4] {
    for _ in 0..20 {
        let w = rng.random_range(0.25..0.45);
        let h = rng.random_range(0.25..0.45);
        let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
        let cy = rng.random_range(h / 2.0..1.0 - h / 2.0);
        let cand = [cx, cy, w, h];
        let overlaps = existing.iter().any(|b| {
            let dx = (b[0] - cx).abs();
            let dy = (b[1] - cy).abs();
            dx < (b[2] + w) / 2.0 && dy < (b[3] + h) / 2.0
        });
        if !overlaps {
            return cand;
        }
    }
    [0.5, 0.55, 0.3, 0.3]
}

/// Inner glyph centered in a person box; its color is the verb signal on
/// action data and an uncorrelated distractor on detection data, so person
/// appearance matches across the two domains.
fn draw_person_glyph(img: &mut Image, person: &[f64; 4], color_idx: usize) {
    let glyph = [person[0], person[1], person[2] / 3.0, person[3] / 3.0];
    draw_rect(img, &glyph, VERB_PALETTE[color_idx % VERB_PALETTE.len()]);
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticDetectionConfig {
    pub n_images: usize,
    pub n_boxes_range: (usize, usize),
    pub canvas: (usize, usize),
    pub num_object_classes: usize,
    pub person_class_id: usize,
    pub seed: u64,
}

/// Colored rectangles with exact box annotations; the person class always
/// carries `person_class_id`.
pub fn generate_synthetic_detection(cfg: &SyntheticDetectionConfig) -> Vec<ImageRecord> {
    assert!(cfg.canvas.0 >= 16 && cfg.canvas.1 >= 16, "canvas must be at least 16x16");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_images);
    for i in 0..cfg.n_images {
        let mut img = blank_canvas(cfg.canvas.0, cfg.canvas.1);
        let n_boxes = if cfg.n_boxes_range.1 == 0 {
            0
        } else {
            rng.random_range(cfg.n_boxes_range.0..=cfg.n_boxes_range.1)
        };
        let mut boxes = Vec::new();
        let mut placed: Vec<[f64; 4]> = Vec::new();
        for b in 0..n_boxes {
            // Make the first box a person so RPQ paths stay exercised.
            let class = if b == 0 {
                cfg.person_class_id
            } else {
                rng.random_range(0..cfg.num_object_classes)
            };
            let cxcywh = sample_box(&mut rng, &placed);
            placed.push(cxcywh);
            draw_rect(&mut img, &cxcywh, PALETTE[class % PALETTE.len()]);
            if class == cfg.person_class_id {
                // Distractor glyph, uncorrelated with any label.
                let color = rng.random_range(0..VERB_PALETTE.len());
                draw_person_glyph(&mut img, &cxcywh, color);
            }
            boxes.push(BoxAnn { cxcywh, class });
        }
        out.push(ImageRecord {
            id: format!("det-{i}"),
            dataset: String::new(),
            image: img,
            annotation: ImageAnnotation::Boxes(boxes),
        });
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticActionConfig {
    pub n_samples: usize,
    /// Global verb ids this dataset may label.
    pub verb_ids: Vec<usize>,
    pub n_frames: usize,
    pub persons_range: (usize, usize),
    pub canvas: (usize, usize),
    pub person_class_id: usize,
    pub seed: u64,
}

fn paint_action_frame(
    canvas: (usize, usize),
    persons: &[[f64; 4]],
    verb: usize,
    person_class: usize,
) -> Image {
    let mut img = blank_canvas(canvas.0, canvas.1);
    for p in persons {
        draw_rect(&mut img, p, PALETTE[person_class % PALETTE.len()]);
        // The glyph color carried by each person encodes the verb label.
        draw_person_glyph(&mut img, p, verb);
    }
    img
}

/// Action-labeled samples: persons plus a verb glyph that makes the label
/// recoverable from pixels. `video = false` yields one frame per record,
/// `video = true` yields `n_frames` frames sharing one video-level label.
pub fn generate_synthetic_actions(cfg: &SyntheticActionConfig, video: bool) -> Vec<Record> {
    assert!(!cfg.verb_ids.is_empty(), "action generator needs verb ids");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let verb = cfg.verb_ids[rng.random_range(0..cfg.verb_ids.len())];
        let n_persons = if cfg.persons_range.1 == 0 {
            0
        } else {
            rng.random_range(cfg.persons_range.0..=cfg.persons_range.1)
        };
        let mut persons = Vec::new();
        for _ in 0..n_persons {
            persons.push(sample_box(&mut rng, &persons));
        }
        if video {
            let mut frames = Vec::with_capacity(cfg.n_frames);
            for f in 0..cfg.n_frames {
                // Persons drift a little between frames.
                let drift: Vec<[f64; 4]> = persons
                    .iter()
                    .map(|p| {
                        let dx = 0.02 * f as f64;
                        [(p[0] + dx).min(1.0 - p[2] / 2.0), p[1], p[2], p[3]]
                    })
                    .collect();
                frames.push(paint_action_frame(cfg.canvas, &drift, verb, cfg.person_class_id));
            }
            out.push(Record::ActionVideo(VideoRecord {
                id: format!("vid-{i}"),
                dataset: String::new(),
                frames,
                verb_ids: vec![verb],
            }));
        } else {
            let img = paint_action_frame(cfg.canvas, &persons, verb, cfg.person_class_id);
            out.push(Record::ActionImage(ImageRecord {
                id: format!("act-{i}"),
                dataset: String::new(),
                image: img,
                annotation: ImageAnnotation::Verbs(vec![verb]),
            }));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticCaptionConfig {
    pub n_samples: usize,
    pub canvas: (usize, usize),
    pub person_class_id: usize,
    pub seed: u64,
}

/// Caption-labeled samples whose captions parse into one triplet each.
pub fn generate_synthetic_captions(cfg: &SyntheticCaptionConfig) -> Vec<CaptionRecord> {
    let humans = ["man", "woman", "boy", "girl", "person"];
    let verbs = [
        ("drive", "drives"),
        ("ride", "rides"),
        ("hold", "holds"),
        ("eat", "eats"),
        ("throw", "throws"),
        ("carry", "carries"),
        ("wash", "washes"),
        ("push", "pushes"),
    ];
    let objects = ["car", "horse", "cup", "pizza", "ball", "bag", "dish", "cart"];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let human = humans[rng.random_range(0..humans.len())];
        let verb_idx = rng.random_range(0..verbs.len());
        let (_, verb_form) = verbs[verb_idx];
        let object = objects[rng.random_range(0..objects.len())];
        let caption = format!("a {human} {verb_form} a {object}");
        let mut persons = Vec::new();
        persons.push(sample_box(&mut rng, &persons));
        let img = paint_action_frame(cfg.canvas, &persons, verb_idx, cfg.person_class_id);
        let id = format!("cap-{i}");
        let triplets = parse_caption(&caption, &id);
        debug_assert_eq!(triplets.len(), 1, "generator captions must parse");
        out.push(CaptionRecord {
            id,
            dataset: String::new(),
            image: img,
            caption,
            triplets,
            triplet_ids: Vec::new(),
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Manifest wire format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct WireHeader {
    schema_version: u32,
    datasets: Vec<DatasetSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireImage {
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    height: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rgb_base64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireRecord {
    id: String,
    dataset: String,
    kind: DatasetKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<WireImage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frames: Option<Vec<WireImage>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<BoxAnn>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    verb_ids: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
}

fn image_to_wire(img: &Image) -> WireImage {
    let (h, w, _) = img.dim();
    let mut bytes = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push((img[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    WireImage {
        width: Some(w),
        height: Some(h),
        rgb_base64: Some(B64.encode(bytes)),
        path: None,
    }
}

fn image_from_wire(wire: &WireImage, line: usize, base: &Path) -> Result<Image> {
    if let Some(path) = &wire.path {
        let full = base.join(path);
        let img = image::open(&full).map_err(|e| Error::Manifest {
            line,
            msg: format!("cannot read media {}: {e}", full.display()),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let mut out = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out[[y as usize, x as usize, c]] = p.0[c] as f64 / 255.0;
            }
        }
        return Ok(out);
    }
    let (Some(w), Some(h), Some(data)) = (wire.width, wire.height, wire.rgb_base64.as_ref()) else {
        return Err(Error::Manifest {
            line,
            msg: "image needs either path or width/height/rgb_base64".into(),
        });
    };
    if w == 0 || h == 0 {
        return Err(Error::Manifest { line, msg: "image dimensions must be positive".into() });
    }
    let bytes = B64
        .decode(data)
        .map_err(|e| Error::Manifest { line, msg: format!("bad base64 pixels: {e}") })?;
    if bytes.len() != w * h * 3 {
        return Err(Error::Manifest {
            line,
            msg: format!("pixel payload is {} bytes, expected {}", bytes.len(), w * h * 3),
        });
    }
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[[y, x, c]] = bytes[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

fn validate_box(b: &BoxAnn, line: usize) -> Result<()> {
    let [cx, cy, w, h] = b.cxcywh;
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::Manifest {
            line,
            msg: format!("box width/height must be strictly positive, got {w}x{h}"),
        });
    }
    for v in [cx, cy, w, h] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Manifest {
                line,
                msg: format!("box coordinates must lie in [0,1], got {:?}", b.cxcywh),
            });
        }
    }
    Ok(())
}

/// Ingestion output: validated records plus filter statistics.
#[derive(Debug)]
pub struct IngestOutput {
    pub datasets: Vec<DatasetSpec>,
    pub records: Vec<Record>,
    /// Caption records dropped because no triplet could be extracted.
    pub filtered_captions: usize,
}

/// Read and validate a manifest file. Malformed lines are reported with
/// their line number; caption records that parse to zero triplets are
/// filtered and counted.
pub fn ingest_manifest(path: &Path) -> Result<IngestOutput> {
    let file = std::fs::File::open(path)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    ingest_manifest_reader(BufReader::new(file), &base)
}

pub fn ingest_manifest_reader(reader: impl BufRead, base: &Path) -> Result<IngestOutput> {
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or(Error::Manifest { line: 1, msg: "empty manifest (missing header)".into() })??;
    let header: WireHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Manifest { line: 1, msg: format!("bad header: {e}") })?;
    if header.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Manifest {
            line: 1,
            msg: format!(
                "schema version {} unsupported (expected {MANIFEST_SCHEMA_VERSION})",
                header.schema_version
            ),
        });
    }
    let specs: BTreeMap<String, DatasetSpec> =
        header.datasets.iter().map(|d| (d.name.clone(), d.clone())).collect();

    let mut records = Vec::new();
    let mut filtered_captions = 0usize;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let wire: WireRecord = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest { line: line_no, msg: format!("bad record: {e}") })?;
        let spec = specs.get(&wire.dataset).ok_or_else(|| Error::Manifest {
            line: line_no,
            msg: format!("unknown dataset {:?}", wire.dataset),
        })?;
        if spec.kind != wire.kind {
            return Err(Error::Manifest {
                line: line_no,
                msg: format!(
                    "record kind {:?} does not match dataset kind {:?}",
                    wire.kind, spec.kind
                ),
            });
        }
        let declared: BTreeSet<usize> = spec.verb_class_ids.iter().copied().collect();
        let check_verbs = |ids: &[usize]| -> Result<()> {
            for id in ids {
                if !declared.contains(id) {
                    return Err(Error::Manifest {
                        line: line_no,
                        msg: format!("verb id {id} outside dataset {:?} declared set", spec.name),
                    });
                }
            }
            Ok(())
        };
        match wire.kind {
            DatasetKind::Detection => {
                let img = wire.image.as_ref().ok_or_else(|| Error::Manifest {
                    line: line_no,
                    msg: "detection record needs an image".into(),
                })?;
                let boxes = wire.boxes.unwrap_or_default();
                for b in &boxes {
                    validate_box(b, line_no)?;
                }
                records.push(Record::Detection(ImageRecord {
                    id: wire.id,
                    dataset: wire.dataset,
                    image: image_from_wire(img, line_no, base)?,
                    annotation: ImageAnnotation::Boxes(boxes),
                }));
            }
            DatasetKind::ActionImage => {
                let img = wire.image.as_ref().ok_or_else(|| Error::Manifest {
                    line: line_no,
                    msg: "action record needs an image".into(),
                })?;
                let verbs = wire.verb_ids.unwrap_or_default();
                check_verbs(&verbs)?;
                records.push(Record::ActionImage(ImageRecord {
                    id: wire.id,
                    dataset: wire.dataset,
                    image: image_from_wire(img, line_no, base)?,
                    annotation: ImageAnnotation::Verbs(verbs),
                }));
            }
            DatasetKind::ActionVideo => {
                let frames = wire.frames.as_ref().ok_or_else(|| Error::Manifest {
                    line: line_no,
                    msg: "video record needs frames".into(),
                })?;
                if frames.is_empty() {
                    return Err(Error::Manifest { line: line_no, msg: "video has no frames".into() });
                }
                let verbs = wire.verb_ids.unwrap_or_default();
                check_verbs(&verbs)?;
                let mut decoded = Vec::with_capacity(frames.len());
                for f in frames {
                    decoded.push(image_from_wire(f, line_no, base)?);
                }
                records.push(Record::ActionVideo(VideoRecord {
                    id: wire.id,
                    dataset: wire.dataset,
                    frames: decoded,
                    verb_ids: verbs,
                }));
            }
            DatasetKind::Caption => {
                let img = wire.image.as_ref().ok_or_else(|| Error::Manifest {
                    line: line_no,
                    msg: "caption record needs an image".into(),
                })?;
                let caption = wire.caption.ok_or_else(|| Error::Manifest {
                    line: line_no,
                    msg: "caption record needs a caption".into(),
                })?;
                let triplets = parse_caption(&caption, &wire.id);
                if triplets.is_empty() {
                    // Images from which no triplet can be extracted are
                    // filtered, with the reason counted.
                    filtered_captions += 1;
                    continue;
                }
                records.push(Record::Caption(CaptionRecord {
                    id: wire.id,
                    dataset: wire.dataset,
                    image: image_from_wire(img, line_no, base)?,
                    caption,
                    triplets,
                    triplet_ids: Vec::new(),
                }));
            }
        }
    }
    Ok(IngestOutput { datasets: header.datasets, records, filtered_captions })
}

/// Serialize datasets and records as a normalized manifest (pixels inlined).
pub fn write_manifest(
    out: &mut impl Write,
    datasets: &[DatasetSpec],
    records: &[Record],
) -> Result<()> {
    let header = WireHeader {
        schema_version: MANIFEST_SCHEMA_VERSION,
        datasets: datasets.to_vec(),
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for r in records {
        let wire = match r {
            Record::Detection(rec) => WireRecord {
                id: rec.id.clone(),
                dataset: rec.dataset.clone(),
                kind: DatasetKind::Detection,
                image: Some(image_to_wire(&rec.image)),
                frames: None,
                boxes: match &rec.annotation {
                    ImageAnnotation::Boxes(b) => Some(b.clone()),
                    _ => Some(vec![]),
                },
                verb_ids: None,
                caption: None,
            },
            Record::ActionImage(rec) => WireRecord {
                id: rec.id.clone(),
                dataset: rec.dataset.clone(),
                kind: DatasetKind::ActionImage,
                image: Some(image_to_wire(&rec.image)),
                frames: None,
                boxes: None,
                verb_ids: match &rec.annotation {
                    ImageAnnotation::Verbs(v) => Some(v.clone()),
                    _ => Some(vec![]),
                },
                caption: None,
            },
            Record::ActionVideo(rec) => WireRecord {
                id: rec.id.clone(),
                dataset: rec.dataset.clone(),
                kind: DatasetKind::ActionVideo,
                image: None,
                frames: Some(rec.frames.iter().map(image_to_wire).collect()),
                boxes: None,
                verb_ids: Some(rec.verb_ids.clone()),
                caption: None,
            },
            Record::Caption(rec) => WireRecord {
                id: rec.id.clone(),
                dataset: rec.dataset.clone(),
                kind: DatasetKind::Caption,
                image: Some(image_to_wire(&rec.image)),
                frames: None,
                boxes: None,
                verb_ids: None,
                caption: Some(rec.caption.clone()),
            },
        };
        serde_json::to_writer(&mut *out, &wire)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Batch composition
// ---------------------------------------------------------------------------

/// Declared per-batch mix as `detection : action : caption` ratio weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub detection: u32,
    pub action: u32,
    pub caption: u32,
}

impl BatchPlan {
    pub fn weight(&self, group: PlanGroup) -> u32 {
        match group {
            PlanGroup::Detection => self.detection,
            PlanGroup::Action => self.action,
            PlanGroup::Caption => self.caption,
        }
    }

    /// Per-batch counts for batch `index`: exact when the ratio divides the
    /// batch size, largest-remainder amortized otherwise.
    pub fn counts_for(&self, index: u64) -> [usize; 3] {
        let groups = [PlanGroup::Detection, PlanGroup::Action, PlanGroup::Caption];
        let total: u128 = groups.iter().map(|g| self.weight(*g) as u128).sum();
        assert!(total > 0, "batch plan has no active groups");
        let b = self.batch_size as u128;
        let idx = index as u128;
        let cum = |g: PlanGroup, upto: u128| (upto * b * self.weight(g) as u128) / total;
        let mut counts = [0usize; 3];
        let mut rema = [0u128; 3];
        let mut sum = 0usize;
        for (i, g) in groups.iter().enumerate() {
            counts[i] = (cum(*g, idx + 1) - cum(*g, idx)) as usize;
            rema[i] = ((idx + 1) * b * self.weight(*g) as u128) % total;
            sum += counts[i];
        }
        // Largest-remainder fix keeps every batch at exactly batch_size;
        // ties rotate with the batch index so no group is systematically
        // favored.
        let mut order: Vec<usize> = (0..3).filter(|&i| self.weight(groups[i]) > 0).collect();
        let tie = |i: usize| (i as u128 + idx) % 3;
        order.sort_by(|&a, &bb| rema[bb].cmp(&rema[a]).then(tie(a).cmp(&tie(bb))));
        let mut k = 0;
        while sum < self.batch_size {
            counts[order[k % order.len()]] += 1;
            sum += 1;
            k += 1;
        }
        let mut k = 0;
        while sum > self.batch_size {
            let i = order[order.len() - 1 - (k % order.len())];
            if counts[i] > 0 {
                counts[i] -= 1;
                sum -= 1;
            }
            k += 1;
        }
        counts
    }
}

struct DatasetPool {
    weight: f64,
    records: Vec<Arc<Record>>,
    order: Vec<usize>,
    cursor: usize,
}

/// Infinite seeded stream of mixed batches honoring a [`BatchPlan`].
pub struct BatchStream {
    plan: BatchPlan,
    groups: BTreeMap<PlanGroup, Vec<DatasetPool>>,
    rng: ChaCha8Rng,
    index: u64,
}

impl BatchStream {
    pub fn new(
        specs: &[DatasetSpec],
        records: &[Record],
        plan: BatchPlan,
        seed: u64,
    ) -> Result<Self> {
        let mut groups: BTreeMap<PlanGroup, Vec<DatasetPool>> = BTreeMap::new();
        for spec in specs {
            let pool: Vec<Arc<Record>> = records
                .iter()
                .filter(|r| r.dataset() == spec.name)
                .map(|r| Arc::new(r.clone()))
                .collect();
            if pool.is_empty() {
                continue;
            }
            groups.entry(spec.kind.group()).or_default().push(DatasetPool {
                weight: spec.sampling_weight,
                order: (0..pool.len()).collect(),
                records: pool,
                cursor: usize::MAX, // forces a shuffle on first draw
            });
        }
        let stream = Self { plan: plan.clone(), groups, rng: ChaCha8Rng::seed_from_u64(seed), index: 0 };
        stream.check_plan(&plan)?;
        Ok(stream)
    }

    fn check_plan(&self, plan: &BatchPlan) -> Result<()> {
        for (group, w) in [
            (PlanGroup::Detection, plan.detection),
            (PlanGroup::Action, plan.action),
            (PlanGroup::Caption, plan.caption),
        ] {
            if w > 0 && self.groups.get(&group).map_or(true, |g| g.is_empty()) {
                return Err(Error::Config(format!(
                    "batch plan requires {group:?} samples but no dataset provides them"
                )));
            }
        }
        Ok(())
    }

    /// Replace the plan (used when action data starts mid-run). Resets the
    /// batch index so ratio amortization restarts cleanly.
    pub fn set_plan(&mut self, plan: BatchPlan) -> Result<()> {
        self.check_plan(&plan)?;
        self.plan = plan;
        self.index = 0;
        Ok(())
    }

    fn draw(&mut self, group: PlanGroup) -> Arc<Record> {
        let pools = self.groups.get_mut(&group).expect("validated nonempty");
        let pool_idx = if pools.len() == 1 {
            0
        } else {
            let total: f64 = pools.iter().map(|p| p.weight).sum();
            let mut target = self.rng.random_range(0.0..total);
            let mut chosen = pools.len() - 1;
            for (i, p) in pools.iter().enumerate() {
                if target < p.weight {
                    chosen = i;
                    break;
                }
                target -= p.weight;
            }
            chosen
        };
        let pool = &mut pools[pool_idx];
        if pool.cursor >= pool.order.len() {
            pool.order.shuffle(&mut self.rng);
            pool.cursor = 0;
        }
        let rec = pool.records[pool.order[pool.cursor]].clone();
        pool.cursor += 1;
        rec
    }

    pub fn next_batch(&mut self) -> Vec<Arc<Record>> {
        let counts = self.plan.counts_for(self.index);
        self.index += 1;
        let mut batch = Vec::with_capacity(self.plan.batch_size);
        for (i, group) in [PlanGroup::Detection, PlanGroup::Action, PlanGroup::Caption]
            .iter()
            .enumerate()
        {
            for _ in 0..counts[i] {
                batch.push(self.draw(*group));
            }
        }
        batch
    }
}

// ---------------------------------------------------------------------------
// Denoising queries
// ---------------------------------------------------------------------------

/// Auxiliary denoising query group built from noised ground-truth boxes.
pub struct DenoisedQueryGroup {
    pub noised_boxes: Array2<f64>,
    /// Class labels after flipping; embedded as the query content.
    pub noisy_labels: Vec<usize>,
    pub true_labels: Vec<usize>,
    /// `[n_dn x embed_dim]` coordinate encodings (two-layer ReLU FFN).
    pub encoded_queries: Var,
    pub noise_scale: f64,
    pub label_flip_prob: f64,
}

/// Jitter ground-truth boxes, clamp them back into the unit square, and
/// encode the coordinates with the model's denoising FFN.
pub fn build_dn_queries(
    model: &BoundModel,
    gt: &[BoxAnn],
    noise_scale: f64,
    label_flip_prob: f64,
    num_object_classes: usize,
    rng: &mut ChaCha8Rng,
) -> DenoisedQueryGroup {
    assert!(!gt.is_empty(), "denoising queries need at least one ground-truth box");
    let n = gt.len();
    let mut noised = Array2::zeros((n, 4));
    let mut noisy_labels = Vec::with_capacity(n);
    let mut true_labels = Vec::with_capacity(n);
    for (i, b) in gt.iter().enumerate() {
        let [cx, cy, w, h] = b.cxcywh;
        let (ncx, ncy, nw, nh) = if noise_scale == 0.0 {
            (cx, cy, w, h)
        } else {
            (
                cx + rng.random_range(-1.0..1.0) * noise_scale * w / 2.0,
                cy + rng.random_range(-1.0..1.0) * noise_scale * h / 2.0,
                w * (1.0 + rng.random_range(-1.0..1.0) * noise_scale),
                h * (1.0 + rng.random_range(-1.0..1.0) * noise_scale),
            )
        };
        noised[[i, 0]] = ncx.clamp(0.0, 1.0);
        noised[[i, 1]] = ncy.clamp(0.0, 1.0);
        noised[[i, 2]] = nw.clamp(1e-3, 1.0);
        noised[[i, 3]] = nh.clamp(1e-3, 1.0);
        true_labels.push(b.class);
        let flip = label_flip_prob > 0.0 && rng.random_range(0.0..1.0) < label_flip_prob;
        if flip && num_object_classes > 1 {
            let mut other = rng.random_range(0..num_object_classes - 1);
            if other >= b.class {
                other += 1;
            }
            noisy_labels.push(other);
        } else {
            noisy_labels.push(b.class);
        }
    }
    let t = model.tape;
    let coords = t.constant(noised.clone());
    let h = t.relu(t.add_row(t.matmul(coords, model.var("dn.coord.w1")), model.var("dn.coord.b1")));
    let encoded = t.add_row(t.matmul(h, model.var("dn.coord.w2")), model.var("dn.coord.b2"));
    DenoisedQueryGroup {
        noised_boxes: noised,
        noisy_labels,
        true_labels,
        encoded_queries: encoded,
        noise_scale,
        label_flip_prob,
    }
}

/// Self-attention mask isolating denoising queries from learnable queries in
/// both directions (`-1e9` on blocked pairs).
pub fn dn_isolation_mask(n_learnable: usize, n_dn: usize) -> Array2<f64> {
    let n = n_learnable + n_dn;
    let mut mask = Array2::zeros((n, n));
    for q in 0..n {
        for k in 0..n {
            let q_is_dn = q >= n_learnable;
            let k_is_dn = k >= n_learnable;
            if q_is_dn != k_is_dn {
                mask[[q, k]] = -1e9;
            }
        }
    }
    mask
}
