//! Domain types shared by every stage, plus the manifest CSV and the
//! detection / ground-truth JSON formats.
//!
//! All loaders validate strictly: a record that violates a type invariant
//! is rejected with an error naming the offending row and field. Nothing is
//! clamped or repaired on the way in.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixels with a top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite())
        {
            return Err(Error::invalid("box coordinates must be finite"));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid(format!(
                "box width and height must be positive (w={}, h={})",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Mean of the two side lengths.
    pub fn mean_side(&self) -> f64 {
        (self.w + self.h) / 2.0
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.right() <= width as f64
            && self.bottom() <= height as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    #[serde(rename = "score")]
    pub confidence: f64,
    #[serde(default = "default_label")]
    pub label: String,
}

impl Detection {
    pub fn new(bbox: BoundingBox, confidence: f64) -> Result<Self> {
        let d = Detection {
            bbox,
            confidence,
            label: default_label(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::invalid(format!(
                "detection score {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    #[serde(default = "default_label")]
    pub label: String,
}

impl GroundTruthBox {
    pub fn new(bbox: BoundingBox) -> Self {
        GroundTruthBox {
            bbox,
            label: default_label(),
        }
    }
}

fn default_label() -> String {
    "pest".to_string()
}

macro_rules! text_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::invalid(format!(
                        "unknown {} `{}` (expected one of: {})",
                        stringify!($name),
                        other,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

text_enum!(
    /// Capture phase relative to the stirring action.
    Phase { Static => "static", Stirring => "stirring", PostStir => "post_stir" }
);

text_enum!(StirSpeed { None => "none", Low => "low", Medium => "medium", High => "high" });

text_enum!(DensityClass { Low => "low", High => "high" });

text_enum!(
    /// Timeline marker: pre-stir, stir start, stir stop, tool removal, calm water.
    TIndex { T0 => "T0", T1 => "T1", T2 => "T2", T3 => "T3", T4 => "T4" }
);

/// Acquisition conditions of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetadata {
    pub group_id: String,
    pub phase: Phase,
    pub stir_speed: StirSpeed,
    pub soil: bool,
    pub density_class: DensityClass,
    pub pest_count: u32,
    pub t_index: TIndex,
    pub frame_offset_s: f64,
}

impl ConditionMetadata {
    pub fn validate(&self) -> Result<()> {
        if self.phase == Phase::Static && self.stir_speed != StirSpeed::None {
            return Err(Error::invalid(format!(
                "phase `static` requires stir_speed `none`, got `{}`",
                self.stir_speed
            )));
        }
        if !self.frame_offset_s.is_finite() || self.frame_offset_s < 0.0 {
            return Err(Error::invalid(format!(
                "frame_offset_s must be finite and nonnegative, got {}",
                self.frame_offset_s
            )));
        }
        Ok(())
    }
}

/// The six raw counting-confidence factors of one image.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FactorVector {
    pub score_mdcbb: f64,
    pub score_pn: f64,
    pub score_agm: f64,
    pub score_iq: f64,
    pub score_ic: f64,
    pub score_pdu: f64,
}

/// Factor identifiers, listed in the order the ablation report uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Factor {
    Pdu,
    Mdcbb,
    Agm,
    Ic,
    Iq,
    Pn,
}

impl Factor {
    /// Ablation-table order.
    pub const ALL: [Factor; 6] = [
        Factor::Pdu,
        Factor::Mdcbb,
        Factor::Agm,
        Factor::Ic,
        Factor::Iq,
        Factor::Pn,
    ];

    /// Column order used in score files.
    pub const COLUMN_ORDER: [Factor; 6] = [
        Factor::Mdcbb,
        Factor::Pn,
        Factor::Agm,
        Factor::Iq,
        Factor::Ic,
        Factor::Pdu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Pdu => "PDU",
            Factor::Mdcbb => "MDCBB",
            Factor::Agm => "AGM",
            Factor::Ic => "IC",
            Factor::Iq => "IQ",
            Factor::Pn => "PN",
        }
    }

    pub fn column(self) -> &'static str {
        match self {
            Factor::Pdu => "score_pdu",
            Factor::Mdcbb => "score_mdcbb",
            Factor::Agm => "score_agm",
            Factor::Ic => "score_ic",
            Factor::Iq => "score_iq",
            Factor::Pn => "score_pn",
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Factor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        let key = upper.strip_prefix("SCORE_").unwrap_or(&upper);
        match key {
            "PDU" => Ok(Factor::Pdu),
            "MDCBB" => Ok(Factor::Mdcbb),
            "AGM" => Ok(Factor::Agm),
            "IC" => Ok(Factor::Ic),
            "IQ" | "IQA" => Ok(Factor::Iq),
            "PN" => Ok(Factor::Pn),
            _ => Err(Error::invalid(format!("unknown factor `{s}`"))),
        }
    }
}

impl FactorVector {
    pub fn get(&self, factor: Factor) -> f64 {
        match factor {
            Factor::Pdu => self.score_pdu,
            Factor::Mdcbb => self.score_mdcbb,
            Factor::Agm => self.score_agm,
            Factor::Ic => self.score_ic,
            Factor::Iq => self.score_iq,
            Factor::Pn => self.score_pn,
        }
    }

    pub fn set(&mut self, factor: Factor, value: f64) {
        match factor {
            Factor::Pdu => self.score_pdu = value,
            Factor::Mdcbb => self.score_mdcbb = value,
            Factor::Agm => self.score_agm = value,
            Factor::Ic => self.score_ic = value,
            Factor::Iq => self.score_iq = value,
            Factor::Pn => self.score_pn = value,
        }
    }

    pub fn is_finite(&self) -> bool {
        Factor::ALL.iter().all(|&f| self.get(f).is_finite())
    }
}

/// One manifest row joined with its detections and (optionally) ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    /// Path exactly as written in the manifest; doubles as the image id.
    pub image_path: String,
    /// `image_path` resolved against the manifest directory.
    pub resolved_path: PathBuf,
    pub detections: Vec<Detection>,
    pub ground_truth: Option<Vec<GroundTruthBox>>,
    pub metadata: ConditionMetadata,
    pub tool_mask_path: Option<String>,
    pub resolved_mask_path: Option<PathBuf>,
}

pub const MANIFEST_HEADER: [&str; 10] = [
    "image_path",
    "group_id",
    "phase",
    "stir_speed",
    "soil",
    "density_class",
    "pest_count",
    "t_index",
    "frame_offset_s",
    "tool_mask_path",
];

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a manifest CSV. Relative paths resolve against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();

    let mut index = BTreeMap::new();
    for name in MANIFEST_HEADER {
        let pos = headers.iter().position(|h| h == name).ok_or_else(|| Error::Record {
            path: path.to_path_buf(),
            row: 1,
            field: name.to_string(),
            message: "missing column".into(),
        })?;
        index.insert(name, pos);
    }

    let mut records = Vec::new();
    for result in reader.records() {
        let rec = result.map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let fail = |field: &str, message: String| Error::Record {
            path: path.to_path_buf(),
            row,
            field: field.to_string(),
            message,
        };
        let cell = |field: &'static str| rec.get(index[field]).unwrap_or("");
        fn parse<T: FromStr>(s: &str) -> std::result::Result<T, String>
        where
            T::Err: fmt::Display,
        {
            s.parse::<T>().map_err(|e| e.to_string())
        }

        let image_path = cell("image_path").to_string();
        if image_path.is_empty() {
            return Err(fail("image_path", "empty path".into()));
        }
        let resolved_path = resolve(&base, &image_path);
        if !resolved_path.is_file() {
            return Err(fail(
                "image_path",
                format!("file not found: {}", resolved_path.display()),
            ));
        }

        let soil = match cell("soil") {
            "true" => true,
            "false" => false,
            other => return Err(fail("soil", format!("expected true|false, got `{other}`"))),
        };
        let metadata = ConditionMetadata {
            group_id: cell("group_id").to_string(),
            phase: parse(cell("phase")).map_err(|m| fail("phase", m))?,
            stir_speed: parse(cell("stir_speed")).map_err(|m| fail("stir_speed", m))?,
            soil,
            density_class: parse(cell("density_class")).map_err(|m| fail("density_class", m))?,
            pest_count: parse(cell("pest_count")).map_err(|m| fail("pest_count", m))?,
            t_index: parse(cell("t_index")).map_err(|m| fail("t_index", m))?,
            frame_offset_s: parse(cell("frame_offset_s"))
                .map_err(|m| fail("frame_offset_s", m))?,
        };
        if metadata.group_id.is_empty() {
            return Err(fail("group_id", "empty group id".into()));
        }
        metadata.validate().map_err(|e| {
            let field = if e.to_string().contains("frame_offset_s") {
                "frame_offset_s"
            } else {
                "stir_speed"
            };
            fail(field, e.to_string())
        })?;

        let mask = cell("tool_mask_path");
        let (tool_mask_path, resolved_mask_path) = if mask.is_empty() {
            (None, None)
        } else {
            let resolved = resolve(&base, mask);
            if !resolved.is_file() {
                return Err(fail(
                    "tool_mask_path",
                    format!("file not found: {}", resolved.display()),
                ));
            }
            (Some(mask.to_string()), Some(resolved))
        };

        records.push(ImageRecord {
            image_path,
            resolved_path,
            detections: Vec::new(),
            ground_truth: None,
            metadata,
            tool_mask_path,
            resolved_mask_path,
        });
    }
    Ok(records)
}

pub fn save_manifest(path: impl AsRef<Path>, records: &[ImageRecord]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for r in records {
        let m = &r.metadata;
        w.write_record([
            r.image_path.clone(),
            m.group_id.clone(),
            m.phase.to_string(),
            m.stir_speed.to_string(),
            m.soil.to_string(),
            m.density_class.to_string(),
            m.pest_count.to_string(),
            m.t_index.to_string(),
            m.frame_offset_s.to_string(),
            r.tool_mask_path.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    score: Option<f64>,
    label: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    image: String,
    boxes: Vec<RawBox>,
}

#[derive(Serialize)]
struct OutEntry<'a, T> {
    image: &'a str,
    boxes: &'a [T],
}

fn read_entries(path: &Path) -> Result<Vec<RawEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn box_error(path: &Path, entry: usize, b: usize, field: &str, message: String) -> Error {
    Error::Record {
        path: path.to_path_buf(),
        row: entry + 1,
        field: format!("boxes[{b}].{field}"),
        message,
    }
}

/// Detections keyed by image id. Scores outside `[0, 1]` are rejected.
pub fn load_detections(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<Detection>>> {
    let path = path.as_ref();
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (i, entry) in read_entries(path)?.into_iter().enumerate() {
        let list = out.entry(entry.image).or_default();
        for (j, b) in entry.boxes.into_iter().enumerate() {
            let score = b
                .score
                .ok_or_else(|| box_error(path, i, j, "score", "missing score".into()))?;
            let bbox = BoundingBox::new(b.x, b.y, b.w, b.h)
                .map_err(|e| box_error(path, i, j, "w/h", e.to_string()))?;
            let det = Detection {
                bbox,
                confidence: score,
                label: b.label.unwrap_or_else(default_label),
            };
            det.validate()
                .map_err(|e| box_error(path, i, j, "score", e.to_string()))?;
            list.push(det);
        }
    }
    Ok(out)
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<GroundTruthBox>>> {
    let path = path.as_ref();
    let mut out: BTreeMap<String, Vec<GroundTruthBox>> = BTreeMap::new();
    for (i, entry) in read_entries(path)?.into_iter().enumerate() {
        let list = out.entry(entry.image).or_default();
        for (j, b) in entry.boxes.into_iter().enumerate() {
            if b.score.is_some() {
                return Err(box_error(
                    path,
                    i,
                    j,
                    "score",
                    "ground truth boxes carry no score".into(),
                ));
            }
            let bbox = BoundingBox::new(b.x, b.y, b.w, b.h)
                .map_err(|e| box_error(path, i, j, "w/h", e.to_string()))?;
            list.push(GroundTruthBox {
                bbox,
                label: b.label.unwrap_or_else(default_label),
            });
        }
    }
    Ok(out)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_detections<'a, I>(path: impl AsRef<Path>, entries: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a [Detection])>,
{
    let out: Vec<_> = entries
        .into_iter()
        .map(|(image, boxes)| OutEntry { image, boxes })
        .collect();
    write_json(path.as_ref(), &out)
}

pub fn save_ground_truth<'a, I>(path: impl AsRef<Path>, entries: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a [GroundTruthBox])>,
{
    let out: Vec<_> = entries
        .into_iter()
        .map(|(image, boxes)| OutEntry { image, boxes })
        .collect();
    write_json(path.as_ref(), &out)
}

/// Writes any serializable report as pretty JSON.
pub fn save_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    write_json(path.as_ref(), value)
}

/// Attaches detections and ground truth to manifest records.
///
/// Images absent from the detections file get an empty detection list;
/// ground truth is attached only when a map is supplied and contains the image.
pub fn attach(
    records: &mut [ImageRecord],
    detections: &BTreeMap<String, Vec<Detection>>,
    ground_truth: Option<&BTreeMap<String, Vec<GroundTruthBox>>>,
) {
    for r in records.iter_mut() {
        r.detections = detections.get(&r.image_path).cloned().unwrap_or_default();
        r.ground_truth = ground_truth.and_then(|gt| gt.get(&r.image_path).cloned());
    }
}
