//! Dataset plumbing: manifests, normalized object annotations, class
//! selection, the crop/black-out/resize construction pipeline, and the
//! synthetic shape generator used for desk-scale experiments.
//!
//! Manifest format (UTF-8):
//!
//! ```text
//! MBMANIFEST 1
//! <comma-separated label names>
//! <image_relpath>,<mask_relpath or empty>,<label_int>
//! ...
//! ```
//!
//! Annotation format, one line per object:
//!
//! ```text
//! MBANNOT 1
//! <comma-separated label names>
//! <image_relpath>,<mask_relpath>,<label_int>,<x>,<y>,<w>,<h>
//! ...
//! ```
//!
//! Relative paths resolve against the directory the file was read from
//! (stored in `root`). Names and paths may not contain commas or newlines.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::transforms::{blackout_regions, crop_image, crop_mask, resize_nn, resize_nn_mask, square_crop_rect, BBox};

pub const OUTPUT_SIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub image: String,
    pub mask: Option<String>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory relative paths resolve against; not serialized.
    pub root: PathBuf,
    pub label_names: Vec<String>,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn image_path(&self, record: &Record) -> PathBuf {
        self.root.join(&record.image)
    }

    pub fn mask_path(&self, record: &Record) -> Option<PathBuf> {
        record.mask.as_ref().map(|m| self.root.join(m))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One annotated object: its image, its own mask, its class, its box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub image: String,
    pub mask: String,
    pub label: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationSet {
    pub root: PathBuf,
    pub label_names: Vec<String>,
    pub objects: Vec<Annotation>,
}

fn check_field(what: &str, value: &str) -> Result<()> {
    if value.is_empty() {
        return Err(Error::invalid_param("manifest", format!("empty {what}")));
    }
    if value.contains(',') || value.contains('\n') || value.contains('\r') {
        return Err(Error::invalid_param(
            "manifest",
            format!("{what} `{value}` contains a comma or newline"),
        ));
    }
    Ok(())
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = String::from("MBMANIFEST 1\n");
    for name in &manifest.label_names {
        check_field("label name", name)?;
    }
    out.push_str(&manifest.label_names.join(","));
    out.push('\n');
    for record in &manifest.records {
        check_field("image path", &record.image)?;
        if let Some(mask) = &record.mask {
            check_field("mask path", mask)?;
        }
        if record.label >= manifest.label_names.len() {
            return Err(Error::LabelOutOfRange {
                label: record.label,
                classes: manifest.label_names.len(),
            });
        }
        out.push_str(&record.image);
        out.push(',');
        if let Some(mask) = &record.mask {
            out.push_str(mask);
        }
        out.push(',');
        out.push_str(&record.label.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();

    let (_, magic) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    if magic != "MBMANIFEST 1" {
        return Err(Error::parse(path, 1, format!("bad magic `{magic}`, expected `MBMANIFEST 1`")));
    }
    let (_, names_line) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 2, "missing label-name line"))?;
    let label_names = parse_names(names_line, path)?;

    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            return Err(Error::parse(path, line_no, "empty record line"));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected `image,mask,label`, got {} fields", fields.len()),
            ));
        }
        if fields[0].is_empty() {
            return Err(Error::parse(path, line_no, "empty image path"));
        }
        let label: usize = fields[2]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad label `{}`", fields[2])))?;
        if label >= label_names.len() {
            return Err(Error::parse(
                path,
                line_no,
                format!("label {label} out of range for {} classes", label_names.len()),
            ));
        }
        records.push(Record {
            image: fields[0].to_string(),
            mask: (!fields[1].is_empty()).then(|| fields[1].to_string()),
            label,
        });
    }
    Ok(DatasetManifest {
        root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        label_names,
        records,
    })
}

fn parse_names(line: &str, path: &Path) -> Result<Vec<String>> {
    if line.is_empty() {
        return Ok(Vec::new());
    }
    let names: Vec<String> = line.split(',').map(str::to_string).collect();
    if names.iter().any(String::is_empty) {
        return Err(Error::parse(path, 2, "empty label name"));
    }
    Ok(names)
}

pub fn write_annotations(set: &AnnotationSet, path: &Path) -> Result<()> {
    let mut out = String::from("MBANNOT 1\n");
    for name in &set.label_names {
        check_field("label name", name)?;
    }
    out.push_str(&set.label_names.join(","));
    out.push('\n');
    for obj in &set.objects {
        check_field("image path", &obj.image)?;
        check_field("mask path", &obj.mask)?;
        if obj.label >= set.label_names.len() {
            return Err(Error::LabelOutOfRange { label: obj.label, classes: set.label_names.len() });
        }
        let BBox { x, y, w, h } = obj.bbox;
        out.push_str(&format!("{},{},{},{x},{y},{w},{h}\n", obj.image, obj.mask, obj.label));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();

    let (_, magic) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    if magic != "MBANNOT 1" {
        return Err(Error::parse(path, 1, format!("bad magic `{magic}`, expected `MBANNOT 1`")));
    }
    let (_, names_line) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 2, "missing label-name line"))?;
    let label_names = parse_names(names_line, path)?;

    let mut objects = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected `image,mask,label,x,y,w,h`, got {} fields", fields.len()),
            ));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::parse(path, line_no, "empty image or mask path"));
        }
        let label: usize = fields[2]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad label `{}`", fields[2])))?;
        if label >= label_names.len() {
            return Err(Error::parse(
                path,
                line_no,
                format!("label {label} out of range for {} classes", label_names.len()),
            ));
        }
        let int = |s: &str| -> Result<i64> {
            s.parse()
                .map_err(|_| Error::parse(path, line_no, format!("bad integer `{s}`")))
        };
        let bbox = BBox { x: int(fields[3])?, y: int(fields[4])?, w: int(fields[5])?, h: int(fields[6])? };
        if bbox.w < 1 || bbox.h < 1 {
            return Err(Error::parse(path, line_no, format!("degenerate box {}x{}", bbox.w, bbox.h)));
        }
        objects.push(Annotation {
            image: fields[0].to_string(),
            mask: fields[1].to_string(),
            label,
            bbox,
        });
    }
    Ok(AnnotationSet {
        root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        label_names,
        objects,
    })
}

/// Top-`k` labels by count, descending, excluding `exclude`; ties break
/// toward the lexicographically smaller name.
pub fn select_classes(
    freq: &BTreeMap<String, u64>,
    k: usize,
    exclude: &BTreeSet<String>,
) -> Result<Vec<String>> {
    let mut pool: Vec<(&String, &u64)> = freq.iter().filter(|(name, _)| !exclude.contains(*name)).collect();
    if k > pool.len() {
        return Err(Error::invalid_param(
            "k",
            format!("{k} classes requested but only {} are available", pool.len()),
        ));
    }
    // BTreeMap iteration is already name-ascending, so a stable sort by
    // descending count leaves ties lexicographic.
    pool.sort_by(|a, b| b.1.cmp(a.1));
    Ok(pool.into_iter().take(k).map(|(name, _)| name.clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BuildReport {
    pub emitted: usize,
    /// Objects dropped for unreadable/unusable inputs (I/O or parse failure,
    /// mask/image dimension mismatch, box outside the image, or an empty
    /// mask after resize).
    pub skipped: usize,
}

/// Builds a 32x32 classification dataset from object annotations: for each
/// object of a selected class, black out every other annotated object in the
/// same image, square-crop around the object, resize image and mask, and
/// write the pair.
pub fn build_dataset(
    annots: &AnnotationSet,
    k: usize,
    exclude: &BTreeSet<String>,
    out_dir: &Path,
) -> Result<(DatasetManifest, BuildReport)> {
    for obj in &annots.objects {
        if obj.label >= annots.label_names.len() {
            return Err(Error::LabelOutOfRange { label: obj.label, classes: annots.label_names.len() });
        }
    }
    let mut freq: BTreeMap<String, u64> = BTreeMap::new();
    for obj in &annots.objects {
        *freq.entry(annots.label_names[obj.label].clone()).or_insert(0) += 1;
    }
    let selected = select_classes(&freq, k, exclude)?;
    let class_ids: BTreeMap<&str, usize> =
        selected.iter().enumerate().map(|(i, name)| (name.as_str(), i)).collect();

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut report = BuildReport::default();
    let mut records = Vec::new();
    for (i, obj) in annots.objects.iter().enumerate() {
        let Some(&label) = class_ids.get(annots.label_names[obj.label].as_str()) else {
            continue; // class not selected: filtered, not skipped
        };
        let prepared = prepare_object(annots, i, obj);
        let (img, mask) = match prepared {
            Ok(pair) => pair,
            Err(_) => {
                report.skipped += 1;
                continue;
            }
        };
        let idx = records.len();
        let image_name = format!("img_{idx:06}.ppm");
        let mask_name = format!("msk_{idx:06}.pgm");
        img.write_netpbm(&out_dir.join(&image_name))?;
        mask.write_pgm(&out_dir.join(&mask_name))?;
        records.push(Record { image: image_name, mask: Some(mask_name), label });
        report.emitted += 1;
    }
    if records.is_empty() {
        return Err(Error::Invalid(format!(
            "no dataset records emitted ({} objects skipped)",
            report.skipped
        )));
    }
    Ok((
        DatasetManifest { root: out_dir.to_path_buf(), label_names: selected, records },
        report,
    ))
}

/// Everything per object that can fail on bad inputs, so the caller can
/// count one skip per failure.
fn prepare_object(annots: &AnnotationSet, index: usize, obj: &Annotation) -> Result<(Image, Mask)> {
    let img = Image::read_netpbm(&annots.root.join(&obj.image))?;
    let mask = Mask::read_pgm(&annots.root.join(&obj.mask))?;
    if mask.height() != img.height() || mask.width() != img.width() {
        return Err(Error::shape(
            "annotation mask",
            format!("{}x{}", img.height(), img.width()),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    let others: Vec<BBox> = annots
        .objects
        .iter()
        .enumerate()
        .filter(|(j, other)| *j != index && other.image == obj.image)
        .map(|(_, other)| other.bbox)
        .collect();
    let blacked = blackout_regions(&img, &others);
    let rect = square_crop_rect(&obj.bbox, img.height(), img.width())?;
    let img = resize_nn(&crop_image(&blacked, &rect)?, OUTPUT_SIDE, OUTPUT_SIDE)?;
    let mask = resize_nn_mask(&crop_mask(&mask, &rect)?, OUTPUT_SIDE, OUTPUT_SIDE)?;
    if mask.count_ones() == 0 {
        return Err(Error::Invalid("object mask empty after crop/resize".into()));
    }
    Ok((img, mask))
}

pub const SHAPE_NAMES: [&str; 4] = ["circle", "square", "triangle", "diamond"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub side: usize,
    pub classes: usize,
    /// Background clutter amplitude in [0,1]: background pixels are
    /// channel-wise uniform in [0, amplitude).
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n_samples: 1000, side: 32, classes: 2, amplitude: 0.3, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::invalid_param("n_samples", "0"));
        }
        if self.side < 8 {
            return Err(Error::invalid_param("side", format!("{} (need >= 8)", self.side)));
        }
        if !(2..=4).contains(&self.classes) {
            return Err(Error::invalid_param(
                "classes",
                format!("{} (supported shape classes: 2..=4)", self.classes),
            ));
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(Error::invalid_param(
                "amplitude",
                format!("{} (need 0 <= amplitude <= 1)", self.amplitude),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthStats {
    pub mean_fraction: f64,
    pub min_fraction: f64,
    pub max_fraction: f64,
}

/// Writes `n_samples` image/mask pairs: a centered, randomly sized and
/// colored shape (class = shape kind, round-robin over samples) on a
/// uniform-noise background. The mask is the exact shape support.
///
/// Per sample the generator draws, in order: one size variate, three color
/// channels (uniform in [0.55, 0.95)), then three noise values per pixel in
/// row-major order (drawn whether or not the pixel is background, so the
/// stream does not depend on the shape).
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<(DatasetManifest, SynthStats)> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let side = cfg.side;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.n_samples);
    let mut fractions = Vec::with_capacity(cfg.n_samples);

    for i in 0..cfg.n_samples {
        let label = i % cfg.classes;
        let u: f64 = rng.random();
        let color = [
            rng.random_range(0.55..0.95),
            rng.random_range(0.55..0.95),
            rng.random_range(0.55..0.95),
        ];
        let support = shape_support(label, side, u);

        let mut data = Vec::with_capacity(side * side * 3);
        for p in 0..side * side {
            let noise = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            if support[p] {
                data.extend_from_slice(&color);
            } else {
                data.extend(noise.iter().map(|n| cfg.amplitude * n));
            }
        }
        let img = Image::new(side, side, 3, data)?;
        let mask = Mask::new(side, side, support)?;
        debug_assert!(mask.count_ones() > 0, "shapes are nonempty for side >= 8");
        fractions.push(mask.count_ones() as f64 / (side * side) as f64);

        let image_name = format!("img_{i:06}.ppm");
        let mask_name = format!("msk_{i:06}.pgm");
        img.write_netpbm(&out_dir.join(&image_name))?;
        mask.write_pgm(&out_dir.join(&mask_name))?;
        records.push(Record { image: image_name, mask: Some(mask_name), label });
    }

    let stats = SynthStats {
        mean_fraction: fractions.iter().sum::<f64>() / fractions.len() as f64,
        min_fraction: fractions.iter().copied().fold(f64::INFINITY, f64::min),
        max_fraction: fractions.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    let label_names = SHAPE_NAMES[..cfg.classes].iter().map(|s| s.to_string()).collect();
    Ok((
        DatasetManifest { root: out_dir.to_path_buf(), label_names, records },
        stats,
    ))
}

/// Row-major boolean support of shape `kind` with size variate `u` in [0,1).
/// Sizes are calibrated so that at the default side (32) every fraction
/// lands in [0.1, 0.7].
fn shape_support(kind: usize, side: usize, u: f64) -> Vec<bool> {
    let s = side as f64;
    let cy = (s - 1.0) / 2.0;
    let cx = cy;
    let mut bits = Vec::with_capacity(side * side);
    for yi in 0..side {
        for xi in 0..side {
            let dy = yi as f64 - cy;
            let dx = xi as f64 - cx;
            let inside = match kind {
                0 => {
                    let r = (0.20 + 0.22 * u) * s;
                    dy * dy + dx * dx <= r * r
                }
                1 => {
                    let a = (0.18 + 0.20 * u) * s;
                    dy.abs() <= a && dx.abs() <= a
                }
                2 => {
                    let a = (0.25 + 0.21 * u) * s;
                    dy.abs() <= a && dx.abs() <= (dy + a) / 2.0
                }
                3 => {
                    let a = (0.25 + 0.21 * u) * s;
                    dy.abs() + dx.abs() <= a
                }
                _ => unreachable!("classes validated to 2..=4"),
            };
            bits.push(inside);
        }
    }
    bits
}
