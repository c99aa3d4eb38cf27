//! PNG corpora on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bisgan_core::sigdata::{preprocess, RawImage};
use bisgan_core::{Corpus, Label, SignatureImage, SignatureSample};
use image::{ColorType, GrayImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `<root>/<writer>/genuine/*.png` and `<root>/<writer>/forged/*.png`.
    #[default]
    Canonical,
    /// Flat `original_<w>_<n>.png` / `forgeries_<w>_<n>.png`, optionally one
    /// folder deep.
    Cedar,
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Decodes a PNG into 0–255 intensities, keeping color when present.
pub fn read_raw(path: &Path) -> Result<RawImage> {
    let decode = |reason: String| Error::DecodeError {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| decode(e.to_string()))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let gray = matches!(img.color(), ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16);
    let (channels, data) = if gray {
        (1, img.to_luma8().into_raw())
    } else {
        (3, img.to_rgb8().into_raw())
    };
    Ok(RawImage {
        width,
        height,
        channels,
        data: data.into_iter().map(f32::from).collect(),
    })
}

pub fn load_image(path: &Path, resolution: usize) -> Result<SignatureImage> {
    let raw = read_raw(path)?;
    preprocess(&raw, resolution).map_err(|e| Error::DecodeError {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes an 8-bit grayscale PNG, mapping `[-1, 1]` onto `[0, 255]`.
pub fn write_png(path: &Path, image: &SignatureImage) -> Result<()> {
    let side = image.side() as u32;
    let buf = GrayImage::from_raw(side, side, image.to_u8()).expect("buffer matches side");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

/// PNG files directly inside `dir`, sorted by path.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    Ok(sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_png(p)).collect())
}

fn dataset_tag(root: &Path) -> String {
    root.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| "corpus".into())
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedCorpus {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn build_corpus(root: &Path, files: Vec<(PathBuf, String, Label)>, resolution: usize) -> Result<Corpus> {
    let tag = dataset_tag(root);
    let samples = files
        .into_iter()
        .map(|(path, writer_id, label)| {
            Ok(SignatureSample {
                image: load_image(&path, resolution)?,
                writer_id,
                label,
                dataset_tag: tag.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(samples, resolution, None).map_err(|e| match e {
        bisgan_core::Error::MalformedCorpus(reason) => malformed(root, reason),
        other => other.into(),
    })
}

/// Reads the canonical writer/label layout. Samples are ordered by path.
pub fn load_directory(root: &Path, resolution: usize) -> Result<Corpus> {
    if !root.is_dir() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    let mut files = Vec::new();
    for writer_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let writer_id = writer_dir.file_name().unwrap().to_string_lossy().into_owned();
        for label in [Label::Forged, Label::Genuine] {
            let dir = writer_dir.join(label.as_str());
            let pngs = if dir.is_dir() { list_pngs(&dir)? } else { Vec::new() };
            if pngs.is_empty() {
                return Err(malformed(&writer_dir, format!("no {} images", label.as_str())));
            }
            files.extend(pngs.into_iter().map(|p| (p, writer_id.clone(), label)));
        }
    }
    if files.is_empty() {
        return Err(malformed(root, "no writer directories"));
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    build_corpus(root, files, resolution)
}

/// Parses `original_<w>_<n>.png` / `forgeries_<w>_<n>.png`.
pub fn parse_cedar_name(name: &str) -> Option<(Label, u32, u32)> {
    let stem = name.strip_suffix(".png").or_else(|| name.strip_suffix(".PNG"))?;
    let (label, rest) = if let Some(r) = stem.strip_prefix("original_") {
        (Label::Genuine, r)
    } else {
        (Label::Forged, stem.strip_prefix("forgeries_")?)
    };
    let (w, n) = rest.split_once('_')?;
    Some((label, w.parse().ok()?, n.parse().ok()?))
}

/// Reads CEDAR file naming from `root` and its immediate subfolders.
/// Files that do not match the naming scheme are skipped.
pub fn load_cedar(root: &Path, resolution: usize) -> Result<Corpus> {
    if !root.is_dir() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    let mut found: BTreeMap<(u32, Label, u32), PathBuf> = BTreeMap::new();
    let mut candidates = sorted_entries(root)?;
    for sub in candidates.clone().iter().filter(|p| p.is_dir()) {
        candidates.extend(sorted_entries(sub)?);
    }
    for path in candidates.into_iter().filter(|p| p.is_file()) {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if let Some((label, w, n)) = parse_cedar_name(&name) {
            if let Some(prev) = found.insert((w, label, n), path.clone()) {
                return Err(malformed(root, format!("{} and {} name the same sample", prev.display(), path.display())));
            }
        }
    }
    if found.is_empty() {
        return Err(malformed(root, "no original_/forgeries_ PNG files"));
    }
    let mut per_writer: BTreeMap<u32, [usize; 2]> = BTreeMap::new();
    for &(w, label, _) in found.keys() {
        per_writer.entry(w).or_default()[(label == Label::Forged) as usize] += 1;
    }
    if let Some((w, counts)) = per_writer.iter().find(|(_, c)| c.contains(&0)) {
        let missing = if counts[0] == 0 { "original" } else { "forgeries" };
        return Err(malformed(root, format!("writer {w} has no {missing} images")));
    }
    let files = found.into_iter().map(|((w, label, _), p)| (p, w.to_string(), label)).collect();
    build_corpus(root, files, resolution)
}

pub fn load_corpus(root: &Path, layout: Layout, resolution: usize) -> Result<Corpus> {
    match layout {
        Layout::Canonical => load_directory(root, resolution),
        Layout::Cedar => load_cedar(root, resolution),
    }
}

/// Writes `corpus` in the canonical layout, numbering files per writer and
/// label in corpus order. Returns the written paths.
pub fn write_corpus(corpus: &Corpus, root: &Path) -> Result<Vec<PathBuf>> {
    let mut counters: BTreeMap<(&str, Label), usize> = BTreeMap::new();
    let mut written = Vec::with_capacity(corpus.len());
    for s in corpus.samples() {
        let n = counters.entry((&s.writer_id, s.label)).or_default();
        let path = root.join(&s.writer_id).join(s.label.as_str()).join(format!("{:04}.png", *n));
        *n += 1;
        write_png(&path, &s.image)?;
        written.push(path);
    }
    Ok(written)
}
