//! Dataset directory convention: `images/<stem>.png` paired with
//! `masks/<stem>.png`, plus a manifest listing the split:
//!
//! ```text
//! [train]
//! 001
//! 002
//! [test]
//! 003
//! ```

use std::fs;
use std::path::Path;

use super::{load_image, load_mask};
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut manifest = Manifest::default();
        let mut section: Option<&mut Vec<String>> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[train]" => section = Some(&mut manifest.train),
                "[test]" => section = Some(&mut manifest.test),
                _ if line.starts_with('[') => {
                    return Err(Error::Data(format!(
                        "manifest line {}: unknown section {line}",
                        lineno + 1
                    )))
                }
                stem => match section.as_deref_mut() {
                    Some(list) => list.push(stem.to_string()),
                    None => {
                        return Err(Error::Data(format!(
                            "manifest line {}: stem before any [train]/[test] heading",
                            lineno + 1
                        )))
                    }
                },
            }
        }
        Ok(manifest)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("[train]\n");
        for s in &self.train {
            out.push_str(s);
            out.push('\n');
        }
        out.push_str("[test]\n");
        for s in &self.test {
            out.push_str(s);
            out.push('\n');
        }
        out
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse(&text)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    fs::write(path, manifest.render()).map_err(|e| Error::io(path, e))
}

/// Sorted stems of every `images/*.png` file.
pub fn list_image_stems(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("images");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

pub fn load_labeled(root: &Path, stem: &str) -> Result<LabeledImage> {
    let image_path = root.join("images").join(format!("{stem}.png"));
    let mask_path = root.join("masks").join(format!("{stem}.png"));
    if !mask_path.exists() {
        return Err(Error::Data(format!(
            "missing mask for {stem}: {}",
            mask_path.display()
        )));
    }
    let image = load_image(&image_path)?;
    let mask = load_mask(&mask_path)?;
    LabeledImage::new(stem, image, mask)
}

pub fn load_corpus(root: &Path, stems: &[String]) -> Result<Vec<LabeledImage>> {
    if stems.is_empty() {
        return Err(Error::Data(format!("empty split in {}", root.display())));
    }
    stems.iter().map(|s| load_labeled(root, s)).collect()
}
