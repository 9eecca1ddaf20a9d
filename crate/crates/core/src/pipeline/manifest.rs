//! Dataset directory layout: `root/{fg,alpha,bg}/` with PNG files, plus an
//! optional `root/trimap/` for datasets that ship fixed trimaps.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    /// Basename shared by the foreground and alpha files.
    pub name: String,
    pub fg_path: PathBuf,
    pub alpha_path: PathBuf,
    /// Present when the dataset ships a fixed trimap for this entry.
    pub trimap_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub backgrounds: Vec<PathBuf>,
    /// Mismatched or unreadable files, reported rather than fatal.
    pub warnings: Vec<String>,
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("missing directory {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    files.sort_by_key(|p| p.file_name().map(|n| n.to_owned()));
    Ok(files)
}

/// Scans `root/{fg,alpha,bg}/`, pairing foregrounds with alphas by filename.
/// Every kept file is decoded once to validate it. A plain-text index of the
/// result is written to `root/manifest.index` (best effort).
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let fg_files = list_pngs(&root.join("fg"))?;
    let alpha_dir = root.join("alpha");
    if !alpha_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "missing directory {}",
            alpha_dir.display()
        )));
    }
    let bg_files = list_pngs(&root.join("bg"))?;
    let trimap_dir = root.join("trimap");

    let mut warnings = Vec::new();
    let mut entries = Vec::new();
    for fg_path in fg_files {
        let name = fg_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let alpha_path = alpha_dir.join(&name);
        if !alpha_path.is_file() {
            warnings.push(format!("{name}: no alpha counterpart, skipped"));
            continue;
        }
        let fg = match io::load_rgb(&fg_path) {
            Ok(v) => v,
            Err(e) => {
                warnings.push(format!("{name}: unreadable foreground ({e}), skipped"));
                continue;
            }
        };
        let alpha = match io::load_gray(&alpha_path) {
            Ok(v) => v,
            Err(e) => {
                warnings.push(format!("{name}: unreadable alpha ({e}), skipped"));
                continue;
            }
        };
        if fg.shape2() != (alpha.shape()[0], alpha.shape()[1]) {
            warnings.push(format!(
                "{name}: foreground {:?} and alpha {:?} shapes differ, skipped",
                fg.shape2(),
                (alpha.shape()[0], alpha.shape()[1])
            ));
            continue;
        }
        let trimap_path = trimap_dir.join(&name);
        entries.push(ManifestEntry {
            name,
            fg_path,
            alpha_path,
            trimap_path: trimap_path.is_file().then_some(trimap_path),
        });
    }

    let mut backgrounds = Vec::new();
    for bg_path in bg_files {
        match io::load_rgb(&bg_path) {
            Ok(_) => backgrounds.push(bg_path),
            Err(e) => warnings.push(format!(
                "{}: unreadable background ({e}), skipped",
                bg_path.display()
            )),
        }
    }

    if entries.is_empty() {
        return Err(Error::Dataset(format!(
            "no valid foreground/alpha pairs under {}",
            root.display()
        )));
    }

    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        entries,
        backgrounds,
        warnings,
    };
    if let Err(e) = manifest.write_index() {
        // Index writing is a convenience; never fatal.
        eprintln!("warning: could not write manifest index: {e}");
    }
    Ok(manifest)
}

impl DatasetManifest {
    /// One entry per line: `pair <name>` then `bg <file>` lines.
    pub fn write_index(&self) -> Result<()> {
        let path = self.root.join("manifest.index");
        let mut text = String::new();
        for entry in &self.entries {
            let trimap = entry
                .trimap_path
                .as_ref()
                .map(|_| " trimap")
                .unwrap_or_default();
            text.push_str(&format!("pair {}{}\n", entry.name, trimap));
        }
        for bg in &self.backgrounds {
            let name = bg.file_name().map(|n| n.to_string_lossy().into_owned());
            text.push_str(&format!("bg {}\n", name.unwrap_or_default()));
        }
        fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}
