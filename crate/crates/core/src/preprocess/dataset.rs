//! Labeled dataset manifests: one `relative/path<TAB>class_id` line per image.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{load_rgb, LeafImage};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Manifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |reason: &str| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                reason: reason.to_string(),
            };
            let (rel, class) = line
                .rsplit_once('\t')
                .ok_or_else(|| parse_err("expected `path<TAB>class_id`"))?;
            let class_id = class.trim().parse().map_err(|_| parse_err("class id is not an integer"))?;
            entries.push(ManifestEntry { path: PathBuf::from(rel), class_id });
        }
        Ok(Manifest {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    /// Writes entries relative to the manifest file's own directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let target_root = path.parent().unwrap_or(Path::new(""));
        let mut out = String::new();
        for e in &self.entries {
            let abs = self.root.join(&e.path);
            let rel = abs.strip_prefix(target_root).map(Path::to_path_buf).unwrap_or(abs);
            out.push_str(&format!("{}\t{}\n", rel.display(), e.class_id));
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// One sub-directory per class under `root`; classes numbered in sorted
    /// directory-name order. Returns the manifest and the class names.
    pub fn scan_class_dirs(root: &Path) -> Result<(Self, Vec<String>)> {
        let mut classes: Vec<PathBuf> = fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        classes.sort();
        let mut entries = Vec::new();
        let mut names = Vec::new();
        for (class_id, dir) in classes.iter().enumerate() {
            names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
            let mut files: Vec<PathBuf> = fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|x| x.to_str())
                        .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm" | "pnm"))
                })
                .collect();
            files.sort();
            for f in files {
                let rel = f.strip_prefix(root).map(Path::to_path_buf).unwrap_or(f);
                entries.push(ManifestEntry { path: rel, class_id });
            }
        }
        Ok((Manifest { root: root.to_path_buf(), entries }, names))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads and binarizes every image, in manifest order.
    pub fn load_leaves(&self) -> Result<Vec<(LeafImage, usize)>> {
        self.entries
            .par_iter()
            .map(|e| {
                let path = self.resolve(e);
                let leaf = load_rgb(&path).and_then(LeafImage::from_rgb).map_err(|err| match err {
                    Error::NoForeground => Error::invalid(format!("{}: no foreground found", path.display())),
                    other => other,
                })?;
                Ok((leaf, e.class_id))
            })
            .collect()
    }

    pub fn class_count(&self) -> usize {
        self.entries.iter().map(|e| e.class_id + 1).max().unwrap_or(0)
    }

    /// Seeded per-class split: `test_fraction` of every class (rounded, at
    /// least one when the class has two or more images) goes to the test side.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::invalid(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let mut by_class: BTreeMap<usize, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in &self.entries {
            by_class.entry(e.class_id).or_default().push(e);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Manifest { root: self.root.clone(), entries: vec![] };
        let mut test = train.clone();
        for (_, mut items) in by_class {
            items.shuffle(&mut rng);
            let mut n_test = (items.len() as f64 * test_fraction).round() as usize;
            if test_fraction > 0.0 && n_test == 0 && items.len() >= 2 {
                n_test = 1;
            }
            let (a, b) = items.split_at(n_test);
            test.entries.extend(a.iter().map(|&e| e.clone()));
            train.entries.extend(b.iter().map(|&e| e.clone()));
        }
        Ok((train, test))
    }
}
