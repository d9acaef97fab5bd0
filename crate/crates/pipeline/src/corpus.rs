//! On-disk corpus layout and the seeded image splits.
//!
//! Masks live in `<masks_dir>/<image_id>.msk` and feature maps in
//! `<features_dir>/<image_id>_l<layer_id>.ftns`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use bgdensity::feature_store::{read_feature_map, read_mask, FeatureMap, PixelMask};
use bgdensity::{Error, Result};
use sha2::{Digest, Sha256};

pub const MASK_EXT: &str = "msk";
pub const FEATURE_EXT: &str = "ftns";

pub fn mask_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}.{MASK_EXT}"))
}

pub fn feature_path(dir: &Path, image_id: &str, layer_id: u32) -> PathBuf {
    dir.join(format!("{image_id}_l{layer_id}.{FEATURE_EXT}"))
}

/// Adds the path to an error, keeping its I/O or validation nature.
pub fn at_path(path: &Path) -> impl FnOnce(Error) -> Error + '_ {
    move |e| e.in_stage(path.display().to_string())
}

/// Image ids with a mask file, sorted.
pub fn list_images(masks_dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(masks_dir).map_err(|e| Error::from(e).in_stage(format!("listing {}", masks_dir.display())))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(MASK_EXT) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Validation(format!("no .{MASK_EXT} files in {}", masks_dir.display())));
    }
    Ok(ids)
}

pub fn load_mask(masks_dir: &Path, image_id: &str) -> Result<PixelMask> {
    let p = mask_path(masks_dir, image_id);
    read_mask(&p).map_err(at_path(&p))
}

/// Loads one layer's map and checks it belongs to `image_id` and `layer_id`.
pub fn load_feature_map(features_dir: &Path, image_id: &str, layer_id: u32) -> Result<FeatureMap> {
    let p = feature_path(features_dir, image_id, layer_id);
    let map = read_feature_map(&p).map_err(at_path(&p))?;
    if map.layer_id() != layer_id || map.image_id() != image_id {
        return Err(Error::Validation(format!(
            "{} holds image {:?} layer {}, expected image {image_id:?} layer {layer_id}",
            p.display(),
            map.image_id(),
            map.layer_id()
        )));
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Fit,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Fit, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Fit => "fit",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Image ids per split, each list sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub by_split: BTreeMap<Split, Vec<String>>,
}

impl Splits {
    pub fn ids(&self, split: Split) -> &[String] {
        self.by_split.get(&split).map_or(&[], Vec::as_slice)
    }

    /// `image_id,split` lines in image-id order.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(&str, Split)> =
            self.by_split.iter().flat_map(|(s, ids)| ids.iter().map(move |id| (id.as_str(), *s))).collect();
        rows.sort();
        rows.iter().map(|(id, s)| format!("{id},{s}\n")).collect()
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut by_split: BTreeMap<Split, Vec<String>> = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (id, s) = line.rsplit_once(',').ok_or_else(|| Error::Format(format!("bad split line {line:?}")))?;
            let split = Split::ALL
                .into_iter()
                .find(|x| x.as_str() == s.trim())
                .ok_or_else(|| Error::Format(format!("unknown split {s:?}")))?;
            by_split.entry(split).or_default().push(id.to_string());
        }
        for ids in by_split.values_mut() {
            ids.sort();
        }
        Ok(Self { by_split })
    }
}

fn split_key(seed: u64, image_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(image_id.as_bytes());
    h.finalize().into()
}

/// Orders images by a seeded hash of their id and cuts the order into
/// train, validation, fitting and test runs of rounded sizes.
pub fn assign_splits(ids: &[String], seed: u64, train: f64, val: f64, fit: f64) -> Splits {
    let mut order: Vec<&String> = ids.iter().collect();
    order.sort_by_cached_key(|id| (split_key(seed, id), (*id).clone()));
    let n = ids.len();
    let count = |f: f64| ((f * n as f64).round() as usize).min(n);
    let n_train = count(train);
    let n_val = count(val).min(n - n_train);
    let n_fit = count(fit).min(n - n_train - n_val);
    let mut by_split: BTreeMap<Split, Vec<String>> = BTreeMap::new();
    for (k, id) in order.into_iter().enumerate() {
        let s = if k < n_train {
            Split::Train
        } else if k < n_train + n_val {
            Split::Val
        } else if k < n_train + n_val + n_fit {
            Split::Fit
        } else {
            Split::Test
        };
        by_split.entry(s).or_default().push(id.clone());
    }
    for v in by_split.values_mut() {
        v.sort();
    }
    Splits { by_split }
}
