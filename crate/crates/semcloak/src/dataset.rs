//! Image folders in, PNG reconstructions out.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb, RgbImage};

use semcloak_core::data::{split, synthetic_faces, Dataset, FaceSetConfig};
use semcloak_core::Tensor;

use crate::config::DatasetConfig;
use crate::error::{io_err, HarnessError, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Train split, test split and the identity names indexed by label.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    pub identities: Vec<String>,
}

/// Loads the configured dataset and splits it deterministically by `seed`.
pub fn load_dataset(cfg: &DatasetConfig, seed: u64) -> Result<LoadedData> {
    let (data, identities) = match &cfg.path {
        None => {
            let faces = FaceSetConfig {
                size: cfg.image_size,
                ..cfg.synthetic
            };
            let data = synthetic_faces(&faces)?;
            let names = (0..data.n_ids).map(|i| format!("face-{i:03}")).collect();
            (data, names)
        }
        Some(root) => {
            let map = match &cfg.labels {
                Some(p) => Some(read_label_map(p)?),
                None => None,
            };
            read_folder(root, cfg.image_size, map.as_ref())?
        }
    };
    let (train, test) = split(&data, cfg.split, seed)?;
    Ok(LoadedData { train, test, identities })
}

fn read_label_map(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| HarnessError::Toml(format!("{}: {e}", path.display())))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        out.push(entry.map_err(io_err(dir))?.path());
    }
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Reads `root/<identity>/<image>` into a dataset at `size × size`. With a label map every
/// subfolder must be listed; several folders may share a label.
pub fn read_folder(root: &Path, size: usize, map: Option<&BTreeMap<String, String>>) -> Result<(Dataset, Vec<String>)> {
    let mut pixels = Vec::new();
    let mut names = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let folder = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let name = match map {
            Some(m) => m.get(&folder).cloned().ok_or_else(|| HarnessError::MissingLabels(folder.clone()))?,
            None => folder,
        };
        for file in sorted_entries(&dir)?.into_iter().filter(|p| is_image(p)) {
            let img = image::open(&file).map_err(|source| HarnessError::Image { path: file.clone(), source })?;
            let rgb = img.resize_exact(size as u32, size as u32, FilterType::Triangle).to_rgb8();
            pixels.extend(to_chw(&rgb));
            names.push(name.clone());
        }
    }
    if names.is_empty() {
        return Err(HarnessError::EmptyDataset(root.to_path_buf()));
    }
    let mut identities: Vec<String> = names.clone();
    identities.sort();
    identities.dedup();
    let labels = names.iter().map(|n| identities.binary_search(n).expect("collected")).collect::<Vec<_>>();
    let images = Tensor::new(&[labels.len(), 3, size, size], pixels)?;
    Ok((Dataset::new(images, labels)?, identities))
}

fn to_chw(img: &RgbImage) -> Vec<f64> {
    let (w, h) = img.dimensions();
    let mut out = vec![0.0; 3 * (w * h) as usize];
    let plane = (w * h) as usize;
    for (x, y, p) in img.enumerate_pixels() {
        let i = (y * w + x) as usize;
        for c in 0..3 {
            out[c * plane + i] = f64::from(p[c]) / 255.0;
        }
    }
    out
}

/// Row `i` of a `[B, 3, H, W]` batch as an 8-bit image.
pub fn to_rgb_image(images: &Tensor<f64>, i: usize) -> Result<RgbImage> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || i >= s[0] {
        return Err(HarnessError::InvalidConfig(format!("cannot take RGB row {i} of shape {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let row = &images.data()[i * images.row_len()..(i + 1) * images.row_len()];
    let plane = h * w;
    let px = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let j = y as usize * w + x as usize;
        Rgb([px(row[j]), px(row[plane + j]), px(row[2 * plane + j])])
    }))
}

/// Writes every row of `images` as `dir/<prefix><index>.png`.
pub fn save_pngs(images: &Tensor<f64>, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    (0..images.batch())
        .map(|i| {
            let path = dir.join(format!("{prefix}{i:04}.png"));
            to_rgb_image(images, i)?
                .save(&path)
                .map_err(|source| HarnessError::Image { path: path.clone(), source })?;
            Ok(path)
        })
        .collect()
}
