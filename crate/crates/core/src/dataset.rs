//! Loading a directory of PGM/PPM files into normalized grayscale tensors.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{load_pgm_ppm, normalize, resize_nearest, to_grayscale, ImageU8};
use crate::par;
use crate::tensor::Tensor;
use crate::tiers::{build_tier_datasets, TierDataset};

const EXTENSIONS: [&str; 3] = ["pgm", "ppm", "pnm"];

/// Grayscale (when RGB) then nearest-resize to `size x size`.
pub fn preprocess(img: &ImageU8, size: usize) -> Result<ImageU8> {
    let gray = if img.channels == 3 {
        to_grayscale(img)?
    } else {
        img.clone()
    };
    if gray.width == size && gray.height == size {
        return Ok(gray);
    }
    resize_nearest(&gray, size, size)
}

/// PGM/PPM files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let known = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if known && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Loads and preprocesses every image in `dir`. Errors name the failing file.
pub fn load_directory(dir: &Path, size: usize) -> Result<(Vec<Tensor<f32>>, Vec<String>)> {
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::NoImages(dir.to_path_buf()));
    }
    let images = par::map_range(paths.len(), |i| {
        let path = &paths[i];
        load_pgm_ppm(path)
            .and_then(|img| preprocess(&img, size))
            .and_then(|img| normalize(&img))
            .map_err(|e| match e {
                e @ Error::Io { .. } => e,
                other => Error::ImageFile {
                    path: path.clone(),
                    source: Box::new(other),
                },
            })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let sources = paths
        .iter()
        .map(|p| {
            p.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned()
        })
        .collect();
    Ok((images, sources))
}

/// Loads `input`, builds the tiers and writes them under `workdir`.
pub fn prepare(
    input: &Path,
    workdir: &Path,
    size: usize,
    factors: &[usize],
) -> Result<TierDataset> {
    let (images, sources) = load_directory(input, size)?;
    let ds = build_tier_datasets(images, factors, sources)?;
    ds.write(workdir)?;
    Ok(ds)
}
