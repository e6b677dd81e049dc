//! Block-constant detail tiers derived from a set of grayscale images.
//!
//! With factors `(8, 4, 2)` the tiers are `M3, M2, M1, MF`, coarsest first.
//! Tier `k` is the source image sampled every `f_k` pixels and replicated
//! back to full size, so every tier keeps the source dimensions.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{denormalize, encode_pnm, load_pgm_ppm, normalize};
use crate::kernels::{downsample_nearest, upsample_nearest};
use crate::losslog::write_atomic;
use crate::par;
use crate::tensor::Tensor;

pub const DEFAULT_FACTORS: [usize; 3] = [8, 4, 2];
pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "index\tsource\tchecksum\ttier\tfactor";

/// Tier names for `n_factors` degraded tiers, coarsest first: `M3, M2, M1, MF`.
pub fn tier_names(n_factors: usize) -> Vec<String> {
    (1..=n_factors)
        .rev()
        .map(|k| format!("M{k}"))
        .chain(std::iter::once("MF".to_string()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub source: String,
    /// sha256 of the tier image's PGM encoding.
    pub checksum: String,
    pub tier: String,
    /// 1 for the full-detail tier.
    pub factor: usize,
}

#[derive(Clone, Debug)]
pub struct TierDataset {
    factors: Vec<usize>,
    /// Coarsest first; the last tier is the unmodified input.
    tiers: Vec<Vec<Tensor<f32>>>,
    sources: Vec<String>,
}

fn validate_factors(factors: &[usize], h: usize, w: usize) -> Result<()> {
    if factors.is_empty() {
        return Err(Error::Precondition(
            "at least one tier factor is required".into(),
        ));
    }
    if factors.windows(2).any(|p| p[0] <= p[1]) {
        return Err(Error::Precondition(format!(
            "tier factors {factors:?} are not strictly decreasing"
        )));
    }
    if let Some(f) = factors
        .iter()
        .find(|&&f| f < 2 || !h.is_multiple_of(f) || !w.is_multiple_of(f))
    {
        return Err(Error::Precondition(format!(
            "tier factor {f} must be >= 2 and divide the image size {h}x{w}"
        )));
    }
    Ok(())
}

/// Down-then-up nearest resampling of a `(1, H, W)` image.
pub fn degrade(img: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let shape = img.shape().to_vec();
    let x = img.clone().reshape([1, shape[0], shape[1], shape[2]])?;
    let y = upsample_nearest(&downsample_nearest(&x, factor)?, factor)?;
    y.reshape(shape)
}

pub fn build_tier_datasets(
    images: Vec<Tensor<f32>>,
    factors: &[usize],
    sources: Vec<String>,
) -> Result<TierDataset> {
    let first = images
        .first()
        .ok_or_else(|| Error::Precondition("no images to build tiers from".into()))?;
    let &[1, h, w] = first.shape() else {
        return Err(Error::Shape {
            op: "tier image",
            lhs: first.shape().to_vec(),
            rhs: vec![1, 0, 0],
        });
    };
    validate_factors(factors, h, w)?;
    if sources.len() != images.len() {
        return Err(Error::Precondition(format!(
            "{} images but {} source names",
            images.len(),
            sources.len()
        )));
    }
    for (img, src) in images.iter().zip(&sources) {
        if img.shape() != first.shape() {
            return Err(Error::Shape {
                op: "tier image",
                lhs: img.shape().to_vec(),
                rhs: first.shape().to_vec(),
            });
        }
        if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Precondition(format!(
                "{src}: pixel values outside [0, 1]"
            )));
        }
    }
    let mut tiers = Vec::with_capacity(factors.len() + 1);
    for &f in factors {
        let tier = par::map_range(images.len(), |i| degrade(&images[i], f))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        tiers.push(tier);
    }
    tiers.push(images);
    Ok(TierDataset {
        factors: factors.to_vec(),
        tiers,
        sources,
    })
}

impl TierDataset {
    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    pub fn names(&self) -> Vec<String> {
        tier_names(self.factors.len())
    }

    /// Number of tiers, which is also the number of cascade stages.
    pub fn tier_count(&self) -> usize {
        self.tiers.len()
    }

    /// Images of tier `i`, coarsest (0) to full detail (`tier_count() - 1`).
    pub fn tier(&self, i: usize) -> &[Tensor<f32>] {
        &self.tiers[i]
    }

    pub fn tier_by_name(&self, name: &str) -> Option<&[Tensor<f32>]> {
        self.names()
            .iter()
            .position(|n| n == name)
            .map(|i| self.tier(i))
    }

    /// Factor of tier `i`; 1 for the full-detail tier.
    pub fn factor(&self, i: usize) -> usize {
        self.factors.get(i).copied().unwrap_or(1)
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    /// `(height, width)` of every image.
    pub fn image_size(&self) -> (usize, usize) {
        let s = self.tiers[0][0].shape();
        (s[1], s[2])
    }

    pub fn manifest(&self) -> Result<Vec<ManifestEntry>> {
        let mut out = Vec::new();
        for (ti, name) in self.names().into_iter().enumerate() {
            for (i, img) in self.tiers[ti].iter().enumerate() {
                out.push(ManifestEntry {
                    index: i,
                    source: self.sources[i].clone(),
                    checksum: hex::encode(Sha256::digest(encode_pnm(&denormalize(img)?))),
                    tier: name.clone(),
                    factor: self.factor(ti),
                });
            }
        }
        Ok(out)
    }

    /// Writes `tiers/<name>/NNNN.pgm` for every tier and `manifest.tsv`.
    pub fn write(&self, workdir: &Path) -> Result<Vec<ManifestEntry>> {
        for (ti, name) in self.names().into_iter().enumerate() {
            let dir = workdir.join("tiers").join(&name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, img) in self.tiers[ti].iter().enumerate() {
                write_atomic(
                    &tier_image_path(workdir, &name, i),
                    &encode_pnm(&denormalize(img)?),
                )?;
            }
        }
        let manifest = self.manifest()?;
        write_manifest(&manifest, &workdir.join(MANIFEST_FILE))?;
        Ok(manifest)
    }

    /// Reads a workdir written by [`TierDataset::write`].
    pub fn load(workdir: &Path) -> Result<Self> {
        let manifest = read_manifest(&workdir.join(MANIFEST_FILE))?;
        let mut names: Vec<(String, usize)> = Vec::new();
        for e in &manifest {
            if !names.iter().any(|(n, _)| n == &e.tier) {
                names.push((e.tier.clone(), e.factor));
            }
        }
        let mut factors: Vec<usize> = names.iter().map(|(_, f)| *f).filter(|&f| f > 1).collect();
        factors.sort_unstable_by(|a, b| b.cmp(a));
        let expected = tier_names(factors.len());
        if names.len() != expected.len()
            || !expected.iter().all(|n| names.iter().any(|(m, _)| m == n))
        {
            return Err(Error::Precondition(format!(
                "manifest tiers {:?} do not form a cascade",
                names.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>()
            )));
        }
        let count = manifest.iter().filter(|e| e.tier == "MF").count();
        let mut sources = vec![String::new(); count];
        for e in manifest.iter().filter(|e| e.tier == "MF") {
            *sources.get_mut(e.index).ok_or_else(|| {
                Error::Precondition(format!("manifest index {} out of range", e.index))
            })? = e.source.clone();
        }
        let mut tiers = Vec::new();
        for name in &expected {
            let tier = par::map_range(count, |i| {
                let img = load_pgm_ppm(&tier_image_path(workdir, name, i))?;
                normalize(&img)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            tiers.push(tier);
        }
        Ok(Self {
            factors,
            tiers,
            sources,
        })
    }
}

pub fn tier_image_path(workdir: &Path, tier: &str, index: usize) -> PathBuf {
    workdir
        .join("tiers")
        .join(tier)
        .join(format!("{index:04}.pgm"))
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for e in entries {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.index, e.source, e.checksum, e.tier, e.factor
        ));
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Precondition(format!(
            "{}: missing manifest header",
            path.display()
        )));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || {
                Error::Precondition(format!(
                    "{}: malformed manifest row {line:?}",
                    path.display()
                ))
            };
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(ManifestEntry {
                index: f[0].parse().map_err(|_| bad())?,
                source: f[1].to_string(),
                checksum: f[2].to_string(),
                tier: f[3].to_string(),
                factor: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Mean absolute 4-neighbour Laplacian with replicated borders.
pub fn detail_energy(img: &Tensor<f32>) -> f64 {
    let s = img.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let d = img.data();
    let at = |i: isize, j: isize| -> f64 {
        let i = i.clamp(0, h as isize - 1) as usize;
        let j = j.clamp(0, w as isize - 1) as usize;
        d[i * w + j] as f64
    };
    let mut total = 0.0;
    for i in 0..h as isize {
        for j in 0..w as isize {
            let lap = 4.0 * at(i, j) - at(i - 1, j) - at(i + 1, j) - at(i, j - 1) - at(i, j + 1);
            total += lap.abs();
        }
    }
    total / (h * w) as f64
}

/// Whether every aligned `block x block` tile of the last two axes is constant.
pub fn is_block_constant(img: &Tensor<f32>, block: usize) -> bool {
    let s = img.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = img.len() / (h * w);
    let d = img.data();
    (0..planes).all(|p| {
        let plane = &d[p * h * w..][..h * w];
        (0..h).all(|i| {
            (0..w).all(|j| plane[i * w + j] == plane[(i / block * block) * w + j / block * block])
        })
    })
}
