//! Labeled image sets, deterministic splits and the procedural face generator used as
//! the default desk-scale dataset.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal, stream};
use crate::tensor::Tensor;

/// Images `[N, C, H, W]` in `[0, 1]` with integer identity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
    pub n_ids: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f64>, labels: Vec<usize>) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::LengthMismatch {
                left: images.batch(),
                right: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n_ids = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self { images, labels, n_ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.images.row_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let items: Vec<&[f64]> = idx.iter().map(|&i| self.image(i)).collect();
        Dataset {
            images: Tensor::stack(&items, &self.image_shape()).expect("same shape"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_ids: self.n_ids,
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Tensor<f64> {
        self.select(idx).images
    }

    /// Mean image over the set, `[1, C, H, W]`.
    pub fn mean_image(&self) -> Tensor<f64> {
        let n = self.images.row_len();
        let mut m = alloc::vec![0.0; n];
        for img in self.images.data().chunks(n) {
            for (a, b) in m.iter_mut().zip(img) {
                *a += b;
            }
        }
        let inv = 1.0 / self.len() as f64;
        let [c, h, w] = self.image_shape();
        Tensor::new(&[1, c, h, w], m.into_iter().map(|v| v * inv).collect()).expect("mean shape")
    }
}

/// Train/test split with `train_parts : test_parts` proportions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_parts: usize,
    pub test_parts: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_parts: 14,
            test_parts: 1,
        }
    }
}

impl SplitSpec {
    pub fn test_count(&self, n: usize) -> usize {
        let parts = self.train_parts + self.test_parts;
        (n * self.test_parts + parts / 2) / parts
    }
}

/// Shuffles with `seed` and splits into `(train, test)`.
pub fn split(data: &Dataset, spec: SplitSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream(seed, "split"));
    let n_test = spec.test_count(data.len());
    let (test, train) = order.split_at(n_test);
    Ok((data.select(train), data.select(test)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaceSetConfig {
    pub identities: usize,
    pub per_identity: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for FaceSetConfig {
    fn default() -> Self {
        Self {
            identities: 32,
            per_identity: 16,
            size: 32,
            seed: 0,
        }
    }
}

struct FaceParams {
    bg: [f64; 3],
    skin: [f64; 3],
    hair: [f64; 3],
    eye: [f64; 3],
    mouth: [f64; 3],
    fw: f64,
    fh: f64,
    es: f64,
    ey: f64,
    er: f64,
    mw: f64,
    my: f64,
    hl: f64,
}

fn rgb<R: Rng>(rng: &mut R, lo: f64) -> [f64; 3] {
    [rng.random_range(lo..1.0), rng.random_range(lo..1.0), rng.random_range(lo..1.0)]
}

impl FaceParams {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            bg: rgb(rng, 0.0),
            skin: rgb(rng, 0.2),
            hair: rgb(rng, 0.0),
            eye: rgb(rng, 0.0),
            mouth: rgb(rng, 0.0),
            fw: rng.random_range(0.28..0.42),
            fh: rng.random_range(0.36..0.46),
            es: rng.random_range(0.10..0.2),
            ey: rng.random_range(-0.12..0.0),
            er: rng.random_range(0.04..0.07),
            mw: rng.random_range(0.08..0.2),
            my: rng.random_range(0.14..0.24),
            hl: rng.random_range(-0.35..-0.1),
        }
    }
}

/// Soft inside-indicator of a signed distance (negative inside).
fn soft(d: f64) -> f64 {
    1.0 / (1.0 + libm::exp(d / 0.7))
}

fn render<R: Rng>(p: &FaceParams, size: usize, rng: &mut R) -> Vec<f64> {
    let dx = rng.random_range(-0.06..0.06);
    let dy = rng.random_range(-0.06..0.06);
    let light = rng.random_range(0.85..1.15);
    let smile = rng.random_range(-0.04..0.04);
    let (cx, cy) = (0.5 + dx, 0.5 + dy);
    let s = size as f64;
    let plane = size * size;
    let mut img = alloc::vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / s - cx;
            let v = (y as f64 + 0.5) / s - cy;
            let mut px = p.bg;
            let mut blend = |a: f64, col: &[f64; 3]| {
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + a * col[c];
                }
            };
            let face = soft((libm::hypot(u / p.fw, v / p.fh) - 1.0) * s * 0.35);
            blend(face, &p.skin);
            blend(face * soft((v - p.hl) * s), &p.hair);
            for side in [-1.0, 1.0] {
                let d = libm::hypot(u - side * p.es, v - p.ey) - p.er;
                blend(soft(d * s), &p.eye);
            }
            let mv = v - p.my - smile * (1.0 - (u / p.mw) * (u / p.mw));
            let m = soft((mv.abs() - 0.025) * s) * soft((u.abs() - p.mw) * s);
            blend(m, &p.mouth);
            for c in 0..3 {
                img[c * plane + y * size + x] = px[c] * light;
            }
        }
    }
    for v in img.iter_mut() {
        *v = (*v + 0.02 * normal(rng)).clamp(0.0, 1.0);
    }
    img
}

/// Procedural cartoon faces: every identity has its own colors and geometry, every image
/// adds a small shift, lighting change, expression change and pixel noise.
pub fn synthetic_faces(cfg: &FaceSetConfig) -> Result<Dataset> {
    if cfg.identities == 0 || cfg.per_identity == 0 || cfg.size == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = stream(cfg.seed, "faces");
    let mut data = Vec::with_capacity(cfg.identities * cfg.per_identity * 3 * cfg.size * cfg.size);
    let mut labels = Vec::with_capacity(cfg.identities * cfg.per_identity);
    for id in 0..cfg.identities {
        let p = FaceParams::sample(&mut rng);
        for _ in 0..cfg.per_identity {
            data.extend(render(&p, cfg.size, &mut rng));
            labels.push(id);
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(&[n, 3, cfg.size, cfg.size], data)?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> Dataset {
        let images = Tensor::new(&[n, 1, 1, 1], (0..n).map(|i| i as f64 / n as f64).collect()).unwrap();
        Dataset::new(images, (0..n).map(|i| i % 3).collect()).unwrap()
    }

    #[test]
    fn split_ratio_and_determinism() {
        let d = tiny(150);
        let (tr, te) = split(&d, SplitSpec::default(), 4).unwrap();
        assert_eq!((tr.len(), te.len()), (140, 10));
        let (tr2, te2) = split(&d, SplitSpec::default(), 4).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);
        let (_, te3) = split(&d, SplitSpec::default(), 5).unwrap();
        assert_ne!(te, te3);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(Dataset::new(Tensor::zeros(&[0, 1, 1, 1]), alloc::vec![]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn faces_are_in_range_and_seeded() {
        let cfg = FaceSetConfig {
            identities: 3,
            per_identity: 2,
            size: 16,
            seed: 1,
        };
        let a = synthetic_faces(&cfg).unwrap();
        assert_eq!(a.images.shape(), &[6, 3, 16, 16]);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, synthetic_faces(&cfg).unwrap());
        assert_eq!(a.n_ids, 3);
    }
}
