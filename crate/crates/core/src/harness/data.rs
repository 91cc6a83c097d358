//! Classification datasets: a synthetic token task and IDX image files.
//!
//! IDX is the big-endian format of the MNIST distribution: a 4-byte magic
//! (`0x00000803` for u8 images, `0x00000801` for u8 labels), one u32 per
//! dimension, then the raw bytes. Images become token sequences by cutting
//! them into non-overlapping `p x p` patches, row-major, each patch flattened
//! row-major and scaled to `[0, 1]`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Token sequences with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn token_dim(&self) -> usize {
        self.samples[0].cols()
    }

    pub fn tokens(&self) -> usize {
        self.samples[0].rows()
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Stratified split: from each class, the first `ceil(frac * count)`
    /// samples (in dataset order) go to the holdout.
    pub fn stratified_split(&self, holdout_frac: f64) -> (Dataset, Dataset) {
        let mut train = Vec::new();
        let mut hold = Vec::new();
        for c in 0..self.classes {
            let members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            let k = (holdout_frac * members.len() as f64).ceil() as usize;
            hold.extend_from_slice(&members[..k.min(members.len())]);
            train.extend_from_slice(&members[k.min(members.len())..]);
        }
        train.sort_unstable();
        hold.sort_unstable();
        (self.subset(&train), self.subset(&hold))
    }

    /// Share of the most frequent class.
    pub fn majority_share(&self) -> f64 {
        let mut counts = vec![0usize; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        *counts.iter().max().unwrap_or(&0) as f64 / self.len().max(1) as f64
    }
}

/// Shape of the synthetic "find the pivotal tokens" task.
///
/// Every class has a random unit prototype. A sample is `tokens` Gaussian
/// noise vectors, of which `signal_tokens` (at random positions) are
/// shifted by `separation` times the class prototype. The label can only be
/// read off by attending to those few tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub classes: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub signal_tokens: usize,
    pub separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            samples: 2000,
            classes: 3,
            tokens: 32,
            token_dim: 4,
            signal_tokens: 8,
            separation: 3.0,
        }
    }
}

/// Generates a balanced (class counts within one), shuffled dataset.
pub fn synthetic_task<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Dataset> {
    if spec.samples == 0 || spec.classes < 2 || spec.tokens == 0 || spec.token_dim == 0 {
        return Err(Error::Argument(
            "synthetic task needs samples, tokens, dims > 0 and >= 2 classes".into(),
        ));
    }
    if spec.signal_tokens == 0 || spec.signal_tokens > spec.tokens {
        return Err(Error::Argument(format!(
            "signal tokens must be in 1..={}, got {}",
            spec.tokens, spec.signal_tokens
        )));
    }
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.token_dim)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    labels.shuffle(rng);
    let mut positions: Vec<usize> = (0..spec.tokens).collect();
    let samples = labels
        .iter()
        .map(|&c| {
            let mut x = Matrix::random_normal(spec.tokens, spec.token_dim, 1.0, rng);
            positions.shuffle(rng);
            for &p in &positions[..spec.signal_tokens] {
                for (v, &u) in x.row_mut(p).iter_mut().zip(&prototypes[c]) {
                    *v += spec.separation * u;
                }
            }
            x
        })
        .collect();
    Ok(Dataset {
        samples,
        labels,
        classes: spec.classes,
    })
}

/// Decoded u8 image stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let s = self.rows * self.cols;
        &self.pixels[i * s..(i + 1) * s]
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes.get(self.pos..self.pos + 4).ok_or_else(|| {
            Error::parse(
                self.pos as u64,
                format!("truncated header: expected {what}"),
            )
        })?;
        self.pos += 4;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, want: u32) -> Result<()> {
        let got = self.u32("magic number")?;
        if got != want {
            return Err(Error::parse(
                0,
                format!("bad magic 0x{got:08x}, expected 0x{want:08x}"),
            ));
        }
        Ok(())
    }

    fn payload(&self, len: usize) -> Result<&[u8]> {
        let have = self.bytes.len() - self.pos;
        if have < len {
            return Err(Error::parse(
                self.bytes.len() as u64,
                format!("truncated payload: expected {len} bytes, found {have}"),
            ));
        }
        if have > len {
            return Err(Error::parse(
                (self.pos + len) as u64,
                format!("{} trailing bytes after payload", have - len),
            ));
        }
        Ok(&self.bytes[self.pos..])
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(IDX_IMAGES_MAGIC)?;
    let count = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::parse(
            8,
            format!("image size {rows}x{cols} must be positive"),
        ));
    }
    let len = count
        .checked_mul(rows * cols)
        .ok_or_else(|| Error::parse(4, "image count overflows"))?;
    let pixels = r.payload(len)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(IDX_LABELS_MAGIC)?;
    let count = r.u32("label count")? as usize;
    Ok(r.payload(count)?.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IDX_IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Cuts one image into `(rows/p * cols/p) x p^2` tokens scaled to `[0, 1]`.
pub fn patch_tokens(image: &[u8], rows: usize, cols: usize, patch: usize) -> Result<Matrix> {
    if patch == 0 || !rows.is_multiple_of(patch) || !cols.is_multiple_of(patch) {
        return Err(Error::Argument(format!(
            "patch size {patch} does not tile a {rows}x{cols} image"
        )));
    }
    let (pr, pc) = (rows / patch, cols / patch);
    Ok(Matrix::from_fn(pr * pc, patch * patch, |t, e| {
        let (r, c) = ((t / pc) * patch + e / patch, (t % pc) * patch + e % patch);
        image[r * cols + c] as f64 / 255.0
    }))
}

pub fn idx_dataset(images: &IdxImages, labels: &[u8], patch: usize) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(Error::parse(
            4,
            format!("{} images but {} labels", images.count, labels.len()),
        ));
    }
    if images.count == 0 {
        return Err(Error::parse(4, "IDX file holds no images"));
    }
    let samples = (0..images.count)
        .map(|i| patch_tokens(images.image(i), images.rows, images.cols, patch))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        samples,
        labels,
        classes,
    })
}

pub fn load_idx(images: &Path, labels: &Path, patch: usize) -> Result<Dataset> {
    let img = parse_idx_images(&std::fs::read(images)?)?;
    let lab = parse_idx_labels(&std::fs::read(labels)?)?;
    idx_dataset(&img, &lab, patch)
}

/// Small image task: each class lights a different `size/2` square quadrant
/// over uniform background noise.
pub fn synthetic_images<R: Rng + ?Sized>(
    count: usize,
    size: usize,
    classes: usize,
    rng: &mut R,
) -> (IdxImages, Vec<u8>) {
    let half = size / 2;
    let mut pixels = Vec::with_capacity(count * size * size);
    let labels: Vec<u8> = (0..count).map(|i| (i % classes) as u8).collect();
    for &l in &labels {
        let (qr, qc) = ((l as usize / 2) % 2 * half, l as usize % 2 * half);
        for r in 0..size {
            for c in 0..size {
                let lit = (qr..qr + half).contains(&r) && (qc..qc + half).contains(&c);
                let base: u8 = rng.random_range(0..64);
                pixels.push(if lit { base.saturating_add(160) } else { base });
            }
        }
    }
    (
        IdxImages {
            count,
            rows: size,
            cols: size,
            pixels,
        },
        labels,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let spec = SyntheticSpec {
            samples: 100,
            ..Default::default()
        };
        let a = synthetic_task(&spec, &mut seeded_rng(1)).unwrap();
        assert_eq!(a, synthetic_task(&spec, &mut seeded_rng(1)).unwrap());
        let mut counts = [0usize; 3];
        for &l in &a.labels {
            counts[l] += 1;
        }
        assert_eq!(counts, [34, 33, 33]);
        assert_eq!(a.samples[0].shape(), crate::Shape::new(32, 4));
        assert!(synthetic_task(
            &SyntheticSpec {
                signal_tokens: 40,
                ..spec
            },
            &mut seeded_rng(1)
        )
        .is_err());
    }

    /// Softmax regression on mean-pooled tokens: a baseline showing the
    /// default task is learnable without any attention.
    #[test]
    fn default_task_is_linearly_learnable_after_pooling() {
        let ds = synthetic_task(&SyntheticSpec::default(), &mut seeded_rng(9)).unwrap();
        let (train, hold) = ds.stratified_split(0.2);
        let pool = |x: &Matrix| x.col_means().into_data();
        let (dim, k) = (ds.token_dim(), ds.classes);
        let mut w = vec![0.0; (dim + 1) * k];
        let logits = |w: &[f64], f: &[f64]| -> Vec<f64> {
            (0..k)
                .map(|c| w[dim * k + c] + (0..dim).map(|j| f[j] * w[j * k + c]).sum::<f64>())
                .collect()
        };
        for _ in 0..200 {
            let mut g = vec![0.0; w.len()];
            for (x, &y) in train.samples.iter().zip(&train.labels) {
                let f = pool(x);
                let z = logits(&w, &f);
                let mx = z.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in 0..k {
                    let r = e[c] / s - (c == y) as usize as f64;
                    for j in 0..dim {
                        g[j * k + c] += r * f[j];
                    }
                    g[dim * k + c] += r;
                }
            }
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= 0.5 * gi / train.len() as f64;
            }
        }
        let hits = hold
            .samples
            .iter()
            .zip(&hold.labels)
            .filter(|(x, &y)| {
                let z = logits(&w, &pool(x));
                (0..k).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap() == y
            })
            .count();
        assert!(
            hits as f64 / hold.len() as f64 >= 0.9,
            "{hits}/{}",
            hold.len()
        );
    }

    #[test]
    fn stratified_split_keeps_class_shares() {
        let ds = synthetic_task(
            &SyntheticSpec {
                samples: 90,
                ..Default::default()
            },
            &mut seeded_rng(2),
        )
        .unwrap();
        let (train, hold) = ds.stratified_split(0.2);
        assert_eq!(train.len() + hold.len(), 90);
        assert_eq!(hold.len(), 18);
        for c in 0..3 {
            assert_eq!(hold.labels.iter().filter(|&&l| l == c).count(), 6);
        }
        assert!((hold.majority_share() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_image_gives_zero_tokens() {
        let bytes = encode_idx_images(&IdxImages {
            count: 1,
            rows: 28,
            cols: 28,
            pixels: vec![0; 784],
        });
        assert_eq!(bytes.len(), 16 + 784);
        let img = parse_idx_images(&bytes).unwrap();
        let ds = idx_dataset(&img, &[0], 7).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.samples[0].shape(), crate::Shape::new(16, 49));
        assert!(ds.samples[0].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn set_pixels_land_in_the_right_tokens() {
        // 4x4 image, 2x2 patches: tokens are TL, TR, BL, BR.
        let mut pixels = vec![0u8; 16];
        pixels[0] = 255; // (0,0): token 0 entry 0
        pixels[3] = 51; // (0,3): token 1 entry 1
        pixels[2 * 4 + 1] = 102; // (2,1): token 2 entry 1
        pixels[3 * 4 + 3] = 204; // (3,3): token 3 entry 3
        let t = patch_tokens(&pixels, 4, 4, 2).unwrap();
        let mut want = Matrix::zeros(4, 4);
        want.set(0, 0, 1.0);
        want.set(1, 1, 0.2);
        want.set(2, 1, 0.4);
        want.set(3, 3, 0.8);
        assert_eq!(t, want);
        assert!(patch_tokens(&pixels, 4, 4, 3).is_err());
    }

    #[test]
    fn round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = synthetic_images(12, 8, 4, &mut seeded_rng(3));
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        std::fs::write(&ip, encode_idx_images(&img)).unwrap();
        std::fs::write(&lp, encode_idx_labels(&lab)).unwrap();
        let loaded = load_idx(&ip, &lp, 2).unwrap();
        assert_eq!(loaded, idx_dataset(&img, &lab, 2).unwrap());
        assert_eq!(loaded.classes, 4);
        assert_eq!(parse_idx_images(&encode_idx_images(&img)).unwrap(), img);
    }

    #[test]
    fn malformed_files_report_offsets() {
        let good = encode_idx_images(&IdxImages {
            count: 2,
            rows: 2,
            cols: 2,
            pixels: vec![1; 8],
        });
        let offset = |r: Result<IdxImages>| match r {
            Err(Error::Parse { offset, .. }) => offset,
            other => panic!("{other:?}"),
        };
        assert_eq!(offset(parse_idx_images(&good[..10])), 8);
        assert_eq!(offset(parse_idx_images(&good[..20])), 20);
        let mut extra = good.clone();
        extra.push(0);
        assert_eq!(offset(parse_idx_images(&extra)), 24);
        let mut bad = good.clone();
        bad[3] = 0x01;
        assert_eq!(offset(parse_idx_images(&bad)), 0);
        assert!(matches!(
            parse_idx_labels(&good),
            Err(Error::Parse { offset: 0, .. })
        ));
        let img = parse_idx_images(&good).unwrap();
        assert!(idx_dataset(&img, &[0], 1).is_err());
    }
}
