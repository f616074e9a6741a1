//! Datasets: synthetic identity generation and on-disk image directories.
//!
//! Synthetic identities are smooth random textures decoded from a latent
//! vector, not face renderings; each sample applies a small spatial shift, a
//! brightness scale, and pixel noise. Pixels are always in `[-1, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Labeled image collection. Labels are contiguous `0..identity_count`.
#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    /// Each image is a `3 * size * size` CHW pixel buffer in `[-1, 1]`.
    images: Vec<Vec<f64>>,
    labels: Vec<usize>,
    identity_names: Vec<String>,
    image_size: usize,
    pub split: String,
    pub provenance: String,
}

impl LabeledImageSet {
    pub fn new(
        images: Vec<Vec<f64>>,
        labels: Vec<usize>,
        identity_names: Vec<String>,
        image_size: usize,
        split: impl Into<String>,
        provenance: impl Into<String>,
    ) -> Result<LabeledImageSet> {
        if images.len() != labels.len() {
            return Err(Error::Contract("images/labels length mismatch".into()));
        }
        for (i, img) in images.iter().enumerate() {
            if img.len() != 3 * image_size * image_size {
                return Err(Error::Data(format!("image {i} has wrong pixel count")));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= identity_names.len()) {
            return Err(Error::Data(format!("label {bad} out of range")));
        }
        Ok(LabeledImageSet {
            images,
            labels,
            identity_names,
            image_size,
            split: split.into(),
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn identity_count(&self) -> usize {
        self.identity_names.len()
    }

    pub fn identity_names(&self) -> &[String] {
        &self.identity_names
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self, index: usize) -> &[f64] {
        &self.images[index]
    }

    /// Sample indices belonging to one identity.
    pub fn indices_of(&self, identity: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == identity).collect()
    }

    pub fn image_tensor(&self, index: usize) -> Tensor {
        let s = self.image_size;
        Tensor::from_vec(self.images[index].clone(), &[3, s, s])
    }

    /// Stack selected samples into `[n, 3, s, s]`.
    pub fn batch_tensor(&self, indices: &[usize]) -> Tensor {
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for &i in indices {
            data.extend_from_slice(&self.images[i]);
        }
        Tensor::from_vec(data, &[indices.len(), 3, s, s])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub identities: usize,
    pub samples_per_identity: usize,
    pub image_size: usize,
    pub latent_dim: usize,
    /// Max spatial shift in pixels.
    pub shift_px: usize,
    /// Max relative brightness change (0.2 = ±20%).
    pub brightness: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            identities: 200,
            samples_per_identity: 20,
            image_size: 32,
            latent_dim: 16,
            shift_px: 3,
            brightness: 0.2,
            noise_sigma: 0.05,
            seed: 7,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::Config("need at least 2 identities".into()));
        }
        if self.brightness < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("nuisance magnitudes must be non-negative".into()));
        }
        Ok(())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(tag ^ splitmix(a ^ splitmix(b)))))
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fixed smooth decoder: per (channel, latent component) a random
/// low-frequency sinusoid; the identity latent mixes them.
struct Decoder {
    // per channel, per latent: (amp, fy, fx, phase)
    basis: Vec<Vec<(f64, f64, f64, f64)>>,
}

impl Decoder {
    fn new(seed: u64, latent_dim: usize) -> Decoder {
        let mut rng = stream(seed, 0xDEC0DE, 0, 0);
        let basis = (0..3)
            .map(|_| {
                (0..latent_dim)
                    .map(|_| {
                        let amp = gauss(&mut rng) / (latent_dim as f64).sqrt();
                        let fy = rng.random_range(1..=3) as f64;
                        let fx = rng.random_range(1..=3) as f64;
                        let phase = rng.random::<f64>() * std::f64::consts::TAU;
                        (amp, fy, fx, phase)
                    })
                    .collect()
            })
            .collect();
        Decoder { basis }
    }

    fn decode(&self, latent: &[f64], size: usize) -> Vec<f64> {
        let mut img = vec![0.0; 3 * size * size];
        for (c, comps) in self.basis.iter().enumerate() {
            for y in 0..size {
                for x in 0..size {
                    let mut v = 0.0;
                    for (z, &(amp, fy, fx, phase)) in latent.iter().zip(comps) {
                        let arg = std::f64::consts::TAU
                            * (fy * y as f64 / size as f64 + fx * x as f64 / size as f64)
                            + phase;
                        v += z * amp * arg.sin();
                    }
                    img[(c * size + y) * size + x] = (1.5 * v).tanh();
                }
            }
        }
        img
    }
}

/// Deterministic synthetic identity dataset.
pub fn synth_identity_dataset(config: &SynthConfig) -> Result<LabeledImageSet> {
    config.validate()?;
    let size = config.image_size;
    let decoder = Decoder::new(config.seed, config.latent_dim);
    let mut images = Vec::with_capacity(config.identities * config.samples_per_identity);
    let mut labels = Vec::with_capacity(images.capacity());
    for id in 0..config.identities {
        let mut id_rng = stream(config.seed, 0x1D, id as u64, 0);
        let latent: Vec<f64> = (0..config.latent_dim).map(|_| gauss(&mut id_rng)).collect();
        let base = decoder.decode(&latent, size);
        for sample in 0..config.samples_per_identity {
            let mut rng = stream(config.seed, 0x5A, id as u64, sample as u64);
            let dy = rng.random_range(-(config.shift_px as i64)..=config.shift_px as i64);
            let dx = rng.random_range(-(config.shift_px as i64)..=config.shift_px as i64);
            let bright = 1.0 + config.brightness * (2.0 * rng.random::<f64>() - 1.0);
            let mut img = vec![0.0; 3 * size * size];
            for c in 0..3 {
                for y in 0..size {
                    let sy = (y as i64 - dy).rem_euclid(size as i64) as usize;
                    for x in 0..size {
                        let sx = (x as i64 - dx).rem_euclid(size as i64) as usize;
                        let mut v = base[(c * size + sy) * size + sx] * bright;
                        if config.noise_sigma > 0.0 {
                            v += config.noise_sigma * gauss(&mut rng);
                        }
                        img[(c * size + y) * size + x] = v.clamp(-1.0, 1.0);
                    }
                }
            }
            images.push(img);
            labels.push(id);
        }
    }
    let names = (0..config.identities).map(|i| format!("synth{i:05}")).collect();
    LabeledImageSet::new(
        images,
        labels,
        names,
        size,
        "all",
        format!("synthetic(seed={})", config.seed),
    )
}

/// Identity-disjoint split: identities (not images) are partitioned.
pub fn split_identities(
    ds: &LabeledImageSet,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet, LabeledImageSet)> {
    let (ftrain, fval, ftest) = fractions;
    if (ftrain + fval + ftest - 1.0).abs() > 1e-9 {
        return Err(Error::Config("split fractions must sum to 1".into()));
    }
    let n_id = ds.identity_count();
    let mut order: Vec<usize> = (0..n_id).collect();
    let mut rng = stream(seed, 0x5811, 0, 0);
    // Fisher-Yates
    for i in (1..n_id).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((n_id as f64) * ftrain).round() as usize;
    let n_val = ((n_id as f64) * fval).round() as usize;
    let n_val = n_val.min(n_id - n_train);
    let n_test = n_id - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Config(format!(
            "split {fractions:?} of {n_id} identities leaves an empty part"
        )));
    }
    let parts = [
        ("train", &order[..n_train]),
        ("val", &order[n_train..n_train + n_val]),
        ("test", &order[n_train + n_val..]),
    ];
    let mut out = Vec::new();
    for (tag, ids) in parts {
        let mut remap = vec![usize::MAX; n_id];
        let mut names = Vec::new();
        for (new, &old) in ids.iter().enumerate() {
            remap[old] = new;
            names.push(ds.identity_names()[old].clone());
        }
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..ds.len() {
            let l = remap[ds.labels()[i]];
            if l != usize::MAX {
                images.push(ds.pixels(i).to_vec());
                labels.push(l);
            }
        }
        out.push(LabeledImageSet::new(
            images,
            labels,
            names,
            ds.image_size(),
            tag,
            ds.provenance.clone(),
        )?);
    }
    let mut it = out.into_iter();
    Ok((it.next().unwrap(), it.next().unwrap(), it.next().unwrap()))
}

/// Load `root/<identity>/<image>` into a dataset; identities ordered
/// lexicographically. PNG and raw `.f32` tensors are supported.
pub fn load_image_dir(root: &Path, size: usize) -> Result<LabeledImageSet> {
    let mut dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    dirs.sort();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    for dir in dirs {
        let mut files: Vec<_> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(dir.display().to_string(), e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut count = 0;
        for f in files {
            images.push(load_image(&f, size)?);
            count += 1;
        }
        if count == 0 {
            eprintln!("warning: skipping empty identity folder {}", dir.display());
            continue;
        }
        let label = names.len();
        names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
        labels.extend(std::iter::repeat_n(label, count));
    }
    LabeledImageSet::new(images, labels, names, size, "external", root.display().to_string())
}

/// Decode one image file to a CHW `[-1, 1]` buffer of `3 * size * size`.
pub fn load_image(path: &Path, size: usize) -> Result<Vec<f64>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("f32") => load_raw_f32(path, size),
        _ => load_png(path, size),
    }
}

fn load_png(path: &Path, size: usize) -> Result<Vec<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let resized = image::imageops::resize(
        &img,
        size as u32,
        size as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut out = vec![0.0; 3 * size * size];
    for (x, y, pix) in resized.enumerate_pixels() {
        for c in 0..3 {
            out[(c * size + y as usize) * size + x as usize] =
                pix.0[c] as f64 / 127.5 - 1.0;
        }
    }
    Ok(out)
}

/// Raw float tensor: 12-byte header (c, h, w as u32 LE) then f32 LE pixels.
fn load_raw_f32(path: &Path, size: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 12 {
        return Err(Error::Data(format!("{}: truncated raw tensor", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(4), dim(8));
    if c != 3 || bytes.len() != 12 + 4 * c * h * w {
        return Err(Error::Data(format!("{}: bad raw tensor dims {c}x{h}x{w}", path.display())));
    }
    if h != size || w != size {
        return Err(Error::Data(format!(
            "{}: raw tensor is {h}x{w}, expected {size}x{size}",
            path.display()
        )));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for i in 0..c * h * w {
        let off = 12 + 4 * i;
        out.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    Ok(out)
}

/// Write a dataset as `root/<identity>/<index>.png` (pixels mapped back to
/// 0..255).
pub fn write_image_dir(ds: &LabeledImageSet, root: &Path) -> Result<()> {
    let s = ds.image_size() as u32;
    let mut per_identity = vec![0usize; ds.identity_count()];
    for i in 0..ds.len() {
        let label = ds.labels()[i];
        let dir = root.join(&ds.identity_names()[label]);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut img = image::RgbImage::new(s, s);
        let pix = ds.pixels(i);
        for y in 0..s {
            for x in 0..s {
                let mut rgb = [0u8; 3];
                for c in 0..3 {
                    let v = pix[((c * s as usize) + y as usize) * s as usize + x as usize];
                    rgb[c] = (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8;
                }
                img.put_pixel(x, y, image::Rgb(rgb));
            }
        }
        let path = dir.join(format!("{:04}.png", per_identity[label]));
        per_identity[label] += 1;
        img.save(&path)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            identities: 6,
            samples_per_identity: 4,
            image_size: 16,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let cfg = small_cfg();
        let a = synth_identity_dataset(&cfg).unwrap();
        let b = synth_identity_dataset(&cfg).unwrap();
        for i in 0..a.len() {
            assert!(a
                .pixels(i)
                .iter()
                .zip(b.pixels(i))
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn zero_nuisance_gives_identical_samples() {
        let cfg = SynthConfig {
            shift_px: 0,
            brightness: 0.0,
            noise_sigma: 0.0,
            ..small_cfg()
        };
        let ds = synth_identity_dataset(&cfg).unwrap();
        for id in 0..cfg.identities {
            let idx = ds.indices_of(id);
            for w in idx.windows(2) {
                assert_eq!(ds.pixels(w[0]), ds.pixels(w[1]));
            }
        }
    }

    #[test]
    fn intra_identity_mse_below_inter() {
        let cfg = SynthConfig {
            identities: 50,
            samples_per_identity: 4,
            image_size: 16,
            ..SynthConfig::default()
        };
        let ds = synth_identity_dataset(&cfg).unwrap();
        let mse = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
        };
        let mut intra = (0.0, 0usize);
        let mut inter = (0.0, 0usize);
        for i in 0..ds.len() {
            for j in (i + 1)..ds.len() {
                let m = mse(ds.pixels(i), ds.pixels(j));
                if ds.labels()[i] == ds.labels()[j] {
                    intra = (intra.0 + m, intra.1 + 1);
                } else {
                    inter = (inter.0 + m, inter.1 + 1);
                }
            }
        }
        assert!(intra.0 / (intra.1 as f64) < inter.0 / inter.1 as f64);
    }

    #[test]
    fn pixel_range_bounded() {
        let ds = synth_identity_dataset(&small_cfg()).unwrap();
        for i in 0..ds.len() {
            assert!(ds.pixels(i).iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn split_is_identity_disjoint_and_deterministic() {
        let cfg = SynthConfig {
            identities: 10,
            samples_per_identity: 3,
            image_size: 8,
            ..SynthConfig::default()
        };
        let ds = synth_identity_dataset(&cfg).unwrap();
        let (tr, va, te) = split_identities(&ds, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!(tr.identity_count(), 8);
        assert_eq!(va.identity_count(), 1);
        assert_eq!(te.identity_count(), 1);
        let names = |d: &LabeledImageSet| -> std::collections::HashSet<String> {
            d.identity_names().iter().cloned().collect()
        };
        assert!(names(&tr).is_disjoint(&names(&va)));
        assert!(names(&tr).is_disjoint(&names(&te)));
        assert!(names(&va).is_disjoint(&names(&te)));
        let (tr2, _, _) = split_identities(&ds, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!(names(&tr), names(&tr2));
    }

    #[test]
    fn empty_split_rejected() {
        let cfg = SynthConfig {
            identities: 2,
            samples_per_identity: 2,
            image_size: 8,
            ..SynthConfig::default()
        };
        let ds = synth_identity_dataset(&cfg).unwrap();
        assert!(split_identities(&ds, (0.9, 0.05, 0.05), 1).is_err());
    }

    #[test]
    fn image_dir_round_trip() {
        let cfg = SynthConfig {
            identities: 2,
            samples_per_identity: 3,
            image_size: 16,
            ..SynthConfig::default()
        };
        let ds = synth_identity_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_image_dir(&ds, dir.path()).unwrap();
        let loaded = load_image_dir(dir.path(), 16).unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(loaded.identity_count(), 2);
        assert_eq!(loaded.labels().iter().filter(|&&l| l == 0).count(), 3);
        // PNG quantization: pixels agree to 1/127.5
        for i in 0..ds.len() {
            for (a, b) in ds.pixels(i).iter().zip(loaded.pixels(i)) {
                assert!((a - b).abs() <= 1.0 / 127.0);
            }
        }
        // reloading gives identical labels
        let again = load_image_dir(dir.path(), 16).unwrap();
        assert_eq!(loaded.labels(), again.labels());
    }

    #[test]
    fn load_resizes() {
        let cfg = SynthConfig {
            identities: 2,
            samples_per_identity: 1,
            image_size: 64,
            ..SynthConfig::default()
        };
        let ds = synth_identity_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_image_dir(&ds, dir.path()).unwrap();
        let loaded = load_image_dir(dir.path(), 32).unwrap();
        assert_eq!(loaded.image_size(), 32);
        assert_eq!(loaded.pixels(0).len(), 3 * 32 * 32);
    }
}
