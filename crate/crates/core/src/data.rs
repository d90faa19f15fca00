//! Synthetic per-institution datasets.
//!
//! Each institution draws phantoms (overlapping shaded ellipses) from its
//! own anatomy style and intensity window, and degrades them with a
//! signal-dependent Gaussian noise model whose strength is protocol specific.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::proto::wire::{decode_param_vectors, encode_param_vector};
use crate::tensor::{ParamVector, Tensor, TensorError};

pub const MIN_PHANTOM_SIZE: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("phantom size {height}x{width} is below the {MIN_PHANTOM_SIZE}x{MIN_PHANTOM_SIZE} minimum")]
    TooSmall { height: usize, width: usize },
    #[error("protocol parameter `{name}` must be non-negative and finite, got {value}")]
    BadProtocol { name: &'static str, value: f64 },
    #[error("intensity window [{lo}, {hi}] must satisfy 0 <= lo < hi <= 1")]
    BadWindow { lo: f64, hi: f64 },
    #[error("patch {patch} does not fit in a {height}x{width} image")]
    PatchTooLarge { patch: usize, height: usize, width: usize },
    #[error("patch size and stride must be at least 1")]
    BadStride,
    #[error("institution {0} has no training pairs")]
    EmptyTrainingSet(u32),
    #[error("malformed dataset dump: {0}")]
    BadDump(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Structure statistics of one anatomy family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnatomyStyle {
    pub min_ellipses: usize,
    pub max_ellipses: usize,
    /// Inner ellipse semi-axes as a fraction of the image size.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Peak amplitude of the smooth shading field inside the body.
    pub shading: f64,
}

impl AnatomyStyle {
    /// Built-in families: `0` few large organs, `1` mixed, `2` many fine structures.
    pub fn family(index: u32) -> Self {
        match index % 3 {
            0 => Self {
                min_ellipses: 3,
                max_ellipses: 5,
                min_radius: 0.10,
                max_radius: 0.25,
                shading: 0.05,
            },
            1 => Self {
                min_ellipses: 5,
                max_ellipses: 8,
                min_radius: 0.06,
                max_radius: 0.18,
                shading: 0.08,
            },
            _ => Self {
                min_ellipses: 8,
                max_ellipses: 14,
                min_radius: 0.03,
                max_radius: 0.10,
                shading: 0.10,
            },
        }
    }
}

/// How one institution acquires its images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub institution: u32,
    /// Signal-dependent noise scale (variance per unit intensity).
    pub gain: f64,
    /// Electronic noise standard deviation.
    pub sigma: f64,
    pub window_lo: f64,
    pub window_hi: f64,
    pub family: u32,
}

impl ProtocolParams {
    /// Default heterogeneous protocol for institution `id` (1-based). The
    /// first four are fixed; later ids cycle through them.
    pub fn preset(id: u32) -> Self {
        let (gain, sigma, lo, hi, family) = match (id.max(1) - 1) % 4 {
            0 => (0.002, 0.015, 0.0, 1.0, 0),
            1 => (0.016, 0.045, 0.1, 0.9, 1),
            2 => (0.04, 0.08, 0.2, 0.8, 2),
            _ => (0.006, 0.025, 0.05, 0.95, 1),
        };
        Self {
            institution: id,
            gain,
            sigma,
            window_lo: lo,
            window_hi: hi,
            family,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for (name, value) in [("gain", self.gain), ("sigma", self.sigma)] {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(DataError::BadProtocol { name, value });
            }
        }
        let (lo, hi) = (self.window_lo, self.window_hi);
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(DataError::BadWindow { lo, hi });
        }
        Ok(())
    }

    pub fn style(&self) -> PhantomStyle {
        PhantomStyle {
            anatomy: AnatomyStyle::family(self.family),
            window_lo: self.window_lo,
            window_hi: self.window_hi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomStyle {
    pub anatomy: AnatomyStyle,
    pub window_lo: f64,
    pub window_hi: f64,
}

impl Default for PhantomStyle {
    fn default() -> Self {
        Self {
            anatomy: AnatomyStyle::family(0),
            window_lo: 0.0,
            window_hi: 1.0,
        }
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Piecewise-smooth phantom with values inside the style's intensity window.
pub fn generate_phantom(seed: u64, height: usize, width: usize, style: &PhantomStyle) -> Result<Tensor, DataError> {
    if height < MIN_PHANTOM_SIZE || width < MIN_PHANTOM_SIZE {
        return Err(DataError::TooSmall { height, width });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anatomy = &style.anatomy;
    let size = height.min(width) as f64;

    let body = Ellipse {
        cx: 0.5 + rng.gen_range(-0.04..0.04),
        cy: 0.5 + rng.gen_range(-0.04..0.04),
        a: rng.gen_range(0.36..0.47),
        b: rng.gen_range(0.30..0.44),
        cos: 1.0,
        sin: 0.0,
        value: rng.gen_range(0.30..0.55),
    };
    let count = rng.gen_range(anatomy.min_ellipses..=anatomy.max_ellipses);
    let organs: Vec<Ellipse> = (0..count)
        .map(|_| {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            Ellipse {
                cx: body.cx + rng.gen_range(-0.6..0.6) * body.a,
                cy: body.cy + rng.gen_range(-0.6..0.6) * body.b,
                a: rng.gen_range(anatomy.min_radius..anatomy.max_radius),
                b: rng.gen_range(anatomy.min_radius..anatomy.max_radius),
                cos: theta.cos(),
                sin: theta.sin(),
                value: rng.gen_range(-0.25..0.35),
            }
        })
        .collect();
    let (fx, fy, phase): (f64, f64, f64) = (
        rng.gen_range(1.0..3.0),
        rng.gen_range(1.0..3.0),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );

    let span = style.window_hi - style.window_lo;
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = ((x as f64 + 0.5) / size, (y as f64 + 0.5) / size);
            let mut value = 0.0;
            if body.contains(u, v) {
                value = body.value + anatomy.shading * (fx * u * std::f64::consts::TAU + fy * v + phase).sin();
                for organ in organs.iter().filter(|o| o.contains(u, v)) {
                    value += organ.value;
                }
            }
            let unit = value.clamp(0.0, 1.0);
            data.push((style.window_lo + span * unit) as f32);
        }
    }
    Ok(Tensor::image(height, width, data)?)
}

/// `clean + n`, `n ~ N(0, gain * clean + sigma^2)` per pixel.
pub fn simulate_low_dose(clean: &Tensor, protocol: &ProtocolParams, seed: u64) -> Result<Tensor, DataError> {
    for (name, value) in [("gain", protocol.gain), ("sigma", protocol.sigma)] {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(DataError::BadProtocol { name, value });
        }
    }
    if protocol.gain == 0.0 && protocol.sigma == 0.0 {
        return Ok(clean.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma2 = protocol.sigma * protocol.sigma;
    let data = clean
        .data()
        .iter()
        .map(|&c| {
            let var = (protocol.gain * f64::from(c)).max(0.0) + sigma2;
            let z: f64 = rng.sample(StandardNormal);
            (f64::from(c) + var.sqrt() * z) as f32
        })
        .collect();
    Ok(Tensor::new(clean.shape().to_vec(), data)?)
}

/// Every aligned `patch x patch` window at the given stride, row-major.
pub fn extract_patches(img: &Tensor, patch: usize, stride: usize) -> Result<Vec<Tensor>, DataError> {
    if patch == 0 || stride == 0 {
        return Err(DataError::BadStride);
    }
    let (h, w) = img
        .image_dims()
        .ok_or_else(|| TensorError::BadShape(img.shape().to_vec()))?;
    if patch > h || patch > w {
        return Err(DataError::PatchTooLarge {
            patch,
            height: h,
            width: w,
        });
    }
    let data = img.data();
    let mut out = Vec::new();
    for top in (0..=h - patch).step_by(stride) {
        for left in (0..=w - patch).step_by(stride) {
            let mut values = Vec::with_capacity(patch * patch);
            for y in top..top + patch {
                values.extend_from_slice(&data[y * w + left..y * w + left + patch]);
            }
            out.push(Tensor::image(patch, patch, values)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePair {
    /// Normal-dose target.
    pub clean: Tensor,
    /// Low-dose input.
    pub noisy: Tensor,
    pub institution: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
    Characteristic,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Characteristic];

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
            Split::Characteristic => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Characteristic => "characteristic",
        }
    }
}

/// Split sizes and image geometry for one institution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub test: usize,
    pub characteristic: usize,
    pub image_size: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 200,
            test: 50,
            characteristic: 50,
            image_size: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stream {
    Phantom,
    Noise,
}

/// Seed for item `index` of `split` at institution `k`. The low 36 bits
/// encode `(stream, split, index)` and bits 36.. the institution, then the
/// whole word is XOR-ed with a value that depends only on `base`; distinct
/// tuples therefore never share a seed under one base.
fn item_seed(base: u64, institution: u32, split: Split, stream: Stream, index: usize) -> u64 {
    assert!(index < 1 << 32, "split index out of range");
    let stream_bit = match stream {
        Stream::Phantom => 0,
        Stream::Noise => 1u64 << 34,
    };
    let structured = (u64::from(institution) << 36) | stream_bit | (split.tag() << 32) | index as u64;
    structured ^ splitmix64(base)
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One institution's private data: `D^k`, its test split and `C^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstitutionDataset {
    pub protocol: ProtocolParams,
    pub train: Vec<ImagePair>,
    pub test: Vec<ImagePair>,
    pub characteristic: Vec<ImagePair>,
}

impl InstitutionDataset {
    pub fn generate(protocol: ProtocolParams, sizes: SplitSizes, base_seed: u64) -> Result<Self, DataError> {
        protocol.validate()?;
        if sizes.train == 0 {
            return Err(DataError::EmptyTrainingSet(protocol.institution));
        }
        let style = protocol.style();
        let make = |split: Split, count: usize| -> Result<Vec<ImagePair>, DataError> {
            (0..count)
                .map(|i| {
                    let k = protocol.institution;
                    let clean = generate_phantom(
                        item_seed(base_seed, k, split, Stream::Phantom, i),
                        sizes.image_size,
                        sizes.image_size,
                        &style,
                    )?;
                    let noisy = simulate_low_dose(&clean, &protocol, item_seed(base_seed, k, split, Stream::Noise, i))?;
                    Ok(ImagePair {
                        clean,
                        noisy,
                        institution: k,
                    })
                })
                .collect()
        };
        Ok(Self {
            train: make(Split::Train, sizes.train)?,
            test: make(Split::Test, sizes.test)?,
            characteristic: make(Split::Characteristic, sizes.characteristic)?,
            protocol,
        })
    }

    pub fn id(&self) -> u32 {
        self.protocol.institution
    }

    pub fn split(&self, split: Split) -> &[ImagePair] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
            Split::Characteristic => &self.characteristic,
        }
    }

    /// `split` in the parameter-vector encoding of the wire format: for
    /// every pair the noisy image, then the clean image.
    pub fn encode_split(&self, split: Split) -> Vec<u8> {
        let mut out = Vec::new();
        for pair in self.split(split) {
            for img in [&pair.noisy, &pair.clean] {
                let p = ParamVector::new(img.data().to_vec()).expect("images are finite");
                encode_param_vector(&mut out, &p);
            }
        }
        out
    }

    /// Inverse of [`InstitutionDataset::encode_split`] for square images.
    pub fn decode_split(bytes: &[u8], institution: u32, image_size: usize) -> Result<Vec<ImagePair>, DataError> {
        let vectors = decode_param_vectors(bytes).map_err(|e| DataError::BadDump(e.to_string()))?;
        if vectors.len() % 2 != 0 {
            return Err(DataError::BadDump("odd number of images".into()));
        }
        vectors
            .chunks(2)
            .map(|c| {
                let noisy = Tensor::image(image_size, image_size, c[0].as_slice().to_vec())?;
                let clean = Tensor::image(image_size, image_size, c[1].as_slice().to_vec())?;
                Ok(ImagePair {
                    clean,
                    noisy,
                    institution,
                })
            })
            .collect()
    }

    /// `(noisy, clean)` patch pairs cut from every pair of `split`.
    pub fn patches(&self, split: Split, patch: usize, stride: usize) -> Result<Vec<(Tensor, Tensor)>, DataError> {
        let mut out = Vec::new();
        for pair in self.split(split) {
            let noisy = extract_patches(&pair.noisy, patch, stride)?;
            let clean = extract_patches(&pair.clean, patch, stride)?;
            out.extend(noisy.into_iter().zip(clean));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn phantom_is_deterministic_and_seed_sensitive() {
        let style = PhantomStyle::default();
        let a = generate_phantom(9, 48, 48, &style).unwrap();
        let b = generate_phantom(9, 48, 48, &style).unwrap();
        let c = generate_phantom(10, 48, 48, &style).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn phantom_rejects_small_sizes() {
        assert_eq!(
            generate_phantom(0, 31, 64, &PhantomStyle::default()),
            Err(DataError::TooSmall { height: 31, width: 64 })
        );
    }

    #[test]
    fn phantom_values_stay_in_window() {
        let style = ProtocolParams::preset(3).style();
        let img = generate_phantom(4, 40, 40, &style).unwrap();
        assert!(img
            .data()
            .iter()
            .all(|&v| f64::from(v) >= style.window_lo - 1e-6 && f64::from(v) <= style.window_hi + 1e-6));
    }

    #[test]
    fn zero_noise_is_identity() {
        let clean = generate_phantom(1, 32, 32, &PhantomStyle::default()).unwrap();
        let mut p = ProtocolParams::preset(1);
        p.gain = 0.0;
        p.sigma = 0.0;
        assert_eq!(simulate_low_dose(&clean, &p, 5).unwrap(), clean);
    }

    #[test]
    fn noise_depends_on_seed_only() {
        let clean = generate_phantom(1, 32, 32, &PhantomStyle::default()).unwrap();
        let p = ProtocolParams::preset(2);
        let a = simulate_low_dose(&clean, &p, 1).unwrap();
        assert_eq!(a, simulate_low_dose(&clean, &p, 1).unwrap());
        assert_ne!(a, simulate_low_dose(&clean, &p, 2).unwrap());
    }

    #[test]
    fn negative_protocol_parameters_rejected() {
        let clean = Tensor::filled(vec![4, 4], 0.5).unwrap();
        let mut p = ProtocolParams::preset(1);
        p.sigma = -0.1;
        assert!(matches!(
            simulate_low_dose(&clean, &p, 0),
            Err(DataError::BadProtocol { name: "sigma", .. })
        ));
    }

    #[test]
    fn patch_counts() {
        let img = |n: usize| Tensor::zeros(vec![n, n]).unwrap();
        assert_eq!(extract_patches(&img(128), 64, 64).unwrap().len(), 4);
        assert_eq!(extract_patches(&img(100), 64, 64).unwrap().len(), 1);
        assert_eq!(extract_patches(&img(100), 64, 12).unwrap().len(), 4 * 4);
        assert!(matches!(
            extract_patches(&img(32), 64, 64),
            Err(DataError::PatchTooLarge { .. })
        ));
        assert_eq!(extract_patches(&img(8), 4, 0), Err(DataError::BadStride));
    }

    #[test]
    fn whole_image_patch_is_identity_and_top_left_is_kept() {
        let img = generate_phantom(2, 64, 64, &PhantomStyle::default()).unwrap();
        assert_eq!(extract_patches(&img, 64, 64).unwrap(), vec![img.clone()]);
        let big = generate_phantom(3, 100, 100, &PhantomStyle::default()).unwrap();
        let p = &extract_patches(&big, 64, 64).unwrap()[0];
        assert_eq!(p.data()[..64], big.data()[..64]);
        assert_eq!(p.data()[64 * 63 + 63], big.data()[100 * 63 + 63]);
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let mut seen = HashSet::new();
        for k in 1..=4 {
            for split in Split::ALL {
                for stream in [Stream::Phantom, Stream::Noise] {
                    for i in 0..300 {
                        assert!(seen.insert(item_seed(77, k, split, stream, i)));
                    }
                }
            }
        }
    }

    #[test]
    fn default_protocols_are_heterogeneous() {
        let ps: Vec<_> = (1..=3).map(ProtocolParams::preset).collect();
        for i in 0..3 {
            ps[i].validate().unwrap();
            for j in i + 1..3 {
                assert!(ps[i].gain != ps[j].gain && ps[i].sigma != ps[j].sigma);
            }
        }
    }

    #[test]
    fn dataset_splits_have_requested_sizes() {
        let sizes = SplitSizes {
            train: 3,
            test: 2,
            characteristic: 1,
            image_size: 32,
        };
        let d = InstitutionDataset::generate(ProtocolParams::preset(2), sizes, 5).unwrap();
        assert_eq!((d.train.len(), d.test.len(), d.characteristic.len()), (3, 2, 1));
        assert_ne!(d.train[0].clean, d.test[0].clean);
        assert_eq!(d.patches(Split::Train, 16, 16).unwrap().len(), 12);
        let empty = SplitSizes { train: 0, ..sizes };
        assert_eq!(
            InstitutionDataset::generate(ProtocolParams::preset(2), empty, 5),
            Err(DataError::EmptyTrainingSet(2))
        );
    }
}
