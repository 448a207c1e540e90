//! Synthetic datasets, IDX file ingestion, augmentation, and the seeded
//! random source.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use std::fs;
use std::path::Path;

/// Deterministic random generator: xoshiro256++ seeded through SplitMix64.
///
/// The full algorithm is spelled out here so a stream can be reproduced from
/// the seed alone. Normal deviates come from the Box-Muller transform with
/// the spare value cached. Independent streams are derived by XOR-ing the
/// seed with a stream index (`Rng::stream`).
#[derive(Debug, Clone)]
pub struct Rng {
    state: [u64; 4],
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        // SplitMix64 expansion of the seed into the xoshiro state.
        let mut x = seed;
        let mut next = || {
            x = x.wrapping_add(0x9e3779b97f4a7c15);
            let mut z = x;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
            z ^ (z >> 31)
        };
        Self {
            state: [next(), next(), next(), next()],
            spare_normal: None,
        }
    }

    /// Independent stream `index` for seed splitting (seed XOR stream index).
    pub fn stream(seed: u64, index: u64) -> Self {
        Self::new(seed ^ index)
    }

    /// xoshiro256++ step.
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`. The modulo bias is below `n / 2^64`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Gaussian deviate via Box-Muller; the paired value is cached so draws
    /// come in a fixed order.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return mean + std * z;
        }
        let u1 = 1.0 - self.next_f64(); // (0, 1], keeps ln finite
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        mean + std * r * theta.cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// One square image, channels interleaved per pixel, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub side: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn zeros(side: usize, channels: usize) -> Self {
        Self {
            side,
            channels,
            pixels: vec![0.0; side * side * channels],
        }
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.pixels[(row * self.side + col) * self.channels + channel]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        self.pixels[(row * self.side + col) * self.channels + channel] = value;
    }
}

/// Images plus labels; every pixel lies in `[0, 1]` and the label count
/// matches the sample count.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub side: usize,
    pub channels: usize,
    pub classes: usize,
    images: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        side: usize,
        channels: usize,
        classes: usize,
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let pixel_len = side * side * channels;
        if pixel_len == 0 || labels.len() * pixel_len != images.len() {
            return Err(Error::InvalidArgument(format!(
                "dataset images length {} does not hold {} samples of {} pixels",
                images.len(),
                labels.len(),
                pixel_len
            )));
        }
        if let Some(p) = images.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!(
                "pixel {p} outside [0, 1]"
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} outside [0, {classes})"
            )));
        }
        Ok(Self {
            side,
            channels,
            classes,
            images,
            labels,
        })
    }

    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.images
    }

    pub fn image(&self, index: usize) -> Image {
        let len = self.side * self.side * self.channels;
        Image {
            side: self.side,
            channels: self.channels,
            pixels: self.images[index * len..(index + 1) * len].to_vec(),
        }
    }

    /// Serializes to a pair of IDX byte buffers (images, labels). Pixels are
    /// quantized to `u8` by rounding `v * 255`. Single-channel only.
    pub fn to_idx(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        if self.channels != 1 {
            return Err(Error::InvalidArgument(
                "IDX dump supports single-channel datasets only".into(),
            ));
        }
        if self.classes > 256 {
            return Err(Error::InvalidArgument(
                "IDX labels are unsigned bytes; need classes <= 256".into(),
            ));
        }
        let pixels: Vec<u8> = self
            .images
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect();
        let images = write_idx_images(self.samples(), self.side, self.side, &pixels);
        let labels: Vec<u8> = self.labels.iter().map(|&l| l as u8).collect();
        Ok((images, write_idx_labels(&labels)))
    }
}

/// Deterministic per-class stripe template: class `c` gets its own stripe
/// angle and spatial frequency, values in `[0.05, 0.95]`.
pub fn class_template(class: usize, classes: usize, side: usize, channels: usize) -> Image {
    let angle = std::f64::consts::PI * class as f64 / classes as f64;
    let freq = 2.0 + class as f64;
    let (cos_a, sin_a) = (angle.cos(), angle.sin());
    let mut img = Image::zeros(side, channels);
    for r in 0..side {
        for c in 0..side {
            let u = c as f64 * cos_a + r as f64 * sin_a;
            for ch in 0..channels {
                let phase = ch as f64 * 0.5;
                let v = 0.5 + 0.45 * (2.0 * std::f64::consts::PI * freq * u / side as f64 + phase).sin();
                img.set(r, c, ch, v);
            }
        }
    }
    img
}

/// Stripe-pattern dataset: each class is its template plus clamped Gaussian
/// pixel noise. Labels are exactly uniform (samples are stored class-major).
pub fn generate_synthetic(
    classes: usize,
    per_class: usize,
    side: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if side < 8 {
        return Err(Error::InvalidArgument(format!(
            "need side >= 8, got {side}"
        )));
    }
    if noise_std < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise std must be >= 0, got {noise_std}"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut images = Vec::with_capacity(classes * per_class * side * side);
    let mut labels = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let template = class_template(class, classes, side, 1);
        for _ in 0..per_class {
            for &p in &template.pixels {
                let v = if noise_std > 0.0 {
                    (p + rng.normal(0.0, noise_std)).clamp(0.0, 1.0)
                } else {
                    p
                };
                images.push(v);
            }
            labels.push(class);
        }
    }
    Dataset::new(side, 1, classes, images, labels)
}

/// Axis-aligned rotations; exact, no interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

/// Deterministic augmentation core: optional horizontal flip, then a crop of
/// the 2-pixel zero padding at offset `(dy, dx)` in `[0, 4]` (2, 2 is the
/// centered identity crop), then an exact rotation.
pub fn augment_with(image: &Image, flip: bool, dy: usize, dx: usize, rot: Rotation) -> Image {
    let side = image.side;
    let mut out = image.clone();
    if flip {
        for r in 0..side {
            for c in 0..side {
                for ch in 0..image.channels {
                    out.set(r, c, ch, image.get(r, side - 1 - c, ch));
                }
            }
        }
    }
    let flipped = out.clone();
    for r in 0..side {
        for c in 0..side {
            // Position in the padded image, then back into the original.
            let pr = r + dy;
            let pc = c + dx;
            for ch in 0..image.channels {
                let v = if (2..side + 2).contains(&pr) && (2..side + 2).contains(&pc) {
                    flipped.get(pr - 2, pc - 2, ch)
                } else {
                    0.0
                };
                out.set(r, c, ch, v);
            }
        }
    }
    let cropped = out.clone();
    for r in 0..side {
        for c in 0..side {
            for ch in 0..image.channels {
                let v = match rot {
                    Rotation::R0 => cropped.get(r, c, ch),
                    Rotation::R90 => cropped.get(side - 1 - c, r, ch),
                    Rotation::R180 => cropped.get(side - 1 - r, side - 1 - c, ch),
                    Rotation::R270 => cropped.get(c, side - 1 - r, ch),
                };
                out.set(r, c, ch, v);
            }
        }
    }
    out
}

/// Samples flip, crop offset, and rotation from `rng` (in that order) and
/// applies them.
pub fn augment(image: &Image, rng: &mut Rng) -> Image {
    let flip = rng.bernoulli(0.5);
    let dy = rng.below(5);
    let dx = rng.below(5);
    let rot = match rng.below(4) {
        0 => Rotation::R0,
        1 => Rotation::R90,
        2 => Rotation::R180,
        _ => Rotation::R270,
    };
    augment_with(image, flip, dy, dx, rot)
}

/// Parsed IDX payload: an image batch or a label vector.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// `count` matrices of `rows x cols`, pixels scaled to `[0, 1]` by 255.
    Images(Vec<Matrix>),
    Labels(Vec<u8>),
}

fn idx_format(path: &str, offset: usize, byte: u8, message: &str) -> Error {
    Error::IdxFormat {
        path: path.to_string(),
        offset,
        byte,
        message: message.to_string(),
    }
}

/// Parses IDX bytes: magic `00 00`, type byte `08` (unsigned byte data), a
/// dimension-count byte, big-endian `u32` dimension sizes, then raw bytes.
pub fn parse_idx(bytes: &[u8], path: &str) -> Result<IdxData> {
    if bytes.len() < 4 {
        return Err(Error::IdxLength {
            path: path.to_string(),
            expected: 4,
            got: bytes.len(),
        });
    }
    for offset in 0..2 {
        if bytes[offset] != 0 {
            return Err(idx_format(path, offset, bytes[offset], "expected zero magic byte"));
        }
    }
    if bytes[2] != 0x08 {
        return Err(idx_format(path, 2, bytes[2], "expected unsigned-byte type 0x08"));
    }
    let ndim = bytes[3] as usize;
    if ndim != 1 && ndim != 3 {
        return Err(idx_format(
            path,
            3,
            bytes[3],
            "expected 1 (labels) or 3 (images) dimensions",
        ));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::IdxLength {
            path: path.to_string(),
            expected: header,
            got: bytes.len(),
        });
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let at = 4 + 4 * d;
        dims.push(u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap()) as usize);
    }
    let payload: usize = dims.iter().product();
    if bytes.len() != header + payload {
        return Err(Error::IdxLength {
            path: path.to_string(),
            expected: payload,
            got: bytes.len() - header,
        });
    }
    let body = &bytes[header..];
    if ndim == 1 {
        return Ok(IdxData::Labels(body.to_vec()));
    }
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let chunk = &body[i * rows * cols..(i + 1) * rows * cols];
        let data = chunk.iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Matrix::from_vec(rows, cols, data)?);
    }
    Ok(IdxData::Images(images))
}

/// Reads and parses an IDX file.
pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        Error::InvalidArgument(format!("cannot read {}: {e}", path.display()))
    })?;
    parse_idx(&bytes, &path.display().to_string())
}

/// Encodes an image batch in IDX format (`pixels` is count*rows*cols bytes).
pub fn write_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), count * rows * cols);
    let mut out = vec![0x00, 0x00, 0x08, 0x03];
    for dim in [count, rows, cols] {
        out.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

/// Encodes a label vector in IDX format.
pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0x00, 0x00, 0x08, 0x01];
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Re-encodes parsed IDX data; `parse_idx` of the result is the identity.
pub fn write_idx(data: &IdxData) -> Vec<u8> {
    match data {
        IdxData::Labels(labels) => write_idx_labels(labels),
        IdxData::Images(images) => {
            let (rows, cols) = images
                .first()
                .map(|m| (m.rows(), m.cols()))
                .unwrap_or((0, 0));
            let mut pixels = Vec::with_capacity(images.len() * rows * cols);
            for m in images {
                pixels.extend(m.data().iter().map(|&v| (v * 255.0).round() as u8));
            }
            write_idx_images(images.len(), rows, cols, &pixels)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::stream(7, 1);
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn normal_statistics_match_parameters() {
        // Law-of-large-numbers oracle on the raw (pre-clamp) draws.
        let std = 0.3;
        let mut rng = Rng::new(123);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let v = rng.normal(0.0, std);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let sample_std = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!(mean.abs() <= 4.0 * std / 1000.0, "mean {mean}");
        assert!((sample_std - std).abs() <= 0.01 * std, "std {sample_std}");
    }

    #[test]
    fn synthetic_zero_noise_is_deterministic_per_class() {
        let ds = generate_synthetic(2, 3, 8, 0.0, 1).unwrap();
        let first = ds.image(0);
        assert_eq!(ds.image(1), first);
        assert_eq!(ds.image(2), first);
        assert_ne!(ds.image(3), first); // other class
    }

    #[test]
    fn synthetic_same_seed_bit_identical() {
        let a = generate_synthetic(3, 5, 8, 0.2, 42).unwrap();
        let b = generate_synthetic(3, 5, 8, 0.2, 42).unwrap();
        assert_eq!(a.pixels(), b.pixels());
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn synthetic_label_histogram_uniform() {
        let ds = generate_synthetic(4, 7, 8, 0.1, 9).unwrap();
        let mut hist = [0usize; 4];
        for &l in ds.labels() {
            hist[l] += 1;
        }
        assert_eq!(hist, [7, 7, 7, 7]);
    }

    #[test]
    fn synthetic_rejects_bad_arguments() {
        assert!(generate_synthetic(1, 3, 8, 0.1, 0).is_err());
        assert!(generate_synthetic(2, 3, 4, 0.1, 0).is_err());
        assert!(generate_synthetic(2, 3, 8, -0.1, 0).is_err());
    }

    #[test]
    fn nearest_template_oracle_separates_classes() {
        let classes = 2;
        let ds = generate_synthetic(classes, 100, 16, 0.1, 77).unwrap();
        let templates: Vec<Image> = (0..classes)
            .map(|c| class_template(c, classes, 16, 1))
            .collect();
        let mut correct = 0;
        for i in 0..ds.samples() {
            let img = ds.image(i);
            let best = templates
                .iter()
                .enumerate()
                .map(|(c, t)| {
                    let d: f64 = img
                        .pixels
                        .iter()
                        .zip(&t.pixels)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (c, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            if best == ds.labels()[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.samples() as f64;
        assert!(acc >= 0.99, "nearest-template accuracy {acc}");
    }

    #[test]
    fn augment_identity_path() {
        let ds = generate_synthetic(2, 1, 8, 0.0, 3).unwrap();
        let img = ds.image(0);
        let out = augment_with(&img, false, 2, 2, Rotation::R0);
        assert_eq!(out, img);
    }

    #[test]
    fn double_flip_is_identity() {
        let ds = generate_synthetic(2, 1, 8, 0.3, 4).unwrap();
        let img = ds.image(1);
        let once = augment_with(&img, true, 2, 2, Rotation::R0);
        let twice = augment_with(&once, true, 2, 2, Rotation::R0);
        assert_eq!(twice, img);
    }

    #[test]
    fn rotate_180_reverses_indices() {
        let mut img = Image::zeros(2, 1);
        img.set(0, 0, 0, 1.0);
        let out = augment_with(&img, false, 2, 2, Rotation::R180);
        assert_eq!(out.get(0, 0, 0), 0.0);
        assert_eq!(out.get(1, 1, 0), 1.0);
    }

    #[test]
    fn rotations_compose_to_identity() {
        let ds = generate_synthetic(2, 1, 8, 0.2, 5).unwrap();
        let img = ds.image(0);
        let mut out = img.clone();
        for _ in 0..4 {
            out = augment_with(&out, false, 2, 2, Rotation::R90);
        }
        assert_eq!(out, img);
        let r90 = augment_with(&img, false, 2, 2, Rotation::R90);
        let back = augment_with(&r90, false, 2, 2, Rotation::R270);
        assert_eq!(back, img);
    }

    #[test]
    fn idx_image_fixture_roundtrip() {
        // Hand-built: one 28x28 image, header 00 00 08 03 + dims 1, 28, 28.
        let pixels: Vec<u8> = (0..784).map(|i| (i % 256) as u8).collect();
        let bytes = write_idx_images(1, 28, 28, &pixels);
        assert_eq!(bytes.len(), 4 + 12 + 784);
        assert_eq!(&bytes[..4], &[0x00, 0x00, 0x08, 0x03]);
        let parsed = parse_idx(&bytes, "fixture").unwrap();
        match &parsed {
            IdxData::Images(images) => {
                assert_eq!(images.len(), 1);
                assert_eq!(images[0].shape(), (28, 28));
                assert_eq!(images[0].get(0, 1), 1.0 / 255.0);
            }
            _ => panic!("expected images"),
        }
        assert_eq!(write_idx(&parsed), bytes);
    }

    #[test]
    fn idx_label_fixture() {
        let bytes = write_idx_labels(&[5, 0, 9]);
        assert_eq!(&bytes[..4], &[0x00, 0x00, 0x08, 0x01]);
        match parse_idx(&bytes, "fixture").unwrap() {
            IdxData::Labels(labels) => assert_eq!(labels, vec![5, 0, 9]),
            _ => panic!("expected labels"),
        }
    }

    #[test]
    fn idx_rejects_bad_type_byte() {
        let mut bytes = write_idx_labels(&[1, 2]);
        bytes[2] = 0x09;
        match parse_idx(&bytes, "fixture") {
            Err(Error::IdxFormat { offset: 2, byte: 0x09, .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_rejects_truncation() {
        let bytes = write_idx_labels(&[1, 2, 3]);
        match parse_idx(&bytes[..bytes.len() - 1], "fixture") {
            Err(Error::IdxLength { expected: 3, got: 2, .. }) => {}
            other => panic!("expected length error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_to_idx_roundtrips_bytes() {
        let ds = generate_synthetic(2, 4, 8, 0.15, 21).unwrap();
        let (images, labels) = ds.to_idx().unwrap();
        let parsed_images = parse_idx(&images, "images").unwrap();
        let parsed_labels = parse_idx(&labels, "labels").unwrap();
        assert_eq!(write_idx(&parsed_images), images);
        assert_eq!(write_idx(&parsed_labels), labels);
    }

    proptest! {
        #[test]
        fn augment_preserves_shape_and_range(seed in 0u64..500) {
            let ds = generate_synthetic(2, 1, 8, 0.3, seed).unwrap();
            let img = ds.image(0);
            let mut rng = Rng::new(seed);
            let out = augment(&img, &mut rng);
            prop_assert_eq!(out.side, img.side);
            prop_assert_eq!(out.pixels.len(), img.pixels.len());
            prop_assert!(out.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}
