//! Samples, luminance/depth input assembly, augmentation and batching.

mod io;
mod synth;

pub use io::{
    load_dataset, load_gray16, load_gray8, load_rgb, resize_bilinear, resize_nearest, save_gray16, save_gray8,
    save_rgb, Manifest, ManifestEntry,
};
pub use synth::{haze, synth_fog_corpus, write_corpus, SynthCorpus, DISPARITY_SCALE, HAZE_LEVEL};

use rand::Rng;

use crate::error::{Error, Result};
use crate::loss::IGNORE_LABEL;
use crate::tensor::Tensor;

/// Luminance coefficients for R, G, B.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.144];

pub const NUM_CLASSES: usize = 19;

/// One image with optional normalised disparity and a train-ID label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Tensor,
    /// `[1, H, W]` in `[0, 1]`.
    pub depth: Option<Tensor>,
    /// `H * W` labels in `0..19` or 255.
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }

    pub fn luminance(&self, coeffs: [f64; 3]) -> Tensor {
        luminance(&self.rgb, coeffs)
    }
}

/// `c_r R + c_g G + c_b B` of a `[3, H, W]` image, without clamping.
pub fn luminance(rgb: &Tensor, coeffs: [f64; 3]) -> Tensor {
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    let plane = h * w;
    let d = rgb.data();
    let [r, g, b] = coeffs.map(|c| c as f32);
    let data = (0..plane).map(|i| r * d[i] + g * d[plane + i] + b * d[2 * plane + i]).collect();
    Tensor::new(vec![1, h, w], data).expect("plane size")
}

/// Raw disparity of a 16-bit pixel; 0 marks an invalid measurement.
pub fn raw_disparity(p: u16) -> f32 {
    if p == 0 {
        0.0
    } else {
        (p as f32 - 1.0) / 256.0
    }
}

/// Raw disparity scaled by the corpus maximum and clamped into `[0, 1]`.
pub fn decode_disparity(raw: &[u16], h: usize, w: usize, max: f32) -> Result<Tensor> {
    if raw.len() != h * w {
        return Err(Error::shape("decode_disparity", format!("{} pixels for {h}x{w}", raw.len())));
    }
    if !(max > 0.0) {
        return Err(Error::invalid("decode_disparity", format!("corpus maximum {max} must be positive")));
    }
    let data = raw.iter().map(|&p| (raw_disparity(p) / max).clamp(0.0, 1.0)).collect();
    Tensor::new(vec![1, h, w], data)
}

/// `[L, D]` or `[L]` channels for the luminance encoder.
pub fn make_ld(sample: &Sample, use_depth: bool, coeffs: [f64; 3]) -> Result<Tensor> {
    let l = sample.luminance(coeffs);
    if !use_depth {
        return Ok(l);
    }
    let d = sample
        .depth
        .as_ref()
        .ok_or_else(|| Error::Dataset("depth requested but the sample has none".into()))?;
    let (h, w) = (sample.height(), sample.width());
    let mut data = l.into_data();
    data.extend_from_slice(d.data());
    Tensor::new(vec![2, h, w], data)
}

/// Train IDs 0..=18 pass through, anything else becomes void.
pub fn encode_labels(raw: &[u8]) -> Vec<u8> {
    raw.iter()
        .map(|&v| if (v as usize) < NUM_CLASSES { v } else { IGNORE_LABEL })
        .collect()
}

/// Per-class pixel histogram, void excluded.
pub fn label_histogram(labels: &[u8], k: usize) -> Vec<u64> {
    let mut h = vec![0; k];
    for &l in labels {
        if (l as usize) < k {
            h[l as usize] += 1;
        }
    }
    h
}

fn flip_planes<T: Copy>(data: &[T], w: usize) -> Vec<T> {
    data.chunks(w).flat_map(|row| row.iter().rev().copied()).collect()
}

fn flip_tensor(t: &Tensor) -> Tensor {
    let w = *t.shape().last().expect("rank >= 1");
    Tensor::new(t.shape().to_vec(), flip_planes(t.data(), w)).expect("same size")
}

/// Mirrors every plane of the sample along its width.
pub fn hflip(s: &Sample) -> Sample {
    Sample {
        rgb: flip_tensor(&s.rgb),
        depth: s.depth.as_ref().map(flip_tensor),
        labels: flip_planes(&s.labels, s.width()),
    }
}

/// Flips with probability 1/2.
pub fn augment_hflip(s: &Sample, rng: &mut impl Rng) -> Sample {
    if rng.random_bool(0.5) {
        hflip(s)
    } else {
        s.clone()
    }
}

/// Checks the structural invariants of a sample.
pub fn validate_sample(s: &Sample, num_classes: usize) -> Result<()> {
    let bad = |d: String| Err(Error::Dataset(d));
    let shape = s.rgb.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return bad(format!("rgb shape {shape:?} is not [3, H, W]"));
    }
    let (h, w) = (shape[1], shape[2]);
    if s.rgb.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return bad("rgb values outside [0, 1]".into());
    }
    if let Some(d) = &s.depth {
        if d.shape() != [1, h, w] {
            return bad(format!("depth shape {:?} does not match {h}x{w}", d.shape()));
        }
        if d.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("depth values outside [0, 1]".into());
        }
    }
    if s.labels.len() != h * w {
        return bad(format!("{} labels for {h}x{w}", s.labels.len()));
    }
    if let Some(l) = s.labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes) {
        return bad(format!("label {l} out of range"));
    }
    Ok(())
}

/// Batched network inputs.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rgb: Tensor,
    pub ld: Tensor,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn new(samples: &[&Sample], use_depth: bool, coeffs: [f64; 3]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let rgb: Vec<&Tensor> = samples.iter().map(|s| &s.rgb).collect();
        let ld = samples
            .iter()
            .map(|s| make_ld(s, use_depth, coeffs))
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            rgb: Tensor::stack(&rgb)?,
            ld: Tensor::stack(&ld.iter().collect::<Vec<_>>())?,
            labels: samples.iter().flat_map(|s| s.labels.iter().copied()).collect(),
        })
    }
}

/// LD input for images already batched as `[N, 3, H, W]`, reusing each
/// sample's depth.
pub fn ld_from_images(images: &Tensor, samples: &[&Sample], use_depth: bool, coeffs: [f64; 3]) -> Result<Tensor> {
    let [n, ..] = images.dims4("ld_from_images")?;
    if n != samples.len() {
        return Err(Error::shape("ld_from_images", format!("{n} images for {} samples", samples.len())));
    }
    let parts = (0..n)
        .map(|i| {
            let s = Sample {
                rgb: images.batch_item(i)?.reshape(samples[i].rgb.shape().to_vec())?,
                depth: samples[i].depth.clone(),
                labels: Vec::new(),
            };
            make_ld(&s, use_depth, coeffs)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn pixel(r: f32, g: f32, b: f32) -> Tensor {
        Tensor::new([3, 1, 1], vec![r, g, b]).unwrap()
    }

    #[test]
    fn luminance_spot_values() {
        assert_eq!(luminance(&pixel(0.0, 0.0, 0.0), LUMA).data(), &[0.0]);
        assert_eq!(luminance(&pixel(1.0, 0.0, 0.0), LUMA).data(), &[0.299]);
        assert_eq!(luminance(&pixel(1.0, 1.0, 1.0), LUMA).data()[0], 0.299f32 + 0.587 + 0.144);
        assert!((luminance(&pixel(1.0, 1.0, 1.0), LUMA).data()[0] - 1.03).abs() < 1e-6);
    }

    #[test]
    fn disparity_convention() {
        assert_eq!(raw_disparity(0), 0.0);
        assert_eq!(raw_disparity(257), 1.0);
        let d = decode_disparity(&[0, 257, 513, 65535], 2, 2, 2.0).unwrap();
        assert_eq!(&d.data()[..3], &[0.0, 0.5, 1.0]);
        assert!(d.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn labels_void_mapping() {
        assert_eq!(encode_labels(&[7, 18, 19, 200, 255]), vec![7, 18, 255, 255, 255]);
    }

    #[test]
    fn ld_channels() {
        let s = Sample {
            rgb: Tensor::full([3, 2, 2], 0.5),
            depth: Some(Tensor::full([1, 2, 2], 0.25)),
            labels: vec![0; 4],
        };
        let ld = make_ld(&s, true, LUMA).unwrap();
        assert_eq!(ld.shape(), &[2, 2, 2]);
        assert_eq!(&ld.data()[..4], s.luminance(LUMA).data());
        assert_eq!(make_ld(&s, false, LUMA).unwrap().shape(), &[1, 2, 2]);
        let no_depth = Sample { depth: None, ..s };
        assert!(make_ld(&no_depth, true, LUMA).is_err());
    }

    #[test]
    fn flip_is_involution_and_consistent() {
        let s = Sample {
            rgb: Tensor::from_fn([3, 2, 3], |i| i as f32 / 18.0),
            depth: Some(Tensor::from_fn([1, 2, 3], |i| i as f32 / 6.0)),
            labels: vec![0, 1, 2, 3, 4, 5],
        };
        let f = hflip(&s);
        assert_eq!(f.labels, vec![2, 1, 0, 5, 4, 3]);
        assert_eq!(f.rgb.data()[0], s.rgb.data()[2]);
        assert_eq!(hflip(&f), s);
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..8 {
            assert_eq!(augment_hflip(&s, &mut a), augment_hflip(&s, &mut b));
        }
    }
}
