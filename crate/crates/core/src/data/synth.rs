//! Procedural street scenes with known labels, plus hazed copies.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::{quantize, save_gray16, save_gray8, save_rgb, Manifest, ManifestEntry};
use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gray level the haze blends toward.
pub const HAZE_LEVEL: f32 = 0.7;

/// Raw disparity (pixels) of normalised depth 1.0 in written corpora.
pub const DISPARITY_SCALE: f32 = 100.0;

const PALETTE: [[u8; 3]; 19] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [255, 0, 0],
    [0, 0, 142],
    [0, 0, 70],
    [0, 60, 100],
    [0, 80, 100],
    [0, 0, 230],
    [119, 11, 32],
];

const ROAD: u8 = 0;
const SIDEWALK: u8 = 1;
const BUILDING: u8 = 2;
const SIGN: u8 = 7;
const VEGETATION: u8 = 8;
const TERRAIN: u8 = 9;
const SKY: u8 = 10;
const PERSON: u8 = 11;
const CAR: u8 = 13;

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub clean: Vec<Sample>,
    pub hazy: Vec<Sample>,
    pub alphas: Vec<f32>,
}

struct Canvas {
    h: usize,
    w: usize,
    labels: Vec<u8>,
    depth: Vec<f32>,
    region: Vec<u16>,
}

impl Canvas {
    fn fill(&mut self, y0: usize, y1: usize, x0: usize, x1: usize, class: u8, depth: f32, region: u16) {
        for y in y0.min(self.h)..y1.min(self.h) {
            for x in x0.min(self.w)..x1.min(self.w) {
                let i = y * self.w + x;
                self.labels[i] = class;
                self.depth[i] = depth;
                self.region[i] = region;
            }
        }
    }
}

fn quantize_depth(d: f32) -> u16 {
    if d <= 0.0 {
        0
    } else {
        ((d * DISPARITY_SCALE * 256.0).round() as u32 + 1).min(u16::MAX as u32) as u16
    }
}

fn dequantize_depth(p: u16) -> f32 {
    super::raw_disparity(p) / DISPARITY_SCALE
}

fn scene(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Sample {
    let mut c = Canvas {
        h,
        w,
        labels: vec![SKY; h * w],
        depth: vec![0.0; h * w],
        region: vec![0; h * w],
    };
    let (hf, wf) = (h as f32, w as f32);
    let horizon = (hf * rng.random_range(0.35..0.5)) as usize;
    let ground = |y: usize| 0.1 + 0.9 * (y - horizon) as f32 / (h - horizon) as f32;
    let mut region = 1u16;

    // ground: road trapezoid, sidewalks beside it, terrain beyond
    let centre = wf * rng.random_range(0.4..0.6);
    let walk = rng.random_range(0.08..0.16);
    for y in horizon..h {
        let t = (y - horizon) as f32 / (h - horizon) as f32;
        let half = wf * (0.08 + 0.45 * t);
        let walk_w = wf * walk * (0.3 + t);
        for x in 0..w {
            let dx = (x as f32 + 0.5 - centre).abs();
            let class = if dx < half {
                ROAD
            } else if dx < half + walk_w {
                SIDEWALK
            } else {
                TERRAIN
            };
            let i = y * w + x;
            c.labels[i] = class;
            c.depth[i] = ground(y);
            c.region[i] = 1000 + class as u16;
        }
    }

    // skyline
    let mut x = 0usize;
    while x < w {
        let bw = (wf * rng.random_range(0.12..0.3)) as usize + 4;
        let top = (hf * rng.random_range(0.05..0.3)) as usize;
        let class = if rng.random_bool(0.3) { VEGETATION } else { BUILDING };
        if rng.random_bool(0.85) {
            let d = rng.random_range(0.05..0.2);
            c.fill(top.min(horizon.saturating_sub(4)), horizon, x, x + bw, class, d, region);
            region += 1;
        }
        x += bw;
    }
    if rng.random_bool(0.6) {
        let s = (hf * 0.12) as usize + 4;
        let sx = rng.random_range(0..w - s);
        let sy = rng.random_range(s.min(horizon / 2)..horizon.max(s + 1)).saturating_sub(s);
        c.fill(sy, sy + s, sx, sx + s, SIGN, 0.3, region);
        region += 1;
    }

    // objects standing on the ground, far to near so nearer ones occlude
    let mut objects: Vec<(usize, u8)> = Vec::new();
    for _ in 0..rng.random_range(1..=3) {
        objects.push((rng.random_range(horizon + 4..h), CAR));
    }
    for _ in 0..rng.random_range(0..=2) {
        objects.push((rng.random_range(horizon + 4..h), PERSON));
    }
    objects.sort();
    for (bottom, class) in objects {
        let t = (bottom - horizon) as f32 / (h - horizon) as f32;
        let (ow, oh) = match class {
            CAR => {
                let ow = wf * (0.08 + 0.18 * t) + 6.0;
                (ow, ow * rng.random_range(0.45..0.6))
            }
            _ => {
                let ow = wf * (0.03 + 0.05 * t) + 4.0;
                (ow, ow * rng.random_range(2.2..2.8))
            }
        };
        let (ow, oh) = (ow as usize, oh as usize);
        let cx = rng.random_range(0..w.saturating_sub(ow).max(1));
        let top = (bottom + 1).saturating_sub(oh);
        c.fill(top, bottom + 1, cx, cx + ow, class, ground(bottom), region);
        region += 1;
    }

    // colours: palette + per-region tint + per-pixel noise, 8-bit quantised
    let mut tints = std::collections::HashMap::new();
    let plane = h * w;
    let mut rgb = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        let tint = *tints
            .entry(c.region[i])
            .or_insert_with(|| [0; 3].map(|_: u8| rng.random_range(-0.06f32..0.06)));
        let base = PALETTE[c.labels[i] as usize];
        for ch in 0..3 {
            let v = base[ch] as f32 / 255.0 + tint[ch] + rng.random_range(-0.04f32..0.04);
            rgb[ch * plane + i] = quantize(v) as f32 / 255.0;
        }
    }
    let depth = c.depth.iter().map(|&d| dequantize_depth(quantize_depth(d))).collect();
    Sample {
        rgb: Tensor::new(vec![3, h, w], rgb).expect("rgb size"),
        depth: Some(Tensor::new(vec![1, h, w], depth).expect("depth size")),
        labels: c.labels,
    }
}

/// `(1 - alpha) * clean + alpha * HAZE_LEVEL`; labels and depth unchanged.
pub fn haze(s: &Sample, alpha: f32) -> Sample {
    let data = s.rgb.data().iter().map(|&v| (1.0 - alpha) * v + alpha * HAZE_LEVEL).collect();
    Sample {
        rgb: Tensor::new(s.rgb.shape().to_vec(), data).expect("same size"),
        ..s.clone()
    }
}

/// `n` scenes of `h x w` and their hazed copies, `alpha ~ U[0.3, 0.7]` per
/// image. Scene `i` depends only on `(seed, i)`.
pub fn synth_fog_corpus(n: usize, h: usize, w: usize, seed: u64) -> Result<SynthCorpus> {
    if h % 8 != 0 || w % 8 != 0 || h < 16 || w < 16 {
        return Err(Error::invalid("synth_fog_corpus", format!("size {h}x{w} must be a multiple of 8, at least 16")));
    }
    let mut out = SynthCorpus {
        clean: Vec::with_capacity(n),
        hazy: Vec::with_capacity(n),
        alphas: Vec::with_capacity(n),
    };
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, &[crate::seed::label("scene"), i as u64]));
        let s = scene(h, w, &mut rng);
        let alpha = rng.random_range(0.3f32..=0.7);
        out.hazy.push(haze(&s, alpha));
        out.clean.push(s);
        out.alphas.push(alpha);
    }
    Ok(out)
}

/// Writes PNGs under `dir/{clean,hazy}` and manifests `dir/clean.txt`,
/// `dir/hazy.txt`; returns the manifest paths.
pub fn write_corpus(c: &SynthCorpus, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    for sub in ["clean", "hazy"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut clean = Vec::new();
    let mut hazy = Vec::new();
    for (i, (cs, hs)) in c.clean.iter().zip(&c.hazy).enumerate() {
        let (h, w) = (cs.height(), cs.width());
        let label = PathBuf::from(format!("clean/label_{i:04}.png"));
        let disp = PathBuf::from(format!("clean/disp_{i:04}.png"));
        save_gray8(&dir.join(&label), h, w, &cs.labels)?;
        if let Some(d) = &cs.depth {
            let px: Vec<u16> = d.data().iter().map(|&v| quantize_depth(v)).collect();
            save_gray16(&dir.join(&disp), h, w, &px)?;
        }
        let disparity = cs.depth.as_ref().map(|_| disp.clone());
        for (set, sample, sub) in [(&mut clean, cs, "clean"), (&mut hazy, hs, "hazy")] {
            let rgb = PathBuf::from(format!("{sub}/rgb_{i:04}.png"));
            save_rgb(&dir.join(&rgb), &sample.rgb)?;
            set.push(ManifestEntry {
                rgb,
                label: label.clone(),
                disparity: disparity.clone(),
            });
        }
    }
    let mut paths = Vec::new();
    for (name, entries) in [("clean", clean), ("hazy", hazy)] {
        let m = Manifest {
            root: dir.to_path_buf(),
            split: name.to_string(),
            entries,
            disparity_max: Some(1.0 * DISPARITY_SCALE),
        };
        let p = dir.join(format!("{name}.txt"));
        fs::write(&p, m.to_text()).map_err(|e| Error::io(&p, e))?;
        paths.push(p);
    }
    Ok((paths[0].clone(), paths[1].clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{validate_sample, NUM_CLASSES};

    #[test]
    fn corpus_is_seeded_and_valid() {
        let a = synth_fog_corpus(3, 32, 64, 9).unwrap();
        let b = synth_fog_corpus(3, 32, 64, 9).unwrap();
        assert_eq!(a.clean, b.clean);
        assert_eq!(a.hazy, b.hazy);
        for s in a.clean.iter().chain(&a.hazy) {
            validate_sample(s, NUM_CLASSES).unwrap();
        }
        assert!(a.alphas.iter().all(|a| (0.3..=0.7).contains(a)));
        assert!(synth_fog_corpus(1, 30, 64, 0).is_err());
    }

    #[test]
    fn haze_identity() {
        let c = synth_fog_corpus(1, 16, 16, 1).unwrap();
        assert_eq!(haze(&c.clean[0], 0.0), c.clean[0]);
        let a = c.alphas[0];
        let (x, y) = (c.clean[0].rgb.data(), c.hazy[0].rgb.data());
        let mad: f64 = x.iter().zip(y).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / x.len() as f64;
        let pred: f64 = a as f64 * x.iter().map(|p| (p - HAZE_LEVEL).abs() as f64).sum::<f64>() / x.len() as f64;
        assert!((mad - pred).abs() < 1e-6);
    }
}
