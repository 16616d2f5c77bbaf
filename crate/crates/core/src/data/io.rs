use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use super::{decode_disparity, encode_labels, raw_disparity, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn save_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// 8-bit RGB PNG as `[3, H, W]` in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Quantises `[3, H, W]` values in `[0, 1]` to an 8-bit RGB PNG.
pub fn save_rgb(path: &Path, t: &Tensor) -> Result<()> {
    let shape = t.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape("save_rgb", format!("{shape:?} is not [3, H, W]")));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let d = t.data();
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| quantize(d[c * plane + i])))
    });
    img.save(path).map_err(save_err(path))
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit single-channel PNG: `(height, width, pixels)`.
pub fn load_gray8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    match open(path)? {
        DynamicImage::ImageLuma8(img) => Ok((img.height() as usize, img.width() as usize, img.into_raw())),
        other => Err(Error::Dataset(format!(
            "{}: expected 8-bit grayscale, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn save_gray8(path: &Path, h: usize, w: usize, px: &[u8]) -> Result<()> {
    let img = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, px.to_vec())
        .ok_or_else(|| Error::shape("save_gray8", format!("{} pixels for {h}x{w}", px.len())))?;
    img.save(path).map_err(save_err(path))
}

/// 16-bit single-channel PNG; any other bit depth is an error.
pub fn load_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    match open(path)? {
        DynamicImage::ImageLuma16(img) => Ok((img.height() as usize, img.width() as usize, img.into_raw())),
        other => Err(Error::Dataset(format!(
            "{}: expected 16-bit grayscale disparity, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn save_gray16(path: &Path, h: usize, w: usize, px: &[u16]) -> Result<()> {
    let img = ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, px.to_vec())
        .ok_or_else(|| Error::shape("save_gray16", format!("{} pixels for {h}x{w}", px.len())))?;
    img.save(path).map_err(save_err(path))
}

/// Bilinear resize of `[C, H, W]` with half-pixel centres.
pub fn resize_bilinear(t: &Tensor, nh: usize, nw: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::shape("resize_bilinear", format!("{s:?} is not [C, H, W]")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (nh, nw) {
        return Ok(t.clone());
    }
    let axis = |dst: usize, n_src: usize, n_dst: usize| {
        let pos = ((dst as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n_src - 1);
        (i0, i1, (pos - i0 as f64) as f32)
    };
    let d = t.data();
    let mut out = Vec::with_capacity(c * nh * nw);
    for ch in 0..c {
        let p = &d[ch * h * w..(ch + 1) * h * w];
        for y in 0..nh {
            let (y0, y1, fy) = axis(y, h, nh);
            for x in 0..nw {
                let (x0, x1, fx) = axis(x, w, nw);
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, nh, nw], out)
}

/// Nearest-neighbour resize of an `H * W` label map.
pub fn resize_nearest(labels: &[u8], h: usize, w: usize, nh: usize, nw: usize) -> Vec<u8> {
    let pick = |dst: usize, n_src: usize, n_dst: usize| (((dst as f64 + 0.5) * n_src as f64 / n_dst as f64) as usize).min(n_src - 1);
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let sy = pick(y, h, nh);
        for x in 0..nw {
            out.push(labels[sy * w + pick(x, w, nw)]);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ManifestEntry {
    pub rgb: PathBuf,
    pub label: PathBuf,
    pub disparity: Option<PathBuf>,
}

/// Tab-separated `rgb  label  [disparity]` lines relative to `root`.
/// `#` starts a comment; `#! disparity_max=V` records the corpus maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub split: String,
    pub entries: Vec<ManifestEntry>,
    pub disparity_max: Option<f32>,
}

impl Manifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>, split: impl Into<String>) -> Result<Self> {
        let mut entries = Vec::new();
        let mut disparity_max = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if let Some(meta) = line.strip_prefix("#!") {
                if let Some(v) = meta.trim().strip_prefix("disparity_max=") {
                    let v: f32 = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Dataset(format!("line {}: bad disparity_max {v:?}", n + 1)))?;
                    disparity_max = Some(v);
                }
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let entry = match cols.as_slice() {
                [rgb, label] => ManifestEntry {
                    rgb: rgb.into(),
                    label: label.into(),
                    disparity: None,
                },
                [rgb, label, disp] => ManifestEntry {
                    rgb: rgb.into(),
                    label: label.into(),
                    disparity: Some(disp.into()),
                },
                _ => {
                    return Err(Error::Dataset(format!(
                        "line {}: expected 2 or 3 tab-separated fields, got {}",
                        n + 1,
                        cols.len()
                    )))
                }
            };
            entries.push(entry);
        }
        entries.sort();
        Ok(Manifest {
            root: root.into(),
            split: split.into(),
            entries,
            disparity_max,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let split = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::parse(&text, root, split)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# split: {}\n", self.split);
        if let Some(m) = self.disparity_max {
            s.push_str(&format!("#! disparity_max={m}\n"));
        }
        for e in &self.entries {
            s.push_str(&e.rgb.to_string_lossy());
            s.push('\t');
            s.push_str(&e.label.to_string_lossy());
            if let Some(d) = &e.disparity {
                s.push('\t');
                s.push_str(&d.to_string_lossy());
            }
            s.push('\n');
        }
        s
    }

    pub fn path(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Every referenced file must exist.
    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            for p in [Some(&e.rgb), Some(&e.label), e.disparity.as_ref()].into_iter().flatten() {
                let full = self.path(p);
                if !full.is_file() {
                    return Err(Error::Dataset(format!("missing file {}", full.display())));
                }
            }
        }
        Ok(())
    }
}

/// Loads every manifest entry, resizing to `size` when given.
pub fn load_dataset(m: &Manifest, size: Option<(usize, usize)>) -> Result<Vec<Sample>> {
    m.check_files()?;
    if m.entries.is_empty() {
        return Err(Error::Dataset(format!("manifest {:?} has no entries", m.split)));
    }
    let mut raw = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        let rgb = load_rgb(&m.path(&e.rgb))?;
        let (lh, lw, lab) = load_gray8(&m.path(&e.label))?;
        let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
        if (lh, lw) != (h, w) {
            return Err(Error::Dataset(format!("{}: label size differs from image", e.label.display())));
        }
        let disp = match &e.disparity {
            Some(p) => {
                let (dh, dw, px) = load_gray16(&m.path(p))?;
                if (dh, dw) != (h, w) {
                    return Err(Error::Dataset(format!("{}: disparity size differs from image", p.display())));
                }
                Some(px)
            }
            None => None,
        };
        raw.push((rgb, encode_labels(&lab), disp));
    }
    let max = match m.disparity_max {
        Some(v) => v,
        None => raw
            .iter()
            .filter_map(|(_, _, d)| d.as_ref())
            .flat_map(|d| d.iter().map(|&p| raw_disparity(p)))
            .fold(0.0, f32::max),
    };
    raw.into_iter()
        .map(|(rgb, labels, disp)| {
            let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
            let depth = disp.map(|d| decode_disparity(&d, h, w, max.max(f32::MIN_POSITIVE))).transpose()?;
            let s = Sample { rgb, depth, labels };
            match size {
                Some((nh, nw)) if (nh, nw) != (h, w) => Ok(Sample {
                    rgb: resize_bilinear(&s.rgb, nh, nw)?,
                    depth: s.depth.as_ref().map(|d| resize_bilinear(d, nh, nw)).transpose()?,
                    labels: resize_nearest(&s.labels, h, w, nh, nw),
                }),
                _ => Ok(s),
            }
        })
        .collect()
}
