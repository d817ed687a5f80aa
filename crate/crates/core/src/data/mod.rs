//! Samples, CHASE_DB1 ingestion, augmentation and the synthetic vessel set.

mod augment;
mod synth;

use std::path::{Path, PathBuf};

use image::{imageops, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_with, rotate_bilinear, rotate_nearest, AugmentConfig, AugmentParams};
pub use synth::{synth_vessels, SYNTH_FG_MAX, SYNTH_FG_MIN};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Training and validation counts of the CHASE split.
pub const CHASE_TRAIN: usize = 20;
pub const CHASE_VAL: usize = 8;
pub const CHASE_MASK_SUFFIX: &str = "_1stHO";

/// One image with its binary vessel mask. `image` is `1x3xHxW` in `[0, 1]`,
/// `mask` is `1x1xHxW` with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub id: String,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Tensor<f32>, id: impl Into<String>) -> Result<Self> {
        let s = Sample { image, mask, id: id.into() };
        s.validate()?;
        Ok(s)
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.image.shape().h, self.image.shape().w)
    }

    pub fn validate(&self) -> Result<()> {
        let (i, m) = (self.image.shape(), self.mask.shape());
        if i.n != 1 || i.c != 3 || m.n != 1 || m.c != 1 || (i.h, i.w) != (m.h, m.w) {
            return Err(Error::shape(format!("sample {}: image {i} with mask {m}", self.id)));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dataset(format!("sample {}: image values outside [0, 1]", self.id)));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Dataset(format!("sample {}: mask is not binary", self.id)));
        }
        Ok(())
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.data().iter().filter(|&&v| v == 1.0).count() as f64 / self.mask.len() as f64
    }
}

/// Train/validation split of a dataset held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    /// Source directory, `None` for generated data.
    pub root: Option<PathBuf>,
    pub resolution: (usize, usize),
    /// Set when the directory did not hold the expected 28 pairs.
    pub warning: Option<String>,
}

/// Split counts for `n` samples: exactly 20/8 for 28, otherwise the same ratio.
pub fn split_sizes(n: usize) -> (usize, usize) {
    if n == CHASE_TRAIN + CHASE_VAL {
        return (CHASE_TRAIN, CHASE_VAL);
    }
    let val = ((n * CHASE_VAL) as f64 / (CHASE_TRAIN + CHASE_VAL) as f64).round() as usize;
    let val = val.min(n.saturating_sub(1));
    (n - val, val)
}

impl DatasetIndex {
    /// 28 generated samples split 20/8, the desk-scale stand-in for CHASE.
    pub fn synthetic(seed: u64, hw: (usize, usize)) -> Result<Self> {
        Self::synthetic_sized(seed, hw, CHASE_TRAIN, CHASE_VAL)
    }

    pub fn synthetic_sized(seed: u64, hw: (usize, usize), train: usize, val: usize) -> Result<Self> {
        let mut all = synth_vessels(seed, train + val, hw)?;
        let val_set = all.split_off(train);
        Ok(DatasetIndex { train: all, val: val_set, root: None, resolution: hw, warning: None })
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes every sample as `<id>.png` (RGB) and `<id>_mask.png` under `dir`.
    pub fn export_png(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for s in self.train.iter().chain(&self.val) {
            write_rgb_png(&s.image, &dir.join(format!("{}.png", s.id)))?;
            write_gray_png(&s.mask, &dir.join(format!("{}_mask.png", s.id)))?;
        }
        Ok(())
    }
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("jpg" | "jpeg" | "png" | "tif" | "tiff" | "bmp")
    )
}

/// Loads a CHASE_DB1 directory. Each `Image_XXY.jpg` is paired with its
/// first-observer annotation `Image_XXY_1stHO.png`; pairs are sorted by stem,
/// the first 20 go to training and the last 8 to validation.
pub fn load_chase(dir: &Path, resolution: (usize, usize)) -> Result<DatasetIndex> {
    let (h, w) = resolution;
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::invalid(format!("resolution {h}x{w} must be positive multiples of 8")));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && is_image_file(p));
    files.sort();

    let stem = |p: &Path| p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    let is_annotation = |s: &str| s.ends_with("_1stHO") || s.ends_with("_2ndHO");
    let mut pairs = Vec::new();
    for img in files.iter().filter(|p| !is_annotation(&stem(p))) {
        let s = stem(img);
        let mask = files
            .iter()
            .find(|m| stem(m) == format!("{s}{CHASE_MASK_SUFFIX}"))
            .ok_or_else(|| Error::Dataset(format!("no first-observer mask for image {}", img.display())))?;
        pairs.push((s, img.clone(), mask.clone()));
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!("no CHASE images found in {}", dir.display())));
    }
    pairs.sort_by(|a, b| a.0.cmp(&b.0));

    let n = pairs.len();
    let (n_train, _) = split_sizes(n);
    let warning = (n != CHASE_TRAIN + CHASE_VAL)
        .then(|| format!("expected 28 image/mask pairs, found {n}; split {n_train}/{}", n - n_train));

    let mut samples = Vec::with_capacity(n);
    for (id, img, mask) in pairs {
        let image = fit_resolution_rgb(read_rgb(&img)?, resolution);
        let mask = fit_resolution_mask(read_luma(&mask)?, resolution);
        samples.push(Sample::new(image, mask, id)?);
    }
    let val = samples.split_off(n_train);
    Ok(DatasetIndex { train: samples, val, root: Some(dir.to_path_buf()), resolution, warning })
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn read_rgb(path: &Path) -> Result<ImageBuffer<Rgb<f32>, Vec<f32>>> {
    Ok(decode(path)?.to_rgb32f())
}

fn read_luma(path: &Path) -> Result<ImageBuffer<Luma<f32>, Vec<f32>>> {
    Ok(decode(path)?.to_luma32f())
}

/// Edge-replicating pad on the bottom/right up to multiples of 8, then the
/// largest centered crop with the target aspect ratio.
fn pad_and_crop<P: image::Pixel<Subpixel = f32> + 'static>(
    img: ImageBuffer<P, Vec<f32>>,
    (h, w): (usize, usize),
) -> ImageBuffer<P, Vec<f32>> {
    let (iw, ih) = img.dimensions();
    let (pw, ph) = (iw.div_ceil(8) * 8, ih.div_ceil(8) * 8);
    let padded = ImageBuffer::from_fn(pw, ph, |x, y| *img.get_pixel(x.min(iw - 1), y.min(ih - 1)));
    let (cw, ch) = if (pw as usize) * h >= (ph as usize) * w {
        (((ph as usize * w) / h) as u32, ph)
    } else {
        (pw, ((pw as usize * h) / w) as u32)
    };
    imageops::crop_imm(&padded, (pw - cw) / 2, (ph - ch) / 2, cw, ch).to_image()
}

fn fit_resolution_rgb(img: ImageBuffer<Rgb<f32>, Vec<f32>>, (h, w): (usize, usize)) -> Tensor<f32> {
    let mut img = pad_and_crop(img, (h, w));
    if img.dimensions() != (w as u32, h as u32) {
        img = imageops::resize(&img, w as u32, h as u32, imageops::FilterType::Triangle);
    }
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, p.0[c].clamp(0.0, 1.0));
        }
    }
    t
}

fn fit_resolution_mask(img: ImageBuffer<Luma<f32>, Vec<f32>>, (h, w): (usize, usize)) -> Tensor<f32> {
    let mut img = pad_and_crop(img, (h, w));
    if img.dimensions() != (w as u32, h as u32) {
        img = imageops::resize(&img, w as u32, h as u32, imageops::FilterType::Nearest);
    }
    let data = img.pixels().map(|p| if p.0[0] >= 0.5 { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(Shape::new(1, 1, h, w), data).expect("buffer matches shape")
}

/// Reads any RGB image as a `1x3xHxW` tensor in `[0, 1]` at native size.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = read_rgb(path)?;
    let (w, h) = img.dimensions();
    let mut t = Tensor::zeros(Shape::new(1, 3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, p.0[c].clamp(0.0, 1.0));
        }
    }
    Ok(t)
}

/// Edge-replicating pad on the bottom/right so both sides divide `multiple`.
pub fn pad_to_multiple(t: &Tensor<f32>, multiple: usize) -> Tensor<f32> {
    let s = t.shape();
    let (h, w) = (s.h.div_ceil(multiple) * multiple, s.w.div_ceil(multiple) * multiple);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = src[y.min(s.h - 1) * s.w + x.min(s.w - 1)];
                }
            }
        }
    }
    out
}

/// Top-left `h x w` window of every plane.
pub fn crop_top_left(t: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    if h > s.h || w > s.w {
        return Err(Error::shape(format!("cannot crop {h}x{w} out of {s}")));
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = t.plane(n, c);
            for (y, row) in out.plane_mut(n, c).chunks_mut(w).enumerate() {
                row.copy_from_slice(&src[y * s.w..y * s.w + w]);
            }
        }
    }
    Ok(out)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves channel 0 of sample 0 as an 8-bit grayscale PNG.
pub fn write_gray_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = t.shape();
    let buf: Vec<u8> = t.plane(0, 0).iter().map(|&v| to_u8(v)).collect();
    let img = ImageBuffer::<Luma<u8>, _>::from_raw(s.w as u32, s.h as u32, buf).expect("plane size");
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Saves the first three channels of sample 0 as an 8-bit RGB PNG.
pub fn write_rgb_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.c < 3 {
        return Err(Error::shape(format!("RGB export needs 3 channels, got {s}")));
    }
    let (r, g, b) = (t.plane(0, 0), t.plane(0, 1), t.plane(0, 2));
    let buf: Vec<u8> = (0..s.h * s.w).flat_map(|i| [to_u8(r[i]), to_u8(g[i]), to_u8(b[i])]).collect();
    let img = ImageBuffer::<Rgb<u8>, _>::from_raw(s.w as u32, s.h as u32, buf).expect("plane size");
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Split membership by sample id, convenient for determinism checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl From<&DatasetIndex> for SplitManifest {
    fn from(d: &DatasetIndex) -> Self {
        SplitManifest {
            train: d.train.iter().map(|s| s.id.clone()).collect(),
            val: d.val.iter().map(|s| s.id.clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts() {
        assert_eq!(split_sizes(28), (20, 8));
        assert_eq!(split_sizes(14), (10, 4));
        assert_eq!(split_sizes(1), (1, 0));
    }

    #[test]
    fn pad_then_crop_roundtrip() {
        let t = Tensor::from_vec(Shape::new(1, 1, 3, 5), (0..15).map(|v| v as f32).collect()).unwrap();
        let p = pad_to_multiple(&t, 8);
        assert_eq!(p.shape(), Shape::new(1, 1, 8, 8));
        assert_eq!(p.at(0, 0, 7, 7), 14.0);
        assert_eq!(crop_top_left(&p, 3, 5).unwrap(), t);
    }

    #[test]
    fn chase_like_directory() {
        let dir = tempfile::tempdir().unwrap();
        let d = DatasetIndex::synthetic_sized(1, (24, 32), 3, 1).unwrap();
        for s in d.train.iter().chain(&d.val) {
            let stem = format!("Image_{}", s.id);
            write_rgb_png(&s.image, &dir.path().join(format!("{stem}.png"))).unwrap();
            write_gray_png(&s.mask, &dir.path().join(format!("{stem}_1stHO.png"))).unwrap();
            write_gray_png(&s.mask, &dir.path().join(format!("{stem}_2ndHO.png"))).unwrap();
        }
        let idx = load_chase(dir.path(), (24, 32)).unwrap();
        assert_eq!((idx.train.len(), idx.val.len()), (3, 1));
        assert!(idx.warning.is_some());
        for (a, b) in idx.train.iter().chain(&idx.val).zip(d.train.iter().chain(&d.val)) {
            assert_eq!(a.mask, b.mask);
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-6);
        }
        let again = load_chase(dir.path(), (24, 32)).unwrap();
        assert_eq!(SplitManifest::from(&idx), SplitManifest::from(&again));

        std::fs::remove_file(dir.path().join(format!("Image_{}_1stHO.png", d.val[0].id))).unwrap();
        let err = load_chase(dir.path(), (24, 32)).unwrap_err().to_string();
        assert!(err.contains(&d.val[0].id), "{err}");
    }
}
