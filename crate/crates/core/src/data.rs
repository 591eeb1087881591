//! Stereo pairs: synthetic generation, loading, cropping and batching.

use std::path::Path;

use bisic_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Planar RGB image, `3 × height × width`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image { height, width, data: vec![0.0; 3 * height * width] }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        assert!(top + height <= self.height && left + width <= self.width, "crop out of bounds");
        let mut out = Image::new(height, width);
        for c in 0..3 {
            for y in 0..height {
                let src = self.idx(c, top + y, left);
                let dst = out.idx(c, y, 0);
                out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
            }
        }
        out
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn load(path: &Path) -> std::result::Result<Image, String> {
        let img = image::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let eight_bit = matches!(
            img.color(),
            image::ColorType::L8 | image::ColorType::La8 | image::ColorType::Rgb8 | image::ColorType::Rgba8
        );
        if !eight_bit {
            return Err(format!("{}: expected 8-bit samples, got {:?}", path.display(), img.color()));
        }
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut out = Image::new(h, w);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
            }
        }
        Ok(out)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Writes a PNG through a temporary file so a failed write leaves nothing behind.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let tmp = tmp_path(path);
        self.to_rgb8()
            .save_with_format(&tmp, image::ImageFormat::Png)
            .map_err(|e| Error::Other(format!("cannot write {}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

/// Sibling temporary path used for write-then-rename.
pub fn tmp_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairMeta {
    pub source: String,
    /// Ground-truth horizontal disparity in pixels, when known.
    pub disparity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StereoPair {
    pub left: Image,
    pub right: Image,
    pub meta: PairMeta,
}

impl StereoPair {
    pub fn height(&self) -> usize {
        self.left.height
    }

    pub fn width(&self) -> usize {
        self.left.width
    }

    pub fn view(&self, v: usize) -> &Image {
        if v == 0 {
            &self.left
        } else {
            &self.right
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> StereoPair {
        StereoPair {
            left: self.left.crop(top, left, height, width),
            right: self.right.crop(top, left, height, width),
            meta: self.meta.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub disparity: usize,
    pub noise_level: f64,
    pub occlusion_fraction: f64,
}

impl SyntheticSpec {
    pub fn new(seed: u64, height: usize, width: usize, disparity: usize) -> Self {
        SyntheticSpec { seed, height, width, disparity, noise_level: 0.0, occlusion_fraction: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || !self.height.is_multiple_of(64) {
            return Err(Error::Param(format!("height={} must be a positive multiple of 64", self.height)));
        }
        if self.width == 0 || !self.width.is_multiple_of(64) {
            return Err(Error::Param(format!("width={} must be a positive multiple of 64", self.width)));
        }
        if self.disparity * 4 >= self.width {
            return Err(Error::Param(format!(
                "disparity={} must be below width/4={}",
                self.disparity,
                self.width as f64 / 4.0
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Param(format!("noise_level={} must lie in [0, 1]", self.noise_level)));
        }
        if !(0.0..=1.0).contains(&self.occlusion_fraction) {
            return Err(Error::Param(format!(
                "occlusion_fraction={} must lie in [0, 1]",
                self.occlusion_fraction
            )));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Param(format!("cannot parse {key}={value:?}"));
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "height" => self.height = value.parse().map_err(|_| bad())?,
            "width" => self.width = value.parse().map_err(|_| bad())?,
            "disparity" => self.disparity = value.parse().map_err(|_| bad())?,
            "noise_level" => self.noise_level = value.parse().map_err(|_| bad())?,
            "occlusion_fraction" => self.occlusion_fraction = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Band-limited random texture plus flat rectangles, drawn on a `height × width` canvas.
fn texture(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Image {
    let mut img = Image::new(height, width);
    let waves = 6;
    let mut params = Vec::with_capacity(waves);
    for _ in 0..waves {
        let fx: f64 = rng.gen_range(-0.2..0.2);
        let fy: f64 = rng.gen_range(-0.2..0.2);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp: [f64; 3] = [rng.gen_range(0.02..0.12), rng.gen_range(0.02..0.12), rng.gen_range(0.02..0.12)];
        params.push((fx, fy, phase, amp));
    }
    let base: [f64; 3] = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
    for y in 0..height {
        for x in 0..width {
            for (c, &b) in base.iter().enumerate() {
                let mut v = b;
                for &(fx, fy, phase, amp) in &params {
                    v += amp[c] * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase).sin();
                }
                img.set(c, y, x, v as f32);
            }
        }
    }
    let rects = rng.gen_range(6..14);
    for _ in 0..rects {
        let rh = rng.gen_range(4..=(height / 3).max(5));
        let rw = rng.gen_range(4..=(width / 3).max(5));
        let top = rng.gen_range(0..height.saturating_sub(rh).max(1));
        let left = rng.gen_range(0..width.saturating_sub(rw).max(1));
        let color: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        for y in top..(top + rh).min(height) {
            for x in left..(left + rw).min(width) {
                for (c, &col) in color.iter().enumerate() {
                    img.set(c, y, x, col);
                }
            }
        }
    }
    img.clamp01();
    img
}

/// Correlated stereo pair: the right view sees the same scene shifted left by
/// `disparity` pixels, plus independent noise and view-specific occluders.
pub fn generate_synthetic_pair(spec: &SyntheticSpec) -> Result<StereoPair> {
    spec.validate()?;
    let (h, w, d) = (spec.height, spec.width, spec.disparity);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let canvas = texture(&mut rng, h, w + d);
    let mut left = canvas.crop(0, 0, h, w);
    let mut right = canvas.crop(0, d, h, w);

    if spec.occlusion_fraction > 0.0 {
        let occluder = texture(&mut rng, h, w);
        let target = (spec.occlusion_fraction * (h * w) as f64).ceil() as usize;
        let mut covered = vec![false; h * w];
        let mut count = 0usize;
        while count < target {
            let rh = rng.gen_range(2..=(h / 4).max(3));
            let rw = rng.gen_range(2..=(w / 4).max(3));
            let top = rng.gen_range(0..h);
            let lft = rng.gen_range(0..w);
            for y in top..(top + rh).min(h) {
                for x in lft..(lft + rw).min(w) {
                    if count >= target {
                        break;
                    }
                    if !covered[y * w + x] {
                        covered[y * w + x] = true;
                        count += 1;
                        for c in 0..3 {
                            right.set(c, y, x, occluder.get(c, y, x));
                        }
                    }
                }
            }
        }
    }

    if spec.noise_level > 0.0 {
        let a = spec.noise_level as f32;
        for img in [&mut left, &mut right] {
            for v in &mut img.data {
                *v += rng.gen_range(-a..=a);
            }
            img.clamp01();
        }
    }

    Ok(StereoPair {
        left,
        right,
        meta: PairMeta { source: format!("synthetic:{}", spec.seed), disparity: Some(d as f64) },
    })
}

/// Default generator settings for desk-scale datasets: disparity drawn per
/// pair, light noise and a few occluders.
pub fn desk_spec(seed: u64, height: usize, width: usize) -> SyntheticSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let max_d = (width / 4).saturating_sub(1).min(12);
    SyntheticSpec {
        seed,
        height,
        width,
        disparity: rng.gen_range(2.min(max_d)..=max_d),
        noise_level: 0.02,
        occlusion_fraction: 0.05,
    }
}

pub fn synthetic_dataset(count: usize, height: usize, width: usize, base_seed: u64) -> Result<Vec<StereoPair>> {
    (0..count).map(|i| generate_synthetic_pair(&desk_spec(base_seed.wrapping_add(i as u64), height, width))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropRule {
    /// Center crop to the largest multiples of 64.
    Divisible64,
    /// Remove 64 rows at the top, 256 at the bottom and 128 columns per side.
    Cityscapes,
}

impl std::str::FromStr for CropRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "divisible64" => Ok(CropRule::Divisible64),
            "cityscapes" => Ok(CropRule::Cityscapes),
            _ => Err(Error::Param(format!("crop rule must be divisible64 or cityscapes, got {s:?}"))),
        }
    }
}

pub fn preprocess(pair: &StereoPair, rule: CropRule) -> Result<StereoPair> {
    let (h, w) = (pair.height(), pair.width());
    if pair.right.height != h || pair.right.width != w {
        return Err(Error::Shape(format!(
            "views differ in size: {}x{} vs {}x{}",
            w, h, pair.right.width, pair.right.height
        )));
    }
    if h < 64 || w < 64 {
        return Err(Error::TooSmall(format!("{w}x{h} is below 64x64")));
    }
    let (top, left, nh, nw) = match rule {
        CropRule::Divisible64 => {
            let nh = h / 64 * 64;
            let nw = w / 64 * 64;
            ((h - nh) / 2, (w - nw) / 2, nh, nw)
        }
        CropRule::Cityscapes => {
            if h <= 64 + 256 || w <= 2 * 128 {
                return Err(Error::TooSmall(format!("{w}x{h} is too small for the cityscapes crop")));
            }
            let (nh, nw) = (h - 64 - 256, w - 2 * 128);
            if nh < 64 || nw < 64 {
                return Err(Error::TooSmall(format!("cityscapes crop of {w}x{h} leaves {nw}x{nh}")));
            }
            if nh % 64 != 0 || nw % 64 != 0 {
                return Err(Error::Shape(format!("cityscapes crop leaves {nw}x{nh}, not divisible by 64")));
            }
            (64, 128, nh, nw)
        }
    };
    Ok(pair.crop(top, left, nh, nw))
}

pub fn load_pair(path_left: &Path, path_right: &Path) -> Result<StereoPair> {
    let err = |reason: String| Error::Load {
        left: path_left.to_path_buf(),
        right: path_right.to_path_buf(),
        reason,
    };
    let left = Image::load(path_left).map_err(err)?;
    let right = Image::load(path_right).map_err(err)?;
    if (left.height, left.width) != (right.height, right.width) {
        return Err(err(format!(
            "dimension mismatch: {}x{} vs {}x{}",
            left.width, left.height, right.width, right.height
        )));
    }
    Ok(StereoPair {
        left,
        right,
        meta: PairMeta { source: format!("{}|{}", path_left.display(), path_right.display()), disparity: None },
    })
}

pub const LEFT_SUFFIX: &str = "_left.png";
pub const RIGHT_SUFFIX: &str = "_right.png";

/// Writes `<dir>/<stem>_left.png` and `<dir>/<stem>_right.png`.
pub fn save_pair(dir: &Path, stem: &str, pair: &StereoPair) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    pair.left.save_png(&dir.join(format!("{stem}{LEFT_SUFFIX}")))?;
    pair.right.save_png(&dir.join(format!("{stem}{RIGHT_SUFFIX}")))
}

/// Loads every `<stem>_left.png` / `<stem>_right.png` pair in `dir`, ordered by stem.
pub fn load_dir(dir: &Path) -> Result<Vec<StereoPair>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        if let Some(stem) = e.file_name().to_str().and_then(|n| n.strip_suffix(LEFT_SUFFIX)) {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Param(format!("no *{LEFT_SUFFIX} files in {}", dir.display())));
    }
    stems
        .iter()
        .map(|s| load_pair(&dir.join(format!("{s}{LEFT_SUFFIX}")), &dir.join(format!("{s}{RIGHT_SUFFIX}"))))
        .collect()
}

/// Stacks pairs into a `[B, 3, 2, H, W]` tensor (view axis second to last spatial).
pub fn pairs_to_tensor(pairs: &[&StereoPair]) -> Tensor<f32> {
    assert!(!pairs.is_empty());
    let (h, w) = (pairs[0].height(), pairs[0].width());
    let plane = h * w;
    let mut data = Vec::with_capacity(pairs.len() * 6 * plane);
    for p in pairs {
        assert_eq!((p.height(), p.width()), (h, w), "batch pairs differ in size");
        for c in 0..3 {
            for v in 0..2 {
                let img = p.view(v);
                data.extend_from_slice(&img.data[c * plane..(c + 1) * plane]);
            }
        }
    }
    Tensor::from_vec(&[pairs.len(), 3, 2, h, w], data)
}

/// Inverse of [`pairs_to_tensor`] for one batch element.
pub fn tensor_to_pair(t: &Tensor<f32>, b: usize) -> StereoPair {
    let s = t.shape();
    let (h, w) = (s[3], s[4]);
    let plane = h * w;
    let mut views = [Image::new(h, w), Image::new(h, w)];
    for c in 0..3 {
        for (v, img) in views.iter_mut().enumerate() {
            let src = (((b * 3 + c) * 2) + v) * plane;
            img.data[c * plane..(c + 1) * plane].copy_from_slice(&t.data()[src..src + plane]);
        }
    }
    let [left, right] = views;
    StereoPair { left, right, meta: PairMeta::default() }
}

pub fn random_crop(pair: &StereoPair, size: usize, rng: &mut impl Rng) -> Result<StereoPair> {
    let (h, w) = (pair.height(), pair.width());
    if h < size || w < size {
        return Err(Error::TooSmall(format!("{w}x{h} cannot be cropped to {size}x{size}")));
    }
    let top = rng.gen_range(0..=h - size);
    let left = rng.gen_range(0..=w - size);
    Ok(pair.crop(top, left, size, size))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shift_gives_identical_views() {
        let p = generate_synthetic_pair(&SyntheticSpec::new(3, 64, 64, 0)).unwrap();
        assert_eq!(p.left, p.right);
    }

    #[test]
    fn right_view_is_shifted_left_view() {
        let p = generate_synthetic_pair(&SyntheticSpec::new(11, 64, 128, 20)).unwrap();
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..(128 - 20) {
                    assert_eq!(p.right.get(c, y, x), p.left.get(c, y, x + 20));
                }
            }
        }
    }

    #[test]
    fn spec_bounds_are_enforced() {
        assert!(generate_synthetic_pair(&SyntheticSpec::new(0, 64, 64, 16)).is_err());
        assert!(generate_synthetic_pair(&SyntheticSpec::new(0, 60, 64, 1)).is_err());
        let mut s = SyntheticSpec::new(0, 64, 64, 1);
        s.noise_level = 1.5;
        assert!(generate_synthetic_pair(&s).is_err());
    }

    #[test]
    fn occlusion_covers_requested_fraction() {
        let mut s = SyntheticSpec::new(5, 64, 64, 0);
        s.occlusion_fraction = 0.25;
        let p = generate_synthetic_pair(&s).unwrap();
        let mut differ = 0;
        for y in 0..64 {
            for x in 0..64 {
                if (0..3).any(|c| p.left.get(c, y, x) != p.right.get(c, y, x)) {
                    differ += 1;
                }
            }
        }
        // occluder texture can coincide with the scene on a few pixels
        assert!(differ <= 1024 && differ > 900, "{differ}");
    }

    #[test]
    fn tensor_roundtrip() {
        let p = generate_synthetic_pair(&SyntheticSpec::new(1, 64, 64, 4)).unwrap();
        let t = pairs_to_tensor(&[&p, &p]);
        assert_eq!(t.shape(), &[2, 3, 2, 64, 64]);
        let q = tensor_to_pair(&t, 1);
        assert_eq!((q.left, q.right), (p.left, p.right));
    }
}
