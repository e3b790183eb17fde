//! Box-consistent training augmentation.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::geometry::{BBox, PixelBox};
use crate::image::GrayImage;

/// Augmentation hyperparameters, keyed as in the usual hyp files.
/// `mosaic` is read as a per-sample probability like `mixup` and `copy_paste`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugProfile {
    pub fl_gamma: f64,
    pub hsv_h: f64,
    pub hsv_s: f64,
    pub hsv_v: f64,
    pub degrees: f64,
    pub translate: f64,
    pub scale: f64,
    pub shear: f64,
    pub perspective: f64,
    pub flipud: f64,
    pub fliplr: f64,
    pub mosaic: f64,
    pub mixup: f64,
    pub copy_paste: f64,
}

impl Default for AugProfile {
    fn default() -> Self {
        Self {
            fl_gamma: 0.3,
            hsv_h: 0.015,
            hsv_s: 0.7,
            hsv_v: 0.4,
            degrees: 3.0,
            translate: 0.1,
            scale: 0.3,
            shear: 0.0,
            perspective: 0.0005,
            flipud: 0.1,
            fliplr: 0.5,
            mosaic: 0.1,
            mixup: 0.4,
            copy_paste: 0.5,
        }
    }
}

impl AugProfile {
    /// Every transform switched off.
    pub fn disabled() -> Self {
        Self {
            fl_gamma: 0.0,
            hsv_h: 0.0,
            hsv_s: 0.0,
            hsv_v: 0.0,
            degrees: 0.0,
            translate: 0.0,
            scale: 0.0,
            shear: 0.0,
            perspective: 0.0,
            flipud: 0.0,
            fliplr: 0.0,
            mosaic: 0.0,
            mixup: 0.0,
            copy_paste: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("flipud", self.flipud),
            ("fliplr", self.fliplr),
            ("mosaic", self.mosaic),
            ("mixup", self.mixup),
            ("copy_paste", self.copy_paste),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err(format!("{k} = {v} is not a probability")));
            }
        }
        for (k, v) in [
            ("fl_gamma", self.fl_gamma),
            ("hsv_h", self.hsv_h),
            ("hsv_s", self.hsv_s),
            ("hsv_v", self.hsv_v),
            ("degrees", self.degrees),
            ("translate", self.translate),
            ("scale", self.scale),
            ("shear", self.shear),
            ("perspective", self.perspective),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err(format!("{k} = {v} must be a non-negative magnitude")));
            }
        }
        if self.scale >= 1.0 {
            return Err(config_err("scale must be below 1"));
        }
        if self.perspective > 0.001 {
            return Err(config_err(format!("perspective {} exceeds 0.001", self.perspective)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeOfDay {
    #[default]
    Day,
    Night,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleTags {
    pub range_km: f64,
    pub time_of_day: TimeOfDay,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub boxes: Vec<BBox>,
    pub tags: SampleTags,
}

impl Sample {
    fn pixel_boxes(&self) -> Vec<(PixelBox, usize)> {
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        self.boxes.iter().map(|b| (b.to_pixels(w, h), b.class_id)).collect()
    }
}

/// Clip rule shared by every geometric op: keep the clipped box only if it
/// retains 10% of its unclipped area and both sides span at least 2 px.
pub fn surviving_box(b: &PixelBox, width: f64, height: f64) -> Option<PixelBox> {
    let c = b.clip(width, height)?;
    (c.area() >= 0.1 * b.area() && c.w >= 2.0 && c.h >= 2.0).then_some(c)
}

fn to_bboxes(boxes: impl IntoIterator<Item = (PixelBox, usize)>, width: f64, height: f64) -> Vec<BBox> {
    boxes
        .into_iter()
        .filter_map(|(b, c)| surviving_box(&b, width, height).map(|s| BBox::from_pixels(&s, width, height, c)))
        .collect()
}

/// Brightness jitter. Hue and saturation gains are drawn to keep the random
/// stream aligned with colour pipelines but have no effect on one channel.
pub fn hsv_jitter<R: Rng + ?Sized>(s: &Sample, gains: (f64, f64, f64), rng: &mut R) -> Sample {
    let draws: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    if gains.2 == 0.0 {
        return s.clone();
    }
    brightness(s, 1.0 + draws[2] * gains.2)
}

pub fn brightness(s: &Sample, gain: f64) -> Sample {
    let mut out = s.clone();
    let g = gain as f32;
    for v in &mut out.image.data {
        *v = (*v * g).clamp(0.0, 1.0);
    }
    out
}

/// Projective map of the image plane in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub const IDENTITY: Homography = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn translation(dx: f64, dy: f64) -> Self {
        Homography([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])
    }

    pub fn then(&self, after: &Homography) -> Homography {
        after.mul(self)
    }

    pub fn mul(&self, o: &Homography) -> Homography {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Homography(m)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        ((m[0][0] * x + m[0][1] * y + m[0][2]) / w, (m[1][0] * x + m[1][1] * y + m[1][2]) / w)
    }

    pub fn inverse(&self) -> Option<Homography> {
        let m = &self.0;
        let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let det = m[0][0] * c(1, 2, 1, 2) - m[0][1] * c(1, 2, 0, 2) + m[0][2] * c(1, 2, 0, 1);
        if det.abs() < 1e-12 {
            return None;
        }
        let adj = [
            [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
            [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
            [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
        ];
        Some(Homography(adj.map(|r| r.map(|v| v / det))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub degrees: f64,
    pub translate: f64,
    pub scale: f64,
    pub shear: f64,
    pub perspective: f64,
}

impl From<&AugProfile> for AffineParams {
    fn from(p: &AugProfile) -> Self {
        Self { degrees: p.degrees, translate: p.translate, scale: p.scale, shear: p.shear, perspective: p.perspective }
    }
}

/// Draws the composite `T · S · R · P · C` map for a `width × height` image.
pub fn sample_homography<R: Rng + ?Sized>(p: &AffineParams, width: f64, height: f64, rng: &mut R) -> Homography {
    let mut u = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let center = Homography::translation(-width / 2.0, -height / 2.0);
    let (px, py) = (u(p.perspective), u(p.perspective));
    let persp = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]]);
    let angle = u(p.degrees).to_radians();
    let s = 1.0 + u(p.scale);
    let (sin, cos) = angle.sin_cos();
    let rot = Homography([[s * cos, s * sin, 0.0], [-s * sin, s * cos, 0.0], [0.0, 0.0, 1.0]]);
    let (shx, shy) = (u(p.shear).to_radians().tan(), u(p.shear).to_radians().tan());
    let shear = Homography([[1.0, shx, 0.0], [shy, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    let (tx, ty) = ((0.5 + u(p.translate)) * width, (0.5 + u(p.translate)) * height);
    let trans = Homography::translation(tx, ty);
    trans.mul(&shear).mul(&rot).mul(&persp).mul(&center)
}

/// Warps image and boxes by `m`. Uncovered pixels take the image mean.
pub fn warp(s: &Sample, m: &Homography) -> Sample {
    if *m == Homography::IDENTITY {
        return s.clone();
    }
    let img = &s.image;
    let (w, h) = (img.width, img.height);
    let fill = img.mean();
    let mut out = GrayImage::new(w, h, fill);
    if let Some(inv) = m.inverse() {
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
                out.set(x, y, img.bilinear(sx - 0.5, sy - 0.5, fill));
            }
        }
    }
    let boxes = s.pixel_boxes().into_iter().map(|(b, c)| {
        let [x1, y1, x2, y2] = b.xyxy();
        let pts = [(x1, y1), (x2, y1), (x1, y2), (x2, y2)].map(|(x, y)| m.apply(x, y));
        let xs = pts.map(|p| p.0);
        let ys = pts.map(|p| p.1);
        let fold = |v: [f64; 4], f: fn(f64, f64) -> f64, init: f64| v.into_iter().fold(init, f);
        let hull = PixelBox::from_xyxy(
            fold(xs, f64::min, f64::INFINITY),
            fold(ys, f64::min, f64::INFINITY),
            fold(xs, f64::max, f64::NEG_INFINITY),
            fold(ys, f64::max, f64::NEG_INFINITY),
        );
        (hull, c)
    });
    let boxes = to_bboxes(boxes, w as f64, h as f64);
    Sample { image: out, boxes, tags: s.tags }
}

pub fn random_affine<R: Rng + ?Sized>(s: &Sample, p: &AffineParams, rng: &mut R) -> Sample {
    let m = sample_homography(p, s.image.width as f64, s.image.height as f64, rng);
    warp(s, &m)
}

pub fn flip_lr(s: &Sample) -> Sample {
    let mut out = s.clone();
    let (w, h) = (s.image.width, s.image.height);
    for y in 0..h {
        out.image.data[y * w..(y + 1) * w].reverse();
    }
    for b in &mut out.boxes {
        b.cx = 1.0 - b.cx;
    }
    out
}

pub fn flip_ud(s: &Sample) -> Sample {
    let mut out = s.clone();
    let w = s.image.width;
    for (y, row) in s.image.data.chunks(w).enumerate() {
        let dst = s.image.height - 1 - y;
        out.image.data[dst * w..(dst + 1) * w].copy_from_slice(row);
    }
    for b in &mut out.boxes {
        b.cy = 1.0 - b.cy;
    }
    out
}

pub fn flip<R: Rng + ?Sized>(s: &Sample, p_ud: f64, p_lr: f64, rng: &mut R) -> Sample {
    let ud = rng.random::<f64>() < p_ud;
    let lr = rng.random::<f64>() < p_lr;
    let mut out = if ud { flip_ud(s) } else { s.clone() };
    if lr {
        out = flip_lr(&out);
    }
    out
}

/// 2×2 collage about an integer canvas centre `(xc, yc)` on a canvas of side
/// `2 · out_size`, then downscaled to `out_size`.
pub fn mosaic4_at(samples: [&Sample; 4], out_size: usize, center: (usize, usize)) -> Sample {
    let s2 = 2 * out_size;
    let fill = samples.iter().map(|s| s.image.mean()).sum::<f32>() / 4.0;
    let mut canvas = GrayImage::new(s2, s2, fill);
    let (xc, yc) = (center.0 as isize, center.1 as isize);
    let s2i = s2 as isize;
    let mut boxes = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let (w, h) = (s.image.width as isize, s.image.height as isize);
        let (x1a, y1a, x2a, y2a, x1b, y1b) = match i {
            0 => {
                let (x1a, y1a) = ((xc - w).max(0), (yc - h).max(0));
                (x1a, y1a, xc, yc, w - (xc - x1a), h - (yc - y1a))
            }
            1 => {
                let (y1a, x2a) = ((yc - h).max(0), (xc + w).min(s2i));
                (xc, y1a, x2a, yc, 0, h - (yc - y1a))
            }
            2 => {
                let (x1a, y2a) = ((xc - w).max(0), (yc + h).min(s2i));
                (x1a, yc, xc, y2a, w - (xc - x1a), 0)
            }
            _ => (xc, yc, (xc + w).min(s2i), (yc + h).min(s2i), 0, 0),
        };
        for y in 0..(y2a - y1a).max(0) {
            for x in 0..(x2a - x1a).max(0) {
                let v = s.image.get((x1b + x) as usize, (y1b + y) as usize);
                canvas.set((x1a + x) as usize, (y1a + y) as usize, v);
            }
        }
        let (padw, padh) = ((x1a - x1b) as f64, (y1a - y1b) as f64);
        for (b, c) in s.pixel_boxes() {
            boxes.push((PixelBox::new(b.cx + padw, b.cy + padh, b.w, b.h), c));
        }
    }
    let image = canvas.resize(out_size, out_size);
    let n = out_size as f64;
    let halved = boxes.into_iter().map(|(b, c)| (PixelBox::new(b.cx / 2.0, b.cy / 2.0, b.w / 2.0, b.h / 2.0), c));
    let boxes = to_bboxes(halved, n, n);
    Sample { image, boxes, tags: samples[0].tags }
}

pub fn mosaic4<R: Rng + ?Sized>(samples: [&Sample; 4], out_size: usize, rng: &mut R) -> Sample {
    let lo = out_size / 2;
    let hi = out_size + out_size / 2;
    let c = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
    mosaic4_at(samples, out_size, c)
}

pub const MIXUP_BETA: f64 = 32.0;

pub fn mixup_with(a: &Sample, b: &Sample, lambda: f64) -> Result<Sample> {
    if (a.image.width, a.image.height) != (b.image.width, b.image.height) {
        return Err(shape_err(format!(
            "mixup of {}x{} with {}x{}",
            a.image.width, a.image.height, b.image.width, b.image.height
        )));
    }
    let l = lambda as f32;
    let data = a.image.data.iter().zip(&b.image.data).map(|(&p, &q)| l * p + (1.0 - l) * q).collect();
    let image = GrayImage { data, ..a.image.clone() };
    let boxes = a.boxes.iter().chain(&b.boxes).copied().collect();
    Ok(Sample { image, boxes, tags: a.tags })
}

pub fn mixup<R: Rng + ?Sized>(a: &Sample, b: &Sample, rng: &mut R) -> Result<Sample> {
    let lambda = Beta::new(MIXUP_BETA, MIXUP_BETA).expect("valid beta").sample(rng);
    mixup_with(a, b, lambda)
}

pub const PASTE_MAX_IOU: f64 = 0.3;
pub const PASTE_ATTEMPTS: usize = 10;

/// Pastes each source box's pixel rectangle, with probability `p`, at a
/// random spot overlapping existing boxes by at most [`PASTE_MAX_IOU`].
pub fn copy_paste<R: Rng + ?Sized>(dst: &Sample, src: &Sample, p: f64, rng: &mut R) -> Result<Sample> {
    Ok(copy_paste_counted(dst, src, p, rng)?.0)
}

/// As [`copy_paste`], also returning how many boxes won the `p` draw.
pub fn copy_paste_counted<R: Rng + ?Sized>(dst: &Sample, src: &Sample, p: f64, rng: &mut R) -> Result<(Sample, usize)> {
    let (w, h) = (dst.image.width, dst.image.height);
    if (w, h) != (src.image.width, src.image.height) {
        return Err(shape_err("copy_paste needs equal image sizes"));
    }
    let mut out = dst.clone();
    let mut occupied: Vec<PixelBox> = dst.pixel_boxes().into_iter().map(|(b, _)| b).collect();
    let mut triggered = 0;
    for (b, class) in src.pixel_boxes() {
        if !(rng.random::<f64>() < p) {
            continue;
        }
        triggered += 1;
        let [x1, y1, x2, y2] = b.xyxy();
        let (rx1, ry1) = (x1.floor().max(0.0) as usize, y1.floor().max(0.0) as usize);
        let (rx2, ry2) = ((x2.ceil() as usize).min(w), (y2.ceil() as usize).min(h));
        let (rw, rh) = (rx2.saturating_sub(rx1), ry2.saturating_sub(ry1));
        if rw == 0 || rh == 0 || rw >= w || rh >= h {
            continue;
        }
        for _ in 0..PASTE_ATTEMPTS {
            let nx = rng.random_range(0..=w - rw);
            let ny = rng.random_range(0..=h - rh);
            let moved = PixelBox::new(b.cx + nx as f64 - rx1 as f64, b.cy + ny as f64 - ry1 as f64, b.w, b.h);
            if occupied.iter().any(|o| o.iou(&moved) > PASTE_MAX_IOU) {
                continue;
            }
            for y in 0..rh {
                for x in 0..rw {
                    out.image.set(nx + x, ny + y, src.image.get(rx1 + x, ry1 + y));
                }
            }
            if let Some(c) = moved.clip(w as f64, h as f64) {
                out.boxes.push(BBox::from_pixels(&c, w as f64, h as f64, class));
                occupied.push(c);
            }
            break;
        }
    }
    Ok((out, triggered))
}

/// Random access to training samples.
pub trait SamplePool {
    fn len(&self) -> usize;
    fn sample(&self, index: usize) -> Result<Sample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SamplePool for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }
    fn sample(&self, index: usize) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

impl SamplePool for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn sample(&self, index: usize) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

/// Which stochastic branches fired while producing one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Triggers {
    pub mosaic: usize,
    pub mixup: usize,
    pub paste_draws: usize,
    pub pastes: usize,
}

pub fn apply_profile<R: Rng + ?Sized>(pool: &dyn SamplePool, profile: &AugProfile, rng: &mut R) -> Result<Sample> {
    Ok(apply_profile_traced(pool, profile, rng)?.0)
}

pub fn apply_profile_traced<R: Rng + ?Sized>(
    pool: &dyn SamplePool,
    profile: &AugProfile,
    rng: &mut R,
) -> Result<(Sample, Triggers)> {
    augment_traced(pool, None, profile, rng)
}

/// Same pipeline with the primary sample fixed to `index`, as used when an
/// epoch visits every sample once.
pub fn augment_index<R: Rng + ?Sized>(pool: &dyn SamplePool, index: usize, profile: &AugProfile, rng: &mut R) -> Result<Sample> {
    if index >= pool.len() {
        return Err(shape_err(format!("sample {index} of a pool of {}", pool.len())));
    }
    Ok(augment_traced(pool, Some(index), profile, rng)?.0)
}

fn augment_traced<R: Rng + ?Sized>(
    pool: &dyn SamplePool,
    index: Option<usize>,
    profile: &AugProfile,
    rng: &mut R,
) -> Result<(Sample, Triggers)> {
    if pool.is_empty() {
        return Err(config_err("augmentation pool is empty"));
    }
    let mut trig = Triggers::default();
    let first = pipeline(pool, index, profile, rng, &mut trig)?;
    if rng.random::<f64>() < profile.mixup {
        trig.mixup += 1;
        let second = pipeline(pool, None, profile, rng, &mut trig)?;
        return Ok((mixup(&first, &second, rng)?, trig));
    }
    Ok((first, trig))
}

fn pipeline<R: Rng + ?Sized>(
    pool: &dyn SamplePool,
    index: Option<usize>,
    p: &AugProfile,
    rng: &mut R,
    trig: &mut Triggers,
) -> Result<Sample> {
    let n = pool.len();
    let i = index.unwrap_or_else(|| rng.random_range(0..n));
    let mut s = if rng.random::<f64>() < p.mosaic {
        trig.mosaic += 1;
        let rest = [rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0..n)];
        let all = [pool.sample(i)?, pool.sample(rest[0])?, pool.sample(rest[1])?, pool.sample(rest[2])?];
        mosaic4([&all[0], &all[1], &all[2], &all[3]], all[0].image.width, rng)
    } else {
        pool.sample(i)?
    };
    if p.copy_paste > 0.0 {
        let src = pool.sample(rng.random_range(0..n))?;
        if (src.image.width, src.image.height) == (s.image.width, s.image.height) {
            trig.paste_draws += src.boxes.len();
            let (out, k) = copy_paste_counted(&s, &src, p.copy_paste, rng)?;
            trig.pastes += k;
            s = out;
        }
    }
    s = random_affine(&s, &AffineParams::from(p), rng);
    s = hsv_jitter(&s, (p.hsv_h, p.hsv_s, p.hsv_v), rng);
    Ok(flip(&s, p.flipud, p.fliplr, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_with(size: usize, boxes: Vec<BBox>) -> Sample {
        let mut img = GrayImage::new(size, size, 0.1);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f32 / 100.0;
        }
        Sample { image: img, boxes, tags: SampleTags::default() }
    }

    #[test]
    fn zero_gain_jitter_is_bitwise_identity() {
        let s = sample_with(16, vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(hsv_jitter(&s, (0.0, 0.0, 0.0), &mut rng), s);
    }

    #[test]
    fn brightness_gain_saturates() {
        let s = sample_with(16, vec![]);
        let b = brightness(&s, 1.4);
        for (o, i) in b.image.data.iter().zip(&s.image.data) {
            assert_eq!(*o, (1.4f32 * i).min(1.0));
        }
    }

    #[test]
    fn zero_magnitudes_leave_sample_unchanged() {
        let s = sample_with(32, vec![BBox::new(0, 0.3, 0.4, 0.2, 0.1)]);
        let p = AffineParams { degrees: 0.0, translate: 0.0, scale: 0.0, shear: 0.0, perspective: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(random_affine(&s, &p, &mut rng), s);
    }

    #[test]
    fn translation_shifts_centres() {
        let s = sample_with(50, vec![BBox::new(0, 0.3, 0.4, 0.2, 0.1), BBox::new(1, 0.5, 0.5, 0.1, 0.1)]);
        let out = warp(&s, &Homography::translation(5.0, 0.0));
        assert_eq!(out.boxes.len(), 2);
        for (a, b) in s.boxes.iter().zip(&out.boxes) {
            assert!((b.cx - a.cx - 0.1).abs() < 1e-12);
            assert!((b.cy - a.cy).abs() < 1e-12);
        }
        // pixel (x, y) moves to (x + 5, y)
        assert!((out.image.get(20, 7) - s.image.get(15, 7)).abs() < 1e-6);
    }

    #[test]
    fn flips_mirror_and_invert() {
        let s = sample_with(8, vec![BBox::new(0, 0.2, 0.3, 0.1, 0.1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = flip(&s, 0.0, 1.0, &mut rng);
        assert!((f.boxes[0].cx - 0.8).abs() < 1e-12);
        for twice in [flip_lr(&flip_lr(&s)), flip_ud(&flip_ud(&s))] {
            assert_eq!(twice.image, s.image);
            assert!((twice.boxes[0].cx - s.boxes[0].cx).abs() < 1e-12);
            assert!((twice.boxes[0].cy - s.boxes[0].cy).abs() < 1e-12);
        }
        assert_eq!(flip(&s, 0.0, 0.0, &mut rng), s);
        assert_eq!(flip_ud(&s).image.get(3, 0), s.image.get(3, 7));
    }

    #[test]
    fn centred_mosaic_keeps_one_box_per_quadrant() {
        let s = sample_with(32, vec![BBox::new(1, 0.5, 0.5, 0.25, 0.25)]);
        let m = mosaic4_at([&s, &s, &s, &s], 32, (32, 32));
        assert_eq!(m.boxes.len(), 4);
        let quads: std::collections::BTreeSet<_> = m.boxes.iter().map(|b| ((b.cx > 0.5) as u8, (b.cy > 0.5) as u8)).collect();
        assert_eq!(quads.len(), 4);
        for b in &m.boxes {
            assert!((b.w - 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn mosaic_drops_cropped_boxes() {
        // with the centre this far up-left only the bottom-right tile keeps its corner box
        let s = sample_with(32, vec![BBox::new(0, 0.15, 0.15, 0.2, 0.2)]);
        let m = mosaic4_at([&s, &s, &s, &s], 32, (16, 16));
        assert_eq!(m.boxes.len(), 1);
    }

    #[test]
    fn mixup_endpoints_and_linearity() {
        let a = sample_with(16, vec![BBox::new(0, 0.5, 0.5, 0.2, 0.2)]);
        let mut b = sample_with(16, vec![BBox::new(1, 0.3, 0.3, 0.2, 0.2)]);
        b.image.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        let m = mixup_with(&a, &b, 1.0).unwrap();
        assert_eq!(m.image, a.image);
        assert_eq!(m.boxes.len(), 2);
        let same = mixup_with(&a, &a, 0.37).unwrap();
        for (p, q) in same.image.data.iter().zip(&a.image.data) {
            assert!((p - q).abs() < 1e-6);
        }
        assert_eq!(same.boxes.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lam = Beta::new(MIXUP_BETA, MIXUP_BETA).unwrap().sample(&mut ChaCha8Rng::seed_from_u64(5));
        let r = mixup(&a, &b, &mut rng).unwrap();
        let expect = lam * a.image.mean() as f64 + (1.0 - lam) * b.image.mean() as f64;
        assert!((r.image.mean() as f64 - expect).abs() < 1e-6);
        assert!(mixup_with(&a, &sample_with(8, vec![]), 0.5).is_err());
    }

    #[test]
    fn copy_paste_cases() {
        let src = sample_with(32, vec![BBox::new(1, 0.25, 0.25, 0.25, 0.25)]);
        let mut empty = sample_with(32, vec![]);
        empty.image.data.iter_mut().for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(copy_paste(&empty, &src, 0.0, &mut rng).unwrap(), empty);

        let out = copy_paste(&empty, &src, 1.0, &mut rng).unwrap();
        assert_eq!(out.boxes.len(), 1);
        let pb = out.boxes[0].to_pixels(32.0, 32.0);
        let [x1, y1, _, _] = pb.xyxy();
        let (ox, oy) = (x1.round() as usize, y1.round() as usize);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.image.get(ox + x, oy + y), src.image.get(4 + x, 4 + y));
            }
        }

        // a full-frame box blocks every placement
        let crowded = sample_with(32, vec![BBox::new(0, 0.5, 0.5, 1.0, 1.0)]);
        let small = sample_with(32, vec![BBox::new(0, 0.5, 0.5, 0.75, 0.75)]);
        let out = copy_paste(&crowded, &small, 1.0, &mut rng).unwrap();
        assert_eq!(out.boxes.len(), 1);
    }

    #[test]
    fn disabled_profile_passes_sample_through() {
        let pool = vec![sample_with(32, vec![BBox::new(0, 0.4, 0.6, 0.2, 0.3)])];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(apply_profile(&pool, &AugProfile::disabled(), &mut rng).unwrap(), pool[0]);
    }

    #[test]
    fn profile_is_deterministic() {
        let pool: Vec<Sample> = (0..4).map(|i| sample_with(32, vec![BBox::new(i % 2, 0.3 + 0.1 * i as f64, 0.5, 0.2, 0.2)])).collect();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| apply_profile(&pool, &AugProfile::default(), &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn profile_validation() {
        AugProfile::default().validate().unwrap();
        assert!(AugProfile { mixup: 1.5, ..AugProfile::default() }.validate().is_err());
        assert!(AugProfile { perspective: 0.01, ..AugProfile::default() }.validate().is_err());
        assert!(AugProfile { degrees: -1.0, ..AugProfile::default() }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn geometric_ops_keep_valid_boxes_and_classes(seed in 0u64..10_000, n in 0usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let boxes: Vec<BBox> = (0..n).map(|_| BBox::new(rng.random_range(0..3), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.4), rng.random_range(0.05..0.4))).collect();
            let s = sample_with(32, boxes);
            let out = random_affine(&s, &AffineParams::from(&AugProfile { degrees: 30.0, translate: 0.4, scale: 0.6, shear: 5.0, perspective: 0.001, ..AugProfile::default() }), &mut rng);
            prop_assert!(out.boxes.len() <= s.boxes.len());
            let mut before: Vec<usize> = s.boxes.iter().map(|b| b.class_id).collect();
            for b in &out.boxes {
                prop_assert!(b.is_valid(3), "{:?}", b);
                let i = before.iter().position(|&c| c == b.class_id);
                prop_assert!(i.is_some());
                before.remove(i.unwrap());
            }
        }
    }
}
