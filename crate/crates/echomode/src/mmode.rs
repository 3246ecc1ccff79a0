//! Artificial M-mode extraction: sample a video along a rotated line through
//! the image center, one column per frame.
//!
//! Convention: theta = 0 is the vertical scan line; sample k of the line lies
//! at `center + (k - (s-1)/2) * (cos θ, sin θ)` in (row, col) coordinates, so
//! at θ=0 the output column is the center image column read top to bottom and
//! at θ=90° it is the center row read left to right. Bilinear interpolation
//! with border clamping.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::VideoTensor;
use crate::error::{Error, Result};

/// One scan line: angle in degrees in [0,180), length s (pixels), and the
/// continuous (row, col) rotation center.
#[derive(Debug, Clone, Copy)]
pub struct ScanLineSpec {
    pub theta_deg: f64,
    pub s: usize,
    pub center: (f64, f64),
}

impl ScanLineSpec {
    pub fn new(theta_deg: f64, s: usize, center: (f64, f64)) -> Result<Self> {
        if !(0.0..180.0).contains(&theta_deg) {
            return Err(Error::argument(format!("theta {theta_deg} outside [0, 180)")));
        }
        if s == 0 {
            return Err(Error::argument("scan line length must be positive"));
        }
        Ok(ScanLineSpec { theta_deg, s, center })
    }

    /// Standard spec for a square video: s = h, center at the continuous
    /// image center ((h-1)/2, (w-1)/2).
    pub fn for_video(video: &VideoTensor, theta_deg: f64) -> Result<Self> {
        Self::new(
            theta_deg,
            video.h,
            ((video.h as f64 - 1.0) / 2.0, (video.w as f64 - 1.0) / 2.0),
        )
    }
}

/// An s × t_clip M-mode image with values in [0,1].
#[derive(Debug, Clone)]
pub struct MModeImage {
    pub patient_id: String,
    pub theta_deg: f64,
    /// 1-based mode index within its stack.
    pub mode_index: usize,
    pub s: usize,
    pub t_clip: usize,
    /// Row-major [s][t_clip].
    pub pixels: Vec<f32>,
}

impl MModeImage {
    #[inline]
    pub fn at(&self, k: usize, f: usize) -> f32 {
        self.pixels[k * self.t_clip + f]
    }
}

/// M M-mode images of one patient sharing a clip, in increasing-angle order.
#[derive(Debug, Clone)]
pub struct MModeStack {
    pub images: Vec<MModeImage>,
    pub angles_deg: Vec<f64>,
    /// Frame indices of the clip in the source video.
    pub frame_indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipPolicy {
    /// Frames 0..112.
    #[serde(rename = "full")]
    Full112,
    /// 32 frames starting at a uniformly random offset, sampling period 2.
    #[serde(rename = "short")]
    Short32Period2,
}

impl std::str::FromStr for ClipPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ClipPolicy::Full112),
            "short" => Ok(ClipPolicy::Short32Period2),
            other => Err(Error::argument(format!("unknown clip policy '{other}' (expected full|short)"))),
        }
    }
}

impl ClipPolicy {
    pub fn t_clip(self) -> usize {
        match self {
            ClipPolicy::Full112 => 112,
            ClipPolicy::Short32Period2 => 32,
        }
    }
}

/// θ_m = (m-1) * 180/M for m = 1..M: equally spaced on the half-open [0,180)
/// so no two lines coincide.
pub fn angle_set(m: usize) -> Result<Vec<f64>> {
    if m < 1 {
        return Err(Error::argument("mode count M must be >= 1"));
    }
    Ok((0..m).map(|i| i as f64 * 180.0 / m as f64).collect())
}

#[inline]
fn bilinear_clamped(frame: &[u8], h: usize, w: usize, row: f64, col: f64) -> f32 {
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = (row - r0) as f32;
    let fc = (col - c0) as f32;
    let clamp = |v: f64, hi: usize| -> usize { (v.max(0.0) as usize).min(hi - 1) };
    let r0i = clamp(r0, h);
    let r1i = clamp(r0 + 1.0, h);
    let c0i = clamp(c0, w);
    let c1i = clamp(c0 + 1.0, w);
    let v00 = frame[r0i * w + c0i] as f32;
    let v01 = frame[r0i * w + c1i] as f32;
    let v10 = frame[r1i * w + c0i] as f32;
    let v11 = frame[r1i * w + c1i] as f32;
    let top = v00 + fc * (v01 - v00);
    let bot = v10 + fc * (v11 - v10);
    top + fr * (bot - top)
}

/// Extract one M-mode image along `spec` over the given clip frames.
pub fn extract_mmode(video: &VideoTensor, spec: &ScanLineSpec, frame_indices: &[usize]) -> Result<MModeImage> {
    if let Some(&bad) = frame_indices.iter().find(|&&f| f >= video.t) {
        return Err(Error::argument(format!("frame index {bad} out of bounds (t={})", video.t)));
    }
    let s = spec.s;
    let t_clip = frame_indices.len();
    let theta = spec.theta_deg.to_radians();
    let (dr, dc) = (theta.cos(), theta.sin());
    let half = (s as f64 - 1.0) / 2.0;
    // Precompute sample coordinates; they are shared by all frames.
    let coords: Vec<(f64, f64)> = (0..s)
        .map(|k| {
            let off = k as f64 - half;
            (spec.center.0 + off * dr, spec.center.1 + off * dc)
        })
        .collect();
    let mut pixels = vec![0f32; s * t_clip];
    for (fi, &f) in frame_indices.iter().enumerate() {
        let frame = video.frame(f);
        for (k, &(row, col)) in coords.iter().enumerate() {
            pixels[k * t_clip + fi] = bilinear_clamped(frame, video.h, video.w, row, col) / 255.0;
        }
    }
    Ok(MModeImage {
        patient_id: video.patient_id.clone(),
        theta_deg: spec.theta_deg,
        mode_index: 0,
        s,
        t_clip,
        pixels,
    })
}

/// Frame indices for a clip policy. Short clips draw their start from `rng`.
pub fn clip_frames(t: usize, policy: ClipPolicy, rng: &mut impl Rng) -> Result<Vec<usize>> {
    match policy {
        ClipPolicy::Full112 => {
            if t < 112 {
                return Err(Error::argument(format!("Full112 needs t >= 112, got {t}")));
            }
            Ok((0..112).collect())
        }
        ClipPolicy::Short32Period2 => {
            if t < 64 {
                return Err(Error::argument(format!("Short32Period2 needs t >= 64, got {t}")));
            }
            let start = rng.gen_range(0..=t - 63);
            Ok((0..32).map(|i| start + 2 * i).collect())
        }
    }
}

/// Extract the full M-mode stack: M equally spaced angles, all sharing one clip.
pub fn extract_stack(
    video: &VideoTensor,
    m: usize,
    policy: ClipPolicy,
    rng: &mut impl Rng,
) -> Result<MModeStack> {
    let angles = angle_set(m)?;
    let frames = clip_frames(video.t, policy, rng)?;
    let mut images = Vec::with_capacity(m);
    for (i, &theta) in angles.iter().enumerate() {
        let spec = ScanLineSpec::for_video(video, theta)?;
        let mut img = extract_mmode(video, &spec, &frames)?;
        img.mode_index = i + 1;
        images.push(img);
    }
    Ok(MModeStack { images, angles_deg: angles, frame_indices: frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_video(c: u8, t: usize, h: usize) -> VideoTensor {
        VideoTensor::new("const", t, h, h, vec![c; t * h * h]).unwrap()
    }

    /// Smooth test video: Gaussian blob with drifting width per frame.
    fn smooth_video(t: usize, h: usize) -> VideoTensor {
        let c = (h as f64 - 1.0) / 2.0;
        let mut frames = Vec::with_capacity(t * h * h);
        for f in 0..t {
            let sigma = 10.0 + 4.0 * ((f as f64) * 0.2).sin();
            for r in 0..h {
                for col in 0..h {
                    let d2 = (r as f64 - c).powi(2) + (col as f64 - c).powi(2);
                    let v = 255.0 * (-d2 / (2.0 * sigma * sigma)).exp();
                    frames.push(v.round() as u8);
                }
            }
        }
        VideoTensor::new("smooth", t, h, h, frames).unwrap()
    }

    #[test]
    fn angle_set_examples() {
        assert_eq!(angle_set(1).unwrap(), vec![0.0]);
        assert_eq!(angle_set(2).unwrap(), vec![0.0, 90.0]);
        assert_eq!(angle_set(4).unwrap(), vec![0.0, 45.0, 90.0, 135.0]);
        assert!(matches!(angle_set(0), Err(Error::Argument(_))));
    }

    #[test]
    fn constant_video_gives_constant_mmode() {
        let v = constant_video(130, 120, 112);
        for theta in [0.0, 33.0, 90.0, 171.5] {
            let spec = ScanLineSpec::for_video(&v, theta).unwrap();
            let img = extract_mmode(&v, &spec, &(0..112).collect::<Vec<_>>()).unwrap();
            for &p in &img.pixels {
                assert!((p - 130.0 / 255.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn theta_zero_is_center_column_top_to_bottom() {
        let mut v = constant_video(0, 2, 112);
        // distinct values in columns 55 and 56
        for f in 0..2 {
            for r in 0..112 {
                v.frames[(f * 112 + r) * 112 + 55] = (r % 200) as u8;
                v.frames[(f * 112 + r) * 112 + 56] = ((r + 40) % 200) as u8;
            }
        }
        let spec = ScanLineSpec::for_video(&v, 0.0).unwrap();
        let img = extract_mmode(&v, &spec, &[0, 1]).unwrap();
        for k in 0..112 {
            // col 55.5: average of cols 55 and 56, hand-computed bilinear weight 0.5/0.5
            let expect = (v.at(0, k, 55) as f32 + v.at(0, k, 56) as f32) / 2.0 / 255.0;
            assert!((img.at(k, 0) - expect).abs() < 1e-6, "k={k}");
        }
    }

    #[test]
    fn theta_ninety_is_center_row() {
        let mut v = constant_video(0, 1, 112);
        for c in 0..112 {
            v.frames[55 * 112 + c] = (c % 256) as u8;
            v.frames[56 * 112 + c] = ((c + 10) % 256) as u8;
        }
        let spec = ScanLineSpec::for_video(&v, 90.0).unwrap();
        let img = extract_mmode(&v, &spec, &[0]).unwrap();
        for k in 0..112 {
            let expect = (v.at(0, 55, k) as f32 + v.at(0, 56, k) as f32) / 2.0 / 255.0;
            assert!((img.at(k, 0) - expect).abs() < 1e-5, "k={k}");
        }
    }

    #[test]
    fn time_reversed_video_flips_mmode_horizontally() {
        let v = smooth_video(64, 32);
        let mut rev_frames = Vec::with_capacity(v.frames.len());
        for f in (0..v.t).rev() {
            rev_frames.extend_from_slice(v.frame(f));
        }
        let rev = VideoTensor::new("rev", v.t, v.h, v.w, rev_frames).unwrap();
        let spec = ScanLineSpec::for_video(&v, 30.0).unwrap();
        let frames: Vec<usize> = (0..64).collect();
        let a = extract_mmode(&v, &spec, &frames).unwrap();
        let b = extract_mmode(&rev, &spec, &frames).unwrap();
        for k in 0..a.s {
            for f in 0..a.t_clip {
                assert_eq!(a.at(k, f), b.at(k, a.t_clip - 1 - f));
            }
        }
    }

    /// Bilinear rotation of a frame about the image center (test oracle).
    fn rotate_frame(frame: &[u8], h: usize, theta_deg: f64) -> Vec<u8> {
        let th = theta_deg.to_radians();
        let (c, s) = (th.cos(), th.sin());
        let ctr = (h as f64 - 1.0) / 2.0;
        let mut out = vec![0u8; h * h];
        for r in 0..h {
            for col in 0..h {
                // inverse map chosen so the rotated image's vertical center
                // line lands on the source line at angle +theta
                let dr = r as f64 - ctr;
                let dc = col as f64 - ctr;
                let sr = ctr + c * dr - s * dc;
                let sc = ctr + s * dr + c * dc;
                out[r * h + col] = bilinear_clamped(frame, h, h, sr, sc).round() as u8;
            }
        }
        out
    }

    #[test]
    fn rotation_equivariance_on_smooth_video() {
        let v = smooth_video(8, 64);
        let frames: Vec<usize> = (0..8).collect();
        for theta in [20.0, 45.0, 77.0, 120.0] {
            let spec = ScanLineSpec::for_video(&v, theta).unwrap();
            let direct = extract_mmode(&v, &spec, &frames).unwrap();
            let mut rot_frames = Vec::new();
            for f in 0..v.t {
                rot_frames.extend(rotate_frame(v.frame(f), v.h, theta));
            }
            let rot = VideoTensor::new("rot", v.t, v.h, v.w, rot_frames).unwrap();
            let spec0 = ScanLineSpec::for_video(&rot, 0.0).unwrap();
            let vertical = extract_mmode(&rot, &spec0, &frames).unwrap();
            let mut max_dev = 0f32;
            for i in 0..direct.pixels.len() {
                max_dev = max_dev.max((direct.pixels[i] - vertical.pixels[i]).abs());
            }
            assert!(max_dev <= 0.02, "theta={theta} max_dev={max_dev}");
        }
    }

    #[test]
    fn full_clip_policy() {
        let v = constant_video(10, 112, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = extract_stack(&v, 3, ClipPolicy::Full112, &mut rng).unwrap();
        assert_eq!(stack.frame_indices, (0..112).collect::<Vec<_>>());
        assert_eq!(stack.angles_deg, angle_set(3).unwrap());
        assert_eq!(stack.images.len(), 3);
        assert_eq!(stack.images[0].t_clip, 112);
        let short = constant_video(10, 100, 16);
        assert!(matches!(
            extract_stack(&short, 3, ClipPolicy::Full112, &mut rng),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn short_clip_policy_arithmetic_and_determinism() {
        let v = constant_video(10, 120, 16);
        let mut rng1 = ChaCha8Rng::seed_from_u64(9);
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let a = extract_stack(&v, 2, ClipPolicy::Short32Period2, &mut rng1).unwrap();
        let b = extract_stack(&v, 2, ClipPolicy::Short32Period2, &mut rng2).unwrap();
        assert_eq!(a.frame_indices, b.frame_indices);
        assert_eq!(a.frame_indices.len(), 32);
        let start = a.frame_indices[0];
        for (i, &f) in a.frame_indices.iter().enumerate() {
            assert_eq!(f, start + 2 * i);
        }
        assert!(*a.frame_indices.last().unwrap() < v.t);
        assert_eq!(a.images[0].t_clip, 32);
        let tiny = constant_video(10, 63, 16);
        assert!(matches!(
            extract_stack(&tiny, 2, ClipPolicy::Short32Period2, &mut rng1),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn sample_points_stay_within_half_pixel_of_border() {
        // for s = h, offsets are within ±(h-1)/2 so points lie in [-0.5, h-0.5]
        let h = 112usize;
        let ctr = (h as f64 - 1.0) / 2.0;
        for theta in [0.0f64, 30.0, 45.0, 90.0, 135.0, 179.0] {
            let th = theta.to_radians();
            for k in 0..h {
                let off = k as f64 - ctr;
                let r = ctr + off * th.cos();
                let c = ctr + off * th.sin();
                assert!(r >= -0.5 && r <= h as f64 - 0.5);
                assert!(c >= -0.5 && c <= h as f64 - 0.5);
            }
        }
    }
}
