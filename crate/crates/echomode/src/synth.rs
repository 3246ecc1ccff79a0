//! Synthetic echo-like videos: a pulsating bright-rim ellipse with
//! analytically known ejection fraction, used as the end-to-end oracle.
//!
//! Area is the 2-D volume proxy: the per-frame ellipse area follows a raised
//! cosine between A_dia and A_sys = (1 - ef) * A_dia, so
//! EF = (A_dia - A_sys) / A_dia exactly.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_model::{write_manifest, write_video, Manifest, PatientRecord, Split, VideoTensor};
use crate::error::{Error, Result};

pub const FRAME_SIZE: usize = 112;
/// Default frames per cardiac cycle (~0.7 s at ~50 fps).
pub const DEFAULT_PERIOD: f64 = 35.0;

#[derive(Debug, Clone)]
pub struct SynthParams {
    /// End-diastolic semi-axes in pixels (row axis, col axis).
    pub a_dia: f64,
    pub b_dia: f64,
    /// Target ejection fraction, fraction in (0, 0.95).
    pub ef_target: f64,
    /// Frames per cardiac cycle.
    pub period: f64,
    pub phase: f64,
    /// Contraction anisotropy in [0, 1]: the row semi-axis scales with
    /// (area ratio)^anisotropy and the column semi-axis with the
    /// complementary exponent, so the area (and EF) stays exact while a
    /// single scan line no longer determines the area on its own.
    pub anisotropy: f64,
    /// Std of additive per-frame intensity noise on the uint8 scale.
    pub noise_sigma: f64,
    pub texture_seed: u64,
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.ef_target > 0.0 && self.ef_target < 0.95) {
            return Err(Error::argument(format!(
                "ef_target {} must be in (0, 0.95)",
                self.ef_target
            )));
        }
        let half = FRAME_SIZE as f64 / 2.0;
        // Leave room for the rim (drawn outside the boundary) at end-diastole.
        if self.a_dia + RIM_WIDTH >= half || self.b_dia + RIM_WIDTH >= half {
            return Err(Error::argument(format!(
                "end-diastolic ellipse ({}, {}) exceeds the {}x{} frame",
                self.a_dia, self.b_dia, FRAME_SIZE, FRAME_SIZE
            )));
        }
        if self.a_dia <= 1.0 || self.b_dia <= 1.0 {
            return Err(Error::argument("semi-axes must exceed 1 pixel"));
        }
        if self.period <= 2.0 {
            return Err(Error::argument("period must exceed 2 frames"));
        }
        if !(0.0..=1.0).contains(&self.anisotropy) {
            return Err(Error::argument(format!(
                "anisotropy {} must be in [0, 1]",
                self.anisotropy
            )));
        }
        Ok(())
    }

    pub fn area_dia(&self) -> f64 {
        PI * self.a_dia * self.b_dia
    }

    pub fn area_sys(&self) -> f64 {
        (1.0 - self.ef_target) * self.area_dia()
    }

    /// Raised-cosine area waveform; f = 0, phase = 0 is end-diastole.
    pub fn area_at(&self, frame: usize) -> f64 {
        let (a_dia, a_sys) = (self.area_dia(), self.area_sys());
        a_sys + (a_dia - a_sys) * (1.0 + (2.0 * PI * frame as f64 / self.period + self.phase).cos()) / 2.0
    }
}

const RIM_WIDTH: f64 = 2.0;
const INTERIOR_LEVEL: f64 = 20.0;
const RIM_LEVEL: f64 = 230.0;
const BACKGROUND_LEVEL: f64 = 100.0;

/// Render one video plus its ground-truth record.
pub fn synth_video(patient_id: &str, params: &SynthParams, t: usize) -> Result<(VideoTensor, PatientRecord)> {
    params.validate()?;
    if t < 112 {
        return Err(Error::argument(format!("t = {t} must be >= 112")));
    }
    let h = FRAME_SIZE;
    let ctr = (h as f64 - 1.0) / 2.0;

    // Static speckle-like multiplicative texture, one multiplier per pixel.
    let mut tex_rng = ChaCha8Rng::seed_from_u64(params.texture_seed);
    let texture: Vec<f64> = (0..h * h).map(|_| tex_rng.gen_range(0.85..1.15)).collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(params.texture_seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut frames = Vec::with_capacity(t * h * h);
    for f in 0..t {
        // Split the contraction unevenly between the axes; the product of
        // the two scale factors is the exact area ratio.
        let rho = params.area_at(f) / params.area_dia();
        let (a, b) = (
            params.a_dia * rho.powf(params.anisotropy),
            params.b_dia * rho.powf(1.0 - params.anisotropy),
        );
        let (a_out, b_out) = (a + RIM_WIDTH, b + RIM_WIDTH);
        for r in 0..h {
            for c in 0..h {
                let dr = r as f64 - ctr;
                let dc = c as f64 - ctr;
                // interior: inside the exact analytic ellipse; rim: the shell
                // just outside it, so pixel-counted interior matches A(f)
                let q_in = (dr / a).powi(2) + (dc / b).powi(2);
                let base = if q_in < 1.0 {
                    INTERIOR_LEVEL
                } else if (dr / a_out).powi(2) + (dc / b_out).powi(2) < 1.0 {
                    RIM_LEVEL
                } else {
                    BACKGROUND_LEVEL
                };
                let mut v = base * texture[r * h + c];
                if params.noise_sigma > 0.0 {
                    // Box-Muller keeps the dependency surface small here
                    let u1: f64 = noise_rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = noise_rng.gen_range(0.0..1.0);
                    let g = (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
                    v += params.noise_sigma * g;
                }
                frames.push(v.clamp(0.0, 255.0).round() as u8);
            }
        }
    }
    let video = VideoTensor::new(patient_id, t, h, h, frames)?;
    let record = PatientRecord {
        patient_id: patient_id.to_string(),
        ef: params.ef_target,
        split: Split::Train,
    };
    Ok((video, record))
}

/// Draw per-patient parameters; independent seeded stream per patient.
pub fn sample_params(seed: u64, patient_index: u64, ef_range: (f64, f64)) -> SynthParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(patient_index);
    let ef_target = rng.gen_range(ef_range.0..=ef_range.1);
    let a_dia = rng.gen_range(24.0..40.0);
    let b_dia = rng.gen_range(24.0..40.0);
    let period = rng.gen_range(30.0..40.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let anisotropy = rng.gen_range(0.25..0.75);
    SynthParams {
        a_dia,
        b_dia,
        ef_target,
        period,
        phase,
        anisotropy,
        noise_sigma: 6.0,
        texture_seed: seed.wrapping_mul(0x1000_0001).wrapping_add(patient_index),
    }
}

/// Generate an n-patient dataset with uniform EF in `ef_range`, 70/15/15
/// train/val/test split, written as MMV1 files plus a manifest CSV.
pub fn synth_dataset(
    n: usize,
    ef_range: (f64, f64),
    seed: u64,
    t: usize,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    if n < 10 {
        return Err(Error::argument(format!("n = {n} must be >= 10")));
    }
    if !(ef_range.0 > 0.0 && ef_range.1 < 0.95 && ef_range.0 <= ef_range.1) {
        return Err(Error::argument("ef_range must satisfy 0 < lo <= hi < 0.95"));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;

    let n_val = (0.15 * n as f64).round() as usize;
    let n_test = (0.15 * n as f64).round() as usize;
    let n_train = n - n_val - n_test;

    let results: Vec<(VideoTensor, PatientRecord)> = (0..n)
        .map(|i| {
            let id = format!("synth{i:05}");
            let params = sample_params(seed, i as u64, ef_range);
            synth_video(&id, &params, t)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::with_capacity(n);
    for (i, (video, mut record)) in results.into_iter().enumerate() {
        record.split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        write_video(&video, out_dir.join(format!("{}.mmv", record.patient_id)))?;
        records.push(record);
    }
    let manifest = Manifest {
        records,
        source_dir: out_dir.to_path_buf(),
        dropped_short: 0,
    };
    write_manifest(&manifest, out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Count interior (dark) pixels of a rendered frame; test/verification oracle.
pub fn measure_interior_area(video: &VideoTensor, frame: usize) -> usize {
    video.frame(frame).iter().filter(|&&p| (p as f64) < 55.0).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_params() -> SynthParams {
        SynthParams {
            a_dia: 30.0,
            b_dia: 26.0,
            ef_target: 0.5,
            period: DEFAULT_PERIOD,
            phase: 0.0,
            anisotropy: 0.35,
            noise_sigma: 0.0,
            texture_seed: 42,
        }
    }

    #[test]
    fn rejects_degenerate_ef() {
        let mut p = base_params();
        p.ef_target = 0.0;
        assert!(matches!(synth_video("x", &p, 112), Err(Error::Argument(_))));
        p.ef_target = 0.05;
        assert!((p.area_sys() - 0.95 * p.area_dia()).abs() < 1e-9);
    }

    #[test]
    fn rejects_oversized_ellipse() {
        let mut p = base_params();
        p.a_dia = 60.0;
        assert!(matches!(synth_video("x", &p, 112), Err(Error::Argument(_))));
    }

    #[test]
    fn deterministic_rendering() {
        let mut p = base_params();
        p.noise_sigma = 6.0;
        let (a, _) = synth_video("x", &p, 112).unwrap();
        let (b, _) = synth_video("x", &p, 112).unwrap();
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn measured_area_tracks_analytic_area() {
        let p = base_params();
        let (v, _) = synth_video("x", &p, 112).unwrap();
        for f in [0usize, 7, 17, 23, 40, 70, 111] {
            let measured = measure_interior_area(&v, f) as f64;
            let analytic = p.area_at(f);
            let rel = (measured - analytic).abs() / analytic;
            assert!(rel <= 0.02, "frame {f}: measured {measured} vs analytic {analytic} (rel {rel})");
        }
    }

    #[test]
    fn min_area_is_half_of_diastolic_for_ef_half() {
        // A_dia = 2000 px² analog: pick axes so A_dia ≈ 2000
        let mut p = base_params();
        p.a_dia = 28.0;
        p.b_dia = 2000.0 / (PI * 28.0);
        let (v, _) = synth_video("x", &p, 112).unwrap();
        let min_area = (0..112).map(|f| measure_interior_area(&v, f)).min().unwrap() as f64;
        assert!((min_area - 1000.0).abs() / 1000.0 <= 0.02, "min area {min_area}");
    }

    #[test]
    fn ef_recovered_from_measured_extremes() {
        for seed in 0..5u64 {
            let params = sample_params(seed, 3, (0.2, 0.8));
            let mut p = params.clone();
            p.noise_sigma = 0.0;
            let (v, rec) = synth_video("x", &p, 140).unwrap();
            let areas: Vec<f64> = (0..140).map(|f| measure_interior_area(&v, f) as f64).collect();
            let amax = areas.iter().cloned().fold(f64::MIN, f64::max);
            let amin = areas.iter().cloned().fold(f64::MAX, f64::min);
            let ef = (amax - amin) / amax;
            assert!((ef - rec.ef).abs() <= 0.02, "seed {seed}: ef {ef} vs target {}", rec.ef);
        }
    }

    #[test]
    fn mmode_band_period_recoverable_by_autocorrelation() {
        use crate::mmode::{extract_mmode, ScanLineSpec};
        let p = base_params();
        let (v, _) = synth_video("x", &p, 200).unwrap();
        let spec = ScanLineSpec::for_video(&v, 0.0).unwrap();
        let frames: Vec<usize> = (0..200).collect();
        let img = extract_mmode(&v, &spec, &frames).unwrap();
        // band width per frame: count dark samples in each column
        let widths: Vec<f64> = (0..img.t_clip)
            .map(|f| (0..img.s).filter(|&k| img.at(k, f) < 55.0 / 255.0).count() as f64)
            .collect();
        let mean = widths.iter().sum::<f64>() / widths.len() as f64;
        let x: Vec<f64> = widths.iter().map(|w| w - mean).collect();
        let ac = |lag: usize| -> f64 { (0..x.len() - lag).map(|i| x[i] * x[i + lag]).sum() };
        // first local max of the autocorrelation away from lag 0
        let best = (20..=50).max_by(|&a, &b| ac(a).partial_cmp(&ac(b)).unwrap()).unwrap();
        assert!((best as f64 - p.period).abs() <= 1.0, "period {best} vs {}", p.period);
    }

    #[test]
    fn dataset_split_sizes_and_range() {
        let dir = std::env::temp_dir().join(format!("echomode_synth_{}", std::process::id()));
        let m = synth_dataset(20, (0.25, 0.75), 5, 112, &dir).unwrap();
        assert_eq!(m.split(Split::Train).count(), 14);
        assert_eq!(m.split(Split::Val).count(), 3);
        assert_eq!(m.split(Split::Test).count(), 3);
        for r in &m.records {
            assert!(r.ef >= 0.25 && r.ef <= 0.75);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
