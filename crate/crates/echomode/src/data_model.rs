//! Dataset representation: video tensors, the MMV1 on-disk format, manifests
//! and split/subsampling logic.
//!
//! MMV1 file layout (bit-exact): magic bytes `MMV1`, then three unsigned
//! 32-bit little-endian integers `t`, `h`, `w`, then `t*h*w` uint8 intensities
//! in frame-major, row-major order.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MMV1_MAGIC: &[u8; 4] = b"MMV1";
/// Minimum frame count for a video to participate in any split.
pub const MIN_FRAMES: usize = 112;

/// A grayscale echo clip: `t` frames of `h`×`w` uint8 intensities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoTensor {
    pub patient_id: String,
    pub h: usize,
    pub w: usize,
    pub t: usize,
    /// Frame-major, row-major: index = (f * h + row) * w + col.
    pub frames: Vec<u8>,
}

impl VideoTensor {
    pub fn new(patient_id: impl Into<String>, t: usize, h: usize, w: usize, frames: Vec<u8>) -> Result<Self> {
        if frames.len() != t * h * w {
            return Err(Error::shape(format!(
                "payload length {} does not match t*h*w = {}",
                frames.len(),
                t * h * w
            )));
        }
        Ok(VideoTensor { patient_id: patient_id.into(), h, w, t, frames })
    }

    #[inline]
    pub fn at(&self, frame: usize, row: usize, col: usize) -> u8 {
        self.frames[(frame * self.h + row) * self.w + col]
    }

    pub fn frame(&self, f: usize) -> &[u8] {
        let n = self.h * self.w;
        &self.frames[f * n..(f + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::manifest(format!("unknown split '{other}'"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One patient: id, EF label as a fraction in [0,1], split assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub ef: f64,
    pub split: Split,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ef) || !self.ef.is_finite() {
            return Err(Error::manifest(format!(
                "ef {} for patient {} outside [0,1]; EF labels are fractions, not percent",
                self.ef, self.patient_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<PatientRecord>,
    pub source_dir: PathBuf,
    /// Rows dropped at load time because their video had fewer than 112 frames.
    pub dropped_short: usize,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &PatientRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_ids(&self, split: Split) -> Vec<String> {
        self.split(split).map(|r| r.patient_id.clone()).collect()
    }

    pub fn video_path(&self, patient_id: &str) -> PathBuf {
        self.source_dir.join(format!("{patient_id}.mmv"))
    }

    pub fn record(&self, patient_id: &str) -> Option<&PatientRecord> {
        self.records.iter().find(|r| r.patient_id == patient_id)
    }
}

/// Parse an MMV1 stream.
pub fn read_video_from(mut r: impl Read, patient_id: &str) -> Result<VideoTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::format(format!("cannot read magic: {e}")))?;
    if &magic != MMV1_MAGIC {
        return Err(Error::format(format!("bad magic {magic:?}, expected MMV1")));
    }
    let mut dims = [0u8; 12];
    r.read_exact(&mut dims)
        .map_err(|e| Error::format(format!("cannot read header dims: {e}")))?;
    let t = u32::from_le_bytes(dims[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(dims[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(dims[8..12].try_into().unwrap()) as usize;
    let expected = t
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Error::format("header dimensions overflow"))?;
    let mut payload = Vec::with_capacity(expected);
    r.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(Error::format(format!(
            "payload has {} bytes, header declares {expected}",
            payload.len()
        )));
    }
    VideoTensor::new(patient_id, t, h, w, payload)
}

/// Load a video from disk. The square requirement (h == w) is enforced here
/// because every downstream consumer assumes it.
pub fn load_video(path: impl AsRef<Path>) -> Result<VideoTensor> {
    let path = path.as_ref();
    let patient_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("unknown")
        .to_string();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::format(format!("cannot open {}: {e}", path.display())))?;
    let v = read_video_from(std::io::BufReader::new(file), &patient_id)?;
    if v.h != v.w {
        return Err(Error::shape(format!("video must be square, got h={} w={}", v.h, v.w)));
    }
    Ok(v)
}

/// Read only the header dims (t, h, w) without pulling the payload.
pub fn peek_video_dims(path: impl AsRef<Path>) -> Result<(usize, usize, usize)> {
    let mut file = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::format(format!("cannot open {}: {e}", path.as_ref().display())))?;
    let mut head = [0u8; 16];
    file.read_exact(&mut head)
        .map_err(|e| Error::format(format!("cannot read header: {e}")))?;
    if &head[0..4] != MMV1_MAGIC {
        return Err(Error::format("bad magic, expected MMV1"));
    }
    let t = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    Ok((t, h, w))
}

pub fn write_video_to(v: &VideoTensor, mut w: impl Write) -> Result<()> {
    w.write_all(MMV1_MAGIC)?;
    w.write_all(&(v.t as u32).to_le_bytes())?;
    w.write_all(&(v.h as u32).to_le_bytes())?;
    w.write_all(&(v.w as u32).to_le_bytes())?;
    w.write_all(&v.frames)?;
    Ok(())
}

pub fn write_video(v: &VideoTensor, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut buf = std::io::BufWriter::new(file);
    write_video_to(v, &mut buf)?;
    buf.flush()?;
    Ok(())
}

/// Load a manifest CSV (`patient_id,ef,split`) and validate each row against
/// the videos in `video_dir`. Rows whose video has fewer than 112 frames are
/// dropped with a logged count.
pub fn load_manifest(csv_path: impl AsRef<Path>, video_dir: impl AsRef<Path>) -> Result<Manifest> {
    let video_dir = video_dir.as_ref().to_path_buf();
    let mut reader = csv::Reader::from_path(csv_path.as_ref())
        .map_err(|e| Error::manifest(format!("cannot read csv: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::manifest(format!("cannot read header: {e}")))?
        .clone();
    for col in ["patient_id", "ef", "split"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::manifest(format!("missing column '{col}'")));
        }
    }
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    let mut dropped_short = 0usize;
    for row in reader.deserialize::<PatientRecord>() {
        let rec = row.map_err(|e| Error::manifest(format!("bad row: {e}")))?;
        rec.validate()?;
        if !seen.insert(rec.patient_id.clone()) {
            return Err(Error::manifest(format!("duplicate patient_id '{}'", rec.patient_id)));
        }
        let path = video_dir.join(format!("{}.mmv", rec.patient_id));
        let (t, h, w) = peek_video_dims(&path)?;
        if h != w {
            return Err(Error::shape(format!("video {} not square: h={h} w={w}", rec.patient_id)));
        }
        if t < MIN_FRAMES {
            dropped_short += 1;
            continue;
        }
        records.push(rec);
    }
    if dropped_short > 0 {
        log::info!("dropped {dropped_short} record(s) with fewer than {MIN_FRAMES} frames");
    }
    Ok(Manifest { records, source_dir: video_dir, dropped_short })
}

pub fn write_manifest(manifest: &Manifest, csv_path: impl AsRef<Path>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(csv_path.as_ref())
        .map_err(|e| Error::manifest(format!("cannot write csv: {e}")))?;
    for rec in &manifest.records {
        wtr.serialize(rec)
            .map_err(|e| Error::manifest(format!("cannot write row: {e}")))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Keep a uniformly random ⌈p·n⌉-subset of the train split, deterministic per
/// seed; val/test untouched. Subsets nest: the subset for a smaller fraction
/// is a prefix of the seeded shuffle used for a larger one.
pub fn subsample_train(manifest: &Manifest, p: f64, seed: u64) -> Result<Manifest> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::argument(format!("fraction p = {p} must be in (0, 1]")));
    }
    let train_ids: Vec<&str> = manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.patient_id.as_str())
        .collect();
    let keep = (p * train_ids.len() as f64).ceil() as usize;
    let mut shuffled = train_ids.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let kept: HashSet<&str> = shuffled[..keep].iter().copied().collect();
    let records = manifest
        .records
        .iter()
        .filter(|r| r.split != Split::Train || kept.contains(r.patient_id.as_str()))
        .cloned()
        .collect();
    Ok(Manifest {
        records,
        source_dir: manifest.source_dir.clone(),
        dropped_short: manifest.dropped_short,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("echomode_dm_{name}_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn test_video(id: &str, t: usize, h: usize, w: usize) -> VideoTensor {
        let frames: Vec<u8> = (0..t * h * w).map(|i| (i % 251) as u8).collect();
        VideoTensor::new(id, t, h, w, frames).unwrap()
    }

    #[test]
    fn round_trip_identity() {
        let dir = tmpdir("rt");
        let v = test_video("p1", 112, 112, 112);
        let path = dir.join("p1.mmv");
        write_video(&v, &path).unwrap();
        let back = load_video(&path).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let dir = tmpdir("trunc");
        let path = dir.join("p2.mmv");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MMV1_MAGIC);
        bytes.extend_from_slice(&200u32.to_le_bytes());
        bytes.extend_from_slice(&112u32.to_le_bytes());
        bytes.extend_from_slice(&112u32.to_le_bytes());
        bytes.extend(std::iter::repeat(0u8).take(112 * 112 * 199));
        std::fs::write(&path, &bytes).unwrap();
        match load_video(&path) {
            Err(Error::Format(_)) => {}
            other => panic!("expected FormatError, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tmpdir("magic");
        let path = dir.join("p3.mmv");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00\x00").unwrap();
        assert!(matches!(load_video(&path), Err(Error::Format(_))));
    }

    #[test]
    fn non_square_is_shape_error() {
        let dir = tmpdir("sq");
        let v = test_video("p4", 112, 112, 64);
        let path = dir.join("p4.mmv");
        write_video(&v, &path).unwrap();
        assert!(matches!(load_video(&path), Err(Error::Shape(_))));
    }

    fn write_fixture_manifest(dir: &Path, rows: &[(&str, f64, &str, usize)]) -> PathBuf {
        let mut csv = String::from("patient_id,ef,split\n");
        for (id, ef, split, t) in rows {
            csv.push_str(&format!("{id},{ef},{split}\n"));
            write_video(&test_video(id, *t, 16, 16), dir.join(format!("{id}.mmv"))).unwrap();
        }
        let path = dir.join("manifest.csv");
        std::fs::write(&path, csv).unwrap();
        path
    }

    #[test]
    fn manifest_loads_valid_rows() {
        let dir = tmpdir("man");
        let csv = write_fixture_manifest(
            &dir,
            &[("a", 0.5, "train", 112), ("b", 0.3, "val", 112), ("c", 0.7, "test", 112)],
        );
        let m = load_manifest(&csv, &dir).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.dropped_short, 0);
    }

    #[test]
    fn manifest_rejects_out_of_range_ef() {
        let dir = tmpdir("ef");
        let csv = write_fixture_manifest(&dir, &[("a", 1.2, "train", 112)]);
        assert!(matches!(load_manifest(&csv, &dir), Err(Error::Manifest(_))));
    }

    #[test]
    fn manifest_rejects_duplicate_ids() {
        let dir = tmpdir("dup");
        let csv = write_fixture_manifest(&dir, &[("a", 0.5, "train", 112)]);
        let mut text = std::fs::read_to_string(&csv).unwrap();
        text.push_str("a,0.4,val\n");
        std::fs::write(&csv, text).unwrap();
        assert!(matches!(load_manifest(&csv, &dir), Err(Error::Manifest(_))));
    }

    #[test]
    fn manifest_drops_short_videos() {
        let dir = tmpdir("short");
        let csv =
            write_fixture_manifest(&dir, &[("a", 0.5, "train", 112), ("b", 0.4, "train", 100)]);
        let m = load_manifest(&csv, &dir).unwrap();
        assert_eq!(m.records.len(), 1);
        assert_eq!(m.dropped_short, 1);
    }

    fn synthetic_manifest(n_train: usize) -> Manifest {
        let records = (0..n_train)
            .map(|i| PatientRecord {
                patient_id: format!("p{i}"),
                ef: 0.5,
                split: Split::Train,
            })
            .collect();
        Manifest { records, source_dir: PathBuf::from("."), dropped_short: 0 }
    }

    #[test]
    fn subsample_identity_at_full_fraction() {
        let m = synthetic_manifest(100);
        let s = subsample_train(&m, 1.0, 7).unwrap();
        assert_eq!(s.split_ids(Split::Train).len(), 100);
    }

    #[test]
    fn subsample_deterministic() {
        let m = synthetic_manifest(100);
        let a = subsample_train(&m, 0.5, 3).unwrap().split_ids(Split::Train);
        let b = subsample_train(&m, 0.5, 3).unwrap().split_ids(Split::Train);
        assert_eq!(a.len(), 50);
        assert_eq!(a, b);
    }

    #[test]
    fn subsample_two_percent_of_ten_thousand() {
        let m = synthetic_manifest(10_000);
        let s = subsample_train(&m, 0.02, 1).unwrap();
        assert_eq!(s.split_ids(Split::Train).len(), 200);
    }

    #[test]
    fn subsample_rejects_bad_fraction() {
        let m = synthetic_manifest(10);
        assert!(matches!(subsample_train(&m, 0.0, 0), Err(Error::Argument(_))));
        assert!(matches!(subsample_train(&m, 1.5, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn subsample_nesting() {
        let m = synthetic_manifest(100);
        for &(p1, p2) in &[(0.1, 0.3), (0.3, 0.7), (0.05, 1.0)] {
            let small: HashSet<String> =
                subsample_train(&m, p1, 11).unwrap().split_ids(Split::Train).into_iter().collect();
            let big: HashSet<String> =
                subsample_train(&m, p2, 11).unwrap().split_ids(Split::Train).into_iter().collect();
            assert!(small.is_subset(&big), "p={p1} subset not nested in p={p2}");
        }
    }
}
