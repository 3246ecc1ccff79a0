//! Model assembly: encoder + projection head for contrastive pre-training,
//! encoder + fusion + regression head for supervised EF prediction and for
//! probing/fine-tuning a pre-trained encoder.
//!
//! Parameter name prefixes partition the bundle: `enc.` (encoder), `fuse.`
//! (LSTM fusion, when used), `proj.` (projection head, pre-training only)
//! and `head.` (regression head). The freeze contract and the optimizer
//! key off these prefixes.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::fusion::{fuse_late, FusionConfig, FusionKind};
use crate::mmode::{MModeImage, MModeStack};
use crate::nn::{
    encoder_forward, encoder_init, mlp2_forward, mlp2_init, Binding, BoundParams, EncoderConfig,
    ParamStore,
};
use crate::tensor::{Graph, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHeadConfig {
    pub hidden: usize,
    pub out: usize,
}

impl Default for ProjectionHeadConfig {
    fn default() -> Self {
        ProjectionHeadConfig { hidden: 2048, out: 128 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { hidden: 256 }
    }
}

/// Everything needed to rebuild the parameter set from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub proj: ProjectionHeadConfig,
    pub head: HeadConfig,
}

impl ArchConfig {
    pub fn new(encoder: EncoderConfig, fusion: FusionConfig) -> Self {
        ArchConfig {
            encoder,
            fusion,
            proj: ProjectionHeadConfig::default(),
            head: HeadConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate()?;
        if self.encoder.in_channels != self.fusion.encoder_channels() {
            return Err(Error::argument(format!(
                "encoder in_channels {} does not match fusion ({} expected)",
                self.encoder.in_channels,
                self.fusion.encoder_channels()
            )));
        }
        if self.encoder.out_dim != self.fusion.k {
            return Err(Error::argument(format!(
                "encoder out_dim {} does not match fusion K {}",
                self.encoder.out_dim, self.fusion.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<F: Scalar> {
    pub arch: ArchConfig,
    pub params: ParamStore<F>,
    pub freeze_encoder: bool,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    arch: ArchConfig,
    freeze_encoder: bool,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

impl<F: Scalar> ModelBundle<F> {
    /// Fresh bundle with seeded initialization. Parameter order is fixed:
    /// encoder, fusion, projection head, regression head.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoder_init(&mut params, "enc", &arch.encoder, &mut rng);
        arch.fusion.init_params(&mut params, "fuse", &mut rng);
        mlp2_init(&mut params, "proj", arch.encoder.out_dim, arch.proj.hidden, arch.proj.out, &mut rng);
        mlp2_init(&mut params, "head", arch.fusion.joint_dim(), arch.head.hidden, 1, &mut rng);
        Ok(ModelBundle { arch, params, freeze_encoder: false })
    }

    /// Parameters in MMCK, architecture and freeze flag in a JSON sidecar
    /// next to the checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.params.save(path)?;
        let sidecar = Sidecar { arch: self.arch.clone(), freeze_encoder: self.freeze_encoder };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::checkpoint(e.to_string()))?;
        std::fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let params = ParamStore::load(path)?;
        let json = std::fs::read_to_string(sidecar_path(path)).map_err(|e| {
            Error::checkpoint(format!("missing sidecar {}: {e}", sidecar_path(path).display()))
        })?;
        let sidecar: Sidecar =
            serde_json::from_str(&json).map_err(|e| Error::checkpoint(format!("bad sidecar: {e}")))?;
        let bundle = ModelBundle { arch: sidecar.arch, params, freeze_encoder: sidecar.freeze_encoder };
        bundle.check_consistency()?;
        Ok(bundle)
    }

    /// Parameter names and shapes must match a fresh init of the declared
    /// architecture.
    pub fn check_consistency(&self) -> Result<()> {
        let reference = ModelBundle::<F>::init(self.arch.clone(), 0)?;
        if reference.params.len() != self.params.len() {
            return Err(Error::checkpoint(format!(
                "checkpoint has {} parameter blocks, architecture needs {}",
                self.params.len(),
                reference.params.len()
            )));
        }
        for i in 0..self.params.len() {
            if self.params.name(i) != reference.params.name(i)
                || self.params.array(i).shape() != reference.params.array(i).shape()
            {
                return Err(Error::checkpoint(format!(
                    "parameter {} ('{}', {:?}) does not match architecture ('{}', {:?})",
                    i,
                    self.params.name(i),
                    self.params.array(i).shape(),
                    reference.params.name(i),
                    reference.params.array(i).shape(),
                )));
            }
        }
        Ok(())
    }
}

fn stack_dims(stack: &MModeStack) -> Result<(usize, usize, usize)> {
    if stack.images.is_empty() {
        return Err(Error::shape("empty M-mode stack"));
    }
    let s = stack.images[0].s;
    let t = stack.images[0].t_clip;
    for img in &stack.images {
        if img.s != s || img.t_clip != t {
            return Err(Error::shape("M-mode views in a stack must share dimensions"));
        }
    }
    Ok((stack.images.len(), s, t))
}

fn copy_image<F: Scalar>(dst: &mut ArrayD<F>, batch: usize, channel: usize, img: &MModeImage) {
    for k in 0..img.s {
        for f in 0..img.t_clip {
            dst[IxDyn(&[batch, channel, k, f])] = F::fr(img.at(k, f) as f64);
        }
    }
}

/// Encoder input from a batch of patient stacks. Early fusion: (B, M, s, t).
/// Late fusion: (B*M, 1, s, t), patient-major.
pub fn batch_from_stacks<F: Scalar>(
    stacks: &[MModeStack],
    fusion: &FusionConfig,
) -> Result<ArrayD<F>> {
    if stacks.is_empty() {
        return Err(Error::argument("empty batch"));
    }
    let (m, s, t) = stack_dims(&stacks[0])?;
    if m != fusion.m {
        return Err(Error::shape(format!("stack has {m} views, fusion expects {}", fusion.m)));
    }
    let b = stacks.len();
    let early = fusion.kind == FusionKind::EarlyChannels;
    let mut x = if early {
        ArrayD::zeros(IxDyn(&[b, m, s, t]))
    } else {
        ArrayD::zeros(IxDyn(&[b * m, 1, s, t]))
    };
    for (i, stack) in stacks.iter().enumerate() {
        let (mi, si, ti) = stack_dims(stack)?;
        if (mi, si, ti) != (m, s, t) {
            return Err(Error::shape("stacks in a batch must share dimensions"));
        }
        for (v, img) in stack.images.iter().enumerate() {
            if early {
                copy_image(&mut x, i, v, img);
            } else {
                copy_image(&mut x, i * m + v, 0, img);
            }
        }
    }
    Ok(x)
}

/// Supervised/probe forward on a prepared batch: returns (B, 1) predicted
/// EF. The projection head is never evaluated here.
pub fn forward_supervised_batch<F: Scalar>(
    g: &mut Graph<F>,
    params: &BoundParams<F>,
    arch: &ArchConfig,
    x: Var,
) -> Result<Var> {
    let fusion = &arch.fusion;
    let joint = match fusion.kind {
        FusionKind::EarlyChannels => encoder_forward(g, params, "enc", &arch.encoder, x)?,
        _ => {
            let feats = encoder_forward(g, params, "enc", &arch.encoder, x)?;
            let bm = g.value(feats).shape()[0];
            if bm % fusion.m != 0 {
                return Err(Error::shape(format!(
                    "feature rows {bm} not divisible by M={}",
                    fusion.m
                )));
            }
            let b = bm / fusion.m;
            let grouped = g.reshape(feats, &[b, fusion.m, fusion.k])?;
            fuse_late(g, fusion, grouped, Some((params, "fuse")))?
        }
    };
    mlp2_forward(g, params, "head", joint)
}

/// Single-stack EF prediction, for evaluation and the CLI.
pub fn predict<F: Scalar>(bundle: &ModelBundle<F>, stack: &MModeStack) -> Result<f64> {
    let x = batch_from_stacks::<F>(std::slice::from_ref(stack), &bundle.arch.fusion)?;
    let mut g = Graph::<F>::new();
    let binding = bundle.params.bind(&mut g);
    let params = BoundParams { store: &bundle.params, binding: &binding };
    let xv = g.leaf(x);
    let y = forward_supervised_batch(&mut g, &params, &bundle.arch, xv)?;
    Ok(g.value(y).iter().next().copied().unwrap().f64())
}

/// Probe/fine-tune forward: identical computation to the supervised path
/// (the projection head is bypassed); whether the encoder trains is decided
/// by the optimizer's freeze mask.
pub fn forward_probe_batch<F: Scalar>(
    g: &mut Graph<F>,
    params: &BoundParams<F>,
    arch: &ArchConfig,
    x: Var,
) -> Result<Var> {
    forward_supervised_batch(g, params, arch, x)
}

/// Contrastive forward. Input batch must be laid out patient-major with 2M
/// single-view rows per patient (M originals then their M augmented
/// views); see [`contrastive_batch`]. Each view passes the encoder, is
/// L2-normalized, projected, and L2-normalized again. Returns the
/// (N*2M, proj.out) projection matrix.
pub fn forward_contrastive_batch<F: Scalar>(
    g: &mut Graph<F>,
    params: &BoundParams<F>,
    arch: &ArchConfig,
    x: Var,
    m: usize,
) -> Result<Var> {
    let rows = g.value(x).shape()[0];
    if rows % (2 * m) != 0 || rows / (2 * m) < 2 {
        return Err(Error::argument(format!(
            "contrastive batch needs >= 2 patients of 2M={} single-view rows, got {rows}",
            2 * m
        )));
    }
    if arch.encoder.in_channels != 1 {
        return Err(Error::argument("contrastive pre-training encodes views one channel at a time"));
    }
    let feats = encoder_forward(g, params, "enc", &arch.encoder, x)?;
    let feats = g.l2norm_rows(feats)?;
    let proj = mlp2_forward(g, params, "proj", feats)?;
    g.l2norm_rows(proj)
}

/// Build the contrastive input tensor (N*2M, 1, s, t) from patient stacks:
/// per patient, the M original views then their augmented counterparts.
pub fn contrastive_batch<F: Scalar>(
    stacks: &[MModeStack],
    aug: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ArrayD<F>> {
    if stacks.len() < 2 {
        return Err(Error::argument("contrastive batch needs at least 2 patients"));
    }
    let (m, s, t) = stack_dims(&stacks[0])?;
    let n = stacks.len();
    let mut x = ArrayD::zeros(IxDyn(&[n * 2 * m, 1, s, t]));
    for (i, stack) in stacks.iter().enumerate() {
        let (mi, si, ti) = stack_dims(stack)?;
        if (mi, si, ti) != (m, s, t) {
            return Err(Error::shape("stacks in a batch must share dimensions"));
        }
        for (v, img) in stack.images.iter().enumerate() {
            copy_image(&mut x, i * 2 * m + v, 0, img);
            let view = augment(img, aug, rng)?;
            copy_image(&mut x, i * 2 * m + m + v, 0, &view);
        }
    }
    Ok(x)
}

/// Bind a bundle's parameters into a fresh graph.
pub fn bind_bundle<'a, F: Scalar>(bundle: &'a ModelBundle<F>, g: &mut Graph<F>) -> Binding {
    bundle.params.bind(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mmode::MModeStack;
    use rand::Rng;

    fn tiny_arch(kind: FusionKind, m: usize) -> ArchConfig {
        let k = 8;
        let mut fusion = FusionConfig::new(kind, m, k);
        fusion.lstm_dim = 6;
        let mut encoder = EncoderConfig::tiny(fusion.encoder_channels(), k);
        encoder.stage_widths = vec![4, 8];
        encoder.blocks_per_stage = vec![1, 1];
        let mut arch = ArchConfig::new(encoder, fusion);
        arch.proj = ProjectionHeadConfig { hidden: 16, out: 5 };
        arch.head = HeadConfig { hidden: 7 };
        arch
    }

    fn fake_stack(id: &str, m: usize, s: usize, t: usize, seed: u64) -> MModeStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..m)
            .map(|v| MModeImage {
                patient_id: id.into(),
                theta_deg: v as f64 * 180.0 / m as f64,
                mode_index: v,
                s,
                t_clip: t,
                pixels: (0..s * t).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
            })
            .collect();
        MModeStack {
            images,
            angles_deg: (0..m).map(|v| v as f64 * 180.0 / m as f64).collect(),
            frame_indices: (0..t).collect(),
        }
    }

    #[test]
    fn supervised_forward_is_deterministic() {
        let arch = tiny_arch(FusionKind::LateConcat, 3);
        let bundle = ModelBundle::<f32>::init(arch, 1).unwrap();
        let stack = fake_stack("p0", 3, 32, 24, 2);
        let a = predict(&bundle, &stack).unwrap();
        let b = predict(&bundle, &stack).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
    }

    #[test]
    fn single_mode_concat_equals_mean() {
        // with M = 1 both late fusions are the identity, so Enc→Head output
        // must agree exactly given the same parameters
        let arch_c = tiny_arch(FusionKind::LateConcat, 1);
        let arch_m = tiny_arch(FusionKind::LateMean, 1);
        let bundle_c = ModelBundle::<f64>::init(arch_c, 4).unwrap();
        let mut bundle_m = ModelBundle::<f64>::init(arch_m, 4).unwrap();
        bundle_m.params = bundle_c.params.clone();
        let stack = fake_stack("p0", 1, 32, 24, 5);
        let a = predict(&bundle_c, &stack).unwrap();
        let b = predict(&bundle_m, &stack).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn early_fusion_consumes_m_channels() {
        let m = 10;
        let arch = tiny_arch(FusionKind::EarlyChannels, m);
        assert_eq!(arch.encoder.in_channels, m);
        let bundle = ModelBundle::<f32>::init(arch, 0).unwrap();
        let stack = fake_stack("p0", m, 32, 24, 6);
        let x = batch_from_stacks::<f32>(&[stack], &bundle.arch.fusion).unwrap();
        assert_eq!(x.shape(), &[1, m, 32, 24]);
    }

    #[test]
    fn default_concat_head_input_dim() {
        let fusion = FusionConfig::new(FusionKind::LateConcat, 10, 512);
        assert_eq!(fusion.joint_dim(), 5120);
        let arch = ArchConfig::new(EncoderConfig::default(), fusion);
        let bundle = ModelBundle::<f32>::init(arch, 0).unwrap();
        assert_eq!(bundle.params.get("head.l1.w").unwrap().shape(), &[5120, 256]);
        assert_eq!(bundle.params.get("proj.l1.w").unwrap().shape(), &[512, 2048]);
        assert_eq!(bundle.params.get("proj.l2.w").unwrap().shape(), &[2048, 128]);
    }

    #[test]
    fn contrastive_projections_live_on_unit_sphere() {
        let m = 2;
        let arch = tiny_arch(FusionKind::LateConcat, m);
        let bundle = ModelBundle::<f32>::init(arch, 7).unwrap();
        let stacks: Vec<MModeStack> =
            (0..3).map(|i| fake_stack(&format!("p{i}"), m, 32, 24, 10 + i as u64)).collect();
        let aug = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = contrastive_batch::<f32>(&stacks, &aug, &mut rng).unwrap();
        assert_eq!(x.shape(), &[3 * 2 * m, 1, 32, 24]);
        let mut g = Graph::<f32>::new();
        let binding = bind_bundle(&bundle, &mut g);
        let params = BoundParams { store: &bundle.params, binding: &binding };
        let xv = g.leaf(x);
        let p = forward_contrastive_batch(&mut g, &params, &bundle.arch, xv, m).unwrap();
        let pv = g.value(p);
        assert_eq!(pv.shape(), &[3 * 2 * m, 5]);
        for row in pv.rows() {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5, "norm {n}");
        }
    }

    #[test]
    fn identity_augmentation_pairs_views_exactly() {
        let m = 2;
        let arch = tiny_arch(FusionKind::LateConcat, m);
        let bundle = ModelBundle::<f64>::init(arch, 8).unwrap();
        let stacks: Vec<MModeStack> =
            (0..2).map(|i| fake_stack(&format!("p{i}"), m, 32, 24, 20 + i as u64)).collect();
        let aug = AugmentConfig { flip_prob: 0.0, noise_sigma: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = contrastive_batch::<f64>(&stacks, &aug, &mut rng).unwrap();
        let mut g = Graph::<f64>::new();
        let binding = bind_bundle(&bundle, &mut g);
        let params = BoundParams { store: &bundle.params, binding: &binding };
        let xv = g.leaf(x);
        let p = forward_contrastive_batch(&mut g, &params, &bundle.arch, xv, m).unwrap();
        let pv = g.value(p);
        for i in 0..2 {
            for v in 0..m {
                let orig = pv.index_axis(ndarray::Axis(0), i * 2 * m + v);
                let pair = pv.index_axis(ndarray::Axis(0), i * 2 * m + m + v);
                for (a, b) in orig.iter().zip(pair.iter()) {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn contrastive_needs_two_patients() {
        let stacks = vec![fake_stack("p0", 2, 16, 16, 0)];
        let aug = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(contrastive_batch::<f32>(&stacks, &aug, &mut rng).is_err());
    }

    #[test]
    fn probe_never_evaluates_projection_head() {
        let arch = tiny_arch(FusionKind::LateConcat, 2);
        let mut bundle = ModelBundle::<f64>::init(arch, 9).unwrap();
        for i in 0..bundle.params.len() {
            if bundle.params.name(i).starts_with("proj.") {
                bundle.params.array_mut(i).fill(f64::NAN);
            }
        }
        let stack = fake_stack("p0", 2, 32, 24, 30);
        let pred = predict(&bundle, &stack).unwrap();
        assert!(pred.is_finite());
    }

    #[test]
    fn gradients_reach_encoder() {
        let arch = tiny_arch(FusionKind::LateConcat, 2);
        let bundle = ModelBundle::<f64>::init(arch, 10).unwrap();
        let stack = fake_stack("p0", 2, 32, 24, 31);
        let x = batch_from_stacks::<f64>(&[stack], &bundle.arch.fusion).unwrap();
        let mut g = Graph::<f64>::new();
        let binding = bind_bundle(&bundle, &mut g);
        let params = BoundParams { store: &bundle.params, binding: &binding };
        let xv = g.leaf(x);
        let y = forward_supervised_batch(&mut g, &params, &bundle.arch, xv).unwrap();
        let target = ArrayD::from_elem(IxDyn(&[1, 1]), 0.5);
        let loss = g.mse(y, &target).unwrap();
        g.backward(loss);
        let enc_idx = bundle.params.index_of("enc.stem.w").unwrap();
        let grad = g.grad(binding.var(enc_idx)).expect("encoder grad present");
        assert!(grad.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let arch = tiny_arch(FusionKind::LateLstm, 2);
        let bundle = ModelBundle::<f32>::init(arch, 11).unwrap();
        let stack = fake_stack("p0", 2, 32, 24, 40);
        let before = predict(&bundle, &stack).unwrap();
        let path = std::env::temp_dir().join(format!("bundle_{}.mmck", std::process::id()));
        bundle.save(&path).unwrap();
        let loaded = ModelBundle::<f32>::load(&path).unwrap();
        assert_eq!(loaded, bundle);
        let after = predict(&loaded, &stack).unwrap();
        assert_eq!(before, after);
        std::fs::remove_file(&path).ok();
        std::fs::remove_file(sidecar_path(&path)).ok();
    }

    #[test]
    fn mismatched_checkpoint_rejected() {
        let bundle = ModelBundle::<f32>::init(tiny_arch(FusionKind::LateConcat, 2), 0).unwrap();
        let path = std::env::temp_dir().join(format!("bundle_bad_{}.mmck", std::process::id()));
        bundle.save(&path).unwrap();
        // rewrite the sidecar to claim a different mode count
        let mut other = tiny_arch(FusionKind::LateConcat, 3);
        other.encoder.in_channels = 1;
        let sidecar = Sidecar { arch: other, freeze_encoder: false };
        std::fs::write(sidecar_path(&path), serde_json::to_string(&sidecar).unwrap()).unwrap();
        assert!(matches!(ModelBundle::<f32>::load(&path), Err(Error::Checkpoint(_))));
        std::fs::remove_file(&path).ok();
        std::fs::remove_file(sidecar_path(&path)).ok();
    }

    #[test]
    fn inconsistent_arch_rejected_at_init() {
        let mut arch = tiny_arch(FusionKind::EarlyChannels, 4);
        arch.encoder.in_channels = 1;
        assert!(ModelBundle::<f32>::init(arch, 0).is_err());
    }
}
