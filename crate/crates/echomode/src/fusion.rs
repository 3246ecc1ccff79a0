//! Early and late fusion of the M per-angle M-mode views of a patient.
//!
//! Early fusion stacks the M images as channels of one encoder input.
//! Late fusion encodes each view separately to a K-vector and combines the
//! M vectors by concatenation, averaging, or an LSTM pass in increasing-
//! angle order.

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmode::MModeStack;
use crate::nn::{lstm_cell, lstm_init, BoundParams, ParamStore};
use crate::tensor::{Graph, Scalar, Var};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    /// M-channel input image; the encoder itself does the mixing.
    #[serde(rename = "early")]
    EarlyChannels,
    #[serde(rename = "concat")]
    LateConcat,
    #[serde(rename = "mean")]
    LateMean,
    #[serde(rename = "lstm")]
    LateLstm,
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(FusionKind::EarlyChannels),
            "concat" => Ok(FusionKind::LateConcat),
            "mean" => Ok(FusionKind::LateMean),
            "lstm" => Ok(FusionKind::LateLstm),
            other => Err(Error::argument(format!(
                "unknown fusion '{other}' (expected early|concat|mean|lstm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub kind: FusionKind,
    /// Number of M-mode views per patient.
    pub m: usize,
    /// Per-view feature dimension out of the encoder.
    pub k: usize,
    pub lstm_dim: usize,
}

impl FusionConfig {
    pub fn new(kind: FusionKind, m: usize, k: usize) -> Self {
        FusionConfig { kind, m, k, lstm_dim: 256 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.lstm_dim == 0 {
            return Err(Error::argument("fusion dimensions must be positive"));
        }
        Ok(())
    }

    /// Dimension of the joint per-patient representation.
    pub fn joint_dim(&self) -> usize {
        match self.kind {
            FusionKind::EarlyChannels | FusionKind::LateMean => self.k,
            FusionKind::LateConcat => self.k * self.m,
            FusionKind::LateLstm => self.lstm_dim,
        }
    }

    /// Channels the encoder must accept.
    pub fn encoder_channels(&self) -> usize {
        match self.kind {
            FusionKind::EarlyChannels => self.m,
            _ => 1,
        }
    }

    /// Register fusion parameters (only the LSTM kind has any).
    pub fn init_params<F: Scalar>(&self, store: &mut ParamStore<F>, prefix: &str, rng: &mut ChaCha8Rng) {
        if self.kind == FusionKind::LateLstm {
            lstm_init(store, prefix, self.k, self.lstm_dim, rng);
        }
    }
}

/// Stack the M views of one patient into an (M, s, t) channel image.
pub fn fuse_early(stack: &MModeStack) -> Result<Array3<f32>> {
    let m = stack.images.len();
    if m == 0 {
        return Err(Error::argument("empty M-mode stack"));
    }
    let s = stack.images[0].s;
    let t = stack.images[0].t_clip;
    let mut out = Array3::zeros((m, s, t));
    for (c, img) in stack.images.iter().enumerate() {
        if img.s != s || img.t_clip != t {
            return Err(Error::shape("M-mode views in a stack must share dimensions"));
        }
        for k in 0..s {
            for f in 0..t {
                out[(c, k, f)] = img.at(k, f);
            }
        }
    }
    Ok(out)
}

/// Late fusion in the graph: `features` is (B, M, K) with views in
/// increasing-angle order; returns the (B, joint_dim) representation.
/// `params`/`prefix` are only consulted for the LSTM kind.
pub fn fuse_late<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &FusionConfig,
    features: Var,
    params: Option<(&BoundParams<F>, &str)>,
) -> Result<Var> {
    cfg.validate()?;
    let shape: Vec<usize> = g.value(features).shape().to_vec();
    if shape.len() != 3 || shape[1] != cfg.m || shape[2] != cfg.k {
        return Err(Error::shape(format!(
            "fuse_late expects (B, {}, {}), got {shape:?}",
            cfg.m, cfg.k
        )));
    }
    let b = shape[0];
    match cfg.kind {
        FusionKind::EarlyChannels => {
            Err(Error::argument("early fusion happens before the encoder, not on features"))
        }
        FusionKind::LateConcat => {
            let parts: Vec<Var> = (0..cfg.m)
                .map(|i| g.select_axis1(features, i))
                .collect::<Result<_>>()?;
            g.concat_cols(&parts)
        }
        FusionKind::LateMean => g.mean_axis1(features),
        FusionKind::LateLstm => {
            let (params, prefix) = params
                .ok_or_else(|| Error::argument("LSTM fusion requires parameters"))?;
            let mut h = g.leaf(ArrayD::zeros(IxDyn(&[b, cfg.lstm_dim])));
            let mut c = g.leaf(ArrayD::zeros(IxDyn(&[b, cfg.lstm_dim])));
            for i in 0..cfg.m {
                let x_t = g.select_axis1(features, i)?;
                let (h_t, c_t) = lstm_cell(g, params, prefix, x_t, h, c)?;
                h = h_t;
                c = c_t;
            }
            Ok(h)
        }
    }
}

/// Pure convenience wrapper used outside training loops.
pub fn fuse_late_values<F: Scalar>(
    cfg: &FusionConfig,
    features: &ArrayD<F>,
    store: Option<(&ParamStore<F>, &str)>,
) -> Result<ArrayD<F>> {
    let mut g = Graph::<F>::new();
    let feats = g.leaf(features.clone());
    let out = match store {
        Some((store, prefix)) => {
            let binding = store.bind(&mut g);
            let params = BoundParams { store, binding: &binding };
            fuse_late(&mut g, cfg, feats, Some((&params, prefix)))?
        }
        None => fuse_late(&mut g, cfg, feats, None)?,
    };
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mmode::MModeImage;
    use ndarray::Axis;
    use rand::{Rng, SeedableRng};

    fn features(b: usize, m: usize, k: usize, seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[b, m, k]), |_| rng.gen_range(-1.0..1.0))
    }

    fn permute_modes(x: &ArrayD<f64>, order: &[usize]) -> ArrayD<f64> {
        let mut y = x.clone();
        for (dst, &src) in order.iter().enumerate() {
            let col = x.index_axis(Axis(1), src).to_owned();
            y.index_axis_mut(Axis(1), dst).assign(&col);
        }
        y
    }

    #[test]
    fn concat_order_and_values() {
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cfg = FusionConfig::new(FusionKind::LateConcat, 2, 2);
        let out = fuse_late_values(&cfg, &x, None).unwrap();
        assert_eq!(out.shape(), &[1, 4]);
        assert_eq!(out.as_slice().unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn joint_dims_match_config() {
        let (b, m, k) = (3, 4, 5);
        let x = features(b, m, k, 0);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [FusionKind::LateConcat, FusionKind::LateMean, FusionKind::LateLstm] {
            let mut cfg = FusionConfig::new(kind, m, k);
            cfg.lstm_dim = 7;
            if kind == FusionKind::LateLstm {
                cfg.init_params(&mut store, "fuse", &mut rng);
            }
            let params = if kind == FusionKind::LateLstm { Some((&store, "fuse")) } else { None };
            let out = fuse_late_values(&cfg, &x, params).unwrap();
            assert_eq!(out.shape(), &[b, cfg.joint_dim()], "{kind:?}");
        }
    }

    #[test]
    fn mean_is_permutation_invariant() {
        let x = features(2, 4, 3, 1);
        let cfg = FusionConfig::new(FusionKind::LateMean, 4, 3);
        let base = fuse_late_values(&cfg, &x, None).unwrap();
        let shuffled = permute_modes(&x, &[3, 1, 0, 2]);
        let after = fuse_late_values(&cfg, &shuffled, None).unwrap();
        for (a, b) in base.iter().zip(after.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_lstm_are_permutation_sensitive() {
        let x = features(2, 4, 3, 2);
        let shuffled = permute_modes(&x, &[3, 1, 0, 2]);

        let cfg = FusionConfig::new(FusionKind::LateConcat, 4, 3);
        let base = fuse_late_values(&cfg, &x, None).unwrap();
        let after = fuse_late_values(&cfg, &shuffled, None).unwrap();
        assert_ne!(base, after);

        let mut cfg = FusionConfig::new(FusionKind::LateLstm, 4, 3);
        cfg.lstm_dim = 5;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        cfg.init_params(&mut store, "fuse", &mut rng);
        let base = fuse_late_values(&cfg, &x, Some((&store, "fuse"))).unwrap();
        let after = fuse_late_values(&cfg, &shuffled, Some((&store, "fuse"))).unwrap();
        assert_ne!(base, after);
    }

    #[test]
    fn lstm_with_zero_params_gives_zero() {
        let x = features(3, 2, 4, 3);
        let mut cfg = FusionConfig::new(FusionKind::LateLstm, 2, 4);
        cfg.lstm_dim = 6;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        cfg.init_params(&mut store, "fuse", &mut rng);
        for i in 0..store.len() {
            store.array_mut(i).fill(0.0);
        }
        let out = fuse_late_values(&cfg, &x, Some((&store, "fuse"))).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn early_stack_slices_back_to_views() {
        let mk_img = |idx: usize| MModeImage {
            patient_id: "p".into(),
            theta_deg: idx as f64 * 60.0,
            mode_index: idx,
            s: 4,
            t_clip: 3,
            pixels: (0..12).map(|i| (idx * 100 + i) as f32).collect(),
        };
        let stack = MModeStack {
            images: (0..3).map(mk_img).collect(),
            angles_deg: vec![0.0, 60.0, 120.0],
            frame_indices: vec![0, 1, 2],
        };
        let arr = fuse_early(&stack).unwrap();
        assert_eq!(arr.shape(), &[3, 4, 3]);
        for (c, img) in stack.images.iter().enumerate() {
            for k in 0..4 {
                for f in 0..3 {
                    assert_eq!(arr[(c, k, f)], img.at(k, f));
                }
            }
        }
    }

    #[test]
    fn kind_parsing() {
        use std::str::FromStr;
        assert_eq!(FusionKind::from_str("early").unwrap(), FusionKind::EarlyChannels);
        assert_eq!(FusionKind::from_str("concat").unwrap(), FusionKind::LateConcat);
        assert_eq!(FusionKind::from_str("mean").unwrap(), FusionKind::LateMean);
        assert_eq!(FusionKind::from_str("lstm").unwrap(), FusionKind::LateLstm);
        assert!(FusionKind::from_str("attention").is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = FusionConfig::new(FusionKind::LateConcat, 3, 4);
        let x = features(2, 2, 4, 5);
        assert!(fuse_late_values(&cfg, &x, None).is_err());
    }
}
