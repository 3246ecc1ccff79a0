//! Training objectives over the autodiff graph.
//!
//! Projection batches are 2-d arrays with rows in patient-major order:
//! for each patient, its M original views followed by their M augmented
//! counterparts (2M rows per patient). The positive partner of row `a`
//! within a patient block is row `(a + M) mod 2M`.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Patient-aware term: anchors and positives are the M original views of
/// each patient; denominators run over every original view in the batch.
/// `p_all` holds 2M rows per patient; the augmented rows are ignored.
pub fn patient_aware_loss<F: Scalar>(
    g: &mut Graph<F>,
    p_all: Var,
    m: usize,
    tau: F,
) -> Result<Var> {
    if m < 2 {
        return Err(Error::argument("patient-aware loss needs M >= 2 views"));
    }
    let originals = g.take_block_rows(p_all, 2 * m, m)?;
    g.patient_aware_loss(originals, m, tau)
}

/// Structure-aware term: within each patient block of 2M rows, each row's
/// positive is its flip partner and negatives are the other 2M-2 rows of
/// the same patient.
pub fn structure_aware_loss<F: Scalar>(
    g: &mut Graph<F>,
    p_all: Var,
    m: usize,
    tau: F,
) -> Result<Var> {
    g.structure_aware_loss(p_all, m, tau)
}

/// Combined contrastive objective: alpha * patient-aware + (1 - alpha) *
/// structure-aware. `alpha` must lie in [0, 1]; extremes skip the unused
/// term entirely (so alpha = 0 is valid even with M = 1).
pub fn combined_cl_loss<F: Scalar>(
    g: &mut Graph<F>,
    p_all: Var,
    m: usize,
    tau: F,
    alpha: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::argument(format!("alpha must be in [0, 1], got {alpha}")));
    }
    if alpha == 0.0 {
        return structure_aware_loss(g, p_all, m, tau);
    }
    let pa = patient_aware_loss(g, p_all, m, tau)?;
    if alpha == 1.0 {
        return Ok(pa);
    }
    let sa = structure_aware_loss(g, p_all, m, tau)?;
    let pa_scaled = g.scale(pa, F::fr(alpha));
    let sa_scaled = g.scale(sa, F::fr(1.0 - alpha));
    g.add(pa_scaled, sa_scaled)
}

/// Mean squared error against fixed targets, for the regression head.
pub fn regression_loss<F: Scalar>(
    g: &mut Graph<F>,
    pred: Var,
    targets: &ndarray::ArrayD<F>,
) -> Result<Var> {
    g.mse(pred, targets)
}
