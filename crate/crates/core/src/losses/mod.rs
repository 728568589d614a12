//! Training objectives: transducer loss, alignment-masked decoder
//! cross-entropy, and their weighted sum.

pub mod aed;
pub mod alignment;
pub mod rnnt;

pub use aed::{aed_ce_loss, smoothed_nll, HorizonLogits};
pub use alignment::{fast_alignment, offline_alignment, FastAlignment};
pub use rnnt::{rnnt_loss, rnnt_loss_autodiff, Lattice, MAX_TARGET_LEN};

use crate::error::Result;
use crate::numeric::{Graph, Var};

/// `rnnt + aed_weight · aed`.
pub fn taed_loss(rnnt: f64, aed: f64, aed_weight: f64) -> f64 {
    rnnt + aed_weight * aed
}

/// Graph form of [`taed_loss`]; a missing AED term contributes nothing.
pub fn taed_loss_var(g: &mut Graph, rnnt: Var, aed: Option<Var>, aed_weight: f64) -> Result<Var> {
    match aed {
        Some(a) if aed_weight != 0.0 => {
            let weighted = g.scale(a, aed_weight)?;
            g.add(rnnt, weighted)
        }
        _ => Ok(rnnt),
    }
}
