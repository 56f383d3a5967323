//! Dense tensors, a reverse-mode tape, attention, Adam, and checkpoints.

mod attention;
mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use attention::{self_attention, AttentionVars};
pub use checkpoint::{
    digest, hex, load_checkpoint, save_checkpoint, ConfigEcho, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use params::{AdamConfig, Grads, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Worst elementwise disagreement between analytic and central-difference
/// gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`. The floor keeps entries
/// whose true gradient is zero from dividing rounding noise by zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `loss` for every
/// element of every parameter accepted by `select`.
pub fn gradient_check(
    params: &ParamStore,
    analytic: &Grads,
    eps: f64,
    floor: f64,
    select: impl Fn(&str) -> bool,
    loss: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<GradCheck> {
    let mut work = params.clone();
    let names: Vec<String> = params
        .names()
        .filter(|n| select(n))
        .map(str::to_string)
        .collect();
    let mut report = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for name in names {
        let len = params.get(&name).unwrap().len();
        for i in 0..len {
            let orig = params.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let up = loss(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let down = loss(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(&name).map(|g| g.data()[i]).unwrap_or(0.0);
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), i, a, numeric));
            }
        }
    }
    Ok(report)
}
