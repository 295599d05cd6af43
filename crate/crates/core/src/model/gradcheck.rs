use rand::seq::index::sample;

use super::{EncodedInput, ModelError, SlaModel};
use crate::rng::{stream, Stream};

/// Denominator floor. Central differences in f64 carry roundoff of about
/// `1e-16 * |loss| / eps`, near 1e-11 at `eps = 1e-5`; dividing that by a
/// smaller floor would report noise on exactly-zero gradients as failure.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Which coordinates of each tensor to perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    All,
    /// Up to this many coordinates per tensor, drawn from the seed.
    Sampled { per_tensor: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }
}

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares backprop gradients of the loss on `input` with central
/// differences of step `eps`, tensor by tensor.
pub fn gradient_check(
    model: &SlaModel,
    input: &EncodedInput,
    selection: Selection,
    eps: f64,
) -> Result<GradCheckReport, ModelError> {
    let (_, grads) = model.loss_and_grads(input)?;
    let mut probe = model.clone();
    let names = model.tensor_names();
    let mut rng = match selection {
        Selection::Sampled { seed, .. } => Some(stream(seed, Stream::GradCheck)),
        Selection::All => None,
    };
    let mut groups = Vec::with_capacity(names.len());
    for (t, name) in names.into_iter().enumerate() {
        let len = grads[t].len();
        let coords: Vec<usize> = match (selection, rng.as_mut()) {
            (Selection::Sampled { per_tensor, .. }, Some(rng)) if per_tensor < len => {
                let mut c = sample(rng, len, per_tensor).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let mut group = GroupError {
            name,
            checked: coords.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for c in coords {
            let orig = probe.tensors()[t].data()[c];
            probe.tensors_mut()[t].data_mut()[c] = orig + eps;
            let up = probe.loss(input)?;
            probe.tensors_mut()[t].data_mut()[c] = orig - eps;
            let down = probe.loss(input)?;
            probe.tensors_mut()[t].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads[t].data()[c];
            group.max_rel_error = group.max_rel_error.max(relative_error(analytic, numeric));
            group.max_abs_error = group.max_abs_error.max((analytic - numeric).abs());
        }
        groups.push(group);
    }
    Ok(GradCheckReport { groups })
}
