//! Identity and age supervision.
//!
//! The identity loss is an additive-angular-margin softmax over speakers on
//! the identity embedding: both the embedding rows and the class rows are
//! L2-normalized, the target-class cosine gets the margin folded in through
//! the identity cos(d + m) = cos d cos m - sin d sin m, and everything is
//! scaled before the cross entropy. The age loss is a plain softmax cross
//! entropy over seven age groups on the age embedding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::ParamSet;

pub const NUM_AGE_GROUPS: usize = 7;
/// Additive angular margin on the target speaker.
pub const ID_MARGIN: f64 = 0.2;
/// Logit scale applied after the margin shift.
pub const ID_SCALE: f64 = 48.0;

/// Decade bins with inclusive upper edges: <=20, <=30, ... <=70, older.
pub fn age_group(age_years: f64) -> usize {
    let edges = [20.0, 30.0, 40.0, 50.0, 60.0, 70.0];
    for (i, &e) in edges.iter().enumerate() {
        if age_years <= e {
            return i;
        }
    }
    NUM_AGE_GROUPS - 1
}

/// Insert freshly initialized classifier heads. `head.id.w` holds one row
/// per speaker; only its direction matters.
pub fn init_head_params<F: Real, R: Rng>(
    params: &mut ParamSet<F>,
    embed_dim: usize,
    num_speakers: usize,
    rng: &mut R,
) {
    let sd = 1.0 / (embed_dim as f64).sqrt();
    params.insert(
        "head.id.w".into(),
        Tensor::randn(&[num_speakers, embed_dim], sd, rng),
    );
    params.insert(
        "head.age.w".into(),
        Tensor::randn(&[embed_dim, NUM_AGE_GROUPS], sd, rng),
    );
    params.insert("head.age.b".into(), Tensor::zeros(&[NUM_AGE_GROUPS]));
}

/// Add the classifier head parameters from `params` to the graph.
pub fn add_head_params<F: Real>(g: &mut Graph<F>, params: &ParamSet<F>) -> Result<()> {
    for name in ["head.id.w", "head.age.w", "head.age.b"] {
        let t = params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))?;
        g.param(name, t.clone())?;
    }
    Ok(())
}

/// Append the angular-margin identity loss for a [B, d] embedding node.
/// `speakers[i]` is the class row of item i. Returns a scalar node.
pub fn identity_loss<F: Real>(
    g: &mut Graph<F>,
    x_id: NodeId,
    speakers: &[usize],
    margin: f64,
    scale: f64,
) -> Result<NodeId> {
    if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) || scale <= 0.0 {
        return Err(Error::Invalid(format!(
            "identity loss: margin {margin}, scale {scale}"
        )));
    }
    let w = g.require_param("head.id.w")?;
    let num_classes = g.shape(w)[0];
    let wn = g.normalize_rows(w)?;
    let wt = g.transpose(wn)?;
    let xn = g.normalize_rows(x_id)?;
    let cos = g.matmul(xn, wt)?; // [B, S]

    let tgt = g.pick_per_row(cos, speakers.to_vec())?;
    let tgt2 = g.square(tgt)?;
    let neg = g.mul_scalar(tgt2, F::from_f64(-1.0));
    let sin2 = g.add_scalar(neg, F::one());
    // floored away from zero so the sqrt stays differentiable at |cos| = 1
    let sin2 = g.clamp(sin2, F::from_f64(1e-24), F::one());
    let sin = g.sqrt(sin2);
    let cos_part = g.mul_scalar(tgt, F::from_f64(margin.cos()));
    let sin_part = g.mul_scalar(sin, F::from_f64(margin.sin()));
    let margined = g.sub(cos_part, sin_part)?;
    let delta = g.sub(margined, tgt)?; // shift applied to the target column only

    let shift = g.one_hot_rows(delta, speakers.to_vec(), num_classes)?;
    let shifted = g.add(cos, shift)?;
    let logits = g.mul_scalar(shifted, F::from_f64(scale));
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.pick_per_row(logp, speakers.to_vec())?;
    let mean = g.mean(picked, None)?;
    Ok(g.mul_scalar(mean, F::from_f64(-1.0)))
}

/// Append the age-group cross entropy for a [B, d] embedding node.
pub fn age_loss<F: Real>(g: &mut Graph<F>, x_age: NodeId, groups: &[usize]) -> Result<NodeId> {
    let w = g.require_param("head.age.w")?;
    let b = g.require_param("head.age.b")?;
    let z = g.matmul(x_age, w)?;
    let z = g.bias_add(z, b)?;
    let logp = g.log_softmax(z, 1)?;
    let picked = g.pick_per_row(logp, groups.to_vec())?;
    let mean = g.mean(picked, None)?;
    Ok(g.mul_scalar(mean, F::from_f64(-1.0)))
}
