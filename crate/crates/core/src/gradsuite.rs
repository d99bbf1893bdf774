//! Named finite-difference gradient checks, one case per loss surface.
//!
//! Every case wires the production graph builders at desk-size dims and
//! sweeps every parameter coordinate, so a broken backward rule in any op
//! the losses touch shows up as a large relative error. Embedding inputs
//! are declared as parameters where that widens coverage.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::backbone::{self, ModelDims};
use crate::error::{Error, Result};
use crate::graph::{gradcheck, Graph, Inputs, NodeId};
use crate::mi::{self, MiTerm};
use crate::objectives::{self, ID_MARGIN, ID_SCALE};
use crate::tensor::Tensor;
use crate::ParamSet;

pub const CASE_NAMES: [&str; 7] = [
    "stats_pool",
    "attentive_pool",
    "identity_loss",
    "age_loss",
    "mim_plain",
    "mim_aging_aware",
    "estimator_nll",
];

/// Default central-difference step. Small enough that a rectifier kink
/// almost never straddles the probe interval, large enough that f64
/// rounding stays far below the acceptance tolerance.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Worst coordinate over every probed point of one case.
#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    /// Coordinates swept, summed over points.
    pub coords_checked: usize,
    pub points: usize,
}

struct Case {
    graph: Graph<f64>,
    inputs: Inputs<f64>,
    loss: NodeId,
}

// Desk-size dims shared by all cases.
const N: usize = 3;
const T: usize = 6;
const DIMS: ModelDims = ModelDims {
    channels: 5,
    enc_hidden: 6,
    attn_hidden: 4,
    embed_dim: 8,
};
const SPEAKERS: usize = 4;

/// Build one named case at a seed. Unknown names list the valid ones.
fn build(name: &str, seed: u64) -> Result<Case> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    match name {
        "stats_pool" => pooling(&mut rng, false),
        "attentive_pool" => pooling(&mut rng, true),
        "identity_loss" => {
            let mut g = Graph::new();
            let x = g.param("x", Tensor::randn(&[N, DIMS.embed_dim], 1.0, &mut rng))?;
            let mut params = ParamSet::new();
            objectives::init_head_params(&mut params, DIMS.embed_dim, SPEAKERS, &mut rng);
            objectives::add_head_params(&mut g, &params)?;
            let loss = objectives::identity_loss(&mut g, x, &[0, 1, 2], ID_MARGIN, ID_SCALE)?;
            Ok(Case {
                graph: g,
                inputs: Inputs::new(),
                loss,
            })
        }
        "age_loss" => {
            let mut g = Graph::new();
            let x = g.param("x", Tensor::randn(&[N, DIMS.embed_dim], 1.0, &mut rng))?;
            let mut params = ParamSet::new();
            objectives::init_head_params(&mut params, DIMS.embed_dim, SPEAKERS, &mut rng);
            objectives::add_head_params(&mut g, &params)?;
            let loss = objectives::age_loss(&mut g, x, &[0, 3, 6])?;
            Ok(Case {
                graph: g,
                inputs: Inputs::new(),
                loss,
            })
        }
        "mim_plain" => contrast(&mut rng, MiTerm::LogRatio, &[1.0; N]),
        "mim_aging_aware" => {
            let weights = [
                mi::aa_weight(0.0, std::f64::consts::E),
                mi::aa_weight(7.0, std::f64::consts::E),
                mi::aa_weight(30.0, std::f64::consts::E),
            ];
            contrast(
                &mut rng,
                MiTerm::ClampedDensity {
                    dim: DIMS.embed_dim,
                },
                &weights,
            )
        }
        "estimator_nll" => {
            let (mut g, _, pos) = matched_density(&mut rng)?;
            let loss = mi::estimator_nll(&mut g, pos)?;
            Ok(Case {
                graph: g,
                inputs: Inputs::new(),
                loss,
            })
        }
        other => Err(Error::Invalid(format!(
            "unknown gradcheck case `{other}`; known: {}",
            CASE_NAMES.join(", ")
        ))),
    }
}

/// Both pooling cases run the full embedding subgraph and pick a branch
/// with a sum-of-squares readout; the untouched branch's parameters then
/// carry exact-zero gradients, which the sweep confirms against zero
/// differences. Biases are drawn randomly rather than production-style
/// zeros: a zero second-layer bias parks rectifier pre-activations exactly
/// on their kink, which is a property of that point, not of the gradients.
fn pooling(rng: &mut ChaCha12Rng, attentive: bool) -> Result<Case> {
    let (c, h, ha, d) = (
        DIMS.channels,
        DIMS.enc_hidden,
        DIMS.attn_hidden,
        DIMS.embed_dim,
    );
    let mut params = ParamSet::new();
    let mut put = |name: &str, shape: &[usize], sd: f64, rng: &mut ChaCha12Rng| {
        params.insert(name.to_string(), Tensor::randn(shape, sd, rng));
    };
    put("enc.w1", &[c, h], 0.6, rng);
    put("enc.b1", &[h], 0.3, rng);
    put("enc.w2", &[h, h], 0.6, rng);
    put("enc.b2", &[h], 0.3, rng);
    put("pool.init.proj", &[2 * h, d], 0.4, rng);
    put("pool.age.attn.w", &[h, ha], 0.5, rng);
    put("pool.age.attn.b", &[ha], 0.3, rng);
    put("pool.age.attn.v", &[ha, 1], 0.5, rng);
    put("pool.age.proj", &[2 * h, d], 0.4, rng);
    let mut g = Graph::new();
    backbone::add_backbone_params(&mut g, &params)?;
    let embed = backbone::build_embeddings(&mut g, DIMS, N, T)?;
    let picked = if attentive { embed.x_age } else { embed.x_init };
    let sq = g.square(picked)?;
    let loss = g.sum(sq, None)?;
    let mut inputs = Inputs::new();
    for i in 0..N {
        inputs.insert(
            format!("frames.{i}"),
            Tensor::randn(&[T, DIMS.channels], 1.0, rng),
        );
    }
    Ok(Case {
        graph: g,
        inputs,
        loss,
    })
}

fn matched_density(rng: &mut ChaCha12Rng) -> Result<(Graph<f64>, mi::CondNodes, NodeId)> {
    let d = DIMS.embed_dim;
    let mut params = ParamSet::new();
    mi::init_estimator_params(&mut params, d, rng);
    let mut g = Graph::new();
    mi::add_estimator_params(&mut g, &params)?;
    let x = g.param("x", Tensor::randn(&[N, d], 1.0, rng))?;
    let cond = mi::cond_stats(&mut g, x)?;
    let y = g.param("y", Tensor::randn(&[N, d], 1.0, rng))?;
    let pos = mi::cond_log_density(&mut g, &cond, y)?;
    Ok((g, cond, pos))
}

fn contrast(rng: &mut ChaCha12Rng, term: MiTerm, weights: &[f64]) -> Result<Case> {
    let (mut g, cond, pos) = matched_density(rng)?;
    let y = g.require_param("y")?;
    let neg_rows = g.gather_rows(y, vec![1, 2, 0])?;
    let neg = mi::cond_log_density(&mut g, &cond, neg_rows)?;
    let loss = mi::mim_loss(&mut g, pos, neg, weights, term)?;
    Ok(Case {
        graph: g,
        inputs: Inputs::new(),
        loss,
    })
}

/// Sweep one case at `points` seeds derived from `seed` and keep the worst
/// coordinate.
pub fn check_case(name: &str, seed: u64, points: usize, eps: f64) -> Result<CaseReport> {
    if points == 0 {
        return Err(Error::Invalid("gradcheck needs at least one point".into()));
    }
    let known = CASE_NAMES
        .iter()
        .find(|&&n| n == name)
        .copied()
        .ok_or_else(|| {
            Error::Invalid(format!(
                "unknown gradcheck case `{name}`; known: {}",
                CASE_NAMES.join(", ")
            ))
        })?;
    let mut report = CaseReport {
        name: known,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        coords_checked: 0,
        points,
    };
    for p in 0..points {
        let mut case = build(name, seed.wrapping_add(p as u64))?;
        let r = gradcheck(&mut case.graph, &case.inputs, case.loss, eps)?;
        report.coords_checked += r.coords_checked;
        if r.max_rel_err > report.max_rel_err {
            report.max_rel_err = r.max_rel_err;
            report.worst_param = r.worst_param;
            report.worst_coord = r.worst_coord;
        }
    }
    Ok(report)
}

/// Run every case; order follows [`CASE_NAMES`].
pub fn check_all(seed: u64, points: usize, eps: f64) -> Result<Vec<CaseReport>> {
    CASE_NAMES
        .iter()
        .map(|name| check_case(name, seed, points, eps))
        .collect()
}
