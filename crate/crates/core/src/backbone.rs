//! Frame encoder, the two pooling branches, and the additive embedding
//! split.
//!
//! An utterance enters as a c x t frame matrix. A per-frame MLP (shared
//! across time) lifts frames to c' channels; plain statistics pooling over
//! time followed by a linear projection yields the initial embedding
//! `x_init`, an attentive statistics pooling branch yields the age
//! embedding `x_age`, and the identity embedding is defined by subtraction:
//! `x_id = x_init - x_age`.
//!
//! Everything exists twice: as a plain evaluation path used for embedding
//! export and scoring, and as a [`Graph`] builder used during training so
//! gradients flow through both branches. Both paths share the same formulas
//! (second moment minus squared mean, epsilon 1e-8 under the square root).

use rand::Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Inputs, NodeId};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::ParamSet;

/// Attention logits are clamped here before the softmax.
pub const ATTN_LOGIT_BOUND: f64 = 30.0;
/// Floor under both pooling variances.
pub const VAR_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct FeatureSequence<F: Real> {
    pub utterance_id: String,
    pub speaker_id: usize,
    pub age_years: f64,
    /// c x t, channels by time.
    pub frames: Tensor<F>,
}

impl<F: Real> FeatureSequence<F> {
    pub fn new(
        utterance_id: String,
        speaker_id: usize,
        age_years: f64,
        frames: Tensor<F>,
    ) -> Result<Self> {
        if frames.rank() != 2 || frames.shape()[1] < 2 {
            return Err(Error::Shape(format!(
                "feature sequence needs a c x t matrix with t >= 2, got {:?}",
                frames.shape()
            )));
        }
        if !frames.all_finite() {
            return Err(Error::Data(format!(
                "utterance `{utterance_id}`: non-finite frame values"
            )));
        }
        if age_years < 0.0 {
            return Err(Error::Data(format!(
                "utterance `{utterance_id}`: negative age"
            )));
        }
        Ok(FeatureSequence {
            utterance_id,
            speaker_id,
            age_years,
            frames,
        })
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingTriple<F: Real> {
    pub x_init: Tensor<F>,
    pub x_age: Tensor<F>,
    pub x_id: Tensor<F>,
}

impl<F: Real> EmbeddingTriple<F> {
    /// Max elementwise error of x_age + x_id against x_init.
    pub fn recompose_error(&self) -> F {
        self.x_init
            .data()
            .iter()
            .zip(self.x_age.data().iter().zip(self.x_id.data()))
            .fold(F::zero(), |m, (&i, (&a, &d))| {
                let e = ((a + d) - i).abs();
                if e > m {
                    e
                } else {
                    m
                }
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub channels: usize,
    pub enc_hidden: usize,
    pub attn_hidden: usize,
    pub embed_dim: usize,
}

impl ModelDims {
    pub fn from_config(cfg: &RunConfig) -> Self {
        ModelDims {
            channels: cfg.channels,
            enc_hidden: cfg.enc_hidden,
            attn_hidden: cfg.attn_hidden,
            embed_dim: cfg.embed_dim,
        }
    }

    /// Recover dimensions from a parameter set (checkpoints are
    /// self-describing through tensor shapes).
    pub fn from_params<F: Real>(params: &ParamSet<F>) -> Result<Self> {
        let shape = |name: &str| -> Result<&[usize]> {
            params
                .get(name)
                .map(|t| t.shape())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
        };
        Ok(ModelDims {
            channels: shape("enc.w1")?[0],
            enc_hidden: shape("enc.w1")?[1],
            attn_hidden: shape("pool.age.attn.w")?[1],
            embed_dim: shape("pool.init.proj")?[1],
        })
    }
}

fn glorot<F: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Insert freshly initialized encoder/pooling parameters.
pub fn init_backbone_params<F: Real, R: Rng>(
    params: &mut ParamSet<F>,
    dims: ModelDims,
    rng: &mut R,
) {
    let (c, h, ha, d) = (
        dims.channels,
        dims.enc_hidden,
        dims.attn_hidden,
        dims.embed_dim,
    );
    params.insert("enc.w1".into(), glorot(&[c, h], c, rng));
    params.insert("enc.b1".into(), Tensor::zeros(&[h]));
    params.insert("enc.w2".into(), glorot(&[h, h], h, rng));
    params.insert("enc.b2".into(), Tensor::zeros(&[h]));
    params.insert("pool.init.proj".into(), glorot(&[2 * h, d], 2 * h, rng));
    params.insert("pool.age.attn.w".into(), glorot(&[h, ha], h, rng));
    params.insert("pool.age.attn.b".into(), Tensor::zeros(&[ha]));
    params.insert("pool.age.attn.v".into(), glorot(&[ha, 1], ha, rng));
    params.insert("pool.age.proj".into(), glorot(&[2 * h, d], 2 * h, rng));
}

fn get<'p, F: Real>(params: &'p ParamSet<F>, name: &str) -> Result<&'p Tensor<F>> {
    params
        .get(name)
        .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
}

// ── plain evaluation path ───────────────────────────────────────────────

/// Per-frame MLP shared across time: c x t in, c' x t out.
pub fn encode<F: Real>(params: &ParamSet<F>, frames: &Tensor<F>) -> Result<Tensor<F>> {
    let w1 = get(params, "enc.w1")?;
    let b1 = get(params, "enc.b1")?;
    let w2 = get(params, "enc.w2")?;
    let b2 = get(params, "enc.b2")?;
    if frames.rank() != 2 || frames.shape()[0] != w1.shape()[0] {
        return Err(Error::Shape(format!(
            "encode: frames {:?} vs enc.w1 {:?}",
            frames.shape(),
            w1.shape()
        )));
    }
    let xt = transpose(frames); // [t, c]
    let h1 = relu_rows(&affine(&xt, w1, b1)?);
    let h2 = relu_rows(&affine(&h1, w2, b2)?);
    Ok(transpose(&h2)) // [c', t]
}

/// Temporal mean and standard deviation of a c' x t map, concatenated to a
/// 2c' vector. Population variance computed as the second moment minus the
/// squared mean, floored at [`VAR_EPS`].
pub fn stats_moments<F: Real>(map: &Tensor<F>) -> Result<Tensor<F>> {
    let t = map.shape()[1];
    if t < 2 {
        return Err(Error::Shape("pooling needs t >= 2".into()));
    }
    let inv_t = F::from_f64(1.0 / t as f64);
    let weights = vec![inv_t; t];
    Ok(weighted_moments(map, &weights))
}

fn weighted_moments<F: Real>(map: &Tensor<F>, alpha: &[F]) -> Tensor<F> {
    let (c, t) = (map.shape()[0], map.shape()[1]);
    let eps = F::from_f64(VAR_EPS);
    let mut out = Tensor::zeros(&[2 * c]);
    for ch in 0..c {
        let mut mu = F::zero();
        let mut m2 = F::zero();
        for (j, &a) in alpha.iter().enumerate().take(t) {
            let v = map.data()[ch * t + j];
            mu = mu + a * v;
            m2 = m2 + a * v * v;
        }
        let var = m2 - mu * mu;
        let var = if var > eps { var } else { eps };
        out.data_mut()[ch] = mu;
        out.data_mut()[c + ch] = var.sqrt();
    }
    out
}

/// Plain statistics pooling followed by the linear 2c' -> d projection.
pub fn stats_pool<F: Real>(map: &Tensor<F>, proj: &Tensor<F>) -> Result<Tensor<F>> {
    let pre = stats_moments(map)?;
    project(&pre, proj)
}

/// Attention weights for a c' x t map: softmax over time of
/// v^T tanh(W h_t + b), logits clamped to +-[`ATTN_LOGIT_BOUND`].
pub fn attention_weights<F: Real>(
    map: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    v: &Tensor<F>,
) -> Result<Vec<F>> {
    let ht = transpose(map); // [t, c']
    let s = affine(&ht, w, b)?.map(|x| x.tanh());
    let logits = s.matmul(v)?; // [t, 1]
    let bound = F::from_f64(ATTN_LOGIT_BOUND);
    let clamped: Vec<F> = logits
        .data()
        .iter()
        .map(|&x| {
            if x < -bound {
                -bound
            } else if x > bound {
                bound
            } else {
                x
            }
        })
        .collect();
    let mut mx = clamped[0];
    for &x in &clamped {
        if x > mx {
            mx = x;
        }
    }
    let mut denom = F::zero();
    let exps: Vec<F> = clamped.iter().map(|&x| (x - mx).exp()).collect();
    for &e in &exps {
        denom = denom + e;
    }
    Ok(exps.into_iter().map(|e| e / denom).collect())
}

/// Attention-weighted mean/std statistics of a c' x t map, pre-projection.
pub fn attentive_moments<F: Real>(map: &Tensor<F>, alpha: &[F]) -> Result<Tensor<F>> {
    if alpha.len() != map.shape()[1] {
        return Err(Error::Shape("attention weights must match t".into()));
    }
    Ok(weighted_moments(map, alpha))
}

/// Attentive statistics pooling followed by its own 2c' -> d projection.
pub fn attentive_stats_pool<F: Real>(
    map: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    v: &Tensor<F>,
    proj: &Tensor<F>,
) -> Result<Tensor<F>> {
    let alpha = attention_weights(map, w, b, v)?;
    let pre = attentive_moments(map, &alpha)?;
    project(&pre, proj)
}

/// x_id = x_init - x_age, elementwise.
pub fn disentangle<F: Real>(x_init: &Tensor<F>, x_age: &Tensor<F>) -> Result<Tensor<F>> {
    if x_init.shape() != x_age.shape() {
        return Err(Error::Shape(format!(
            "disentangle: {:?} vs {:?}",
            x_init.shape(),
            x_age.shape()
        )));
    }
    let data = x_init
        .data()
        .iter()
        .zip(x_age.data())
        .map(|(&i, &a)| i - a)
        .collect();
    Tensor::new(x_init.shape().to_vec(), data)
}

/// Full plain forward for one utterance.
pub fn embed_one<F: Real>(
    params: &ParamSet<F>,
    seq: &FeatureSequence<F>,
) -> Result<EmbeddingTriple<F>> {
    let map = encode(params, &seq.frames)?;
    let x_init = stats_pool(&map, get(params, "pool.init.proj")?)?;
    let x_age = attentive_stats_pool(
        &map,
        get(params, "pool.age.attn.w")?,
        get(params, "pool.age.attn.b")?,
        get(params, "pool.age.attn.v")?,
        get(params, "pool.age.proj")?,
    )?;
    let x_id = disentangle(&x_init, &x_age)?;
    Ok(EmbeddingTriple {
        x_init,
        x_age,
        x_id,
    })
}

/// Order-preserving batch embedding; any per-item failure reports its
/// index.
pub fn embed_batch<F: Real>(
    params: &ParamSet<F>,
    seqs: &[FeatureSequence<F>],
) -> Result<Vec<EmbeddingTriple<F>>> {
    if seqs.is_empty() {
        return Err(Error::Invalid("embed_batch: empty batch".into()));
    }
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            embed_one(params, s).map_err(|e| {
                Error::Data(format!("batch item {i} (`{}`): {e}", s.utterance_id))
            })
        })
        .collect()
}

/// Stack per-item triples into three n x d matrices (init, age, id), in
/// input order.
pub fn stack_triples<F: Real>(
    triples: &[EmbeddingTriple<F>],
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    if triples.is_empty() {
        return Err(Error::Invalid("stack_triples: empty".into()));
    }
    let d = triples[0].x_init.numel();
    let stack = |pick: fn(&EmbeddingTriple<F>) -> &Tensor<F>| -> Result<Tensor<F>> {
        let mut data = Vec::with_capacity(triples.len() * d);
        for (i, tr) in triples.iter().enumerate() {
            let v = pick(tr);
            if v.numel() != d {
                return Err(Error::Shape(format!(
                    "stack_triples: item {i} has {} dims, expected {d}",
                    v.numel()
                )));
            }
            data.extend_from_slice(v.data());
        }
        Tensor::from_rows(triples.len(), d, data)
    };
    Ok((
        stack(|t| &t.x_init)?,
        stack(|t| &t.x_age)?,
        stack(|t| &t.x_id)?,
    ))
}

fn transpose<F: Real>(t: &Tensor<F>) -> Tensor<F> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = t.data()[i * c + j];
        }
    }
    out
}

fn affine<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let mut out = x.matmul(w)?;
    let cols = out.shape()[1];
    for i in 0..out.shape()[0] {
        for j in 0..cols {
            out.data_mut()[i * cols + j] = out.data()[i * cols + j] + b.data()[j];
        }
    }
    Ok(out)
}

fn relu_rows<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| if v > F::zero() { v } else { F::zero() })
}

fn project<F: Real>(pre: &Tensor<F>, proj: &Tensor<F>) -> Result<Tensor<F>> {
    let row = Tensor::from_rows(1, pre.numel(), pre.data().to_vec())?;
    let out = row.matmul(proj)?;
    Tensor::new(vec![proj.shape()[1]], out.into_data())
}

// ── training graph path ─────────────────────────────────────────────────

/// Node handles for a batch embedding subgraph.
pub struct EmbedNodes {
    pub x_init: NodeId,
    pub x_age: NodeId,
    pub x_id: NodeId,
}

/// Add all backbone parameters from `params` to the graph once.
pub fn add_backbone_params<F: Real>(g: &mut Graph<F>, params: &ParamSet<F>) -> Result<()> {
    for name in [
        "enc.w1",
        "enc.b1",
        "enc.w2",
        "enc.b2",
        "pool.init.proj",
        "pool.age.attn.w",
        "pool.age.attn.b",
        "pool.age.attn.v",
        "pool.age.proj",
    ] {
        g.param(name, get(params, name)?.clone())?;
    }
    Ok(())
}

/// Build the embedding subgraph for a batch of `n` utterances with uniform
/// frame count `t`. Expects [`add_backbone_params`] to have run; declares
/// inputs `frames.0 .. frames.{n-1}`, each [t, c] (time-major). Every
/// utterance is processed through its own subgraph, so per-item outputs are
/// bitwise insensitive to batch composition and order.
pub fn build_embeddings<F: Real>(
    g: &mut Graph<F>,
    dims: ModelDims,
    n: usize,
    t: usize,
) -> Result<EmbedNodes> {
    if n == 0 || t < 2 {
        return Err(Error::Invalid(format!("build_embeddings: n={n}, t={t}")));
    }
    let w1 = g.require_param("enc.w1")?;
    let b1 = g.require_param("enc.b1")?;
    let w2 = g.require_param("enc.w2")?;
    let b2 = g.require_param("enc.b2")?;
    let proj_init = g.require_param("pool.init.proj")?;
    let aw = g.require_param("pool.age.attn.w")?;
    let ab = g.require_param("pool.age.attn.b")?;
    let av = g.require_param("pool.age.attn.v")?;
    let proj_age = g.require_param("pool.age.proj")?;

    let h_dim = dims.enc_hidden;
    let eps = F::from_f64(VAR_EPS);
    let bound = F::from_f64(ATTN_LOGIT_BOUND);

    let mut xs_init = Vec::with_capacity(n);
    let mut xs_age = Vec::with_capacity(n);
    let mut xs_id = Vec::with_capacity(n);
    for i in 0..n {
        let x = g.input(&format!("frames.{i}"), &[t, dims.channels])?;
        let a1 = g.matmul(x, w1)?;
        let a1 = g.bias_add(a1, b1)?;
        let h1 = g.relu(a1);
        let a2 = g.matmul(h1, w2)?;
        let a2 = g.bias_add(a2, b2)?;
        let h = g.relu(a2); // [t, h_dim]
        let hh = g.mul(h, h)?;

        let mu = g.mean(h, Some(0))?;
        let m2 = g.mean(hh, Some(0))?;
        let mu2 = g.mul(mu, mu)?;
        let var = g.sub(m2, mu2)?;
        let var = g.clamp(var, eps, F::infinity());
        let sd = g.sqrt(var);
        let pre = g.concat(mu, sd, 0)?;
        let pre = g.reshape(pre, &[1, 2 * h_dim])?;
        let xi = g.matmul(pre, proj_init)?; // [1, d]

        let s = g.matmul(h, aw)?;
        let s = g.bias_add(s, ab)?;
        let s = g.tanh(s);
        let logits = g.matmul(s, av)?; // [t, 1]
        let logits = g.reshape(logits, &[t])?;
        let logits = g.clamp(logits, -bound, bound);
        let alpha = g.softmax(logits, 0)?;
        let ae = g.expand(alpha, 1, h_dim)?; // [t, h_dim]
        let wh = g.mul(ae, h)?;
        let wmu = g.sum(wh, Some(0))?;
        let whh = g.mul(ae, hh)?;
        let wm2 = g.sum(whh, Some(0))?;
        let wmu2 = g.mul(wmu, wmu)?;
        let wvar = g.sub(wm2, wmu2)?;
        let wvar = g.clamp(wvar, eps, F::infinity());
        let wsd = g.sqrt(wvar);
        let prea = g.concat(wmu, wsd, 0)?;
        let prea = g.reshape(prea, &[1, 2 * h_dim])?;
        let xa = g.matmul(prea, proj_age)?; // [1, d]

        let xd = g.sub(xi, xa)?;
        xs_init.push(xi);
        xs_age.push(xa);
        xs_id.push(xd);
    }
    Ok(EmbedNodes {
        x_init: g.concat_many(&xs_init, 0)?,
        x_age: g.concat_many(&xs_age, 0)?,
        x_id: g.concat_many(&xs_id, 0)?,
    })
}

/// Transpose an utterance's c x t frames into the [t, c] layout the graph
/// inputs expect.
pub fn frames_input<F: Real>(seq: &FeatureSequence<F>) -> Tensor<F> {
    transpose(&seq.frames)
}

/// Bind a batch of sequences to the `frames.{i}` inputs.
pub fn bind_batch<F: Real>(inputs: &mut Inputs<F>, seqs: &[FeatureSequence<F>]) {
    for (i, s) in seqs.iter().enumerate() {
        inputs.insert(format!("frames.{i}"), frames_input(s));
    }
}
