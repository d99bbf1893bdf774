//! Variational conditional density, mutual-information estimation, and the
//! MI-minimization losses.
//!
//! A diagonal-Gaussian conditional q(x_age | x_id) with two small MLPs (one
//! for the mean, one for the tanh-bounded log variance) plays three roles:
//!
//! * its negative log likelihood on matched pairs is the estimator
//!   objective (the theta step of the alternating loop),
//! * the contrastive difference between matched and mismatched pairs is the
//!   MI-minimization loss pushed into the backbone (the phi step),
//! * the matched-versus-all-pairs contrast over a held-out set is the MI
//!   estimate reported during training and by the `estimate-mi` command.
//!
//! The aging-aware variant reweights the mismatched term by ln(gap + l0)
//! where `gap` is the age difference in years of the mismatched pair, so
//! pairs far apart in age count more. It contrasts clamped per-dimension
//! densities rather than log densities; with log terms and unit weights it
//! degenerates to the plain contrast, which is exercised as a test
//! invariant.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::ParamSet;

pub const LOG_2PI: f64 = 1.8378770664093453;
/// Bound on the (per-dimension) log density inside the clamped-density
/// contrast.
pub const DENSITY_CLAMP: f64 = 30.0;
/// Row-block edge for the all-pairs density matrix.
const MI_BLOCK: usize = 4096;

/// Insert freshly initialized estimator parameters for d-dimensional
/// embeddings. Biases start at zero, so the initial conditional is roughly
/// unit-variance.
pub fn init_estimator_params<F: Real, R: Rng>(params: &mut ParamSet<F>, d: usize, rng: &mut R) {
    let hid = 2 * d;
    let s_in = 1.0 / (d as f64).sqrt();
    let s_hid = 1.0 / (hid as f64).sqrt();
    for net in ["mu", "lv"] {
        params.insert(format!("q.{net}.w1"), Tensor::randn(&[d, hid], s_in, rng));
        params.insert(format!("q.{net}.b1"), Tensor::zeros(&[hid]));
        params.insert(format!("q.{net}.w2"), Tensor::randn(&[hid, d], s_hid, rng));
        params.insert(format!("q.{net}.b2"), Tensor::zeros(&[d]));
    }
}

pub const ESTIMATOR_PARAM_NAMES: [&str; 8] = [
    "q.mu.w1", "q.mu.b1", "q.mu.w2", "q.mu.b2", "q.lv.w1", "q.lv.b1", "q.lv.w2", "q.lv.b2",
];

/// True for parameter names owned by the estimator (the theta side of the
/// alternating loop).
pub fn is_estimator_param(name: &str) -> bool {
    name.starts_with("q.")
}

/// Add the estimator parameters from `params` to the graph.
pub fn add_estimator_params<F: Real>(g: &mut Graph<F>, params: &ParamSet<F>) -> Result<()> {
    for name in ESTIMATOR_PARAM_NAMES {
        let t = params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))?;
        g.param(name, t.clone())?;
    }
    Ok(())
}

/// Conditional mean and log-variance nodes, both [B, d].
pub struct CondNodes {
    pub mu: NodeId,
    pub lv: NodeId,
}

/// Append the two conditional nets on a [B, d] identity-embedding node.
/// The log variance is tanh-bounded to (-1, 1).
pub fn cond_stats<F: Real>(g: &mut Graph<F>, x_id: NodeId) -> Result<CondNodes> {
    let two_layer = |g: &mut Graph<F>, net: &str, x: NodeId| -> Result<NodeId> {
        let w1 = g.require_param(&format!("q.{net}.w1"))?;
        let b1 = g.require_param(&format!("q.{net}.b1"))?;
        let w2 = g.require_param(&format!("q.{net}.w2"))?;
        let b2 = g.require_param(&format!("q.{net}.b2"))?;
        let h = g.matmul(x, w1)?;
        let h = g.bias_add(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        g.bias_add(o, b2)
    };
    let mu = two_layer(g, "mu", x_id)?;
    let lv_raw = two_layer(g, "lv", x_id)?;
    let lv = g.tanh(lv_raw);
    Ok(CondNodes { mu, lv })
}

/// Per-item diagonal-Gaussian log density of a [B, d] node under the
/// conditional: returns a [B] node with
/// -0.5 * sum_j ((y - mu)^2 / exp(lv) + lv + ln 2pi).
pub fn cond_log_density<F: Real>(
    g: &mut Graph<F>,
    cond: &CondNodes,
    y: NodeId,
) -> Result<NodeId> {
    let diff = g.sub(y, cond.mu)?;
    let d2 = g.square(diff)?;
    let neg_lv = g.mul_scalar(cond.lv, F::from_f64(-1.0));
    let inv_var = g.exp(neg_lv);
    let quad = g.mul(d2, inv_var)?;
    let quad_lv = g.add(quad, cond.lv)?;
    let full = g.add_scalar(quad_lv, F::from_f64(LOG_2PI));
    let summed = g.sum(full, Some(1))?;
    Ok(g.mul_scalar(summed, F::from_f64(-0.5)))
}

/// Estimator objective: mean negative log likelihood of matched pairs.
pub fn estimator_nll<F: Real>(g: &mut Graph<F>, logq_pos: NodeId) -> Result<NodeId> {
    let m = g.mean(logq_pos, None)?;
    Ok(g.mul_scalar(m, F::from_f64(-1.0)))
}

/// How the matched/mismatched contrast combines its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiTerm {
    /// Contrast log densities directly.
    LogRatio,
    /// Contrast exp(clamp(logq / dim)) so the terms stay bounded for any
    /// embedding width; at dim = 1 this is the raw clamped density.
    ClampedDensity { dim: usize },
}

/// Contrastive MI-minimization loss: mean_i [ t(pos_i) - w_i * t(neg_i) ]
/// where `t` is fixed by `term`. `weights` must be one value per item;
/// unit weights with [`MiTerm::LogRatio`] give the plain bound.
pub fn mim_loss<F: Real>(
    g: &mut Graph<F>,
    logq_pos: NodeId,
    logq_neg: NodeId,
    weights: &[f64],
    term: MiTerm,
) -> Result<NodeId> {
    let b = g.shape(logq_pos).first().copied().unwrap_or(0);
    if g.shape(logq_pos) != g.shape(logq_neg) || weights.len() != b {
        return Err(Error::Shape(format!(
            "mim_loss: pos {:?}, neg {:?}, {} weights",
            g.shape(logq_pos),
            g.shape(logq_neg),
            weights.len()
        )));
    }
    let transform = |g: &mut Graph<F>, x: NodeId| -> Result<NodeId> {
        match term {
            MiTerm::LogRatio => Ok(x),
            MiTerm::ClampedDensity { dim } => {
                if dim == 0 {
                    return Err(Error::Invalid("ClampedDensity: dim = 0".into()));
                }
                let scaled = g.mul_scalar(x, F::from_f64(1.0 / dim as f64));
                let clamped = g.clamp(
                    scaled,
                    F::from_f64(-DENSITY_CLAMP),
                    F::from_f64(DENSITY_CLAMP),
                );
                Ok(g.exp(clamped))
            }
        }
    };
    let pos = transform(g, logq_pos)?;
    let neg = transform(g, logq_neg)?;
    let wdata: Vec<F> = weights.iter().map(|&w| F::from_f64(w)).collect();
    let wnode = g.constant(Tensor::new(vec![b], wdata)?);
    let weighted = g.mul(neg, wnode)?;
    let contrast = g.sub(pos, weighted)?;
    g.mean(contrast, None)
}

/// Aging-aware weight for a mismatched pair: ln(|age gap in years| + l0).
/// Requires l0 >= 1 so the weight never goes negative.
pub fn aa_weight(gap_years: f64, lambda0: f64) -> f64 {
    debug_assert!(lambda0 >= 1.0);
    (gap_years.abs() + lambda0).ln()
}

/// Draw one mismatched partner per item, uniform over the other n-1 items.
pub fn sample_negatives<R: Rng>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Invalid(format!(
            "sample_negatives: need at least 2 items, got {n}"
        )));
    }
    Ok((0..n)
        .map(|i| {
            let j = rng.gen_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect())
}

// ── plain evaluation path ───────────────────────────────────────────────

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

fn two_layer_plain<F: Real>(
    params: &ParamSet<F>,
    net: &str,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    let p = |suffix: &str| -> Result<&Tensor<F>> {
        let name = format!("q.{net}.{suffix}");
        params
            .get(&name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    };
    let h = affine(x, p("w1")?, p("b1")?)?.map(|v| if v > F::zero() { v } else { F::zero() });
    affine(&h, p("w2")?, p("b2")?)
}

/// Conditional mean and log variance for a [N, d] identity block.
pub fn conditional_moments<F: Real>(
    params: &ParamSet<F>,
    x_id: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let mu = two_layer_plain(params, "mu", x_id)?;
    let lv = two_layer_plain(params, "lv", x_id)?.map(|v| v.tanh());
    Ok((mu, lv))
}

/// Matched-pair log densities: entry i scores y row i under conditional
/// row i.
pub fn log_density_rows<F: Real>(
    mu: &Tensor<F>,
    lv: &Tensor<F>,
    y: &Tensor<F>,
) -> Result<Vec<F>> {
    if mu.shape() != lv.shape() || mu.shape() != y.shape() || mu.rank() != 2 {
        return Err(Error::Shape(format!(
            "log_density_rows: mu {:?}, lv {:?}, y {:?}",
            mu.shape(),
            lv.shape(),
            y.shape()
        )));
    }
    let (n, d) = (mu.shape()[0], mu.shape()[1]);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = F::zero();
        for j in 0..d {
            let m = mu.data()[i * d + j];
            let l = lv.data()[i * d + j];
            let v = y.data()[i * d + j];
            acc = acc + (v - m) * (v - m) * (-l).exp() + l + F::from_f64(LOG_2PI);
        }
        out.push(acc * F::from_f64(-0.5));
    }
    Ok(out)
}

/// All-pairs log densities: entry [i, j] scores y row j under conditional
/// row i. Intended for small blocks; the MI estimator tiles it.
pub fn log_density_matrix<F: Real>(
    mu: &Tensor<F>,
    lv: &Tensor<F>,
    y: &Tensor<F>,
) -> Result<Tensor<F>> {
    if mu.shape() != lv.shape() || mu.rank() != 2 || y.rank() != 2 || mu.shape()[1] != y.shape()[1]
    {
        return Err(Error::Shape(format!(
            "log_density_matrix: mu {:?}, lv {:?}, y {:?}",
            mu.shape(),
            lv.shape(),
            y.shape()
        )));
    }
    let (n, d) = (mu.shape()[0], mu.shape()[1]);
    let m = y.shape()[0];

    // expand the quadratic form: (y - mu)^2 / var = y^2 a - 2 y mu a + mu^2 a
    // with a = exp(-lv), so the cross terms become two rank-d products
    let mut a = Tensor::<F>::zeros(&[n, d]);
    let mut mua = Tensor::<F>::zeros(&[n, d]);
    let mut c = vec![F::zero(); n];
    for i in 0..n {
        let mut ci = F::zero();
        for j in 0..d {
            let l = lv.data()[i * d + j];
            let av = (-l).exp();
            let m_ = mu.data()[i * d + j];
            a.data_mut()[i * d + j] = av;
            mua.data_mut()[i * d + j] = m_ * av;
            ci = ci + m_ * m_ * av + l + F::from_f64(LOG_2PI);
        }
        c[i] = ci;
    }
    let mut yt = Tensor::<F>::zeros(&[d, m]);
    let mut y2t = Tensor::<F>::zeros(&[d, m]);
    for r in 0..m {
        for j in 0..d {
            let v = y.data()[r * d + j];
            yt.data_mut()[j * m + r] = v;
            y2t.data_mut()[j * m + r] = v * v;
        }
    }
    let p = a.matmul(&y2t)?; // [n, m]
    let q = mua.matmul(&yt)?; // [n, m]
    let mut out = Tensor::<F>::zeros(&[n, m]);
    let half = F::from_f64(-0.5);
    let two = F::from_f64(2.0);
    for i in 0..n {
        for j in 0..m {
            let v = p.data()[i * m + j] - two * q.data()[i * m + j] + c[i];
            out.data_mut()[i * m + j] = v * half;
        }
    }
    Ok(out)
}

/// Contrastive MI estimate over a full pairing: the mean matched log
/// density minus the mean over all n^2 ordered pairs (diagonal included).
pub fn estimate_mi<F: Real>(params: &ParamSet<F>, x_id: &Tensor<F>, x_age: &Tensor<F>) -> Result<f64> {
    if x_id.rank() != 2 || x_id.shape() != x_age.shape() {
        return Err(Error::Shape(format!(
            "estimate_mi: x_id {:?} vs x_age {:?}",
            x_id.shape(),
            x_age.shape()
        )));
    }
    let n = x_id.shape()[0];
    if n < 2 {
        return Err(Error::Invalid("estimate_mi: need at least 2 rows".into()));
    }
    let (mu, lv) = conditional_moments(params, x_id)?;
    let diag = log_density_rows(&mu, &lv, x_age)?;
    let diag_mean = diag.iter().map(|&v| v.into_f64()).sum::<f64>() / n as f64;

    let d = x_id.shape()[1];
    let mut total = 0.0f64;
    let mut bi = 0;
    while bi < n {
        let ri = (bi + MI_BLOCK).min(n);
        let mu_b = block_rows(&mu, bi, ri, d);
        let lv_b = block_rows(&lv, bi, ri, d);
        let mut bj = 0;
        while bj < n {
            let rj = (bj + MI_BLOCK).min(n);
            let y_b = block_rows(x_age, bj, rj, d);
            let m = log_density_matrix(&mu_b, &lv_b, &y_b)?;
            total += m.data().iter().map(|&v| v.into_f64()).sum::<f64>();
            bj = rj;
        }
        bi = ri;
    }
    let all_mean = total / (n as f64 * n as f64);
    Ok(diag_mean - all_mean)
}

fn block_rows<F: Real>(t: &Tensor<F>, lo: usize, hi: usize, d: usize) -> Tensor<F> {
    Tensor::from_rows(hi - lo, d, t.data()[lo * d..hi * d].to_vec()).unwrap()
}

/// Per-dimension affine map fitted on reference rows.
///
/// Mutual information is unchanged by invertible per-dimension
/// transforms, but the conditional's bounded variance is not: a
/// checkpoint with large activations scores high simply because the
/// estimator can sharpen relative to the spread. Standardizing both
/// sides with statistics from the fitting rows makes estimates from
/// different checkpoints comparable.
#[derive(Debug, Clone)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit<F: Real>(rows: &Tensor<F>) -> Result<Self> {
        if rows.rank() != 2 || rows.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "Standardizer::fit: want nonempty [n, d], got {:?}",
                rows.shape()
            )));
        }
        let (n, d) = (rows.shape()[0], rows.shape()[1]);
        let mut mean = vec![0.0f64; d];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(rows.row(r)) {
                *m += v.into_f64();
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0f64; d];
        for r in 0..n {
            for j in 0..d {
                let dv = rows.data()[r * d + j].into_f64() - mean[j];
                var[j] += dv * dv;
            }
        }
        let scale = var
            .iter()
            .map(|&v| {
                let sd = (v / n as f64).sqrt();
                // constant dimensions carry no information; leave them be
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn apply<F: Real>(&self, rows: &Tensor<F>) -> Result<Tensor<F>> {
        let d = self.mean.len();
        if rows.rank() != 2 || rows.shape()[1] != d {
            return Err(Error::Shape(format!(
                "Standardizer::apply: want [n, {d}], got {:?}",
                rows.shape()
            )));
        }
        let n = rows.shape()[0];
        let mut out = Tensor::<F>::zeros(&[n, d]);
        for i in 0..n * d {
            let j = i % d;
            let v = (rows.data()[i].into_f64() - self.mean[j]) * self.scale[j];
            out.data_mut()[i] = F::from_f64(v);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Inputs;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn params(seed: u64, d: usize) -> ParamSet<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut p = ParamSet::default();
        init_estimator_params(&mut p, d, &mut rng);
        p
    }

    #[test]
    fn standard_normal_log_density_at_zero() {
        let mu = Tensor::<f64>::zeros(&[1, 1]);
        let lv = Tensor::<f64>::zeros(&[1, 1]);
        let y = Tensor::<f64>::zeros(&[1, 1]);
        let lq = log_density_rows(&mu, &lv, &y).unwrap();
        assert!((lq[0] - (-0.9189385332046727)).abs() < 1e-12, "{}", lq[0]);
    }

    #[test]
    fn matched_mean_log_density_is_half_d_log_2pi() {
        let mut rng = ChaCha12Rng::seed_from_u64(30);
        let d = 3;
        let y = Tensor::<f64>::randn(&[5, d], 1.0, &mut rng);
        let lv = Tensor::<f64>::zeros(&[5, d]);
        let lq = log_density_rows(&y, &lv, &y).unwrap();
        for v in lq {
            assert!((v + 0.5 * d as f64 * LOG_2PI).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_density_matches_plain_path() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let (b, d) = (4, 3);
        let p = params(32, d);
        let x_id = Tensor::<f64>::randn(&[b, d], 1.0, &mut rng);
        let x_age = Tensor::<f64>::randn(&[b, d], 1.0, &mut rng);

        let mut g = Graph::<f64>::new();
        add_estimator_params(&mut g, &p).unwrap();
        let xi = g.input("x_id", &[b, d]).unwrap();
        let xa = g.input("x_age", &[b, d]).unwrap();
        let cond = cond_stats(&mut g, xi).unwrap();
        let lq = cond_log_density(&mut g, &cond, xa).unwrap();
        let mut inputs = Inputs::default();
        inputs.insert("x_id".into(), x_id.clone());
        inputs.insert("x_age".into(), x_age.clone());
        let exec = g.forward(&inputs).unwrap();
        let got = exec.value(lq);

        let (mu, lv) = conditional_moments(&p, &x_id).unwrap();
        let want = log_density_rows(&mu, &lv, &x_age).unwrap();
        for i in 0..b {
            assert!((got.data()[i] - want[i]).abs() < 1e-12);
        }
        for v in lv.data() {
            assert!(v.abs() < 1.0, "log variance must stay inside (-1, 1)");
        }
    }

    #[test]
    fn density_matrix_matches_double_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let (n, m, d) = (6, 5, 3);
        let p = params(34, d);
        let x_id = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[m, d], 1.0, &mut rng);
        let (mu, lv) = conditional_moments(&p, &x_id).unwrap();
        let mat = log_density_matrix(&mu, &lv, &y).unwrap();
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for k in 0..d {
                    let mm = mu.data()[i * d + k];
                    let ll = lv.data()[i * d + k];
                    let v = y.data()[j * d + k];
                    acc += (v - mm) * (v - mm) * (-ll).exp() + ll + LOG_2PI;
                }
                let want = -0.5 * acc;
                assert!((mat.data()[i * m + j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mi_estimate_contrast_on_worked_matrix() {
        // matched scores -1, mismatched -5: matched mean -1, all-pairs mean
        // -3, estimate 2
        let diag_mean: f64 = (-1.0 + -1.0) / 2.0;
        let all_mean: f64 = (-1.0 + -5.0 + -5.0 + -1.0) / 4.0;
        assert!((diag_mean - all_mean - 2.0).abs() < 1e-15);
        // the estimator reproduces the same combination on real tensors
        let mut rng = ChaCha12Rng::seed_from_u64(35);
        let d = 2;
        let p = params(36, d);
        let x_id = Tensor::<f64>::randn(&[7, d], 1.0, &mut rng);
        let x_age = Tensor::<f64>::randn(&[7, d], 1.0, &mut rng);
        let est = estimate_mi(&p, &x_id, &x_age).unwrap();
        let (mu, lv) = conditional_moments(&p, &x_id).unwrap();
        let mat = log_density_matrix(&mu, &lv, &x_age).unwrap();
        let diag: f64 = (0..7).map(|i| mat.data()[i * 7 + i]).sum::<f64>() / 7.0;
        let all: f64 = mat.data().iter().sum::<f64>() / 49.0;
        assert!((est - (diag - all)).abs() < 1e-10, "{est} vs {}", diag - all);
    }

    #[test]
    fn mi_estimate_matches_brute_force_at_medium_size() {
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let (n, d) = (50, 3);
        let p = params(38, d);
        let x_id = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
        let x_age = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
        let est = estimate_mi(&p, &x_id, &x_age).unwrap();

        let (mu, lv) = conditional_moments(&p, &x_id).unwrap();
        let mut diag = 0.0;
        let mut all = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..d {
                    let mm = mu.data()[i * d + k];
                    let ll = lv.data()[i * d + k];
                    let v = x_age.data()[j * d + k];
                    acc += (v - mm) * (v - mm) * (-ll).exp() + ll + LOG_2PI;
                }
                let lq = -0.5 * acc;
                all += lq;
                if i == j {
                    diag += lq;
                }
            }
        }
        let want = diag / n as f64 - all / (n as f64 * n as f64);
        assert!((est - want).abs() < 1e-9, "{est} vs {want}");
    }

    #[test]
    fn negatives_never_pick_self_and_pairs_swap_at_two() {
        let mut rng = ChaCha12Rng::seed_from_u64(39);
        assert_eq!(sample_negatives(2, &mut rng).unwrap(), vec![1, 0]);
        for _ in 0..100 {
            let ks = sample_negatives(9, &mut rng).unwrap();
            for (i, &k) in ks.iter().enumerate() {
                assert_ne!(i, k);
                assert!(k < 9);
            }
        }
        assert!(sample_negatives(1, &mut rng).is_err());
    }

    #[test]
    fn negatives_are_uniform_over_partners() {
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let n = 8;
        let runs = 8000;
        let mut counts = vec![0u64; n];
        let probe = 3;
        for _ in 0..runs {
            let ks = sample_negatives(n, &mut rng).unwrap();
            counts[ks[probe]] += 1;
        }
        assert_eq!(counts[probe], 0);
        let expect = runs as f64 / (n - 1) as f64;
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != probe)
            .map(|(_, &c)| {
                let dfr = c as f64 - expect;
                dfr * dfr / expect
            })
            .sum();
        // 6 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 22.458, "chi2 = {chi2}");
    }

    #[test]
    fn aa_weight_is_symmetric_monotone_and_one_at_zero_gap() {
        let l0 = std::f64::consts::E;
        assert!((aa_weight(0.0, l0) - 1.0).abs() < 1e-15);
        assert!((aa_weight(-12.5, l0) - aa_weight(12.5, l0)).abs() < 1e-15);
        let mut prev = aa_weight(0.0, l0);
        for g in 1..60 {
            let w = aa_weight(g as f64, l0);
            assert!(w > prev);
            prev = w;
        }
    }

    fn contrast_value(
        pos: Vec<f64>,
        neg: Vec<f64>,
        weights: &[f64],
        term: MiTerm,
    ) -> f64 {
        let b = pos.len();
        let mut g = Graph::<f64>::new();
        let pn = g.input("pos", &[b]).unwrap();
        let nn = g.input("neg", &[b]).unwrap();
        let loss = mim_loss(&mut g, pn, nn, weights, term).unwrap();
        let mut inputs = Inputs::default();
        inputs.insert("pos".into(), Tensor::new(vec![b], pos).unwrap());
        inputs.insert("neg".into(), Tensor::new(vec![b], neg).unwrap());
        g.forward(&inputs).unwrap().value(loss).item()
    }

    #[test]
    fn log_ratio_contrast_is_plain_mean_difference() {
        let got = contrast_value(
            vec![-1.0, -2.0, -3.0],
            vec![-5.0, -4.0, -3.0],
            &[1.0, 1.0, 1.0],
            MiTerm::LogRatio,
        );
        let want = ((-1.0 - -5.0) + (-2.0 - -4.0) + (-3.0 - -3.0)) / 3.0;
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn clamped_density_reduces_to_raw_density_at_dim_one() {
        let pos = vec![-0.5, -2.0];
        let neg = vec![-1.5, -0.25];
        let w = [1.3, 0.9];
        let got = contrast_value(pos.clone(), neg.clone(), &w, MiTerm::ClampedDensity { dim: 1 });
        let want = (0..2)
            .map(|i| pos[i].exp() - w[i] * neg[i].exp())
            .sum::<f64>()
            / 2.0;
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn clamped_density_saturates_instead_of_overflowing() {
        let got = contrast_value(
            vec![-2000.0],
            vec![500.0],
            &[2.0],
            MiTerm::ClampedDensity { dim: 4 },
        );
        let want = (-30.0f64).exp() - 2.0 * (30.0f64).exp();
        assert!((got - want).abs() < want.abs() * 1e-12);
        assert!(got.is_finite());
    }

    #[test]
    fn unit_weight_densities_match_aging_weights_at_zero_gap() {
        // lambda0 = e makes ln(gap + l0) exactly 1 at gap 0, so the aging
        // weighted loss collapses onto the unweighted one
        let pos = vec![-1.2, -0.7, -3.0];
        let neg = vec![-0.9, -2.2, -1.1];
        let l0 = std::f64::consts::E;
        let w: Vec<f64> = vec![aa_weight(0.0, l0); 3];
        let a = contrast_value(pos.clone(), neg.clone(), &w, MiTerm::ClampedDensity { dim: 2 });
        let b = contrast_value(pos, neg, &[1.0; 3], MiTerm::ClampedDensity { dim: 2 });
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn mim_and_nll_losses_pass_gradcheck() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let (b, d) = (3, 2);
        let p = params(42, d);
        let x_id = Tensor::<f64>::randn(&[b, d], 1.0, &mut rng);
        let x_age = Tensor::<f64>::randn(&[b, d], 1.0, &mut rng);
        let negs = vec![1usize, 2, 0];

        for term in [MiTerm::LogRatio, MiTerm::ClampedDensity { dim: d }] {
            let mut g = Graph::<f64>::new();
            add_estimator_params(&mut g, &p).unwrap();
            let xi = g.input("x_id", &[b, d]).unwrap();
            let xa = g.input("x_age", &[b, d]).unwrap();
            let cond = cond_stats(&mut g, xi).unwrap();
            let pos = cond_log_density(&mut g, &cond, xa).unwrap();
            let neg_rows = g.gather_rows(xa, negs.clone()).unwrap();
            let neg = cond_log_density(&mut g, &cond, neg_rows).unwrap();
            let loss = mim_loss(&mut g, pos, neg, &[1.0, 1.4, 0.8], term).unwrap();
            let mut inputs = Inputs::default();
            inputs.insert("x_id".into(), x_id.clone());
            inputs.insert("x_age".into(), x_age.clone());
            let report = crate::graph::gradcheck(&mut g, &inputs, loss, 1e-5).unwrap();
            assert!(report.max_rel_err < 1e-6, "{term:?}: {report:?}");
        }

        let mut g = Graph::<f64>::new();
        add_estimator_params(&mut g, &p).unwrap();
        let xi = g.input("x_id", &[b, d]).unwrap();
        let xa = g.input("x_age", &[b, d]).unwrap();
        let cond = cond_stats(&mut g, xi).unwrap();
        let pos = cond_log_density(&mut g, &cond, xa).unwrap();
        let nll = estimator_nll(&mut g, pos).unwrap();
        let mut inputs = Inputs::default();
        inputs.insert("x_id".into(), x_id);
        inputs.insert("x_age".into(), x_age);
        let report = crate::graph::gradcheck(&mut g, &inputs, nll, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn estimator_params_are_the_theta_side() {
        assert!(is_estimator_param("q.mu.w1"));
        assert!(is_estimator_param("q.lv.b2"));
        assert!(!is_estimator_param("enc.w1"));
        assert!(!is_estimator_param("head.id.w"));
    }

    #[test]
    fn standardizer_centers_fit_rows_to_unit_variance() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut rows = Tensor::<f64>::randn(&[200, 3], 1.0, &mut rng);
        for r in 0..200 {
            rows.row_mut(r)[0] = rows.row(r)[0] * 50.0 + 7.0;
            rows.row_mut(r)[2] = 4.0; // constant dim, must pass through centred
        }
        let s = Standardizer::fit(&rows).unwrap();
        let out = s.apply(&rows).unwrap();
        for j in 0..3 {
            let mean: f64 = (0..200).map(|r| out.row(r)[j]).sum::<f64>() / 200.0;
            let var: f64 = (0..200).map(|r| (out.row(r)[j] - mean).powi(2)).sum::<f64>() / 200.0;
            assert!(mean.abs() < 1e-12, "dim {j}: mean {mean}");
            if j == 2 {
                assert!(var.abs() < 1e-24, "constant dim picked up variance {var}");
            } else {
                assert!((var - 1.0).abs() < 1e-9, "dim {j}: var {var}");
            }
        }
    }

    #[test]
    fn standardizer_rejects_bad_shapes() {
        let rows = Tensor::<f64>::zeros(&[4, 3]);
        assert!(Standardizer::fit(&Tensor::<f64>::zeros(&[0, 3])).is_err());
        assert!(Standardizer::fit(&Tensor::<f64>::zeros(&[4])).is_err());
        let s = Standardizer::fit(&rows).unwrap();
        assert!(s.apply(&Tensor::<f64>::zeros(&[2, 2])).is_err());
    }
}
