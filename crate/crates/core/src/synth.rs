//! Synthetic speech-like corpus with a planted age confound, Gaussian
//! reference pairs with closed-form mutual information, and cross-age
//! verification trials.
//!
//! Each speaker owns a latent identity vector and a unit aging direction.
//! An utterance at age `a` shifts the identity along that direction in
//! proportion to the normalized age, mixes into channel space, and adds a
//! global age component plus frame noise:
//!
//! ```text
//! h_t = W (u_s + gamma * (a - abar)/(hi - lo) * v_s) + w * psi(a) + eps_t
//! psi(a) = (a - abar) / ((hi - lo)/2)
//! ```
//!
//! Ages are uniform on [lo, hi]. The construction guarantees that age
//! information is linearly present in every utterance (through `w`) and
//! entangled with identity (through `v_s`), which is exactly what the
//! disentanglement loss is supposed to strip out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::collections::HashSet;

use crate::backbone::FeatureSequence;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::streams;
use crate::tensor::Tensor;

pub const NUM_SPEAKER_GROUPS: usize = 4;

/// Age-gap tiers for trial lists; `all` places no gap constraint.
pub const TRIAL_TIERS: [(&str, f64); 5] = [
    ("all", 0.0),
    ("gap05", 5.0),
    ("gap10", 10.0),
    ("gap15", 15.0),
    ("gap20", 20.0),
];

pub fn tier_min_gap(name: &str) -> Option<f64> {
    TRIAL_TIERS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|&(_, g)| g)
}

/// 64-bit FNV-1a; used wherever a deterministic hash split is needed.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn speaker_label(speaker: usize) -> String {
    format!("spk{speaker:04}")
}

pub fn speaker_group(speaker: usize) -> usize {
    (fnv1a64(speaker_label(speaker).as_bytes()) % NUM_SPEAKER_GROUPS as u64) as usize
}

#[derive(Debug, Clone)]
pub struct Dataset<F: Real> {
    pub items: Vec<FeatureSequence<F>>,
    /// Speaker group per item, aligned with `items`.
    pub groups: Vec<usize>,
    /// The global unit age direction in channel space (generator
    /// provenance, handy for diagnostics).
    pub age_direction: Vec<f64>,
}

impl<F: Real> Dataset<F> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_speakers(&self) -> usize {
        self.items
            .iter()
            .map(|s| s.speaker_id)
            .max()
            .map_or(0, |m| m + 1)
    }
}

fn draw_normal<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn draw_unit<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v = draw_normal(rng, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Generate the full corpus described by `cfg`. Deterministic in
/// `cfg.seed`; all randomness is drawn in f64 and narrowed, so f32 and f64
/// datasets describe the same numbers.
pub fn generate<F: Real>(cfg: &RunConfig) -> Result<Dataset<F>> {
    cfg.validate()?;
    let (k, c, t) = (cfg.identity_dim, cfg.channels, cfg.frames);
    let (lo, hi) = (cfg.age_lo, cfg.age_hi);
    let abar = 0.5 * (lo + hi);
    let range = hi - lo;

    let mut g_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    g_rng.set_stream(streams::GLOBALS);
    let scale = 1.0 / (k as f64).sqrt();
    let mixing: Vec<f64> = draw_normal(&mut g_rng, c * k).iter().map(|v| v * scale).collect();
    let age_dir = draw_unit(&mut g_rng, c);

    let mut s_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    s_rng.set_stream(streams::SPEAKERS);
    let mut identities = Vec::with_capacity(cfg.num_speakers);
    let mut aging_dirs = Vec::with_capacity(cfg.num_speakers);
    for _ in 0..cfg.num_speakers {
        identities.push(draw_normal(&mut s_rng, k));
        aging_dirs.push(draw_unit(&mut s_rng, k));
    }

    let mut u_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    u_rng.set_stream(streams::UTTERANCES);
    let mut items = Vec::with_capacity(cfg.num_speakers * cfg.utterances_per_speaker);
    let mut groups = Vec::with_capacity(items.capacity());
    for s in 0..cfg.num_speakers {
        let group = speaker_group(s);
        for u in 0..cfg.utterances_per_speaker {
            let age = lo + range * u_rng.gen::<f64>();
            let shift = cfg.aging_strength * (age - abar) / range;
            let psi = (age - abar) / (range / 2.0);
            let mut latent = identities[s].clone();
            for (l, v) in latent.iter_mut().zip(&aging_dirs[s]) {
                *l += shift * v;
            }
            let mut clean = vec![0.0f64; c];
            for (ch, cl) in clean.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, l) in latent.iter().enumerate() {
                    acc += mixing[ch * k + j] * l;
                }
                *cl = acc + age_dir[ch] * psi;
            }
            let mut frames = Tensor::<F>::zeros(&[c, t]);
            for ch in 0..c {
                for fr in 0..t {
                    let eps: f64 = u_rng.sample(StandardNormal);
                    frames.data_mut()[ch * t + fr] =
                        F::from_f64(clean[ch] + cfg.noise_std * eps);
                }
            }
            items.push(FeatureSequence::new(
                format!("{}-utt{u:03}", speaker_label(s)),
                s,
                age,
                frames,
            )?);
            groups.push(group);
        }
    }
    Ok(Dataset {
        items,
        groups,
        age_direction: age_dir,
    })
}

/// Correlated Gaussian pairs: y_j = rho_j x_j + sqrt(1 - rho_j^2) z_j with
/// x, z standard normal. The mutual information between the row vectors
/// is exactly [`gaussian_mi`]`(rho)`.
pub fn gaussian_pairs<F: Real>(
    n: usize,
    rho: &[f64],
    seed: u64,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if rho.iter().any(|r| r.abs() >= 1.0) {
        return Err(Error::Invalid("gaussian_pairs: |rho| must be < 1".into()));
    }
    if n == 0 || rho.is_empty() {
        return Err(Error::Invalid("gaussian_pairs: empty".into()));
    }
    let d = rho.len();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut x = Tensor::<F>::zeros(&[n, d]);
    let mut y = Tensor::<F>::zeros(&[n, d]);
    for i in 0..n {
        for j in 0..d {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            x.data_mut()[i * d + j] = F::from_f64(a);
            y.data_mut()[i * d + j] = F::from_f64(rho[j] * a + (1.0 - rho[j] * rho[j]).sqrt() * b);
        }
    }
    Ok((x, y))
}

/// Closed-form MI of [`gaussian_pairs`]: -1/2 sum_j ln(1 - rho_j^2).
pub fn gaussian_mi(rho: &[f64]) -> f64 {
    -0.5 * rho.iter().map(|r| (1.0 - r * r).ln()).sum::<f64>()
}

/// A verification trial over dataset item indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trial {
    pub enroll: usize,
    pub test: usize,
    pub target: bool,
}

/// Build one balanced trial list: every same-speaker pair with age gap at
/// least `min_gap` years becomes a target trial, and an equal number of
/// distinct cross-speaker pairs (same speaker group when `match_group`)
/// are sampled as nontargets. Deterministic in `seed`.
pub fn build_trials<F: Real>(
    ds: &Dataset<F>,
    tier: &str,
    min_gap: f64,
    match_group: bool,
    seed: u64,
) -> Result<Vec<Trial>> {
    let n = ds.items.len();
    let mut targets = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if ds.items[i].speaker_id != ds.items[j].speaker_id {
                continue;
            }
            if (ds.items[i].age_years - ds.items[j].age_years).abs() >= min_gap {
                targets.push(Trial {
                    enroll: i,
                    test: j,
                    target: true,
                });
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::Data(format!(
            "trial tier `{tier}`: no same-speaker pair has an age gap of {min_gap} years or more"
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(streams::TRIALS);
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    let mut nontargets = Vec::with_capacity(targets.len());
    let mut attempts = 0usize;
    let budget = 200 * targets.len() + 10_000;
    while nontargets.len() < targets.len() {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Data(format!(
                "trial tier `{tier}`: could not sample {} distinct cross-speaker pairs",
                targets.len()
            )));
        }
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if ds.items[a].speaker_id == ds.items[b].speaker_id {
            continue;
        }
        if match_group && ds.groups[a] != ds.groups[b] {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if !seen.insert(key) {
            continue;
        }
        nontargets.push(Trial {
            enroll: key.0,
            test: key.1,
            target: false,
        });
    }
    let mut trials = targets;
    trials.extend(nontargets);
    Ok(trials)
}
