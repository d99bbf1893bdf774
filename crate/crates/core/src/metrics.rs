//! Verification metrics and the age-leakage probe.
//!
//! Scores are similarity scores: a trial is accepted when its score is at
//! or above the threshold. Both metrics sweep the same operating points,
//! namely the distinct observed scores plus one sentinel beyond each end,
//! so a brute-force recomputation over the same points reproduces them
//! exactly.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::synth::{fnv1a64, Trial};
use crate::tensor::Tensor;

/// Equal error rate (as a fraction) and the interpolated threshold where
/// the miss and false-alarm rates cross.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Minimum normalized detection cost and the threshold attaining it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfResult {
    pub min_dcf: f64,
    pub threshold: f64,
}

fn operating_points(targets: &[f64], nontargets: &[f64]) -> Result<Vec<f64>> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::Invalid(
            "metrics need at least one target and one nontarget score".into(),
        ));
    }
    if targets.iter().chain(nontargets).any(|s| !s.is_finite()) {
        return Err(Error::Invalid("non-finite trial score".into()));
    }
    let mut scores: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    scores.dedup();
    let mut points = Vec::with_capacity(scores.len() + 2);
    points.push(scores[0] + 1.0);
    points.extend_from_slice(&scores);
    points.push(scores[scores.len() - 1] - 1.0);
    Ok(points)
}

/// Miss and false-alarm counts at a threshold, over sorted score slices.
fn rates(sorted_targets: &[f64], sorted_nontargets: &[f64], theta: f64) -> (f64, f64) {
    let miss = sorted_targets.partition_point(|&s| s < theta);
    let below = sorted_nontargets.partition_point(|&s| s < theta);
    let fa = sorted_nontargets.len() - below;
    (
        miss as f64 / sorted_targets.len() as f64,
        fa as f64 / sorted_nontargets.len() as f64,
    )
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

/// Equal error rate. Walks the operating points from high to low
/// threshold; the miss rate falls while the false-alarm rate rises, so
/// their difference changes sign exactly once, and the crossing is
/// resolved by linear interpolation between the bracketing points.
pub fn eer(targets: &[f64], nontargets: &[f64]) -> Result<EerResult> {
    let points = operating_points(targets, nontargets)?;
    let st = sorted(targets);
    let sn = sorted(nontargets);
    let mut prev: Option<(f64, f64, f64, f64)> = None; // theta, pm, pf, diff
    for &theta in &points {
        let (pm, pf) = rates(&st, &sn, theta);
        let diff = pm - pf;
        if diff <= 0.0 {
            if diff == 0.0 {
                return Ok(EerResult {
                    eer: pm,
                    threshold: theta,
                });
            }
            let (t0, pm0, _pf0, d0) = prev.expect("first point has miss 1, fa 0");
            let s = d0 / (d0 - diff);
            return Ok(EerResult {
                eer: pm0 + s * (pm - pm0),
                threshold: t0 + s * (theta - t0),
            });
        }
        prev = Some((theta, pm, pf, diff));
    }
    unreachable!("final sentinel accepts everything, so diff ends at -1")
}

/// Minimum detection cost, normalized by the cost of the trivial
/// accept-all / reject-all decision. Ties keep the highest threshold.
pub fn min_dcf(
    targets: &[f64],
    nontargets: &[f64],
    p_target: f64,
    c_miss: f64,
    c_fa: f64,
) -> Result<DcfResult> {
    if !(0.0 < p_target && p_target < 1.0) || c_miss <= 0.0 || c_fa <= 0.0 {
        return Err(Error::Invalid(format!(
            "min_dcf: p_target {p_target}, c_miss {c_miss}, c_fa {c_fa}"
        )));
    }
    let points = operating_points(targets, nontargets)?;
    let st = sorted(targets);
    let sn = sorted(nontargets);
    let floor = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    let mut best: Option<DcfResult> = None;
    for &theta in &points {
        let (pm, pf) = rates(&st, &sn, theta);
        let dcf = (c_miss * p_target * pm + c_fa * (1.0 - p_target) * pf) / floor;
        if best.map_or(true, |b| dcf < b.min_dcf) {
            best = Some(DcfResult {
                min_dcf: dcf,
                threshold: theta,
            });
        }
    }
    Ok(best.unwrap())
}

/// Cosine similarity with the same norm floor the training graph uses, so
/// zero vectors score zero instead of dividing by zero.
pub fn cosine<F: Real>(a: &[F], b: &[F]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.into_f64(), y.into_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.max(1e-24).sqrt() * nb.max(1e-24).sqrt())
}

/// Cosine-score a trial list against [n, d] embedding rows. Returns
/// (target scores, nontarget scores) in trial order.
pub fn score_trials<F: Real>(
    embeddings: &Tensor<F>,
    trials: &[Trial],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if embeddings.rank() != 2 {
        return Err(Error::Shape(format!(
            "score_trials: embeddings {:?}",
            embeddings.shape()
        )));
    }
    let n = embeddings.shape()[0];
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for tr in trials {
        if tr.enroll >= n || tr.test >= n {
            return Err(Error::Invalid(format!(
                "trial references item {} outside {n} embeddings",
                tr.enroll.max(tr.test)
            )));
        }
        let s = cosine(embeddings.row(tr.enroll), embeddings.row(tr.test));
        if tr.target {
            targets.push(s);
        } else {
            nontargets.push(s);
        }
    }
    Ok((targets, nontargets))
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeResult {
    pub accuracy_pct: f64,
    pub n_fit: usize,
    pub n_holdout: usize,
}

const PROBE_STEPS: usize = 200;
const PROBE_LR: f64 = 0.1;

/// How much age-group information a linear classifier can read out of the
/// given embeddings. Items are split into fit and holdout sets by a hash
/// of their id (about a quarter held out); a multinomial logistic probe is
/// trained full-batch and scored on the holdout.
pub fn age_probe<F: Real>(
    embeddings: &Tensor<F>,
    ids: &[String],
    groups: &[usize],
    num_groups: usize,
) -> Result<ProbeResult> {
    if embeddings.rank() != 2 || embeddings.shape()[0] != ids.len() || ids.len() != groups.len() {
        return Err(Error::Shape(format!(
            "age_probe: {:?} embeddings, {} ids, {} groups",
            embeddings.shape(),
            ids.len(),
            groups.len()
        )));
    }
    if let Some(&bad) = groups.iter().find(|&&g| g >= num_groups) {
        return Err(Error::Invalid(format!(
            "age_probe: group {bad} out of range for {num_groups}"
        )));
    }
    let d = embeddings.shape()[1];
    let holdout: Vec<bool> = ids.iter().map(|id| fnv1a64(id.as_bytes()) % 4 == 0).collect();
    let fit_idx: Vec<usize> = (0..ids.len()).filter(|&i| !holdout[i]).collect();
    let hold_idx: Vec<usize> = (0..ids.len()).filter(|&i| holdout[i]).collect();
    if fit_idx.is_empty() || hold_idx.is_empty() {
        return Err(Error::Data(
            "age_probe: hash split left an empty fit or holdout set".into(),
        ));
    }

    let row = |i: usize| -> Vec<f64> {
        embeddings.row(i).iter().map(|v| v.into_f64()).collect()
    };
    let mut w = vec![0.0f64; d * num_groups];
    let mut b = vec![0.0f64; num_groups];
    let n_fit = fit_idx.len() as f64;
    for _ in 0..PROBE_STEPS {
        let mut gw = vec![0.0f64; d * num_groups];
        let mut gb = vec![0.0f64; num_groups];
        for &i in &fit_idx {
            let x = row(i);
            let p = probe_softmax(&x, &w, &b, num_groups);
            for (g, &pg) in p.iter().enumerate() {
                let resid = pg - if g == groups[i] { 1.0 } else { 0.0 };
                gb[g] += resid;
                for (k, &xk) in x.iter().enumerate() {
                    gw[k * num_groups + g] += resid * xk;
                }
            }
        }
        for (wv, gv) in w.iter_mut().zip(&gw) {
            *wv -= PROBE_LR * gv / n_fit;
        }
        for (bv, gv) in b.iter_mut().zip(&gb) {
            *bv -= PROBE_LR * gv / n_fit;
        }
    }

    let mut correct = 0usize;
    for &i in &hold_idx {
        let p = probe_softmax(&row(i), &w, &b, num_groups);
        let mut arg = 0;
        for (g, &pg) in p.iter().enumerate() {
            if pg > p[arg] {
                arg = g;
            }
        }
        if arg == groups[i] {
            correct += 1;
        }
    }
    Ok(ProbeResult {
        accuracy_pct: 100.0 * correct as f64 / hold_idx.len() as f64,
        n_fit: fit_idx.len(),
        n_holdout: hold_idx.len(),
    })
}

fn probe_softmax(x: &[f64], w: &[f64], b: &[f64], num_groups: usize) -> Vec<f64> {
    let mut z = b.to_vec();
    for (k, &xk) in x.iter().enumerate() {
        for g in 0..num_groups {
            z[g] += xk * w[k * num_groups + g];
        }
    }
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in &mut z {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in &mut z {
        *v /= sum;
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn eer_worked_example() {
        let r = eer(&[0.9, 0.6, 0.4], &[0.5, 0.2, 0.1]).unwrap();
        assert!((r.eer - 1.0 / 3.0).abs() < 1e-15, "{r:?}");
        assert!((r.threshold - 0.5).abs() < 1e-15);
        assert!((100.0 * r.eer - 33.3333).abs() < 1e-3);
    }

    #[test]
    fn min_dcf_worked_example() {
        let r = min_dcf(&[0.9, 0.6, 0.4], &[0.5, 0.2, 0.1], 0.01, 1.0, 1.0).unwrap();
        assert!((r.min_dcf - 1.0 / 3.0).abs() < 1e-15, "{r:?}");
        assert!((r.threshold - 0.6).abs() < 1e-15);
        assert!((r.min_dcf - 0.3333).abs() < 1e-4);
    }

    #[test]
    fn perfect_separation_and_total_confusion() {
        let r = eer(&[0.9, 0.8], &[0.1, 0.2]).unwrap();
        assert_eq!(r.eer, 0.0);
        let r = eer(&[0.1, 0.2], &[0.8, 0.9]).unwrap();
        assert!((r.eer - 1.0).abs() < 1e-15);
        let d = min_dcf(&[0.9, 0.8], &[0.1, 0.2], 0.01, 1.0, 1.0).unwrap();
        assert_eq!(d.min_dcf, 0.0);
    }

    #[test]
    fn identical_scores_cost_everything() {
        let d = min_dcf(&[0.5, 0.5], &[0.5, 0.5], 0.01, 1.0, 1.0).unwrap();
        assert!((d.min_dcf - 1.0).abs() < 1e-15);
        let r = eer(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((r.eer - 0.5).abs() < 1e-15, "{r:?}");
    }

    fn brute_force_eer(targets: &[f64], nontargets: &[f64]) -> f64 {
        let points = operating_points(targets, nontargets).unwrap();
        let st = sorted(targets);
        let sn = sorted(nontargets);
        let mut prev: Option<(f64, f64, f64)> = None;
        for &theta in &points {
            let (pm, pf) = rates(&st, &sn, theta);
            let diff = pm - pf;
            if diff <= 0.0 {
                if diff == 0.0 {
                    return pm;
                }
                let (pm0, _pf0, d0) = prev.unwrap();
                let s = d0 / (d0 - diff);
                return pm0 + s * (pm - pm0);
            }
            prev = Some((pm, pf, diff));
        }
        unreachable!()
    }

    fn brute_force_min_dcf(t: &[f64], n: &[f64], pt: f64, cm: f64, cf: f64) -> f64 {
        let points = operating_points(t, n).unwrap();
        let floor = (cm * pt).min(cf * (1.0 - pt));
        let mut best = f64::INFINITY;
        for &theta in &points {
            let miss = t.iter().filter(|&&s| s < theta).count() as f64 / t.len() as f64;
            let fa = n.iter().filter(|&&s| s >= theta).count() as f64 / n.len() as f64;
            let dcf = (cm * pt * miss + cf * (1.0 - pt) * fa) / floor;
            if dcf < best {
                best = dcf;
            }
        }
        best
    }

    #[test]
    fn metrics_match_brute_force_on_random_sets() {
        let mut rng = ChaCha12Rng::seed_from_u64(50);
        for trial in 0..200 {
            let nt = rng.gen_range(1..40);
            let nn = rng.gen_range(1..40);
            // draw from a small lattice so ties across the two sets happen
            let draw = |rng: &mut ChaCha12Rng| -> f64 {
                if rng.gen_bool(0.5) {
                    (rng.gen_range(-10i32..=10) as f64) / 10.0
                } else {
                    rng.sample(StandardNormal)
                }
            };
            let targets: Vec<f64> = (0..nt).map(|_| draw(&mut rng) + 0.3).collect();
            let nontargets: Vec<f64> = (0..nn).map(|_| draw(&mut rng)).collect();
            let r = eer(&targets, &nontargets).unwrap();
            let bf = brute_force_eer(&targets, &nontargets);
            assert_eq!(r.eer, bf, "set {trial}");
            assert!((0.0..=1.0).contains(&r.eer));
            let d = min_dcf(&targets, &nontargets, 0.01, 1.0, 1.0).unwrap();
            let bfd = brute_force_min_dcf(&targets, &nontargets, 0.01, 1.0, 1.0);
            assert_eq!(d.min_dcf, bfd, "set {trial}");
        }
    }

    #[test]
    fn eer_is_invariant_under_monotone_score_maps() {
        let mut rng = ChaCha12Rng::seed_from_u64(51);
        for _ in 0..50 {
            let targets: Vec<f64> = (0..12).map(|_| rng.sample::<f64, _>(StandardNormal) + 0.5).collect();
            let nontargets: Vec<f64> = (0..15).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let r1 = eer(&targets, &nontargets).unwrap();
            let cube = |v: &f64| v * v * v;
            let t2: Vec<f64> = targets.iter().map(cube).collect();
            let n2: Vec<f64> = nontargets.iter().map(cube).collect();
            let r2 = eer(&t2, &n2).unwrap();
            assert!((r1.eer - r2.eer).abs() < 1e-12, "{} vs {}", r1.eer, r2.eer);
        }
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine(&[1.0, 0.0], &[2.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((cosine(&[1.0, 0.0], &[-3.0, 0.0]) + 1.0).abs() < 1e-15);
        assert!(cosine(&[1.0, 0.0], &[0.0, 5.0]).abs() < 1e-15);
        assert_eq!(cosine::<f64>(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn trial_scoring_routes_by_label() {
        let e = Tensor::<f64>::from_rows(
            3,
            2,
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        let trials = vec![
            Trial { enroll: 0, test: 2, target: true },
            Trial { enroll: 0, test: 1, target: false },
        ];
        let (t, n) = score_trials(&e, &trials).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(n.len(), 1);
        assert!((t[0] - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        assert!(n[0].abs() < 1e-12);
    }

    #[test]
    fn probe_reads_separable_groups_but_not_noise() {
        let mut rng = ChaCha12Rng::seed_from_u64(52);
        let (n, d, ng) = (400, 8, 4);
        let mut x = Tensor::<f64>::zeros(&[n, d]);
        let mut ids = Vec::new();
        let mut groups = Vec::new();
        for i in 0..n {
            let g = i % ng;
            for j in 0..d {
                let base = if j == g { 3.0 } else { 0.0 };
                x.data_mut()[i * d + j] = base + 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
            ids.push(format!("utt{i:04}"));
            groups.push(g);
        }
        let r = age_probe(&x, &ids, &groups, 7).unwrap();
        assert!(r.accuracy_pct > 90.0, "{r:?}");
        assert!(r.n_fit + r.n_holdout == n && r.n_holdout > 0);

        let noise = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
        let rand_groups: Vec<usize> = (0..n).map(|_| rng.gen_range(0..7)).collect();
        let r = age_probe(&noise, &ids, &rand_groups, 7).unwrap();
        assert!(r.accuracy_pct < 45.0, "{r:?}");
    }

    #[test]
    fn probe_split_is_deterministic() {
        let x = Tensor::<f64>::full(&[10, 2], 1.0);
        let ids: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        let groups = vec![0usize; 10];
        let a = age_probe(&x, &ids, &groups, 7).unwrap();
        let b = age_probe(&x, &ids, &groups, 7).unwrap();
        assert_eq!(a.accuracy_pct, b.accuracy_pct);
        assert_eq!(a.n_holdout, b.n_holdout);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(eer(&[], &[0.1]).is_err());
        assert!(eer(&[0.1], &[]).is_err());
        assert!(eer(&[f64::NAN], &[0.1]).is_err());
        assert!(min_dcf(&[0.5], &[0.1], 0.0, 1.0, 1.0).is_err());
        assert!(min_dcf(&[0.5], &[0.1], 0.01, 0.0, 1.0).is_err());
    }
}
