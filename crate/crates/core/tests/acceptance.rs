//! Acceptance checklist. Each test is one contract point and prints the
//! numbers it judged, so a red line comes with its evidence attached.
//!
//! The heavy multi-seed trainings behind c5/c6/c7 run once in a shared
//! fixture; everything else is self-contained and fast.
//!
//! Known red: `c2_club_estimate_vs_gaussian_closed_form` fails its strong
//! correlation half by construction. The contrastive upper bound carries a
//! positive gap even with the exact conditional (see the analysis printed
//! by the test); no amount of estimator fitting can land within the asked
//! tolerance at rho = 0.8. The independent half is unbiased and passes.

use std::f64::consts::E;
use std::sync::OnceLock;
use std::time::Instant;

use agesplit_core::backbone::{self, attentive_stats_pool, stats_pool};
use agesplit_core::config::{Precision, RunConfig, TrainMode};
use agesplit_core::graph::{Graph, Inputs};
use agesplit_core::metrics::{self, age_probe};
use agesplit_core::mi::{self, MiTerm};
use agesplit_core::objectives::{age_group, identity_loss, NUM_AGE_GROUPS};
use agesplit_core::scalar::Real;
use agesplit_core::synth::{self, Dataset, TRIAL_TIERS};
use agesplit_core::tensor::Tensor;
use agesplit_core::train::{self, FitOptions};
use agesplit_core::{checkpoint, dataio, gradsuite, streams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

const SEEDS: [u64; 3] = [7, 8, 9];

fn median(mut xs: Vec<f64>) -> f64 {
    assert!(!xs.is_empty() && xs.len() % 2 == 1);
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

fn rows_range<F: Real>(t: &Tensor<F>, lo: usize, hi: usize) -> Tensor<F> {
    let d = t.shape()[1];
    Tensor::from_rows(hi - lo, d, t.data()[lo * d..hi * d].to_vec()).unwrap()
}

// ── shared multi-seed fixture ───────────────────────────────────────────

/// Ablation recipe: narrow everything and let both loss scales bite, so
/// the encoder cannot memorise around the age confound and the estimator
/// actually converges within desk-scale epochs.
fn ablation_cfg(seed: u64) -> RunConfig {
    RunConfig {
        embed_dim: 32,
        enc_hidden: 32,
        attn_hidden: 32,
        lambda_age: 1.0,
        lambda_mi: 1.0,
        est_lr: 1e-3,
        epochs: 20,
        seed,
        ..RunConfig::default()
    }
}

/// Probe recipe: wider embedding with a gentler MI penalty. The linear
/// age readout needs headroom in x_init for the drop on x_id to show.
fn probe_cfg(seed: u64) -> RunConfig {
    RunConfig {
        embed_dim: 64,
        lambda_age: 1.0,
        lambda_mi: 0.05,
        est_lr: 1e-3,
        epochs: 14,
        seed,
        ..RunConfig::default()
    }
}

struct SeedRuns {
    seed: u64,
    eer_full: f64,
    eer_no_aa: f64,
    eer_no_mim: f64,
    probe_init: f64,
    probe_id: f64,
    mi_init: f64,
    mi_full: f64,
    mi_no_mim: f64,
}

struct Fixture {
    runs: Vec<SeedRuns>,
    elapsed_s: f64,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(build_fixture)
}

/// Mean EER in points over the four nonzero age-gap tiers; the analog of
/// averaging a cross-age benchmark's per-gap columns.
fn mean_gap_eer(ds: &Dataset<f32>, params: &agesplit_core::ParamSet<f32>, seed: u64) -> f64 {
    let triples = backbone::embed_batch(params, &ds.items).unwrap();
    let (_, _, x_id) = backbone::stack_triples(&triples).unwrap();
    let mut acc = 0.0;
    for &(tier, min_gap) in &TRIAL_TIERS[1..] {
        let trials = synth::build_trials(ds, tier, min_gap, true, seed).unwrap();
        let (t, n) = metrics::score_trials(&x_id, &trials).unwrap();
        acc += 100.0 * metrics::eer(&t, &n).unwrap().eer;
    }
    acc / (TRIAL_TIERS.len() - 1) as f64
}

/// The comparable-across-checkpoints protocol: embed everything, fit a
/// fresh estimator on the pre-holdout rows, report the holdout estimate.
fn refit_mi(ds: &Dataset<f32>, params: &agesplit_core::ParamSet<f32>, cfg: &RunConfig) -> f64 {
    let triples = backbone::embed_batch(params, &ds.items).unwrap();
    let (_, x_age, x_id) = backbone::stack_triples(&triples).unwrap();
    let n = ds.len();
    let split = n - cfg.mi_holdout;
    let opts = FitOptions {
        seed: cfg.seed,
        ..FitOptions::default()
    };
    let (fitted, _) = train::fit_estimator(
        &rows_range(&x_id, 0, split),
        &rows_range(&x_age, 0, split),
        &opts,
    )
    .unwrap();
    mi::estimate_mi(
        &fitted,
        &rows_range(&x_id, split, n),
        &rows_range(&x_age, split, n),
    )
    .unwrap()
}

fn train_mode(cfg: &RunConfig, ds: &Dataset<f32>, mode: TrainMode) -> agesplit_core::ParamSet<f32> {
    let cfg = RunConfig { mode, ..cfg.clone() };
    train::train(&cfg, ds, |_, _, _| Ok(())).unwrap().params
}

fn build_fixture() -> Fixture {
    let started = Instant::now();
    let mut runs = Vec::new();
    for seed in SEEDS {
        let acfg = ablation_cfg(seed);
        let ds: Dataset<f32> = synth::generate(&acfg).unwrap();

        let full = train_mode(&acfg, &ds, TrainMode::Full);
        let no_aa = train_mode(&acfg, &ds, TrainMode::NoAa);
        let no_mim = train_mode(&acfg, &ds, TrainMode::NoMim);

        // the untrained reference point: parameters exactly as the
        // trainer would draw them before the first step
        let mut model_rng = ChaCha12Rng::seed_from_u64(seed);
        model_rng.set_stream(streams::MODEL);
        let init: agesplit_core::ParamSet<f32> =
            train::init_params(&acfg, ds.num_speakers(), &mut model_rng);

        let pcfg = probe_cfg(seed);
        let probe_params = train_mode(&pcfg, &ds, TrainMode::Full);
        let triples = backbone::embed_batch(&probe_params, &ds.items).unwrap();
        let (x_init, _, x_id) = backbone::stack_triples(&triples).unwrap();
        let ids: Vec<String> = ds.items.iter().map(|s| s.utterance_id.clone()).collect();
        let groups: Vec<usize> = ds.items.iter().map(|s| age_group(s.age_years)).collect();
        let p_init = age_probe(&x_init, &ids, &groups, NUM_AGE_GROUPS).unwrap();
        let p_id = age_probe(&x_id, &ids, &groups, NUM_AGE_GROUPS).unwrap();

        runs.push(SeedRuns {
            seed,
            eer_full: mean_gap_eer(&ds, &full, seed),
            eer_no_aa: mean_gap_eer(&ds, &no_aa, seed),
            eer_no_mim: mean_gap_eer(&ds, &no_mim, seed),
            probe_init: p_init.accuracy_pct,
            probe_id: p_id.accuracy_pct,
            mi_init: refit_mi(&ds, &init, &acfg),
            mi_full: refit_mi(&ds, &full, &acfg),
            mi_no_mim: refit_mi(&ds, &no_mim, &acfg),
        });
    }
    Fixture {
        runs,
        elapsed_s: started.elapsed().as_secs_f64(),
    }
}

// ── c1 ──────────────────────────────────────────────────────────────────

#[test]
fn c1_gradcheck_all_loss_and_pooling_graphs() {
    let started = Instant::now();
    let reports = gradsuite::check_all(7, 10, gradsuite::DEFAULT_EPS).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    assert_eq!(reports.len(), gradsuite::CASE_NAMES.len());
    for r in &reports {
        println!(
            "c1 {:<16} max rel err {:.3e} ({} coords x {} points)",
            r.name, r.max_rel_err, r.coords_checked, r.points
        );
        assert!(
            r.max_rel_err <= 1e-4,
            "{}: max relative error {:.3e} exceeds 1e-4",
            r.name,
            r.max_rel_err
        );
    }
    println!("c1 runtime {elapsed:.1}s");
    assert!(elapsed < 60.0, "gradient checks took {elapsed:.1}s, budget 60s");
}

// ── c2 ──────────────────────────────────────────────────────────────────

#[test]
fn c2_club_estimate_vs_gaussian_closed_form() {
    let started = Instant::now();
    let opts = FitOptions {
        seed: 7,
        ..FitOptions::default()
    };

    let rho0 = vec![0.0; 4];
    let (x0, y0) = synth::gaussian_pairs::<f64>(50_000, &rho0, 7).unwrap();
    let (p0, _) = train::fit_estimator(&x0, &y0, &opts).unwrap();
    let est0 = mi::estimate_mi(&p0, &x0, &y0).unwrap();
    println!("c2 rho=0.0: estimate {est0:.4} nats, truth 0.0, tolerance 0.05");

    let rho8 = vec![0.8; 4];
    let truth = synth::gaussian_mi(&rho8);
    let (x8, y8) = synth::gaussian_pairs::<f64>(50_000, &rho8, 7).unwrap();
    let (p8, _) = train::fit_estimator(&x8, &y8, &opts).unwrap();
    let est8 = mi::estimate_mi(&p8, &x8, &y8).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    println!("c2 rho=0.8: estimate {est8:.4} nats, truth {truth:.4}, tolerance 0.15");
    println!("c2 runtime {elapsed:.1}s");

    assert!(elapsed < 180.0, "estimation took {elapsed:.1}s, budget 180s");
    assert!(
        est0.abs() <= 0.05,
        "independent pairs: |{est0:.4}| > 0.05 nats"
    );

    // The bound's gap at the exact conditional is, per dimension,
    // rho^2/(1-rho^2) + ln(1-rho^2)/2: the contrast term's expectation
    // under shuffled negatives does not cancel the conditional entropy.
    // At rho = 0.8 that is 1.267 nats/dim, so the best possible estimate
    // sits near truth + 5.07 regardless of sample count or fitting
    // effort. The tolerance below is therefore not attainable; the gap
    // vanishes only as rho -> 0, which the first half verifies.
    let per_dim = 0.64 / 0.36 + 0.5 * (1.0 - 0.64f64).ln();
    println!(
        "c2 note: intrinsic gap at the exact conditional is {:.3} nats ({per_dim:.3}/dim)",
        4.0 * per_dim
    );
    assert!(
        (est8 - truth).abs() <= 0.15,
        "correlated pairs: |{est8:.4} - {truth:.4}| = {:.4} > 0.15 nats \
         (intrinsic upper-bound gap, see note above)",
        (est8 - truth).abs()
    );
}

// ── c3 ──────────────────────────────────────────────────────────────────

/// Brute-force twin of the production sweep: same operating points, naive
/// counting, same interpolation arithmetic, so agreement must be exact.
mod brute {
    pub fn points(t: &[f64], n: &[f64]) -> Vec<f64> {
        let mut s: Vec<f64> = t.iter().chain(n).copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        s.dedup();
        let mut pts = vec![s[0] + 1.0];
        pts.extend_from_slice(&s);
        pts.push(s[s.len() - 1] - 1.0);
        pts
    }

    pub fn rates(t: &[f64], n: &[f64], theta: f64) -> (f64, f64) {
        let miss = t.iter().filter(|&&s| s < theta).count();
        let fa = n.iter().filter(|&&s| s >= theta).count();
        (miss as f64 / t.len() as f64, fa as f64 / n.len() as f64)
    }

    pub fn eer(t: &[f64], n: &[f64]) -> (f64, f64) {
        let mut prev: Option<(f64, f64, f64)> = None;
        for theta in points(t, n) {
            let (pm, pf) = rates(t, n, theta);
            let diff = pm - pf;
            if diff <= 0.0 {
                if diff == 0.0 {
                    return (pm, theta);
                }
                let (t0, pm0, d0) = prev.unwrap();
                let s = d0 / (d0 - diff);
                return (pm0 + s * (pm - pm0), t0 + s * (theta - t0));
            }
            prev = Some((theta, pm, diff));
        }
        unreachable!()
    }

    pub fn min_dcf(t: &[f64], n: &[f64], pt: f64, cm: f64, cf: f64) -> (f64, f64) {
        let floor = (cm * pt).min(cf * (1.0 - pt));
        let mut best: Option<(f64, f64)> = None;
        for theta in points(t, n) {
            let (pm, pf) = rates(t, n, theta);
            let dcf = (cm * pt * pm + cf * (1.0 - pt) * pf) / floor;
            if best.map_or(true, |(b, _)| dcf < b) {
                best = Some((dcf, theta));
            }
        }
        best.unwrap()
    }
}

#[test]
fn c3_eer_min_dcf_match_brute_force_scan() {
    use rand::Rng;
    let started = Instant::now();

    // worked example: interpolation-free crossing and an interior cost
    // minimum, checked against hand-computed values
    let t = [0.9, 0.6, 0.4];
    let n = [0.5, 0.2, 0.1];
    let e = metrics::eer(&t, &n).unwrap();
    let d = metrics::min_dcf(&t, &n, 0.01, 1.0, 1.0).unwrap();
    println!(
        "c3 worked example: EER {:.4}% (want 33.33), minDCF {:.4} (want 0.3333)",
        100.0 * e.eer,
        d.min_dcf
    );
    assert!((100.0 * e.eer - 33.33).abs() < 5e-3);
    assert!((d.min_dcf - 0.3333).abs() < 5e-5);

    let mut rng = ChaCha12Rng::seed_from_u64(33);
    for set in 0..100 {
        let nt = rng.gen_range(1..=500);
        let nn = rng.gen_range(1..=500);
        let quantize = set % 2 == 0;
        let mut draw = |lo: f64, hi: f64| {
            let v = rng.gen_range(lo..hi);
            // coarse grid on even sets forces ties, including across the
            // target/nontarget split
            if quantize {
                (v * 10.0).round() / 10.0
            } else {
                v
            }
        };
        let t: Vec<f64> = (0..nt).map(|_| draw(-1.0, 1.0)).collect();
        let n: Vec<f64> = (0..nn).map(|_| draw(-1.2, 0.8)).collect();

        let got = metrics::eer(&t, &n).unwrap();
        let want = brute::eer(&t, &n);
        assert!(
            got.eer == want.0 && got.threshold == want.1,
            "set {set}: EER {} @ {} vs brute {} @ {}",
            got.eer,
            got.threshold,
            want.0,
            want.1
        );

        let got = metrics::min_dcf(&t, &n, 0.01, 1.0, 1.0).unwrap();
        let want = brute::min_dcf(&t, &n, 0.01, 1.0, 1.0);
        assert!(
            got.min_dcf == want.0 && got.threshold == want.1,
            "set {set}: minDCF {} @ {} vs brute {} @ {}",
            got.min_dcf,
            got.threshold,
            want.0,
            want.1
        );
    }
    let elapsed = started.elapsed().as_secs_f64();
    println!("c3 100 random sets match exactly; runtime {elapsed:.1}s");
    assert!(elapsed < 30.0, "metric scan took {elapsed:.1}s, budget 30s");
}

// ── c4 ──────────────────────────────────────────────────────────────────

#[test]
fn c4_exported_components_recompose_initial_embedding() {
    let cfg = RunConfig {
        num_speakers: 100,
        utterances_per_speaker: 10,
        embed_dim: 32,
        enc_hidden: 32,
        attn_hidden: 32,
        epochs: 2,
        precision: Precision::F64,
        seed: 11,
        ..RunConfig::default()
    };
    let ds: Dataset<f64> = synth::generate(&cfg).unwrap();
    assert_eq!(ds.len(), 1000);
    let outcome = train::train(&cfg, &ds, |_, _, _| Ok(())).unwrap();
    let triples = backbone::embed_batch(&outcome.params, &ds.items).unwrap();
    let (x_init, x_age, x_id) = backbone::stack_triples(&triples).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let paths = [
        dir.path().join("init.csv"),
        dir.path().join("age.csv"),
        dir.path().join("id.csv"),
    ];
    dataio::write_embeddings(&paths[0], &ds, &x_init).unwrap();
    dataio::write_embeddings(&paths[1], &ds, &x_age).unwrap();
    dataio::write_embeddings(&paths[2], &ds, &x_id).unwrap();

    let (ids_i, _, _, init) = dataio::read_embeddings(&paths[0]).unwrap();
    let (ids_a, _, _, age) = dataio::read_embeddings(&paths[1]).unwrap();
    let (ids_d, _, _, id) = dataio::read_embeddings(&paths[2]).unwrap();
    assert_eq!(ids_i, ids_a);
    assert_eq!(ids_i, ids_d);
    assert_eq!(init.shape(), &[1000, cfg.embed_dim]);

    let mut worst = 0.0f64;
    for ((&a, &b), &c) in age.data().iter().zip(id.data()).zip(init.data()) {
        worst = worst.max((a + b - c).abs());
    }
    println!("c4 max |x_age + x_id - x_init| over 1000 exported rows: {worst:.3e}");
    assert!(worst <= 1e-6, "recomposition error {worst:.3e} exceeds 1e-6");
}

// ── c5 ──────────────────────────────────────────────────────────────────

#[test]
fn c5_mim_improves_cross_age_eer_over_ablations() {
    let fx = fixture();
    for r in &fx.runs {
        println!(
            "c5 seed {}: mean cross-age EER full {:.3} / no_aa {:.3} / no_mim {:.3}",
            r.seed, r.eer_full, r.eer_no_aa, r.eer_no_mim
        );
    }
    let med_full = median(fx.runs.iter().map(|r| r.eer_full).collect());
    let med_no_mim = median(fx.runs.iter().map(|r| r.eer_no_mim).collect());
    let wins = fx
        .runs
        .iter()
        .filter(|r| r.eer_full <= r.eer_no_aa)
        .count();
    println!(
        "c5 medians: full {med_full:.3} vs no_mim {med_no_mim:.3} (margin {:.3}, need >= 0.5); \
         full <= no_aa in {wins}/3 seeds (need >= 2); fixture runtime {:.0}s (budget 1800s)",
        med_no_mim - med_full,
        fx.elapsed_s
    );
    assert!(fx.elapsed_s < 1800.0);
    assert!(
        med_full < med_no_mim - 0.5,
        "median EER full {med_full:.3} vs no_mim {med_no_mim:.3}: margin under 0.5 points"
    );
    assert!(wins >= 2, "full beat no_aa in only {wins}/3 seeds");
}

// ── c6 ──────────────────────────────────────────────────────────────────

#[test]
fn c6_linear_age_probe_reads_less_from_x_id() {
    let fx = fixture();
    for r in &fx.runs {
        println!(
            "c6 seed {}: probe accuracy x_init {:.1}% vs x_id {:.1}%",
            r.seed, r.probe_init, r.probe_id
        );
    }
    let med_init = median(fx.runs.iter().map(|r| r.probe_init).collect());
    let med_id = median(fx.runs.iter().map(|r| r.probe_id).collect());
    println!("c6 medians: x_init {med_init:.1}% vs x_id {med_id:.1}%");
    assert!(
        med_id < med_init,
        "median probe accuracy on x_id ({med_id:.1}%) not below x_init ({med_init:.1}%)"
    );
}

// ── c7 ──────────────────────────────────────────────────────────────────

#[test]
fn c7_holdout_mi_drops_below_init_and_no_mim() {
    let fx = fixture();
    for r in &fx.runs {
        println!(
            "c7 seed {}: holdout MI init {:.2} / full {:.2} / no_mim {:.2} nats",
            r.seed, r.mi_init, r.mi_full, r.mi_no_mim
        );
    }
    let med_init = median(fx.runs.iter().map(|r| r.mi_init).collect());
    let med_full = median(fx.runs.iter().map(|r| r.mi_full).collect());
    let med_no_mim = median(fx.runs.iter().map(|r| r.mi_no_mim).collect());
    println!("c7 medians: init {med_init:.2}, full {med_full:.2}, no_mim {med_no_mim:.2}");
    assert!(
        med_full < med_init,
        "median holdout MI after full training ({med_full:.2}) not below initialization ({med_init:.2})"
    );
    assert!(
        med_full < med_no_mim,
        "median holdout MI after full training ({med_full:.2}) not below no_mim ({med_no_mim:.2})"
    );
}

// ── c8 ──────────────────────────────────────────────────────────────────

#[test]
fn c8_reruns_and_checkpoint_roundtrip_are_byte_identical() {
    let cfg = RunConfig {
        num_speakers: 6,
        utterances_per_speaker: 4,
        identity_dim: 4,
        channels: 6,
        frames: 10,
        enc_hidden: 8,
        embed_dim: 12,
        attn_hidden: 4,
        batch_size: 8,
        epochs: 2,
        warmup_epochs: 1,
        mi_holdout: 4,
        seed: 5,
        ..RunConfig::default()
    };
    let ds: Dataset<f32> = synth::generate(&cfg).unwrap();
    let a = train::train(&cfg, &ds, |_, _, _| Ok(())).unwrap();
    let b = train::train(&cfg, &ds, |_, _, _| Ok(())).unwrap();
    assert_eq!(a.log, b.log, "rerun produced a different training log");
    println!(
        "c8 rerun log identical ({} bytes, {} epochs)",
        a.log.len(),
        a.epochs_run
    );

    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    checkpoint::save(&pa, &a.checkpoint).unwrap();
    checkpoint::save(&pb, &b.checkpoint).unwrap();
    let bytes_a = std::fs::read(&pa).unwrap();
    assert_eq!(
        bytes_a,
        std::fs::read(&pb).unwrap(),
        "rerun produced a different checkpoint"
    );

    let reloaded = checkpoint::load::<f32>(&pa).unwrap();
    let pc = dir.path().join("c.ckpt");
    checkpoint::save(&pc, &reloaded).unwrap();
    assert_eq!(
        bytes_a,
        std::fs::read(&pc).unwrap(),
        "save -> load -> save changed checkpoint bytes"
    );
    println!("c8 checkpoint roundtrip identical ({} bytes)", bytes_a.len());
}

// ── c9 ──────────────────────────────────────────────────────────────────

#[test]
fn c9_closed_form_reductions() {
    let mut rng = ChaCha12Rng::seed_from_u64(42);

    // margin 0, scale 1 reduces the angular-margin loss to softmax cross
    // entropy over plain cosine logits
    let (b, d, s) = (6, 10, 8);
    let w = Tensor::<f64>::randn(&[s, d], 1.0, &mut rng);
    let x = Tensor::<f64>::randn(&[b, d], 1.0, &mut rng);
    let classes = [0usize, 3, 7, 1, 4, 2];

    let mut g = Graph::<f64>::new();
    g.param("head.id.w", w.clone()).unwrap();
    let xin = g.input("x", &[b, d]).unwrap();
    let loss = identity_loss(&mut g, xin, &classes, 0.0, 1.0).unwrap();
    let mut inputs = Inputs::default();
    inputs.insert("x".into(), x.clone());
    let got = g.forward(&inputs).unwrap().value(loss).item();

    let norm = |row: &[f64]| {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter().map(|v| v / n).collect::<Vec<f64>>()
    };
    let mut want = 0.0;
    for i in 0..b {
        let xi = norm(x.row(i));
        let logits: Vec<f64> = (0..s)
            .map(|c| {
                let wc = norm(w.row(c));
                xi.iter().zip(&wc).map(|(a, b)| a * b).sum()
            })
            .collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        want += lse - logits[classes[i]];
    }
    want /= b as f64;
    let diff = (got - want).abs();
    println!("c9 margin-0 angular loss vs cosine softmax CE: |diff| {diff:.3e}");
    assert!(diff <= 1e-9);

    // zero age gaps at lambda0 = e give unit weights, so the aging-aware
    // objective must coincide with the unweighted one
    let dim = 16;
    let logq = |rng: &mut ChaCha12Rng| -> Vec<f64> {
        (0..b).map(|_| rng.gen_range(-25.0..-5.0)).collect()
    };
    let (pos, neg) = (logq(&mut rng), logq(&mut rng));
    let aa: Vec<f64> = (0..b).map(|_| mi::aa_weight(0.0, E)).collect();
    let unit = vec![1.0; b];

    let mut g = Graph::<f64>::new();
    let p = g.input("pos", &[b]).unwrap();
    let n = g.input("neg", &[b]).unwrap();
    let la = mi::mim_loss(&mut g, p, n, &aa, MiTerm::ClampedDensity { dim }).unwrap();
    let lu = mi::mim_loss(&mut g, p, n, &unit, MiTerm::ClampedDensity { dim }).unwrap();
    let mut inputs = Inputs::default();
    inputs.insert("pos".into(), Tensor::new(vec![b], pos).unwrap());
    inputs.insert("neg".into(), Tensor::new(vec![b], neg).unwrap());
    let exec = g.forward(&inputs).unwrap();
    let diff = (exec.value(la).item() - exec.value(lu).item()).abs();
    println!("c9 zero-gap aging-aware loss vs unit weights: |diff| {diff:.3e}");
    assert!(diff <= 1e-12);

    // an all-zero attention vector makes every frame weight equal, which
    // must collapse attentive pooling onto plain statistics pooling
    let (cp, t, h, out) = (6, 5, 3, 4);
    let map = Tensor::<f64>::randn(&[cp, t], 1.0, &mut rng);
    let proj = Tensor::<f64>::randn(&[2 * cp, out], 1.0, &mut rng);
    let aw = Tensor::<f64>::randn(&[cp, h], 1.0, &mut rng);
    let ab = Tensor::<f64>::randn(&[h], 1.0, &mut rng);
    let av = Tensor::<f64>::zeros(&[h, 1]);
    let att = attentive_stats_pool(&map, &aw, &ab, &av, &proj).unwrap();
    let plain = stats_pool(&map, &proj).unwrap();
    let diff = att
        .data()
        .iter()
        .zip(plain.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("c9 uniform attentive pooling vs statistics pooling: |diff| {diff:.3e}");
    assert!(diff <= 1e-12);
}
