//! Cross-module statistical and structural properties.

use orca_core::ltt::calibrate_prepared;
use orca_core::meta::{outer_gradients, unroll_outer_loss};
use orca_core::probe::score;
use orca_core::runtime::PreparedSet;
use orca_core::synth::generate_range;
use orca_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

fn random_instance(rng: &mut ChaCha8Rng, len: usize) -> (ProbeConfig, SlowWeights, Trajectory, Vec<bool>) {
    let d = rng.random_range(1..=4);
    let cfg = ProbeConfig::no_qk(d).with_learnable_eta(true).with_window(3);
    let mut slow = SlowWeights::init(&cfg, 0.2, rng).unwrap();
    slow.w0 = (0..d).map(|_| rng.random_range(-0.8..0.8)).collect();
    slow.b0 = rng.random_range(-0.5..0.5);
    let traj = Trajectory::from_embeddings(
        0,
        (0..len).map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).collect(),
    );
    let labels = (0..len).map(|_| rng.random_bool(0.5)).collect();
    (cfg, slow, traj, labels)
}

/// Fast weights before each step of a C = 0 unroll.
fn fast_path(cfg: &ProbeConfig, slow: &SlowWeights, traj: &Trajectory) -> Vec<(Vec<f64>, f64)> {
    let mut state = FastState::new(slow);
    let mut out = Vec::new();
    for t in 0..traj.len() {
        out.push((state.w.clone(), state.b));
        state.advance_in_place(slow, cfg, traj.embedding(t), false).unwrap();
    }
    out
}

/// Truncated loss: the score at step t sees the k most recent updates live
/// and everything older as a constant offset on (w₀, b₀).
fn truncated_loss(
    cfg: &ProbeConfig,
    base: &SlowWeights,
    live: &SlowWeights,
    traj: &Trajectory,
    labels: &[bool],
    k: usize,
) -> f64 {
    let path = fast_path(cfg, base, traj);
    (0..traj.len())
        .map(|t| {
            let from = t.saturating_sub(k);
            let mut state = FastState::new(live);
            for (w, (p, b0)) in state.w.iter_mut().zip(path[from].0.iter().zip(&base.w0)) {
                *w += p - b0;
            }
            state.b += path[from].1 - base.b0;
            for j in from..t {
                state.advance_in_place(live, cfg, traj.embedding(j), false).unwrap();
            }
            let a = score(&state, live, cfg, traj.embedding(t)).unwrap();
            let c = if labels[t] { 1.0 } else { 0.0 };
            (a - c) * (a - c)
        })
        .sum()
}

#[test]
fn truncated_gradients_match_frozen_history_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..12 {
        let (cfg, slow, traj, labels) = random_instance(&mut rng, 7);
        let k = 1 + i % 4;
        let (_, tape) = unroll_outer_loss(&slow, &cfg, &traj, &labels, InnerLabelPolicy::PseudoZero).unwrap();
        let analytic = outer_gradients(&tape, Truncation::Steps(k)).unwrap();
        let flat = slow.to_flat(&cfg);
        let h = 1e-6;
        for j in 0..flat.len() {
            let at = |x: f64| {
                let mut p = flat.clone();
                p[j] = x;
                let mut live = slow.clone();
                live.set_flat(&cfg, &p).unwrap();
                truncated_loss(&cfg, &slow, &live, &traj, &labels, k)
            };
            let numeric = (at(flat[j] + h) - at(flat[j] - h)) / (2.0 * h);
            assert!(
                (analytic[j] - numeric).abs() < 1e-6 * (1.0 + numeric.abs()),
                "k={k} param {j}: {} vs {numeric}",
                analytic[j]
            );
        }
    }
}

#[test]
fn ltt_pvalues_are_super_uniform_under_the_null() {
    // At true risk exactly δ the p-value must satisfy P(p ≤ α) ≤ α.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, delta) = (200usize, 0.1);
    let law = Binomial::new(n as u64, delta).unwrap();
    let draws = 10_000;
    let pvalues: Vec<f64> = (0..draws)
        .map(|_| binom_tail_pvalue(n, delta, law.sample(&mut rng) as usize).unwrap())
        .collect();
    for alpha in [0.01, 0.05, 0.1] {
        let rate = pvalues.iter().filter(|&&p| p <= alpha).count() as f64 / draws as f64;
        let slack = 3.0 * (alpha * (1.0 - alpha) / draws as f64).sqrt();
        assert!(rate <= alpha + slack, "α={alpha}: rate {rate}");
    }
}

fn trained_probe(seed: u64) -> (ProbeConfig, SlowWeights, SynthConfig) {
    let cfg = SynthConfig::reference(seed);
    let pcfg = ProbeConfig::no_qk(cfg.embed_dim);
    let mut tcfg = TrainConfig::for_variant(Variant::NoQk);
    tcfg.epochs = 3;
    tcfg.seed = seed;
    let data = generate_range(&cfg, 0, 200).unwrap();
    let w = train(&data, &pcfg, &tcfg, LabelMode::default()).unwrap().weights;
    (pcfg, w, cfg)
}

#[test]
fn empirical_risk_is_monotone_in_lambda() {
    let (pcfg, w, cfg) = trained_probe(1);
    let data = generate_range(&cfg, 500, 150).unwrap();
    let grid = ThresholdGrid::default_uniform();
    let spec = RiskSpec::new(0.1, 0.05, cfg.length_max).unwrap();
    let risks: Vec<f64> = grid
        .thresholds()
        .iter()
        .map(|&l| empirical_risk(&w, l, &data, &spec, &pcfg, LabelMode::default()).unwrap().0)
        .collect();
    // Grid runs from most conservative to most aggressive.
    assert!(risks.windows(2).all(|p| p[0] <= p[1] + 1e-15), "{risks:?}");
}

#[test]
fn lambda_star_does_not_grow_with_delta() {
    let (pcfg, w, cfg) = trained_probe(2);
    let cal = PreparedSet::new(&w, &pcfg, &generate_range(&cfg, 500, 300).unwrap(), cfg.length_max, LabelMode::default())
        .unwrap();
    let grid = ThresholdGrid::default_uniform();
    let mut last = f64::INFINITY;
    for delta in [0.03, 0.05, 0.08, 0.1, 0.15, 0.2, 0.3] {
        let spec = RiskSpec::new(delta, 0.05, cfg.length_max).unwrap();
        let l = calibrate_prepared(&cal, &grid, &spec).unwrap().lambda_star.unwrap_or(f64::INFINITY);
        assert!(l <= last, "δ={delta}: λ*={l} after {last}");
        last = l;
    }
}

#[test]
fn fast_state_resets_between_trajectories() {
    let (pcfg, w, cfg) = trained_probe(3);
    let data = generate_range(&cfg, 0, 30).unwrap();
    let alone: Vec<RunOutcome> =
        data.iter().map(|t| run_with_stopping(&w, &pcfg, Some(0.7), t, cfg.length_max).unwrap()).collect();
    let reversed: Vec<RunOutcome> =
        data.iter().rev().map(|t| run_with_stopping(&w, &pcfg, Some(0.7), t, cfg.length_max).unwrap()).collect();
    for (a, b) in alone.iter().zip(reversed.iter().rev()) {
        assert_eq!(a, b);
    }
    let spec = RiskSpec::new(0.1, 0.05, cfg.length_max).unwrap();
    let mut shuffled = data.clone();
    shuffled.rotate_left(7);
    let a = evaluate_set(&w, &pcfg, Some(0.7), &data, &spec, LabelMode::default()).unwrap();
    let b = evaluate_set(&w, &pcfg, Some(0.7), &shuffled, &spec, LabelMode::default()).unwrap();
    assert_eq!(a.mean_step_savings, b.mean_step_savings);
    assert_eq!(a.error_rate, b.error_rate);
}

#[test]
fn zero_inner_lr_makes_the_label_policy_irrelevant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let (cfg, mut slow, traj, labels) = random_instance(&mut rng, 6);
        slow.eta = 0.0;
        let (a, _) = unroll_outer_loss(&slow, &cfg, &traj, &labels, InnerLabelPolicy::PseudoZero).unwrap();
        let (b, _) = unroll_outer_loss(&slow, &cfg, &traj, &labels, InnerLabelPolicy::TrueLabels).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn oracle_stopping_dominates_every_error_free_stop() {
    let (pcfg, w, cfg) = trained_probe(5);
    let test = generate_range(&cfg, 1000, 300).unwrap();
    for lambda in [0.3, 0.5, 0.7, 0.9] {
        for t in &test {
            let labels = build_labels(t, LabelMode::default()).unwrap();
            let run = run_with_stopping(&w, &pcfg, Some(lambda), t, cfg.length_max).unwrap();
            let oracle = oracle_transition(t).unwrap().unwrap_or(t.len());
            if !run.loss(&labels, LossMode::EmittedIncorrect) {
                assert!(run.stop_step >= oracle, "λ={lambda}: stop {} before transition {oracle}", run.stop_step);
            }
        }
    }
}

#[test]
fn static_probe_separates_an_easy_problem() {
    let mut cfg = SynthConfig::reference(9);
    cfg.noise_scale = 0.3;
    cfg.drift_coeff = 0.0;
    let pcfg = ProbeConfig::no_qk(cfg.embed_dim);
    let mut tcfg = TrainConfig::for_variant(Variant::NoQk);
    tcfg.epochs = 5;
    tcfg.outer_lr = 1e-2;
    let data = generate_range(&cfg, 0, 200).unwrap();
    let w = train_static(&data, &pcfg, &tcfg, LabelMode::default()).unwrap().weights;
    let test = generate_range(&cfg, 200, 200).unwrap();
    let (mut right, mut total) = (0usize, 0usize);
    for t in &test {
        let labels = build_labels(t, LabelMode::default()).unwrap();
        let run = run_with_stopping(&w, &pcfg, None, t, t.len()).unwrap();
        for (s, l) in run.raw_scores.iter().zip(&labels) {
            right += usize::from((*s >= 0.5) == *l);
            total += 1;
        }
    }
    let acc = right as f64 / total as f64;
    assert!(acc > 0.9, "per-step accuracy {acc}");
}
