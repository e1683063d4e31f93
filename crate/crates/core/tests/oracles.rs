use physcorr::curation::PreferencePair;
use physcorr::phydpo::{
    dpo_loss, mean_dpo_loss, pair_weight, phydpo_loss, phydpo_loss_and_grad, BetaMode, DpoConfig, ReweightConfig,
    ScoreHistogram, ToyPolicy,
};
use physcorr::score::{
    fit_subject_stats, huber_grad, huber_loss, mixer_objective, normalize_subject, subject_consistency,
    EmbeddingSequence, FeatureRow, HuberConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn consistency_matches_pairwise_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let frames = rng.gen_range(2..12);
        let dim = rng.gen_range(1..20);
        let rows: Vec<Vec<f32>> = (0..frames)
            .map(|_| (0..dim).map(|_| rng.gen_range(0.1f32..1.0)).collect())
            .collect();
        let seq = EmbeddingSequence::from_rows("v", &rows).unwrap();
        let oracle = rows.windows(2).map(|w| cosine(&w[0], &w[1])).sum::<f64>() / (frames - 1) as f64;
        assert!((subject_consistency(&seq) - oracle).abs() < 1e-12);
    }
}

#[test]
fn normalization_uses_population_std() {
    let xs = [0.80, 0.85, 0.90, 0.95, 1.00];
    let stats = fit_subject_stats("c", &xs).unwrap();
    let mu = 0.9;
    let sigma = (xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / 5.0).sqrt();
    assert!((stats.mu - mu).abs() < 1e-12);
    assert!((stats.sigma - sigma).abs() < 1e-12);
    let z = (0.95 - mu) / sigma;
    assert!((normalize_subject(0.95, &stats) - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
    assert_eq!(normalize_subject(mu, &stats), 0.5);
}

#[test]
fn huber_piecewise_grid() {
    let cfg = HuberConfig::new(0.2).unwrap();
    for i in 0..1000 {
        let z = -1.0 + 2.0 * i as f64 / 999.0;
        let oracle = if z.abs() <= 0.2 { 0.5 * z * z } else { 0.2 * (z.abs() - 0.1) };
        assert!((huber_loss(z, &cfg) - oracle).abs() <= 1e-12, "z={z}");
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[test]
fn mixer_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    for _ in 0..100 {
        let delta = rng.gen_range(0.05..0.5);
        let cfg = HuberConfig::new(delta).unwrap();
        let rows: Vec<FeatureRow> = (0..rng.gen_range(5..40))
            .map(|_| FeatureRow {
                s_subj_norm: rng.gen(),
                s_mech: [0.0, 0.5, 1.0][rng.gen_range(0..3)],
                human_score: rng.gen(),
            })
            .collect();
        let lambda = rng.gen_range(-3.0..3.0);
        let (_, g) = mixer_objective(&rows, lambda, &cfg);
        let fd = (mixer_objective(&rows, lambda + h, &cfg).0 - mixer_objective(&rows, lambda - h, &cfg).0) / (2.0 * h);
        assert!(rel_err(&[g], &[fd]) < 1e-6, "analytic {g} fd {fd}");
    }
}

#[test]
fn huber_derivative_matches_differences() {
    let cfg = HuberConfig::new(0.2).unwrap();
    for i in 0..200 {
        let z = -1.0 + 2.0 * i as f64 / 199.0;
        if (z.abs() - 0.2).abs() < 1e-4 {
            continue;
        }
        let fd = (huber_loss(z + 1e-6, &cfg) - huber_loss(z - 1e-6, &cfg)) / 2e-6;
        assert!((huber_grad(z, &cfg) - fd).abs() < 1e-7);
    }
}

fn random_policy(rng: &mut ChaCha8Rng) -> (ToyPolicy, Vec<PreferencePair>) {
    let rows = rng.gen_range(1..5);
    let width = rng.gen_range(2..6);
    let prompts: Vec<String> = (0..rows).map(|r| format!("p{r}")).collect();
    let items: Vec<Vec<String>> = (0..rows)
        .map(|r| (0..width).map(|i| format!("p{r}i{i}")).collect())
        .collect();
    let logits: Vec<f64> = (0..rows * width).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let reference: Vec<f64> = (0..rows * width).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let policy = ToyPolicy::with_reference(prompts, items, logits, reference).unwrap();
    let pairs = (0..rng.gen_range(1..8))
        .map(|_| {
            let r = rng.gen_range(0..rows);
            let w = rng.gen_range(0..width);
            let mut l = rng.gen_range(0..width);
            while l == w {
                l = rng.gen_range(0..width);
            }
            let mut p = PreferencePair::new(format!("p{r}"), format!("p{r}i{w}"), format!("p{r}i{l}"), 0.8, 0.2).unwrap();
            p.weight = rng.gen_range(0.1..5.0);
            p
        })
        .collect();
    (policy, pairs)
}

#[test]
fn dpo_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    for _ in 0..100 {
        let (policy, pairs) = random_policy(&mut rng);
        let cfg = DpoConfig {
            gamma: [0.01, 0.1, 1.0, 3.0][rng.gen_range(0..4)],
            ..DpoConfig::default()
        };
        let (_, grad) = phydpo_loss_and_grad(&policy, &pairs, &cfg).unwrap();
        let mut fd = vec![0.0; grad.len()];
        for (k, slot) in fd.iter_mut().enumerate() {
            let mut plus = policy.clone();
            plus.logits_mut()[k] += h;
            let mut minus = policy.clone();
            minus.logits_mut()[k] -= h;
            *slot = (phydpo_loss(&plus, &pairs, &cfg).unwrap() - phydpo_loss(&minus, &pairs, &cfg).unwrap()) / (2.0 * h);
        }
        assert!(rel_err(&grad, &fd) < 1e-5, "{grad:?} vs {fd:?}");
    }
}

#[test]
fn dpo_loss_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (policy, pairs) = random_policy(&mut rng);
        let cfg = DpoConfig::default();
        for p in &pairs {
            let idx = policy.locate(p).unwrap();
            let lp = |z: &[f64], i: usize| z[i] - z.iter().map(|x| x.exp()).sum::<f64>().ln();
            let z = policy.row_logits(idx.row);
            let r = policy.reference_row(idx.row);
            let m = cfg.gamma * ((lp(z, idx.win) - lp(r, idx.win)) - (lp(z, idx.lose) - lp(r, idx.lose)));
            let oracle = (1.0 + (-m).exp()).ln();
            assert!((dpo_loss(&policy, p, &cfg).unwrap().row.loss - oracle).abs() < 1e-12);
        }
    }
}

#[test]
fn reference_policy_loss_is_ln2() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for gamma in [0.01, 0.1, 1.0] {
        for _ in 0..30 {
            let (p, pairs) = random_policy(&mut rng);
            let at_ref = ToyPolicy::new(
                p.prompts().to_vec(),
                (0..p.rows()).map(|r| p.items(r).to_vec()).collect(),
                p.reference_logits().to_vec(),
            )
            .unwrap();
            let cfg = DpoConfig {
                gamma,
                ..DpoConfig::default()
            };
            for pair in &pairs {
                let l = dpo_loss(&at_ref, pair, &cfg).unwrap().row.loss;
                assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
            }
        }
    }
}

/// Counts scores per bin with integer arithmetic on scores that are exact
/// multiples of 1/1000.
fn brute_force_counts(millis: &[u32], bin_millis: u32) -> Vec<u64> {
    let bins = 1000_u32.div_ceil(bin_millis) as usize;
    let mut counts = vec![0u64; bins];
    for &m in millis {
        counts[((m / bin_millis) as usize).min(bins - 1)] += 1;
    }
    counts
}

#[test]
fn histogram_matches_integer_binning() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for bin_millis in [10u32, 20, 50, 100] {
        for _ in 0..50 {
            let millis: Vec<u32> = (0..rng.gen_range(1..300)).map(|_| rng.gen_range(0..=1000)).collect();
            let scores: Vec<f64> = millis.iter().map(|&m| m as f64 / 1000.0).collect();
            let delta = bin_millis as f64 / 1000.0;
            let hist = ScoreHistogram::build(&scores, delta).unwrap();
            let oracle = brute_force_counts(&millis, bin_millis);
            assert_eq!(hist.counts(), oracle.as_slice(), "bin width {delta}");
            let n = scores.len() as f64;
            for (&m, &s) in millis.iter().zip(&scores) {
                let c = oracle[((m / bin_millis) as usize).min(oracle.len() - 1)] as f64;
                assert!((hist.density(s).unwrap() - c / (n * delta)).abs() < 1e-9 * c / (n * delta));
            }
        }
    }
}

#[test]
fn hand_computed_weights() {
    let hist = ScoreHistogram::build(&[0.10, 0.10, 0.50, 0.90], 0.01).unwrap();
    let d = |s: f64| hist.density(s).unwrap();
    assert!((d(0.10) - 50.0).abs() < 1e-9);
    assert!((d(0.50) - 25.0).abs() < 1e-9);
    assert!((d(0.90) - 25.0).abs() < 1e-9);
    let computed = ReweightConfig::default();
    assert!((pair_weight(&hist, 0.9, 0.1, &computed).unwrap() - 0.04).abs() < 1e-12);
    assert!((pair_weight(&hist, 0.9, 0.5, &computed).unwrap() - 0.08).abs() < 1e-12);
    let fixed = ReweightConfig {
        alpha: 1.0,
        beta: BetaMode::Fixed(0.58),
    };
    assert!((pair_weight(&hist, 0.9, 0.1, &fixed).unwrap() - 0.58 / 1250.0).abs() < 1e-15);
    let half = ReweightConfig {
        alpha: 0.5,
        beta: BetaMode::ComputedMaxDensity,
    };
    assert!((pair_weight(&hist, 0.9, 0.1, &half).unwrap() - 0.2).abs() < 1e-12);
}

#[test]
fn unit_weights_reduce_to_mean_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (policy, mut pairs) = random_policy(&mut rng);
        for p in &mut pairs {
            p.weight = 1.0;
        }
        let cfg = DpoConfig::default();
        assert_eq!(
            phydpo_loss(&policy, &pairs, &cfg).unwrap().to_bits(),
            mean_dpo_loss(&policy, &pairs, &cfg).unwrap().to_bits()
        );
    }
}

#[test]
fn expected_value_matches_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (policy, _) = random_policy(&mut rng);
    let values: Vec<f64> = (0..policy.logits().len()).map(|_| rng.gen()).collect();
    let mut oracle = 0.0;
    for r in 0..policy.rows() {
        let z = policy.row_logits(r);
        let norm: f64 = z.iter().map(|x| x.exp()).sum();
        for (i, x) in z.iter().enumerate() {
            oracle += x.exp() / norm * values[r * policy.width() + i];
        }
    }
    oracle /= policy.rows() as f64;
    assert!((policy.expected_value(&values, false) - oracle).abs() < 1e-12);
}
