//! Estimators against quantities computed independently here: entropies
//! for mutual information, explicit density ratios for optimal critics.

use std::f64::consts::LN_2;

use cortical_core::channel::{awgn_capacity, gaussian_mi, snr_to_rho};
use cortical_core::estimators::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn entropy(p: impl Iterator<Item = f64>) -> f64 {
    -p.filter(|&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// `H(X) + H(Y) - H(X, Y)`.
fn mi_by_entropies(table: &[Vec<f64>]) -> f64 {
    let px = table.iter().map(|r| r.iter().sum::<f64>());
    let py = (0..table[0].len()).map(|j| table.iter().map(|r| r[j]).sum::<f64>());
    entropy(px) + entropy(py) - entropy(table.iter().flatten().copied())
}

struct Reference {
    joint: Vec<f64>,
    product: Vec<f64>,
    ratio: Vec<f64>,
    mi: f64,
}

fn reference(table: &[Vec<f64>]) -> Reference {
    let cols = table[0].len();
    let px: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let py: Vec<f64> = (0..cols).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut joint = vec![];
    let mut product = vec![];
    let mut ratio = vec![];
    for (i, row) in table.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            let q = px[i] * py[j];
            joint.push(p);
            product.push(q);
            ratio.push(if q > 0.0 { p / q } else { 0.0 });
        }
    }
    Reference {
        joint,
        product,
        ratio,
        mi: mi_by_entropies(table),
    }
}

fn w<'a>(weights: &'a [f64], values: &'a [f64]) -> Expectation<'a> {
    Expectation::weighted(values, weights).unwrap()
}

fn bsc(p: f64) -> Vec<Vec<f64>> {
    vec![vec![0.5 * (1.0 - p), 0.5 * p], vec![0.5 * p, 0.5 * (1.0 - p)]]
}

fn tables() -> Vec<(&'static str, Vec<Vec<f64>>)> {
    vec![
        ("independent", vec![vec![0.25, 0.25], vec![0.25, 0.25]]),
        ("bsc", bsc(0.1)),
        ("correlated", vec![vec![0.5, 0.0], vec![0.0, 0.5]]),
        ("skewed 2x3", vec![vec![0.3, 0.1, 0.05], vec![0.05, 0.2, 0.3]]),
    ]
}

#[test]
fn oracle_matches_entropy_decomposition() {
    for (name, t) in tables() {
        let o = discrete_mi_oracle(&t).unwrap();
        let r = reference(&t);
        assert!((o.mi.nats - r.mi).abs() < 1e-12, "{name}");
        for (a, b) in o.ratio.iter().zip(&r.ratio) {
            assert!((a - b).abs() < 1e-12, "{name}");
        }
    }
    let hb = -(0.1f64 * 0.1f64.log2() + 0.9 * 0.9f64.log2());
    let o = discrete_mi_oracle(&bsc(0.1)).unwrap();
    assert!((o.mi.bits - (1.0 - hb)).abs() < 1e-12);
    assert!((o.mi.nats - 0.36806).abs() < 1e-5);
    let c = discrete_mi_oracle(&tables()[2].1).unwrap();
    assert!((c.mi.nats - LN_2).abs() < 1e-15);
}

#[test]
fn plug_in_optimal_critics_recover_mi() {
    for (name, t) in tables() {
        let r = reference(&t);
        let e_p = |v: &[f64]| -> f64 { v.iter().zip(&r.joint).filter(|(_, &w)| w > 0.0).map(|(x, w)| x * w).sum() };
        let truth = r.mi;

        // i-DIME: D* = q / (p + q), logit -log R.
        let d_star: Vec<f64> = r.joint.iter().zip(&r.product).map(|(p, q)| q / (p + q)).collect();
        let logits: Vec<f64> = r.ratio.iter().map(|x| -x.ln()).collect();
        assert!((idime_estimate(w(&r.joint, &logits)).unwrap() - truth).abs() < 1e-9, "{name} idime");
        let unsaturated: Vec<f64> = d_star.iter().zip(&r.joint).map(|(&d, &p)| if p > 0.0 { d } else { 0.5 }).collect();
        if unsaturated.iter().all(|&d| d > 0.0 && d < 1.0) {
            let v = idime_estimate_from_probabilities(w(&r.joint, &unsaturated)).unwrap();
            assert!((v - truth).abs() < 1e-9, "{name} idime probabilities");
        }

        for alpha in [0.1, 1.0, 10.0] {
            let d: Vec<f64> = r.ratio.iter().map(|x| alpha * x).collect();
            let hat = ddime_hat(w(&r.joint, &d), alpha).unwrap();
            let j = ddime_value(w(&r.joint, &d), Expectation::weighted(&d, &r.product).unwrap(), alpha).unwrap();
            let tilde = ddime_tilde(j, alpha).unwrap();
            assert!((hat - truth).abs() < 1e-9, "{name} hat {alpha}");
            assert!((tilde - truth).abs() < 1e-9, "{name} tilde {alpha}");
            assert!((j - (alpha * alpha.ln() - alpha + alpha * truth)).abs() < 1e-9);
        }

        let log_r: Vec<f64> = r.ratio.iter().map(|x| x.ln()).collect();
        assert!((mine_value(w(&r.joint, &log_r), w(&r.product, &log_r)).unwrap() - truth).abs() < 1e-9, "{name} mine");
        assert!(
            (smile_estimate(w(&r.joint, &log_r), w(&r.product, &log_r), 50.0).unwrap() - truth).abs() < 1e-9,
            "{name} smile"
        );
        let nwj_t: Vec<f64> = log_r.iter().map(|v| v + 1.0).collect();
        assert!((nwj_estimate(w(&r.joint, &nwj_t), w(&r.product, &nwj_t)).unwrap() - truth).abs() < 1e-9, "{name} nwj");
        assert!((e_p(&log_r) - truth).abs() < 1e-12);
    }
}

#[test]
fn oracle_tables_feed_the_estimators() {
    let o = discrete_mi_oracle(&bsc(0.1)).unwrap();
    let logits = o.idime_logits();
    let est = idime_estimate(o.joint_expectation(&logits).unwrap()).unwrap();
    assert!((est - o.mi.nats).abs() < 1e-9);
    let d = o.ddime_optimum(2.0);
    let hat = ddime_hat(o.joint_expectation(&d).unwrap(), 2.0).unwrap();
    assert!((hat - o.mi.nats).abs() < 1e-9);
    let v = idime_value(
        o.joint_expectation(&o.idime_optimum).unwrap(),
        o.marginal_expectation(&o.idime_optimum).unwrap(),
    )
    .unwrap();
    // max of the GAN value is 2 JSD - log 4.
    let (p, q) = (&o.joint, &o.product);
    let jsd: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * a * (a / m).ln() + 0.5 * b * (b / m).ln()
        })
        .sum();
    assert!((v - (2.0 * jsd - 4f64.ln())).abs() < 1e-12);
}

#[test]
fn ddime_tilde_never_exceeds_mi() {
    let t = bsc(0.1);
    let r = reference(&t);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let alpha = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let d: Vec<f64> = (0..4).map(|_| (rng.random::<f64>() * 6.0 - 4.0).exp() * alpha).collect();
        let j = ddime_value(
            Expectation::weighted(&d, &r.joint).unwrap(),
            Expectation::weighted(&d, &r.product).unwrap(),
            alpha,
        )
        .unwrap();
        assert!(ddime_tilde(j, alpha).unwrap() <= r.mi + 1e-9);
    }
}

#[test]
fn ddime_maximizer_is_alpha_times_ratio() {
    let t = tables()[3].1.clone();
    let r = reference(&t);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut hats = vec![];
    for alpha in [0.1, 1.0, 10.0] {
        let best: Vec<f64> = r.ratio.iter().map(|x| alpha * x).collect();
        let value = |d: &[f64]| {
            ddime_value(
                Expectation::weighted(d, &r.joint).unwrap(),
                Expectation::weighted(d, &r.product).unwrap(),
                alpha,
            )
            .unwrap()
        };
        let top = value(&best);
        for _ in 0..100 {
            let d: Vec<f64> = best.iter().map(|v| v * (1.0 + 0.2 * (rng.random::<f64>() - 0.5))).collect();
            assert!(value(&d) <= top + 1e-12);
        }
        hats.push(ddime_hat(Expectation::weighted(&best, &r.joint).unwrap(), alpha).unwrap());
    }
    assert!((hats[0] - hats[1]).abs() < 1e-12 && (hats[1] - hats[2]).abs() < 1e-12);
}

#[test]
fn nwj_is_tilde_at_unit_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let tj: Vec<f64> = (0..32).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let tm: Vec<f64> = (0..32).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let dj: Vec<f64> = tj.iter().map(|t| (t - 1.0).exp()).collect();
        let dm: Vec<f64> = tm.iter().map(|t| (t - 1.0).exp()).collect();
        let tilde = ddime_tilde(ddime_value(&dj, &dm, 1.0).unwrap(), 1.0).unwrap();
        let nwj = nwj_estimate(&tj, &tm).unwrap();
        assert!((tilde - nwj).abs() < 1e-12, "{tilde} vs {nwj}");
    }
}

#[test]
fn smile_limit_and_logit_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let tj: Vec<f64> = (0..64).map(|_| rng.random::<f64>() * 20.0 - 10.0).collect();
        let tm: Vec<f64> = (0..64).map(|_| rng.random::<f64>() * 20.0 - 10.0).collect();
        let smile = smile_estimate(&tj, &tm, 1e6).unwrap();
        assert!((smile - mine_value(&tj, &tm).unwrap()).abs() < 1e-9);

        let logits: Vec<f64> = (0..64).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let probs: Vec<f64> = logits.iter().map(|a| 1.0 / (1.0 + (-a).exp())).collect();
        let a = idime_estimate(&logits).unwrap();
        let b = idime_estimate_from_probabilities(&probs).unwrap();
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn gaussian_closed_forms_agree() {
    for s in [-10.0, -5.0, 0.0, 5.0, 10.0, 20.0] {
        let snr = 10f64.powf(s / 10.0);
        let direct = (1.0 + snr).log2();
        let via_rho = gaussian_mi(2, snr_to_rho(s)).unwrap().bits;
        assert!((direct - awgn_capacity(s)).abs() < 1e-12);
        assert!((via_rho - awgn_capacity(s)).abs() < 1e-12);
    }
    let d10 = gaussian_mi(10, snr_to_rho(-5.0)).unwrap().bits;
    let expected = -5.0 * (1.0 - 1.0 / (1.0 + 10f64.powf(0.5))).log2();
    assert!((d10 - expected).abs() < 1e-12);
}

/// Maximizes `u t + alpha log u` by a log-spaced grid scan refined with
/// golden-section search.
fn numeric_conjugate(t: f64, alpha: f64) -> (f64, f64) {
    let h = |u: f64| u * t + alpha * u.ln();
    let grid: Vec<f64> = (0..=6000).map(|k| 10f64.powf(-3.0 + 6.0 * k as f64 / 6000.0)).collect();
    let best = (0..grid.len()).max_by(|&a, &b| h(grid[a]).total_cmp(&h(grid[b]))).unwrap();
    let (mut lo, mut hi) = (grid[best.saturating_sub(1)], grid[(best + 1).min(grid.len() - 1)]);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if h(a) > h(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let u = 0.5 * (lo + hi);
    (h(u), u)
}

#[test]
fn fenchel_conjugate_matches_numeric_supremum() {
    for (alpha, t) in [(2.0, -0.5), (1.0, -1.0), (0.1, -0.3), (10.0, -4.0)] {
        let (sup, u) = numeric_conjugate(t, alpha);
        // f*(t) = sup_u {u t - f(u)} with f(u) = -alpha log u.
        assert!((fenchel_conjugate(t, alpha).unwrap() - sup).abs() < 1e-6, "{alpha} {t}");
        assert!((fenchel_maximizer(t, alpha).unwrap() - u).abs() < 1e-4);
    }
    assert!(fenchel_conjugate(1e-9, 1.0).is_err());
}
