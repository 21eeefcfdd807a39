use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::clipette::{ce_loss, init_model, Activation, Sizes};

/// `f(p) = ½ pᵀ A p` over a 1×2 prompt.
struct Quadratic {
    a: [[f64; 2]; 2],
}

impl Quadratic {
    fn apply(&self, v: &[f64]) -> [f64; 2] {
        [
            self.a[0][0] * v[0] + self.a[0][1] * v[1],
            self.a[1][0] * v[0] + self.a[1][1] * v[1],
        ]
    }

    /// Exact `max_{|e| <= rho} f(p + e) - f(p)` for positive definite `A`,
    /// from the secular equation `|(λI - A)⁻¹ g| = rho`.
    fn exact_sharpness(&self, p: &[f64], rho: f64) -> f64 {
        let g = self.apply(p);
        let [[a, b], [_, d]] = self.a;
        let lmax = 0.5 * (a + d) + (0.25 * (a - d) * (a - d) + b * b).sqrt();
        let e_of = |lam: f64| {
            let (m00, m01, m11) = (lam - a, -b, lam - d);
            let det = m00 * m11 - m01 * m01;
            [(m11 * g[0] - m01 * g[1]) / det, (-m01 * g[0] + m00 * g[1]) / det]
        };
        let (mut lo, mut hi) = (lmax + 1e-14, lmax + 1e6);
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            let e = e_of(mid);
            if (e[0] * e[0] + e[1] * e[1]).sqrt() > rho {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let e = e_of(hi);
        let ae = self.apply(&e);
        g[0] * e[0] + g[1] * e[1] + 0.5 * (e[0] * ae[0] + e[1] * ae[1])
    }
}

impl PromptObjective for Quadratic {
    fn loss(&self, p: &PromptParams) -> Result<f64> {
        let v = p.flat();
        let av = self.apply(v);
        Ok(0.5 * (v[0] * av[0] + v[1] * av[1]))
    }

    fn loss_and_grad(&self, p: &PromptParams) -> Result<(f64, Tensor)> {
        let g = self.apply(p.flat());
        Ok((self.loss(p)?, Tensor::matrix(1, 2, g.to_vec()).unwrap()))
    }
}

fn prompt2(v: [f64; 2]) -> PromptParams {
    PromptParams::new(Tensor::matrix(1, 2, v.to_vec()).unwrap()).unwrap()
}

const A: [[f64; 2]; 2] = [[3.0, 0.5], [0.5, 1.0]];

#[test]
fn epsilon_star_normalizes() {
    let g = Tensor::vector(vec![3.0, 4.0]).unwrap();
    let e = epsilon_star(&g, 1.0);
    assert!((e.data()[0] - 0.6).abs() < 1e-15 && (e.data()[1] - 0.8).abs() < 1e-15);
    assert!(epsilon_star(&g, 0.0).data().iter().all(|&v| v == 0.0));
    assert!(epsilon_star(&Tensor::zeros(&[2]), 0.5).data().iter().all(|&v| v == 0.0));
    let big = epsilon_star(&g.scale(100.0), 1.0);
    for (a, b) in big.data().iter().zip(e.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn epsilon_star_has_radius_rho(
        g in prop::collection::vec(-1e3f64..1e3, 1..40),
        rho in 0.0f64..2.0,
    ) {
        let t = Tensor::vector(g).unwrap();
        prop_assume!(t.norm() >= 1e-12);
        let e = epsilon_star(&t, rho);
        prop_assert!((e.norm() - rho).abs() <= 1e-12);
    }
}

#[test]
fn sam_step_on_quadratic_matches_closed_form() {
    let q = Quadratic { a: A };
    let p = prompt2([0.7, -1.3]);
    let (rho, lr) = (0.2, 0.05);
    let next = sam_step(&q, &p, rho, lr).unwrap();
    let ap = q.apply(p.flat());
    let n = (ap[0] * ap[0] + ap[1] * ap[1]).sqrt();
    let shifted = [p.flat()[0] + rho * ap[0] / n, p.flat()[1] + rho * ap[1] / n];
    let g = q.apply(&shifted);
    for i in 0..2 {
        assert!((next.flat()[i] - (p.flat()[i] - lr * g[i])).abs() < 1e-12);
    }
}

#[test]
fn sam_step_at_stationary_point_is_identity() {
    let q = Quadratic { a: A };
    let p = prompt2([0.0, 0.0]);
    assert_eq!(sam_step(&q, &p, 0.3, 0.1).unwrap(), p);
}

fn toy(seed: u64) -> (crate::clipette::Pretrained, LabeledBatch) {
    let sizes = Sizes { d_in: 4, d_tok: 3, d_emb: 3, hidden: 5, k_classes: 3, prompt_len: 2 };
    let pre = init_model(sizes, 5.0, Activation::Tanh, seed).unwrap();
    let mut r = rng(seed + 1000);
    let n = 9;
    let data = (0..n * 4).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let labels = (0..n).map(|i| i % 3).collect();
    (pre, LabeledBatch::new(Tensor::matrix(n, 4, data).unwrap(), labels, 3).unwrap())
}

#[test]
fn zero_radius_sapt_equals_plain_step_bitwise() {
    for seed in 0..10 {
        let (pre, batch) = toy(seed);
        let cfg = SaptConfig { rho: 0.0, lr: 0.5, ..SaptConfig::default() };
        let a = sapt_step(&pre.model, &pre.prompt, &batch, &cfg).unwrap();
        let b = plain_step(&pre.model, &pre.prompt, &batch, &cfg).unwrap();
        assert!(a.tokens().bit_eq(b.tokens()));
    }
}

#[test]
fn oracle_zero_radius_is_zero() {
    let (pre, batch) = toy(1);
    assert_eq!(sharpness_oracle(&pre.model, &pre.prompt, &batch, 0.0, 8, 4, 1).unwrap(), 0.0);
}

#[test]
fn oracle_matches_analytic_quadratic_sharpness() {
    let q = Quadratic { a: A };
    let p = prompt2([0.4, 0.9]);
    for rho in [0.05, 0.3, 1.0] {
        let exact = q.exact_sharpness(p.flat(), rho);
        let est = sharpness_oracle_with(&q, &p, rho, 720, 20, 3).unwrap();
        assert!(est <= exact + 1e-12, "oracle exceeded the true maximum");
        assert!((exact - est) / exact <= 0.02, "rho {rho}: {est} vs {exact}");
    }
}

#[test]
fn oracle_is_monotone_for_nested_radii() {
    let (pre, batch) = toy(2);
    let mut prev = 0.0;
    for (i, rho) in [0.05, 0.1, 0.2, 0.4].into_iter().enumerate() {
        // Grid 2^i keeps every earlier radius in the later grid.
        let s = sharpness_oracle(&pre.model, &pre.prompt, &batch, rho, 6, 1 << i, 9).unwrap();
        assert!(s >= prev, "{s} < {prev}");
        prev = s;
    }
}

#[test]
fn oracle_is_at_least_the_increase_at_epsilon_star() {
    let (pre, batch) = toy(3);
    let rho = 0.2;
    let g = crate::clipette::grad_prompt_ce(&pre.model, &pre.prompt, &batch).unwrap();
    let e = epsilon_star(&g, rho);
    let inc = ce_loss(&pre.model, &pre.prompt.perturbed(1.0, e.data()), &batch).unwrap()
        - ce_loss(&pre.model, &pre.prompt, &batch).unwrap();
    let s = sharpness_oracle(&pre.model, &pre.prompt, &batch, rho, 4, 3, 5).unwrap();
    assert!(s >= inc - 1e-12);
}

fn train_set(seed: u64, per_class: usize) -> LabeledBatch {
    let mut r = rng(seed);
    let n = per_class * 3;
    let data = (0..n * 4).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let labels = (0..n).map(|i| i % 3).collect();
    LabeledBatch::new(Tensor::matrix(n, 4, data).unwrap(), labels, 3).unwrap()
}

#[test]
fn tune_with_zero_epochs_returns_initial_prompt() {
    let (pre, _) = toy(4);
    let cfg = SaptConfig { epochs: 0, shots: 4, ..SaptConfig::default() };
    let out = tune(&pre.model, &pre.prompt, &train_set(1, 5), &cfg, true).unwrap();
    assert_eq!(out.prompt, pre.prompt);
    assert!(out.log.is_empty());
}

#[test]
fn plain_tuning_is_reproducible_and_ignores_rho_for_steps() {
    let (pre, _) = toy(5);
    let train = train_set(2, 8);
    let cfg = SaptConfig { epochs: 3, shots: 6, batch_size: 4, lr: 0.5, seed: 11, ..SaptConfig::default() };
    let a = tune(&pre.model, &pre.prompt, &train, &cfg, false).unwrap();
    let b = tune(&pre.model, &pre.prompt, &train, &cfg, false).unwrap();
    let c = tune(&pre.model, &pre.prompt, &train, &SaptConfig { rho: 0.7, ..cfg }, false).unwrap();
    assert!(a.prompt.tokens().bit_eq(b.prompt.tokens()));
    assert!(a.prompt.tokens().bit_eq(c.prompt.tokens()));
    assert_eq!(a.log.len(), 3);
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.ce_loss.to_bits(), y.ce_loss.to_bits());
        assert!(x.ce_loss.is_finite());
    }
}

#[test]
fn tune_rejects_too_few_shots() {
    let (pre, _) = toy(6);
    let cfg = SaptConfig { shots: 16, ..SaptConfig::default() };
    assert!(matches!(
        tune(&pre.model, &pre.prompt, &train_set(1, 5), &cfg, true),
        Err(Error::InvalidDataset(_))
    ));
}

#[test]
fn shot_sampling_is_without_replacement() {
    let train = train_set(3, 10);
    let shots = sample_shots(&train, 3, 10, 4).unwrap();
    let mut rows: Vec<Vec<u64>> = (0..shots.len())
        .map(|i| shots.input(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    rows.sort();
    rows.dedup();
    assert_eq!(rows.len(), 30);
}

#[test]
fn training_log_is_json_lines() {
    let (pre, _) = toy(7);
    let cfg = SaptConfig { epochs: 2, shots: 4, batch_size: 4, ..SaptConfig::default() };
    let out = tune(&pre.model, &pre.prompt, &train_set(1, 5), &cfg, true).unwrap();
    let text = out.log_jsonl().unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
    for key in ["epoch", "ce_loss", "sharpness_estimate", "wall_ms"] {
        assert!(v.get(key).is_some());
    }
    assert_eq!(v["epoch"], 2);
}
