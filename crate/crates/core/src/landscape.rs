//! Two-dimensional loss surfaces around a prompt.
//!
//! Directions are Gaussian, with the second orthogonalized against the first,
//! then rescaled token by token so each token block has the norm of the
//! matching prompt token.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clipette::{encode_image, probs_from_embeddings, ClassEncoder, FrozenModel, LabeledBatch, PromptParams};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::ndcore::{argmax, entropy_unchecked, Tensor, NORM_EPS};
use crate::seed::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Ce,
    Entropy,
}

/// What the surface is evaluated on.
#[derive(Debug, Clone, Copy)]
pub enum LandscapeData<'a> {
    Batch(&'a LabeledBatch),
    /// A single unlabeled input. Cross-entropy uses the unperturbed argmax as label.
    View(&'a [f64]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `losses[i][j]` is the loss at `(alphas[i], betas[j])`.
    pub losses: Vec<Vec<f64>>,
    pub loss_kind: LossKind,
    pub base_loss: f64,
}

pub const DEFAULT_RESOLUTION: usize = 41;
pub const DEFAULT_SPAN: f64 = 1.0;

fn gaussian(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

/// Unscaled directions: `d1` Gaussian, `d2` Gaussian minus its projection on `d1`.
pub(crate) fn raw_directions(dim: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let d1 = gaussian(&mut r, dim);
    let mut d2 = gaussian(&mut r, dim);
    let proj = crate::ndcore::dot(&d1, &d2) / crate::ndcore::dot(&d1, &d1);
    d2.iter_mut().zip(&d1).for_each(|(b, a)| *b -= proj * a);
    (d1, d2)
}

fn filter_normalize(p: &PromptParams, mut d: Vec<f64>) -> Result<Tensor> {
    let w = p.width();
    for (j, block) in d.chunks_mut(w).enumerate() {
        let target = crate::ndcore::norm(p.tokens().row(j));
        let n = crate::ndcore::norm(block);
        if n < NORM_EPS {
            return Err(Error::DegenerateVector(NORM_EPS));
        }
        block.iter_mut().for_each(|v| *v *= target / n);
    }
    Tensor::matrix(p.len(), w, d)
}

/// Two filter-normalized directions in prompt space.
pub fn sample_directions(p: &PromptParams, seed: u64) -> Result<(Tensor, Tensor)> {
    if !p.tokens().all_finite() {
        return Err(Error::InvalidValue("non-finite prompt".into()));
    }
    for j in 0..p.len() {
        if crate::ndcore::norm(p.tokens().row(j)) < NORM_EPS {
            return Err(Error::DegeneratePrompt(j));
        }
    }
    let (d1, d2) = raw_directions(p.dim(), seed);
    Ok((filter_normalize(p, d1)?, filter_normalize(p, d2)?))
}

/// `resolution` points from `-span` to `span`, with an exact zero in the middle.
pub fn coordinates(resolution: usize, span: f64) -> Vec<f64> {
    let c = (resolution / 2) as f64;
    (0..resolution).map(|i| span * (i as f64 - c) / c).collect()
}

/// Evaluates `loss` on the grid `p + alpha d1 + beta d2`.
pub fn loss_grid_with<F>(
    p: &PromptParams,
    d1: &Tensor,
    d2: &Tensor,
    resolution: usize,
    span: f64,
    loss_kind: LossKind,
    loss: F,
) -> Result<LandscapeGrid>
where
    F: Fn(&PromptParams) -> Result<f64> + Sync,
{
    if resolution < 3 || resolution % 2 == 0 {
        return Err(Error::InvalidConfig(format!("resolution must be odd and at least 3, got {resolution}")));
    }
    if !(span >= 0.0 && span.is_finite()) {
        return Err(Error::InvalidConfig("span must be finite and non-negative".into()));
    }
    if d1.shape() != p.tokens().shape() || d2.shape() != p.tokens().shape() {
        return Err(Error::Shape("directions must match the prompt shape".into()));
    }
    let axis = coordinates(resolution, span);
    let base_loss = loss(p)?;
    let center = resolution / 2;
    let losses = (0..resolution)
        .into_par_iter()
        .map(|i| {
            (0..resolution)
                .map(|j| {
                    if i == center && j == center {
                        return Ok(base_loss);
                    }
                    let (a, b) = (axis[i], axis[j]);
                    let moved = p
                        .flat()
                        .iter()
                        .zip(d1.data())
                        .zip(d2.data())
                        .map(|((x, u), v)| x + a * u + b * v)
                        .collect();
                    let value = loss(&p.with_flat(moved)?)?;
                    if !value.is_finite() {
                        return Err(Error::InvalidValue(format!("non-finite loss at ({a}, {b})")));
                    }
                    Ok(value)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LandscapeGrid {
        alphas: axis.clone(),
        betas: axis,
        losses,
        loss_kind,
        base_loss,
    })
}

/// Loss surface of the model around `p`.
///
/// Batch cross-entropy is summed; batch entropy is the mean over rows.
pub fn loss_grid(
    model: &FrozenModel,
    p: &PromptParams,
    data: LandscapeData<'_>,
    d1: &Tensor,
    d2: &Tensor,
    resolution: usize,
    span: f64,
    loss_kind: LossKind,
) -> Result<LandscapeGrid> {
    model.validate_prompt(p)?;
    let (images, labels): (Vec<Vec<f64>>, Vec<usize>) = match data {
        LandscapeData::Batch(batch) => {
            if batch.is_empty() {
                return Err(Error::InvalidDataset("empty batch".into()));
            }
            let images = (0..batch.len()).map(|i| encode_image(model, batch.input(i))).collect::<Result<_>>()?;
            (images, batch.labels.clone())
        }
        LandscapeData::View(x) => {
            let image = encode_image(model, x)?;
            let classes = ClassEncoder::new(model, p).encode_all()?;
            let label = argmax(&probs_from_embeddings(&image, &classes, model.tau));
            (vec![image], vec![label])
        }
    };
    let n = images.len() as f64;
    loss_grid_with(p, d1, d2, resolution, span, loss_kind, |q| {
        let classes = ClassEncoder::new(model, q).encode_all()?;
        let mut total = 0.0;
        for (image, &y) in images.iter().zip(&labels) {
            let probs = probs_from_embeddings(image, &classes, model.tau);
            total += match loss_kind {
                LossKind::Ce => -probs[y].ln(),
                LossKind::Entropy => entropy_unchecked(&probs),
            };
        }
        Ok(match loss_kind {
            LossKind::Ce => total,
            LossKind::Entropy => total / n,
        })
    })
}

impl LandscapeGrid {
    /// `alpha,beta,loss` rows ordered by `(i, j)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,beta,loss\n");
        for (i, a) in self.alphas.iter().enumerate() {
            for (j, b) in self.betas.iter().enumerate() {
                out.push_str(&format!("{a:.16e},{b:.16e},{:.16e}\n", self.losses[i][j]));
            }
        }
        out
    }
}

pub fn export_grid(grid: &LandscapeGrid, path: &Path) -> Result<()> {
    write_atomic(path, grid.to_csv().as_bytes())
}

/// Conventional file name for an exported grid.
pub fn grid_file_name(tag: &str, seed: u64) -> String {
    format!("landscape_{tag}_{seed}.csv")
}

/// Parses an exported grid back into `(alpha, beta, loss)` rows.
pub fn parse_grid_csv(text: &str) -> Result<Vec<[f64; 3]>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("alpha,beta,loss") {
        return Err(Error::Format("missing alpha,beta,loss header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| Error::Parse { line: k + 2, msg: format!("{s:?}: {e}") })
            };
            if fields.len() != 3 {
                return Err(Error::Parse { line: k + 2, msg: format!("expected 3 fields, found {}", fields.len()) });
            }
            Ok([parse(fields[0])?, parse(fields[1])?, parse(fields[2])?])
        })
        .collect()
}

pub fn read_grid_csv(path: &Path) -> Result<Vec<[f64; 3]>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grid_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clipette::{ce_loss, class_probs, init_model, Activation, Sizes};
    use crate::ndcore::entropy;

    fn setup(seed: u64) -> (crate::clipette::Pretrained, LabeledBatch) {
        let sizes = Sizes { d_in: 5, d_tok: 3, d_emb: 4, hidden: 6, k_classes: 4, prompt_len: 2 };
        let pre = init_model(sizes, 10.0, Activation::Tanh, seed).unwrap();
        let mut r = rng(seed ^ 77);
        let data = gaussian(&mut r, 8 * 5);
        let batch = LabeledBatch::new(Tensor::matrix(8, 5, data).unwrap(), (0..8).map(|i| i % 4).collect(), 4).unwrap();
        (pre, batch)
    }

    #[test]
    fn directions_match_token_norms() {
        let (pre, _) = setup(1);
        let (d1, d2) = sample_directions(&pre.prompt, 5).unwrap();
        for j in 0..pre.prompt.len() {
            let target = crate::ndcore::norm(pre.prompt.tokens().row(j));
            assert!((crate::ndcore::norm(d1.row(j)) - target).abs() < 1e-12);
            assert!((crate::ndcore::norm(d2.row(j)) - target).abs() < 1e-12);
        }
        assert_eq!((d1.clone(), d2.clone()), sample_directions(&pre.prompt, 5).unwrap());
    }

    #[test]
    fn raw_directions_are_orthogonal() {
        for seed in 0..20 {
            let (a, b) = raw_directions(12, seed);
            assert!(crate::ndcore::dot(&a, &b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_token_is_degenerate() {
        let p = PromptParams::new(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        assert!(matches!(sample_directions(&p, 0), Err(Error::DegeneratePrompt(1))));
    }

    #[test]
    fn coordinates_are_symmetric_with_exact_center() {
        let c = coordinates(7, 0.9);
        assert_eq!(c[3], 0.0);
        assert_eq!(c[0], -0.9);
        assert_eq!(c[6], 0.9);
        for i in 0..7 {
            assert_eq!(c[i], -c[6 - i]);
        }
    }

    #[test]
    fn center_equals_direct_losses() {
        let (pre, batch) = setup(2);
        let (d1, d2) = sample_directions(&pre.prompt, 1).unwrap();
        let g = loss_grid(&pre.model, &pre.prompt, LandscapeData::Batch(&batch), &d1, &d2, 5, 0.5, LossKind::Ce).unwrap();
        let direct = ce_loss(&pre.model, &pre.prompt, &batch).unwrap();
        assert!((g.losses[2][2] - direct).abs() <= 1e-12);
        assert_eq!(g.losses[2][2], g.base_loss);

        let x = batch.input(3);
        let g = loss_grid(&pre.model, &pre.prompt, LandscapeData::View(x), &d1, &d2, 5, 0.5, LossKind::Entropy).unwrap();
        let direct = entropy(&class_probs(&pre.model, &pre.prompt, x).unwrap()).unwrap();
        assert!((g.base_loss - direct).abs() <= 1e-12);
    }

    #[test]
    fn zero_span_is_constant() {
        let (pre, batch) = setup(3);
        let (d1, d2) = sample_directions(&pre.prompt, 2).unwrap();
        let g = loss_grid(&pre.model, &pre.prompt, LandscapeData::Batch(&batch), &d1, &d2, 3, 0.0, LossKind::Ce).unwrap();
        assert!(g.losses.iter().flatten().all(|&v| v == g.base_loss));
    }

    #[test]
    fn single_view_entropy_is_bounded_and_prompt_untouched() {
        let (pre, batch) = setup(4);
        let before = pre.prompt.clone();
        let (d1, d2) = sample_directions(&pre.prompt, 3).unwrap();
        let g = loss_grid(&pre.model, &pre.prompt, LandscapeData::View(batch.input(0)), &d1, &d2, 9, 2.0, LossKind::Entropy)
            .unwrap();
        let log_k = 4f64.ln();
        assert!(g.losses.iter().flatten().all(|&v| (0.0..=log_k + 1e-15).contains(&v)));
        assert!(pre.prompt.tokens().bit_eq(before.tokens()));
    }

    #[test]
    fn quadratic_surface_matches_closed_form() {
        let p = PromptParams::new(Tensor::matrix(2, 2, vec![0.3, -0.4, 1.0, 0.5]).unwrap()).unwrap();
        let (d1, d2) = sample_directions(&p, 7).unwrap();
        let diag = [1.0, 2.0, 0.5, 3.0];
        let f = |q: &PromptParams| -> f64 { q.flat().iter().zip(diag).map(|(x, h)| 0.5 * h * x * x).sum() };
        let g = loss_grid_with(&p, &d1, &d2, 11, 1.5, LossKind::Ce, |q| Ok(f(q))).unwrap();
        // f(p + a u + b v) = f(p) + a <Hp,u> + b <Hp,v> + a^2/2 uHu + ab uHv + b^2/2 vHv
        let quad = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).zip(diag).map(|((a, b), h)| a * h * b).sum() };
        let (u, v, pv) = (d1.data(), d2.data(), p.flat());
        let (hu, hv, uu, uv, vv) = (quad(pv, u), quad(pv, v), quad(u, u), quad(u, v), quad(v, v));
        for (i, a) in g.alphas.iter().enumerate() {
            for (j, b) in g.betas.iter().enumerate() {
                let expect = f(&p) + a * hu + b * hv + 0.5 * a * a * uu + a * b * uv + 0.5 * b * b * vv;
                assert!((g.losses[i][j] - expect).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn finer_grid_contains_coarse_grid() {
        let (pre, batch) = setup(5);
        let (d1, d2) = sample_directions(&pre.prompt, 4).unwrap();
        let data = LandscapeData::Batch(&batch);
        let coarse = loss_grid(&pre.model, &pre.prompt, data, &d1, &d2, 5, 1.0, LossKind::Ce).unwrap();
        let fine = loss_grid(&pre.model, &pre.prompt, data, &d1, &d2, 9, 1.0, LossKind::Ce).unwrap();
        for i in 0..5 {
            assert_eq!(coarse.alphas[i], fine.alphas[2 * i]);
            for j in 0..5 {
                assert_eq!(coarse.losses[i][j].to_bits(), fine.losses[2 * i][2 * j].to_bits());
            }
        }
    }

    #[test]
    fn even_resolution_is_rejected() {
        let (pre, batch) = setup(6);
        let (d1, d2) = sample_directions(&pre.prompt, 4).unwrap();
        let r = loss_grid(&pre.model, &pre.prompt, LandscapeData::Batch(&batch), &d1, &d2, 4, 1.0, LossKind::Ce);
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn csv_round_trips_exactly() {
        let (pre, batch) = setup(7);
        let (d1, d2) = sample_directions(&pre.prompt, 4).unwrap();
        let g = loss_grid(&pre.model, &pre.prompt, LandscapeData::Batch(&batch), &d1, &d2, 3, 0.7, LossKind::Ce).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(grid_file_name("toy", 7));
        export_grid(&g, &path).unwrap();
        let rows = read_grid_csv(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 10);
        assert_eq!(rows.len(), 9);
        assert_eq!(rows[4], [0.0, 0.0, g.base_loss]);
        for (k, row) in rows.iter().enumerate() {
            let (i, j) = (k / 3, k % 3);
            assert_eq!(row[0].to_bits(), g.alphas[i].to_bits());
            assert_eq!(row[1].to_bits(), g.betas[j].to_bits());
            assert_eq!(row[2].to_bits(), g.losses[i][j].to_bits());
        }
    }

    #[test]
    fn csv_parse_errors_name_the_line() {
        assert!(matches!(parse_grid_csv("a,b\n"), Err(Error::Format(_))));
        let bad = "alpha,beta,loss\n0,0,1\n0,x,1\n";
        assert!(matches!(parse_grid_csv(bad), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let g = LandscapeGrid { alphas: vec![0.0], betas: vec![0.0], losses: vec![vec![1.0]], loss_kind: LossKind::Ce, base_loss: 1.0 };
        let file = tempfile::NamedTempFile::new().unwrap();
        let under_file = file.path().join("x.csv");
        assert!(matches!(export_grid(&g, &under_file), Err(Error::Io { .. })));
    }
}
