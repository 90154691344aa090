//! Central finite differences, used as the independent oracle for the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::config::ExperimentConfig;
use crate::data::{ConceptWorld, Modality};
use crate::error::Result;
use crate::moe::MoeConfig;
use crate::routing::{layer_balancing_term, BalanceMode};
use crate::tensor::Tensor;
use crate::train::{derive_seed, forward, FrozenRouting, Model, Stream};

/// Denominator floor for [`relative_error`]. Keeps coordinates whose true
/// gradient is near zero from dominating through round-off alone.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Central-difference estimate `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every
/// coordinate of `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    let partial = finite_difference_at(&mut f, x, h, &coords);
    Tensor::new(x.shape().to_vec(), partial).expect("same length as x")
}

/// Central differences restricted to the listed flat coordinates.
pub fn finite_difference_at<F>(f: &mut F, x: &Tensor, h: f64, coords: &[usize]) -> Vec<f64>
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - h;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Largest [`relative_error`] over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Finite-difference step used by [`model_gradcheck`].
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradcheckOptions {
    pub n_vision: usize,
    pub n_language: usize,
    /// Coordinates sampled per parameter tensor.
    pub coords_per_block: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            n_vision: 24,
            n_language: 8,
            coords_per_block: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockCheck>,
    /// Largest `|∂ balance / ∂ logit|` over vision rows under language-only
    /// balancing. Must be exactly zero.
    pub dar_vision_grad_max_abs: f64,
    /// Language logit entries with a nonzero language-only balancing gradient.
    pub dar_language_nonzero: usize,
    pub dar_language_total: usize,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&BlockCheck> {
        self.blocks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Blocks at or above `tolerance`, or with a non-finite error.
    pub fn failing(&self, tolerance: f64) -> Vec<&BlockCheck> {
        self.blocks.iter().filter(|b| !(b.max_rel_error < tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failing(GRADCHECK_TOLERANCE).is_empty() && self.dar_vision_grad_max_abs == 0.0 && self.dar_language_nonzero > 0
    }
}

/// Balancing term of `probs = softmax(logits)` under `mode`, with its
/// gradient with respect to the logits.
fn balance_with_grad(
    logits: &Tensor,
    selection: &[Vec<usize>],
    modality: &[Modality],
    config: &MoeConfig,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let z = tape.param(logits.clone());
    let probs = tape.softmax_rows(z);
    let term = layer_balancing_term(&mut tape, probs, selection, modality, config)?
        .expect("balanced mode");
    let value = tape.value(term).item();
    tape.backward(term)?;
    Ok((value, tape.grad(z).expect("param").clone()))
}

/// Checks the tape against central differences on a fresh model and a small
/// mixed batch: every parameter tensor (sampled coordinates) of the full
/// objective, then the all-token and language-only balancing terms with
/// respect to router logits. Routing decisions are frozen at the
/// unperturbed point so the objective is smooth.
pub fn model_gradcheck(config: &ExperimentConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    config.validate()?;
    let world = ConceptWorld::new(config.world.clone(), derive_seed(opts.seed, Stream::World, 0))?;
    let model = Model::init(config, derive_seed(opts.seed, Stream::Init, 0));
    let batch = world.batch_from_seed(opts.n_vision, opts.n_language, derive_seed(opts.seed, Stream::Probe, 0));
    let labels = batch.class_labels(world.config());
    let moe = config.moe_config();

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(batch.features.clone());
    let pass = forward(&mut tape, &bound, x, &batch.modality, &labels, &moe, None)?;
    let frozen: Vec<FrozenRouting> = pass.frozen_routing();
    let logits0 = tape.value(pass.layers[0].routing.logits).clone();
    tape.backward(pass.aux.total)?;
    let analytic: Vec<Tensor> = bound
        .leaves()
        .iter()
        .map(|&v| tape.grad(v).expect("parameter leaf").clone())
        .collect();

    let loss_at = |m: &Model| -> f64 {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let x = tape.constant(batch.features.clone());
        match forward(&mut tape, &bound, x, &batch.modality, &labels, &moe, Some(&frozen)) {
            Ok(p) => tape.value(p.aux.total).item(),
            Err(_) => f64::NAN,
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, Stream::Probe, 1));
    let mut blocks = Vec::new();
    for (i, name) in model.param_names().into_iter().enumerate() {
        let base = model.params()[i].clone();
        let n = base.len();
        let mut coords = rand::seq::index::sample(&mut rng, n, opts.coords_per_block.min(n)).into_vec();
        coords.sort_unstable();
        let mut probe = model.clone();
        let numeric = finite_difference_at(
            &mut |t: &Tensor| {
                *probe.params_mut()[i] = t.clone();
                loss_at(&probe)
            },
            &base,
            GRADCHECK_STEP,
            &coords,
        );
        let exact: Vec<f64> = coords.iter().map(|&c| analytic[i].data()[c]).collect();
        blocks.push(BlockCheck {
            name,
            coords: coords.len(),
            max_rel_error: max_relative_error(&exact, &numeric),
        });
    }

    let selection = &frozen[0].selection;
    let mut dar_vision_grad_max_abs = 0.0f64;
    let (mut dar_language_nonzero, mut dar_language_total) = (0, 0);
    for (name, balance) in [("balance.all", BalanceMode::All), ("balance.language", BalanceMode::LanguageOnly)] {
        let cfg = MoeConfig { balance, ..moe.clone() };
        let (_, grad) = balance_with_grad(&logits0, selection, &batch.modality, &cfg)?;
        let numeric = finite_difference_gradient(
            |t| {
                balance_with_grad(t, selection, &batch.modality, &cfg)
                    .map_or(f64::NAN, |(v, _)| v)
            },
            &logits0,
            GRADCHECK_STEP,
        );
        blocks.push(BlockCheck {
            name: name.to_string(),
            coords: logits0.len(),
            max_rel_error: max_relative_error(grad.data(), numeric.data()),
        });
        if balance == BalanceMode::LanguageOnly {
            for (row, m) in grad.iter_rows().zip(&batch.modality) {
                if m.is_vision() {
                    dar_vision_grad_max_abs = row.iter().fold(dar_vision_grad_max_abs, |a, g| a.max(g.abs()));
                } else {
                    dar_language_total += row.len();
                    dar_language_nonzero += row.iter().filter(|g| **g != 0.0).count();
                }
            }
        }
    }

    Ok(GradcheckReport {
        blocks,
        dar_vision_grad_max_abs,
        dar_language_nonzero,
        dar_language_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_gives_ones() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let g = finite_difference_gradient(|t| t.data().iter().sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_difference_gradient(|t| t.item() * t.item(), &x, 1e-5);
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn probe_is_restored() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let mut seen = Vec::new();
        let _ = finite_difference_gradient(
            |t| {
                seen.push(t.data().to_vec());
                0.0
            },
            &x,
            0.5,
        );
        assert_eq!(seen, vec![vec![1.5, 2.0], vec![0.5, 2.0], vec![1.0, 2.5], vec![1.0, 1.5]]);
    }

    #[test]
    fn small_model_passes() {
        use crate::config::Arm;
        use crate::data::WorldConfig;
        let base = ExperimentConfig {
            layers: 1,
            hidden: Some(6),
            world: WorldConfig {
                d: 5,
                vision_concepts: 4,
                language_concepts: 3,
                noise_sigma: 0.05,
                ..WorldConfig::default()
            },
            ..ExperimentConfig::default()
        };
        for arm in [Arm::Baseline, Arm::Ltdr] {
            let report = model_gradcheck(&base.with_arm(arm), &GradcheckOptions::default()).unwrap();
            let worst = report.worst().unwrap();
            assert!(report.passed(), "{arm}: {worst:?}");
            assert_eq!(report.dar_vision_grad_max_abs, 0.0);
        }
    }
}
