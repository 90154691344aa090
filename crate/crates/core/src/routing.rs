//! Distribution-aware balancing and vision tail-token classification.
//!
//! The balancing term is `K · Σᵢ Fᵢ·Gᵢ` where `Fᵢ` is the share of dispatch
//! slots landing on expert `i` (a constant) and `Gᵢ` the mean router
//! probability of expert `i` (differentiable). Restricting both to language
//! tokens leaves vision routing free to follow its long-tailed distribution.
//!
//! Vision tokens whose routing-probability variance (RPV) is strictly above
//! the batch mean over vision tokens are tail tokens.

use serde::{Deserialize, Serialize};

use crate::autograd::{population_variance, Tape, Var};
use crate::data::Modality;
use crate::error::Result;
use crate::moe::MoeConfig;
use crate::tensor::{Tensor, TensorError};

/// Which tokens the balancing term is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BalanceMode {
    /// Every token (the standard switch-style loss).
    All,
    /// Language tokens only.
    LanguageOnly,
    /// Vision tokens only.
    VisionOnly,
    Off,
}

/// Which vision tokens receive the enlarged expert budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailSelector {
    /// Tail tokens: RPV strictly above the vision mean.
    Vtt,
    /// Head tokens: the complement of VTT among vision tokens.
    Vht,
    None,
}

/// Dispatch share `F`, mean probability `G`, and the resulting loss value.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancingTerms {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub loss: f64,
}

/// Fraction of selected slots per expert over the given rows.
pub fn dispatch_fractions(num_experts: usize, selections: &[Vec<usize>], rows: &[usize]) -> Vec<f64> {
    let mut counts = vec![0usize; num_experts];
    let mut total = 0usize;
    for &r in rows {
        for &e in &selections[r] {
            counts[e] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return vec![0.0; num_experts];
    }
    counts.into_iter().map(|c| c as f64 / total as f64).collect()
}

/// Balancing term over the rows in `rows`, scaled by `k_factor`.
///
/// An empty row set yields a constant zero with no gradient path.
pub fn subset_balancing_loss(
    tape: &mut Tape,
    probs: Var,
    selections: &[Vec<usize>],
    rows: &[usize],
    k_factor: f64,
) -> Result<(Var, BalancingTerms)> {
    let num_experts = tape.value(probs).cols();
    if selections.len() != tape.value(probs).rows() {
        return Err(TensorError::Shape {
            op: "balancing_loss",
            lhs: tape.value(probs).shape().to_vec(),
            rhs: vec![selections.len()],
        }
        .into());
    }
    if rows.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        let terms = BalancingTerms {
            f: vec![0.0; num_experts],
            g: vec![0.0; num_experts],
            loss: 0.0,
        };
        return Ok((zero, terms));
    }
    let f = dispatch_fractions(num_experts, selections, rows);
    let sub = if rows.len() == selections.len() && rows.iter().enumerate().all(|(i, &r)| i == r) {
        probs
    } else {
        tape.gather_rows(probs, rows)?
    };
    let g = tape.column_mean(sub);
    let weights: Vec<f64> = f.iter().map(|fi| k_factor * fi).collect();
    let loss = tape.dot_const(g, &weights)?;
    let terms = BalancingTerms {
        f,
        g: tape.value(g).data().to_vec(),
        loss: tape.value(loss).item(),
    };
    Ok((loss, terms))
}

/// `K · Σ Fᵢ·Gᵢ` over every token.
pub fn load_balancing_loss(
    tape: &mut Tape,
    probs: Var,
    selections: &[Vec<usize>],
) -> Result<(Var, BalancingTerms)> {
    let t = tape.value(probs);
    let (m, k) = (t.rows(), t.cols());
    let rows: Vec<usize> = (0..m).collect();
    subset_balancing_loss(tape, probs, selections, &rows, k as f64)
}

/// Balancing restricted to the tokens of one modality. `scale_by_k = false`
/// drops the leading `K`.
pub fn modality_balancing_loss(
    tape: &mut Tape,
    probs: Var,
    selections: &[Vec<usize>],
    modality: &[Modality],
    keep: Modality,
    scale_by_k: bool,
) -> Result<(Var, BalancingTerms)> {
    let k = tape.value(probs).cols();
    let rows: Vec<usize> = modality
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == keep)
        .map(|(i, _)| i)
        .collect();
    let k_factor = if scale_by_k { k as f64 } else { 1.0 };
    subset_balancing_loss(tape, probs, selections, &rows, k_factor)
}

/// RPV of every row.
pub fn routing_probability_variance(probs: &Tensor) -> Vec<f64> {
    probs.iter_rows().take(probs.rows()).map(population_variance).collect()
}

/// Mean RPV over vision tokens, `None` when the batch has none. The
/// rounded mean is clamped into `[min, max]` so equal values never straddle
/// it.
pub fn vision_rpv_threshold(rpv: &[f64], modality: &[Modality]) -> Option<f64> {
    let (sum, n, lo, hi) = rpv
        .iter()
        .zip(modality)
        .filter(|(_, m)| m.is_vision())
        .fold((0.0, 0usize, f64::INFINITY, f64::NEG_INFINITY), |(s, n, lo, hi), (&r, _)| {
            (s + r, n + 1, lo.min(r), hi.max(r))
        });
    (n > 0).then(|| (sum / n as f64).max(lo).min(hi))
}

/// Tail flags from precomputed RPVs.
pub fn classify_by_rpv(rpv: &[f64], modality: &[Modality], selector: TailSelector) -> Vec<bool> {
    let Some(threshold) = vision_rpv_threshold(rpv, modality) else {
        return vec![false; rpv.len()];
    };
    rpv.iter()
        .zip(modality)
        .map(|(&r, m)| {
            m.is_vision()
                && match selector {
                    TailSelector::Vtt => r > threshold,
                    TailSelector::Vht => r <= threshold,
                    TailSelector::None => false,
                }
        })
        .collect()
}

/// Flags the vision tokens that get `a` experts, thresholding RPV at the mean
/// over this batch's vision tokens. Language tokens are never flagged.
pub fn classify_vision_tokens(
    probs: &Tensor,
    modality: &[Modality],
    selector: TailSelector,
) -> Vec<bool> {
    if selector == TailSelector::None {
        return vec![false; probs.rows()];
    }
    classify_by_rpv(&routing_probability_variance(probs), modality, selector)
}

/// The balancing term one layer contributes under `config.balance`, or
/// `None` when the arm has no balancing.
pub fn layer_balancing_term(
    tape: &mut Tape,
    probs: Var,
    selections: &[Vec<usize>],
    modality: &[Modality],
    config: &MoeConfig,
) -> Result<Option<Var>> {
    let term = match config.balance {
        BalanceMode::Off => return Ok(None),
        BalanceMode::All => load_balancing_loss(tape, probs, selections)?.0,
        BalanceMode::LanguageOnly => {
            modality_balancing_loss(
                tape,
                probs,
                selections,
                modality,
                Modality::Language,
                !config.literal_eq10,
            )?
            .0
        }
        BalanceMode::VisionOnly => {
            modality_balancing_loss(tape, probs, selections, modality, Modality::Vision, true)?.0
        }
    };
    Ok(Some(term))
}

/// Task loss plus the weighted balancing terms.
#[derive(Debug, Clone, Copy)]
pub struct AuxiliaryLoss {
    pub total: Var,
    /// `α · Σ_layers balancing`, exactly zero when nothing is added.
    pub weighted_balance: f64,
}

/// `task_loss + α · Σ_layers balancing` for the configured arm. Each layer
/// is `(probs, selections)`.
pub fn total_auxiliary_loss(
    tape: &mut Tape,
    task_loss: Var,
    layers: &[(Var, &[Vec<usize>])],
    modality: &[Modality],
    config: &MoeConfig,
) -> Result<AuxiliaryLoss> {
    if config.alpha == 0.0 || config.balance == BalanceMode::Off {
        return Ok(AuxiliaryLoss {
            total: task_loss,
            weighted_balance: 0.0,
        });
    }
    let mut sum: Option<Var> = None;
    for &(probs, selections) in layers {
        if let Some(term) = layer_balancing_term(tape, probs, selections, modality, config)? {
            sum = Some(match sum {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
    }
    let Some(sum) = sum else {
        return Ok(AuxiliaryLoss {
            total: task_loss,
            weighted_balance: 0.0,
        });
    };
    let weighted = tape.scale(sum, config.alpha);
    let total = tape.add(task_loss, weighted)?;
    Ok(AuxiliaryLoss {
        total,
        weighted_balance: tape.value(weighted).item(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs_var(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.param(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn uniform_probs_give_unit_loss() {
        let mut tape = Tape::new();
        let p = probs_var(&mut tape, &vec![vec![0.25; 4]; 3]);
        let sel = vec![vec![0, 1], vec![0, 1], vec![2, 3]];
        let (loss, terms) = load_balancing_loss(&mut tape, p, &sel).unwrap();
        assert!((tape.value(loss).item() - 1.0).abs() < 1e-12);
        assert!((terms.f.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_top1_loss() {
        let mut tape = Tape::new();
        let p = probs_var(&mut tape, &[vec![0.9, 0.1], vec![0.8, 0.2]]);
        let (loss, terms) = load_balancing_loss(&mut tape, p, &[vec![0], vec![0]]).unwrap();
        assert_eq!(terms.f, vec![1.0, 0.0]);
        assert!((terms.g[0] - 0.85).abs() < 1e-15);
        assert!((tape.value(loss).item() - 1.7).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_zero_without_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::zeros(&[0, 4]));
        let (loss, _) = load_balancing_loss(&mut tape, p, &[]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap().len(), 0);
    }

    #[test]
    fn language_restriction_cases() {
        let rows = vec![vec![0.7, 0.1, 0.1, 0.1], vec![0.1, 0.6, 0.2, 0.1], vec![0.3, 0.3, 0.3, 0.1]];
        let sel = vec![vec![0, 1], vec![1, 2], vec![0, 1]];

        let mut tape = Tape::new();
        let p = probs_var(&mut tape, &rows);
        let (l, _) = modality_balancing_loss(&mut tape, p, &sel, &[Modality::Vision; 3], Modality::Language, true)
            .unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let (l_lang, _) =
            modality_balancing_loss(&mut tape, p, &sel, &[Modality::Language; 3], Modality::Language, true)
                .unwrap();
        let (l_full, _) = load_balancing_loss(&mut tape, p, &sel).unwrap();
        assert_eq!(tape.value(l_lang).item(), tape.value(l_full).item());

        let mixed = [Modality::Vision, Modality::Language, Modality::Language];
        let (l_mixed, _) =
            modality_balancing_loss(&mut tape, p, &sel, &mixed, Modality::Language, true).unwrap();
        let p_sub = probs_var(&mut tape, &rows[1..]);
        let (l_sub, _) = load_balancing_loss(&mut tape, p_sub, &sel[1..]).unwrap();
        assert!((tape.value(l_mixed).item() - tape.value(l_sub).item()).abs() < 1e-15);
    }

    #[test]
    fn threshold_examples() {
        let modality = [Modality::Vision; 3];
        let rpv = [0.1, 0.2, 0.3];
        assert_eq!(classify_by_rpv(&rpv, &modality, TailSelector::Vtt), vec![false, false, true]);
        assert_eq!(classify_by_rpv(&rpv, &modality, TailSelector::Vht), vec![true, true, false]);
    }

    #[test]
    fn equal_rpvs_never_exceed_their_mean() {
        for x in [0.1, 0.7 / 9.0, 1.0 / 3.0, 0.0123456789] {
            for n in 1..50 {
                let rpv = vec![x; n];
                let flags = classify_by_rpv(&rpv, &vec![Modality::Vision; n], TailSelector::Vtt);
                assert!(flags.iter().all(|f| !f), "x={x} n={n}");
            }
        }
    }

    #[test]
    fn nan_rpvs_do_not_panic() {
        let flags = classify_by_rpv(&[f64::NAN; 3], &[Modality::Vision; 3], TailSelector::Vtt);
        assert!(flags.iter().all(|f| !f));
    }

    #[test]
    fn identical_rows_select_no_tail() {
        let probs = Tensor::from_rows(&vec![vec![0.4, 0.3, 0.2, 0.1]; 5]).unwrap();
        let flags = classify_vision_tokens(&probs, &[Modality::Vision; 5], TailSelector::Vtt);
        assert!(flags.iter().all(|f| !f));
    }

    #[test]
    fn language_never_flagged_and_no_vision_is_all_false() {
        let probs = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5], vec![0.9, 0.1]]).unwrap();
        let modality = [Modality::Vision, Modality::Vision, Modality::Language];
        let flags = classify_vision_tokens(&probs, &modality, TailSelector::Vht);
        assert!(!flags[2]);
        let none = classify_vision_tokens(&probs, &[Modality::Language; 3], TailSelector::Vtt);
        assert_eq!(none, vec![false; 3]);
    }

    #[test]
    fn auxiliary_identity_cases() {
        let mut tape = Tape::new();
        let p = probs_var(&mut tape, &vec![vec![0.25; 4]; 2]);
        let task = tape.constant(Tensor::scalar(0.5));
        let sel = vec![vec![0, 1], vec![2, 3]];
        let modality = [Modality::Language; 2];
        let layers = [(p, sel.as_slice())];

        let zero_alpha = MoeConfig {
            alpha: 0.0,
            balance: BalanceMode::All,
            ..MoeConfig::default()
        };
        let out = total_auxiliary_loss(&mut tape, task, &layers, &modality, &zero_alpha).unwrap();
        assert_eq!(out.total, task);

        let off = MoeConfig {
            balance: BalanceMode::Off,
            alpha: 0.5,
            ..MoeConfig::default()
        };
        let out = total_auxiliary_loss(&mut tape, task, &layers, &modality, &off).unwrap();
        assert_eq!(out.total, task);
        assert_eq!(out.weighted_balance, 0.0);

        let base = MoeConfig {
            balance: BalanceMode::All,
            ..MoeConfig::default()
        };
        let two_layers = [(p, sel.as_slice()), (p, sel.as_slice())];
        let out = total_auxiliary_loss(&mut tape, task, &two_layers, &modality, &base).unwrap();
        assert!((tape.value(out.total).item() - (0.5 + 2.0 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn literal_form_drops_k() {
        let mut tape = Tape::new();
        let p = probs_var(&mut tape, &vec![vec![0.25; 4]; 2]);
        let sel = vec![vec![0, 1], vec![2, 3]];
        let modality = [Modality::Language; 2];
        let literal = MoeConfig {
            literal_eq10: true,
            ..MoeConfig::default()
        };
        let term = layer_balancing_term(&mut tape, p, &sel, &modality, &literal)
            .unwrap()
            .unwrap();
        assert!((tape.value(term).item() - 0.25).abs() < 1e-15);
    }
}
