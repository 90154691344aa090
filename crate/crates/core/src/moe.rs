//! Sparse mixture-of-experts layer: softmax router, top-k dispatch and the
//! probability-weighted mixture of expert outputs.
//!
//! Tokens flagged as vision tail tokens are dispatched to `a` experts, every
//! other token to `k`. Mixture weights are the raw router probabilities of
//! the selected experts unless [`MoeConfig::renormalize_topk`] is set.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{population_variance, Tape, Var};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::routing::{BalanceMode, TailSelector};
use crate::tensor::{Tensor, TensorError};

/// How experts are offered to each modality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ExpertGroupLayout {
    Unified,
    /// Disjoint vision and language expert groups, each with its own top-k.
    ModalityGrouped {
        vision_experts: Vec<usize>,
        language_experts: Vec<usize>,
        vision_k: usize,
        language_k: usize,
    },
}

impl ExpertGroupLayout {
    /// First half of the experts for vision, second half for language, `k/2`
    /// (at least 1) activated per group.
    pub fn split_halves(num_experts: usize, top_k: usize) -> Self {
        let half = num_experts / 2;
        let per_group = (top_k / 2).max(1);
        ExpertGroupLayout::ModalityGrouped {
            vision_experts: (0..half).collect(),
            language_experts: (half..num_experts).collect(),
            vision_k: per_group,
            language_k: per_group,
        }
    }
}

/// Layer-level routing configuration shared by every MoE layer of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    /// Experts activated for a vision tail token.
    pub tail_k: usize,
    pub alpha: f64,
    pub balance: BalanceMode,
    pub selector: TailSelector,
    pub layout: ExpertGroupLayout,
    pub renormalize_topk: bool,
    /// Drop the leading `K` factor from the language-only balancing term.
    pub literal_eq10: bool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            num_experts: 4,
            top_k: 2,
            tail_k: 4,
            alpha: 0.01,
            balance: BalanceMode::LanguageOnly,
            selector: TailSelector::Vtt,
            layout: ExpertGroupLayout::Unified,
            renormalize_topk: false,
            literal_eq10: false,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        let k_total = self.num_experts;
        if k_total < 2 {
            return Err(Error::invalid("K", format!("need at least 2 experts, got {k_total}")));
        }
        if self.top_k == 0 || self.top_k > k_total {
            return Err(Error::invalid(
                "k",
                format!("k must satisfy 1 <= k <= K, got k={} K={k_total}", self.top_k),
            ));
        }
        if self.tail_k < self.top_k || self.tail_k > k_total {
            return Err(Error::invalid(
                "a",
                format!(
                    "a must satisfy k <= a <= K, got a={} k={} K={k_total}",
                    self.tail_k, self.top_k
                ),
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha", "must be finite and >= 0"));
        }
        if let ExpertGroupLayout::ModalityGrouped {
            vision_experts,
            language_experts,
            vision_k,
            language_k,
        } = &self.layout
        {
            let mut seen = vec![false; k_total];
            for &e in vision_experts.iter().chain(language_experts) {
                if e >= k_total || seen[e] {
                    return Err(Error::invalid(
                        "layout",
                        "vision and language expert groups must partition 0..K",
                    ));
                }
                seen[e] = true;
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::invalid(
                    "layout",
                    "vision and language expert groups must partition 0..K",
                ));
            }
            if *vision_k == 0 || *vision_k > vision_experts.len() {
                return Err(Error::invalid("layout.vision_k", "must be in 1..=|vision group|"));
            }
            if *language_k == 0 || *language_k > language_experts.len() {
                return Err(Error::invalid(
                    "layout.language_k",
                    "must be in 1..=|language group|",
                ));
            }
        }
        Ok(())
    }
}

/// `d×K` routing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    pub weight: Tensor,
}

/// Two-layer feed-forward expert `d → h → d` with GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

impl Router {
    pub fn init<R: Rng + ?Sized>(d: usize, num_experts: usize, rng: &mut R) -> Self {
        Self {
            weight: normal_tensor(&[d, num_experts], 1.0 / (d as f64).sqrt(), rng),
        }
    }
}

impl Expert {
    pub fn init<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: normal_tensor(&[d, hidden], 1.0 / (d as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: normal_tensor(&[hidden, d], 1.0 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[d]),
        }
    }
}

/// The `K` experts of one layer. All experts share the same `(d, h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertEnsemble {
    pub experts: Vec<Expert>,
}

impl ExpertEnsemble {
    pub fn init<R: Rng + ?Sized>(num_experts: usize, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            experts: (0..num_experts).map(|_| Expert::init(d, hidden, rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub router: Router,
    pub ensemble: ExpertEnsemble,
}

impl MoeLayer {
    pub fn init<R: Rng + ?Sized>(d: usize, hidden: usize, num_experts: usize, rng: &mut R) -> Self {
        let router = Router::init(d, num_experts, rng);
        let ensemble = ExpertEnsemble::init(num_experts, d, hidden, rng);
        Self { router, ensemble }
    }

    /// Parameters in binding order: router, then `w1, b1, w2, b2` per expert.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.router.weight];
        for e in &self.ensemble.experts {
            out.extend([&e.w1, &e.b1, &e.w2, &e.b2]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.router.weight];
        for e in &mut self.ensemble.experts {
            out.extend([&mut e.w1, &mut e.b1, &mut e.w2, &mut e.b2]);
        }
        out
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = vec![format!("{prefix}.router")];
        for i in 0..self.ensemble.len() {
            for p in ["w1", "b1", "w2", "b2"] {
                out.push(format!("{prefix}.expert{i}.{p}"));
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLayer {
        let router = tape.param(self.router.weight.clone());
        let experts = self
            .ensemble
            .experts
            .iter()
            .map(|e| BoundExpert {
                w1: tape.param(e.w1.clone()),
                b1: tape.param(e.b1.clone()),
                w2: tape.param(e.w2.clone()),
                b2: tape.param(e.b2.clone()),
            })
            .collect();
        BoundLayer { router, experts }
    }
}

/// Expert parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundExpert {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BoundExpert {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add_row(h, self.b1)?;
        let h = tape.gelu(h);
        let y = tape.matmul(h, self.w2)?;
        tape.add_row(y, self.b2)
    }
}

#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub router: Var,
    pub experts: Vec<BoundExpert>,
}

impl BoundLayer {
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = vec![self.router];
        for e in &self.experts {
            out.extend([e.w1, e.b1, e.w2, e.b2]);
        }
        out
    }
}

/// Router logits and their softmax, both on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Routing {
    pub logits: Var,
    pub probs: Var,
}

/// Per-token routing record of one layer for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterOutput {
    /// `m×K` router probabilities, one row per token.
    pub probs: Vec<Vec<f64>>,
    pub rpv: Vec<f64>,
    pub tail_flags: Vec<bool>,
    /// Selected `(expert, mixture weight)` pairs per token, best first.
    pub selection: Vec<Vec<(usize, f64)>>,
}

impl RouterOutput {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn selected_experts(&self) -> Vec<Vec<usize>> {
        self.selection
            .iter()
            .map(|s| s.iter().map(|&(e, _)| e).collect())
            .collect()
    }
}

/// `softmax(x · W)` for `m×d` tokens and a `d×K` router.
pub fn route_probabilities(tape: &mut Tape, tokens: Var, router: Var) -> Result<Routing, TensorError> {
    let logits = tape.matmul(tokens, router)?;
    let probs = tape.softmax_rows(logits);
    Ok(Routing { logits, probs })
}

/// The `count` entries of `allowed` with the largest probability, best
/// first, ties going to the lower expert index.
pub fn select_topk(prob_row: &[f64], count: usize, allowed: &[usize]) -> Result<Vec<usize>> {
    if count > allowed.len() {
        return Err(Error::Contract(format!(
            "cannot select {count} experts from {} allowed",
            allowed.len()
        )));
    }
    if let Some(&bad) = allowed.iter().find(|&&e| e >= prob_row.len()) {
        return Err(Error::Contract(format!(
            "allowed expert {bad} exceeds K = {}",
            prob_row.len()
        )));
    }
    let mut picked: Vec<usize> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut best: Option<usize> = None;
        for &e in allowed {
            if picked.contains(&e) {
                continue;
            }
            best = match best {
                Some(b) if prob_row[b] > prob_row[e] || (prob_row[b] == prob_row[e] && b < e) => {
                    Some(b)
                }
                _ => Some(e),
            };
        }
        match best {
            Some(b) => picked.push(b),
            None => {
                return Err(Error::Contract(
                    "allowed expert set contains duplicates".to_string(),
                ))
            }
        }
    }
    Ok(picked)
}

/// Dispatch decisions for every token: `a` experts for tail tokens, `k` for
/// the rest, restricted to the token's group in modality-grouped layouts.
pub fn select_experts(
    probs: &Tensor,
    config: &MoeConfig,
    modality: &[Modality],
    tail_flags: &[bool],
) -> Result<Vec<Vec<usize>>> {
    let m = probs.rows();
    if modality.len() != m || tail_flags.len() != m {
        return Err(Error::Contract(format!(
            "{m} tokens but {} modality entries and {} tail flags",
            modality.len(),
            tail_flags.len()
        )));
    }
    let all: Vec<usize> = (0..config.num_experts).collect();
    (0..m)
        .map(|t| {
            if tail_flags[t] && modality[t] == Modality::Language {
                return Err(Error::Contract(format!("language token {t} flagged as tail")));
            }
            let (allowed, base_k): (&[usize], usize) = match &config.layout {
                ExpertGroupLayout::Unified => (&all, config.top_k),
                ExpertGroupLayout::ModalityGrouped {
                    vision_experts,
                    language_experts,
                    vision_k,
                    language_k,
                } => match modality[t] {
                    Modality::Vision => (vision_experts, *vision_k),
                    Modality::Language => (language_experts, *language_k),
                },
            };
            let count = if tail_flags[t] {
                config.tail_k.min(allowed.len()).max(base_k)
            } else {
                base_k
            };
            select_topk(probs.row(t), count, allowed)
        })
        .collect()
}

/// Weighted mixture of the selected experts' outputs. Returns the `m×d`
/// output and the mixture weight used for every selection entry.
pub fn mix_experts(
    tape: &mut Tape,
    tokens: Var,
    probs: Var,
    experts: &[BoundExpert],
    selection: &[Vec<usize>],
    renormalize: bool,
) -> Result<(Var, Vec<Vec<f64>>)> {
    let x = tape.value(tokens);
    let (m, d) = (x.rows(), x.cols());
    if selection.len() != m {
        return Err(Error::Contract(format!(
            "{} selections for {m} tokens",
            selection.len()
        )));
    }
    let pairs: Vec<(usize, usize)> = selection
        .iter()
        .enumerate()
        .flat_map(|(t, s)| s.iter().map(move |&e| (t, e)))
        .collect();
    let mut weights = tape.gather_elems(probs, &pairs)?;
    if renormalize {
        let segments: Vec<usize> = pairs.iter().map(|&(t, _)| t).collect();
        weights = tape.normalize_segments(weights, &segments)?;
    }

    let mut output: Option<Var> = None;
    for (j, expert) in experts.iter().enumerate() {
        let (rows, slots): (Vec<usize>, Vec<(usize, usize)>) = pairs
            .iter()
            .enumerate()
            .filter(|(_, &(_, e))| e == j)
            .map(|(pos, &(t, _))| (t, (0, pos)))
            .unzip();
        if rows.is_empty() {
            continue;
        }
        let xs = tape.gather_rows(tokens, &rows)?;
        let y = expert.forward(tape, xs)?;
        let w = tape.gather_elems(weights, &slots)?;
        let yw = tape.scale_rows(y, w)?;
        let contrib = tape.scatter_rows(yw, &rows, m)?;
        output = Some(match output {
            Some(acc) => tape.add(acc, contrib)?,
            None => contrib,
        });
    }
    let output = output.unwrap_or_else(|| tape.constant(Tensor::zeros(&[m, d])));

    let flat = tape.value(weights).data();
    let mut per_token = Vec::with_capacity(m);
    let mut pos = 0;
    for s in selection {
        per_token.push(flat[pos..pos + s.len()].to_vec());
        pos += s.len();
    }
    Ok((output, per_token))
}

/// Result of one MoE layer on the tape.
#[derive(Debug, Clone)]
pub struct MoeOutput {
    pub output: Var,
    pub routing: Routing,
    pub router_output: RouterOutput,
}

/// Full layer pass with caller-supplied tail flags.
pub fn moe_forward(
    tape: &mut Tape,
    tokens: Var,
    layer: &BoundLayer,
    config: &MoeConfig,
    modality: &[Modality],
    tail_flags: &[bool],
) -> Result<MoeOutput> {
    config.validate()?;
    if layer.experts.len() != config.num_experts {
        return Err(Error::invalid(
            "K",
            format!(
                "layer has {} experts but config expects {}",
                layer.experts.len(),
                config.num_experts
            ),
        ));
    }
    let routing = route_probabilities(tape, tokens, layer.router)?;
    dispatch(tape, tokens, routing, layer, config, modality, tail_flags)
}

/// Select and mix given probabilities already on the tape.
pub fn dispatch(
    tape: &mut Tape,
    tokens: Var,
    routing: Routing,
    layer: &BoundLayer,
    config: &MoeConfig,
    modality: &[Modality],
    tail_flags: &[bool],
) -> Result<MoeOutput> {
    let probs = tape.value(routing.probs).clone();
    let selection = select_experts(&probs, config, modality, tail_flags)?;
    dispatch_with_selection(tape, tokens, routing, layer, config, tail_flags, selection)
}

/// Mix with a fixed selection, e.g. one frozen for finite-difference checks.
pub fn dispatch_with_selection(
    tape: &mut Tape,
    tokens: Var,
    routing: Routing,
    layer: &BoundLayer,
    config: &MoeConfig,
    tail_flags: &[bool],
    selection: Vec<Vec<usize>>,
) -> Result<MoeOutput> {
    let (output, weights) = mix_experts(
        tape,
        tokens,
        routing.probs,
        &layer.experts,
        &selection,
        config.renormalize_topk,
    )?;
    let probs = tape.value(routing.probs);
    let router_output = RouterOutput {
        probs: probs.to_rows(),
        rpv: probs.iter_rows().map(population_variance).collect(),
        tail_flags: tail_flags.to_vec(),
        selection: selection
            .iter()
            .zip(weights)
            .map(|(s, w)| s.iter().copied().zip(w).collect())
            .collect(),
    };
    Ok(MoeOutput {
        output,
        routing,
        router_output,
    })
}

/// Number of experts each token was dispatched to.
pub fn per_token_activation_counts(router_output: &RouterOutput) -> Vec<usize> {
    router_output.selection.iter().map(Vec::len).collect()
}
