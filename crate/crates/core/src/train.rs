//! Toy model, training loop and the ablation grid.
//!
//! The model feeds raw token features through `N` residual MoE layers and a
//! shared linear classifier over all vision and language concepts.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::{Arm, ExperimentConfig};
use crate::data::{ConceptWorld, Modality, TokenBatch};
use crate::error::{Error, Result};
use crate::metrics::{compute_stats, RouterRecord, RunStats};
use crate::moe::{dispatch_with_selection, route_probabilities, select_experts, BoundLayer, MoeConfig, MoeLayer, RouterOutput, Routing};
use crate::optim::Optimizer;
use crate::routing::{classify_vision_tokens, total_auxiliary_loss, AuxiliaryLoss};
use crate::tensor::Tensor;

/// Independent RNG streams derived from one experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    World = 1,
    Init = 2,
    Train = 3,
    Eval = 4,
    Probe = 5,
}

/// SplitMix64-style mixing of `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((stream as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shared `d×C` classifier applied after the last MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<MoeLayer>,
    pub head: Classifier,
}

#[derive(Debug, Clone)]
pub struct BoundModel {
    pub layers: Vec<BoundLayer>,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl BoundModel {
    /// Leaves in the same order as [`Model::params`].
    pub fn leaves(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.layers.iter().flat_map(BoundLayer::leaves).collect();
        out.extend([self.head_weight, self.head_bias]);
        out
    }
}

impl Model {
    pub fn init(config: &ExperimentConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.world.d;
        let classes = config.world.num_classes();
        let layers = (0..config.layers)
            .map(|_| MoeLayer::init(d, config.hidden_width(), config.num_experts, &mut rng))
            .collect();
        let std = 1.0 / (d as f64).sqrt();
        let weight_data = (0..d * classes)
            .map(|_| std * rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal))
            .collect();
        let head = Classifier {
            weight: Tensor::new(vec![d, classes], weight_data).expect("d*C"),
            bias: Tensor::zeros(&[classes]),
        };
        Self { layers, head }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.layers.iter().flat_map(MoeLayer::params).collect();
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.layers.iter_mut().flat_map(MoeLayer::params_mut).collect();
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.param_names(&format!("layer{i}")))
            .collect();
        out.extend(["head.weight".to_string(), "head.bias".to_string()]);
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let layers = self.layers.iter().map(|l| l.bind(tape)).collect();
        BoundModel {
            layers,
            head_weight: tape.param(self.head.weight.clone()),
            head_bias: tape.param(self.head.bias.clone()),
        }
    }
}

/// Routing decisions of one layer, fixed ahead of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenRouting {
    pub tail_flags: Vec<bool>,
    pub selection: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct LayerPass {
    pub input: Var,
    pub routing: Routing,
    pub router_output: RouterOutput,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    pub task_loss: Var,
    pub aux: AuxiliaryLoss,
    pub layers: Vec<LayerPass>,
}

impl ForwardPass {
    pub fn frozen_routing(&self) -> Vec<FrozenRouting> {
        self.layers
            .iter()
            .map(|l| FrozenRouting {
                tail_flags: l.router_output.tail_flags.clone(),
                selection: l.router_output.selected_experts(),
            })
            .collect()
    }

    pub fn predictions(&self, tape: &Tape) -> Vec<usize> {
        tape.value(self.logits)
            .iter_rows()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// Routes, classifies tail tokens, mixes and classifies one batch. Each
/// layer's probabilities are computed once and feed both the tail
/// threshold and the dispatch. With `frozen`, routing decisions are taken
/// from it instead.
pub fn forward(
    tape: &mut Tape,
    model: &BoundModel,
    features: Var,
    modality: &[Modality],
    labels: &[usize],
    config: &MoeConfig,
    frozen: Option<&[FrozenRouting]>,
) -> Result<ForwardPass> {
    config.validate()?;
    let mut hidden = features;
    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let routing = route_probabilities(tape, hidden, layer.router)?;
        let (flags, selection) = match frozen.and_then(|f| f.get(i)) {
            Some(f) => (f.tail_flags.clone(), f.selection.clone()),
            None => {
                let probs = tape.value(routing.probs);
                let flags = classify_vision_tokens(probs, modality, config.selector);
                let selection = select_experts(probs, config, modality, &flags)?;
                (flags, selection)
            }
        };
        let out = dispatch_with_selection(tape, hidden, routing, layer, config, &flags, selection)?;
        let input = hidden;
        hidden = tape.add(hidden, out.output)?;
        layers.push(LayerPass {
            input,
            routing,
            router_output: out.router_output,
        });
    }
    let logits = tape.matmul(hidden, model.head_weight)?;
    let logits = tape.add_row(logits, model.head_bias)?;
    let task_loss = tape.cross_entropy(logits, labels)?;
    let selections: Vec<Vec<Vec<usize>>> = layers.iter().map(|l| l.router_output.selected_experts()).collect();
    let per_layer: Vec<(Var, &[Vec<usize>])> = layers
        .iter()
        .zip(&selections)
        .map(|(l, s)| (l.routing.probs, s.as_slice()))
        .collect();
    let aux = total_auxiliary_loss(tape, task_loss, &per_layer, modality, config)?;
    Ok(ForwardPass {
        logits,
        task_loss,
        aux,
        layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub task: f64,
    pub balance: f64,
    pub total: f64,
}

/// One forward, one backward, one optimizer update.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    batch: &TokenBatch,
    labels: &[usize],
    config: &MoeConfig,
    step: usize,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(batch.features.clone());
    let pass = forward(&mut tape, &bound, x, &batch.modality, labels, config, None)?;
    let losses = StepLosses {
        task: tape.value(pass.task_loss).item(),
        balance: pass.aux.weighted_balance,
        total: tape.value(pass.aux.total).item(),
    };
    if !losses.total.is_finite() {
        let max_param = model
            .params()
            .iter()
            .flat_map(|p| p.data().iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        return Err(Error::NonFinite {
            step,
            detail: format!(
                "task_loss={} balance_loss={} max|param|={max_param}",
                losses.task, losses.balance
            ),
        });
    }
    tape.backward(pass.aux.total)?;
    let grads: Vec<Tensor> = bound
        .leaves()
        .iter()
        .map(|&v| tape.grad(v).expect("parameter leaf").clone())
        .collect();
    optimizer.step(model.params_mut(), &grads);
    Ok(losses)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub task_loss: Vec<f64>,
    /// `α`-weighted balancing contribution summed over layers.
    pub balance_loss: Vec<f64>,
    pub step_time_ms: Vec<f64>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.task_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_loss.is_empty()
    }

    pub fn mean_step_time_ms(&self) -> f64 {
        if self.step_time_ms.is_empty() {
            0.0
        } else {
            self.step_time_ms.iter().sum::<f64>() / self.step_time_ms.len() as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: TrainTrace,
    pub stats: RunStats,
    pub records: Vec<RouterRecord>,
    pub model: Model,
}

/// Routes held-out batches through a trained model and records every layer.
pub fn evaluate(
    model: &Model,
    world: &ConceptWorld,
    config: &ExperimentConfig,
) -> Result<Vec<RouterRecord>> {
    let moe = config.moe_config();
    let mut records = Vec::new();
    for b in 0..config.eval_batches {
        let batch = world.default_batch(derive_seed(config.seed, Stream::Eval, b as u64));
        let labels = batch.class_labels(world.config());
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.constant(batch.features.clone());
        let pass = forward(&mut tape, &bound, x, &batch.modality, &labels, &moe, None)?;
        let predictions = pass.predictions(&tape);
        for (layer, lp) in pass.layers.into_iter().enumerate() {
            records.push(RouterRecord {
                batch: b,
                layer,
                num_experts: config.num_experts,
                modality: batch.modality.clone(),
                concepts: batch.concepts.clone(),
                background_concepts: world.config().background_concepts.clone(),
                predictions: predictions.clone(),
                labels: labels.clone(),
                output: lp.router_output,
            });
        }
    }
    Ok(records)
}

/// Trains from scratch and evaluates. Deterministic given the config.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    let world = ConceptWorld::new(config.world.clone(), derive_seed(config.seed, Stream::World, 0))?;
    let mut model = Model::init(config, derive_seed(config.seed, Stream::Init, 0));
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let moe = config.moe_config();
    let mut trace = TrainTrace::default();
    for step in 0..config.steps {
        let batch = world.default_batch(derive_seed(config.seed, Stream::Train, step as u64));
        let labels = batch.class_labels(world.config());
        let start = Instant::now();
        let losses = train_step(&mut model, &mut optimizer, &batch, &labels, &moe, step)?;
        trace.step_time_ms.push(start.elapsed().as_secs_f64() * 1e3);
        trace.task_loss.push(losses.task);
        trace.balance_loss.push(losses.balance);
    }
    let records = evaluate(&model, &world, config)?;
    let stats = compute_stats(&records, config.num_experts, config.layers, config.specialization_all_slots)?;
    Ok(RunResult {
        trace,
        stats,
        records,
        model,
    })
}

/// Outcome of one `(arm, seed)` cell.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub arm: Arm,
    pub seed: u64,
    pub outcome: std::result::Result<CellResult, String>,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub stats: RunStats,
    pub mean_step_time_ms: f64,
    pub final_task_loss: Option<f64>,
}

/// Per-arm medians over successful seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub arm: Arm,
    pub runs: usize,
    pub acc_overall: f64,
    pub acc_head: f64,
    pub acc_tail: f64,
    pub mean_rpv_vision: f64,
    pub mean_rpv_language: f64,
    pub tail_fraction: f64,
    pub step_time_ms: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

/// Median with the midpoint rule for even counts; `NaN` when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationTable {
    pub fn successes(&self, arm: Arm) -> Vec<&CellResult> {
        self.cells
            .iter()
            .filter(|c| c.arm == arm)
            .filter_map(|c| c.outcome.as_ref().ok())
            .collect()
    }

    pub fn arms(&self) -> Vec<Arm> {
        let mut arms: Vec<Arm> = Vec::new();
        for c in &self.cells {
            if !arms.contains(&c.arm) {
                arms.push(c.arm);
            }
        }
        arms
    }

    pub fn summary(&self, arm: Arm) -> ArmSummary {
        let ok = self.successes(arm);
        let med = |f: &dyn Fn(&CellResult) -> f64| median(&ok.iter().map(|c| f(c)).collect::<Vec<_>>());
        ArmSummary {
            arm,
            runs: ok.len(),
            acc_overall: med(&|c| c.stats.accuracy_overall),
            acc_head: med(&|c| c.stats.accuracy_head_concepts),
            acc_tail: med(&|c| c.stats.accuracy_tail_concepts),
            mean_rpv_vision: med(&|c| c.stats.mean_rpv_vision),
            mean_rpv_language: med(&|c| c.stats.mean_rpv_language),
            tail_fraction: med(&|c| c.stats.tail_fraction),
            step_time_ms: med(&|c| c.mean_step_time_ms),
        }
    }
}

fn run_cell(base: &ExperimentConfig, arm: Arm, seed: u64) -> AblationCell {
    let config = base.with_arm(arm).with_seed(seed);
    let outcome = run_experiment(&config)
        .map(|r| CellResult {
            mean_step_time_ms: r.trace.mean_step_time_ms(),
            final_task_loss: r.trace.task_loss.last().copied(),
            stats: r.stats,
        })
        .map_err(|e| e.to_string());
    AblationCell { arm, seed, outcome }
}

/// Runs every `arm × seed` cell. Failed cells are recorded, not fatal.
/// Cells are spread over up to `workers` threads; the table order is
/// always arm-major in the order given.
pub fn ablation_suite(base: &ExperimentConfig, arms: &[Arm], seeds: &[u64], workers: usize) -> Result<AblationTable> {
    if seeds.is_empty() || arms.is_empty() {
        return Err(Error::invalid("ablation", "need at least one arm and one seed"));
    }
    let jobs: Vec<(Arm, u64)> = arms
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let slots: Vec<Mutex<Option<AblationCell>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = workers.clamp(1, jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(arm, seed)) = jobs.get(i) else { break };
                let cell = run_cell(base, arm, seed);
                *slots[i].lock().expect("slot lock") = Some(cell);
            });
        }
    });
    let cells = slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every job ran"))
        .collect();
    Ok(AblationTable { cells })
}

/// Worker count for parallel cells.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
