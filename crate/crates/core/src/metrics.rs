//! Routing statistics computed from stored per-layer router records.
//!
//! Everything in [`RunStats`] is a pure function of the [`RouterRecord`]s,
//! so a serialized router log reproduces the statistics exactly.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::io::{csv_writer, fmt_real};
use crate::moe::RouterOutput;
use crate::routing::{classify_by_rpv, TailSelector};

pub const RPV_BIN_WIDTH: f64 = 0.01;

/// One layer's routing decisions for one evaluation batch, plus what the
/// statistics need to know about the tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterRecord {
    pub batch: usize,
    pub layer: usize,
    pub num_experts: usize,
    pub modality: Vec<Modality>,
    /// Concept index within each token's modality.
    pub concepts: Vec<usize>,
    /// Vision concepts counted as the background head.
    pub background_concepts: Vec<usize>,
    /// Class predicted by the model for each token.
    pub predictions: Vec<usize>,
    /// True class of each token.
    pub labels: Vec<usize>,
    #[serde(flatten)]
    pub output: RouterOutput,
}

/// Largest possible RPV for `K` experts, reached by one-hot rows.
pub fn max_rpv(num_experts: usize) -> f64 {
    let k = num_experts as f64;
    (k - 1.0) / (k * k)
}

pub fn rpv_bin_count(num_experts: usize, bin_width: f64) -> usize {
    ((max_rpv(num_experts) / bin_width).ceil() as usize).max(1)
}

/// Counts of RPV values in right-open bins `[i·w, (i+1)·w)`; the top bin is
/// closed at `(K−1)/K²`.
pub fn rpv_histogram(rpv: &[f64], bin_width: f64, num_experts: usize) -> Result<Vec<u64>> {
    if !(bin_width > 0.0) {
        return Err(Error::Contract(format!("bin width must be positive, got {bin_width}")));
    }
    let bins = rpv_bin_count(num_experts, bin_width);
    let top = max_rpv(num_experts);
    let mut counts = vec![0u64; bins];
    for &r in rpv {
        if r < 0.0 || r.is_nan() || r > top * (1.0 + 1e-9) + 1e-15 {
            return Err(Error::Contract(format!(
                "RPV {r} outside [0, {top}] for K = {num_experts}"
            )));
        }
        let idx = ((r / bin_width).floor() as usize).min(bins - 1);
        counts[idx] += 1;
    }
    Ok(counts)
}

/// `#tail / #vision`, zero when there are no vision tokens.
pub fn tail_fraction(tail_flags: &[bool], modality: &[Modality]) -> f64 {
    let (tail, vision) = tail_flags
        .iter()
        .zip(modality)
        .filter(|(_, m)| m.is_vision())
        .fold((0usize, 0usize), |(t, v), (&f, _)| (t + usize::from(f), v + 1));
    if vision == 0 {
        0.0
    } else {
        tail as f64 / vision as f64
    }
}

/// Shannon entropy in bits of a count vector.
pub fn entropy_bits(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Entropy of each concept's expert distribution. Uses the top-1 expert of
/// every token unless `all_slots`. Concepts without tokens are absent.
pub fn specialization_score(
    selections: &[Vec<usize>],
    concept_labels: &[usize],
    num_experts: usize,
    all_slots: bool,
) -> BTreeMap<usize, f64> {
    let mut counts: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for (sel, &c) in selections.iter().zip(concept_labels) {
        let slots = if all_slots { &sel[..] } else { &sel[..sel.len().min(1)] };
        let entry = counts.entry(c).or_insert_with(|| vec![0; num_experts]);
        for &e in slots {
            entry[e] += 1;
        }
    }
    counts
        .into_iter()
        .map(|(c, v)| (c, entropy_bits(&v)))
        .collect()
}

/// Dispatch-slot counts per expert for one modality of one layer.
pub fn expert_loading(outputs: &[&RouterOutput], modality: &[&[Modality]], keep: Modality, num_experts: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_experts];
    for (out, mods) in outputs.iter().zip(modality) {
        for (sel, m) in out.selection.iter().zip(mods.iter()) {
            if *m == keep {
                for &(e, _) in sel {
                    counts[e] += 1;
                }
            }
        }
    }
    counts
}

fn modality_slot(m: Modality) -> usize {
    match m {
        Modality::Vision => 0,
        Modality::Language => 1,
    }
}

const MODALITIES: [Modality; 2] = [Modality::Vision, Modality::Language];

/// Concept-level entropy entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecializationEntry {
    pub layer: usize,
    pub modality: Modality,
    pub concept: usize,
    pub tokens: u64,
    pub entropy_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub num_layers: usize,
    pub num_experts: usize,
    /// `[layer][vision, language][expert]` dispatch-slot counts.
    pub expert_load: Vec<[Vec<u64>; 2]>,
    /// `[layer][vision, language][bin]` RPV token counts.
    pub rpv_histogram: Vec<[Vec<u64>; 2]>,
    /// Mean RPV of vision tokens at or below their batch mean.
    pub mean_rpv_head: f64,
    /// Mean RPV of vision tokens strictly above their batch mean.
    pub mean_rpv_tail: f64,
    pub mean_rpv_vision: f64,
    pub mean_rpv_language: f64,
    /// Share of vision tokens above their batch-mean RPV.
    pub tail_fraction: f64,
    pub specialization: Vec<SpecializationEntry>,
    pub accuracy_overall: f64,
    /// Accuracy on vision tokens of background concepts.
    pub accuracy_head_concepts: f64,
    /// Accuracy on the remaining vision concepts.
    pub accuracy_tail_concepts: f64,
}

fn ratio(num: f64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

impl RunStats {
    /// Max/min expert load for one `(layer, modality)`, pooled over layers
    /// when `layer` is `None`. Infinite when some expert got nothing.
    pub fn load_ratio(&self, layer: Option<usize>, modality: Modality) -> f64 {
        let slot = modality_slot(modality);
        let mut pooled = vec![0u64; self.num_experts];
        for (l, loads) in self.expert_load.iter().enumerate() {
            if layer.is_none_or(|want| want == l) {
                pooled.iter_mut().zip(&loads[slot]).for_each(|(p, c)| *p += c);
            }
        }
        let max = pooled.iter().copied().max().unwrap_or(0) as f64;
        let min = pooled.iter().copied().min().unwrap_or(0) as f64;
        if max == 0.0 {
            1.0
        } else if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// Largest per-layer ratio.
    pub fn worst_load_ratio(&self, modality: Modality) -> f64 {
        (0..self.num_layers)
            .map(|l| self.load_ratio(Some(l), modality))
            .fold(1.0, f64::max)
    }

    pub fn summary_rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("accuracy_overall", self.accuracy_overall),
            ("accuracy_head_concepts", self.accuracy_head_concepts),
            ("accuracy_tail_concepts", self.accuracy_tail_concepts),
            ("mean_rpv_vision", self.mean_rpv_vision),
            ("mean_rpv_language", self.mean_rpv_language),
            ("mean_rpv_head", self.mean_rpv_head),
            ("mean_rpv_tail", self.mean_rpv_tail),
            ("tail_fraction", self.tail_fraction),
            ("vision_load_ratio", self.load_ratio(None, Modality::Vision)),
            ("language_load_ratio", self.load_ratio(None, Modality::Language)),
        ]
    }

    /// Writes `expert_load.csv`, `rpv_histogram.csv`, `specialization.csv`
    /// and `summary.csv` into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;

        let mut w = csv_writer(std::fs::File::create(dir.join("expert_load.csv"))?);
        w.write_record(["layer", "modality", "expert", "count"])?;
        for (l, loads) in self.expert_load.iter().enumerate() {
            for m in MODALITIES {
                for (e, c) in loads[modality_slot(m)].iter().enumerate() {
                    w.write_record([l.to_string(), m.as_str().into(), e.to_string(), c.to_string()])?;
                }
            }
        }
        w.flush()?;

        let mut w = csv_writer(std::fs::File::create(dir.join("rpv_histogram.csv"))?);
        w.write_record(["layer", "modality", "bin", "bin_lo", "bin_hi", "count"])?;
        let top = max_rpv(self.num_experts);
        for (l, hists) in self.rpv_histogram.iter().enumerate() {
            for m in MODALITIES {
                let hist = &hists[modality_slot(m)];
                for (b, c) in hist.iter().enumerate() {
                    let lo = b as f64 * RPV_BIN_WIDTH;
                    let hi = if b + 1 == hist.len() { top } else { (b + 1) as f64 * RPV_BIN_WIDTH };
                    w.write_record([
                        l.to_string(),
                        m.as_str().into(),
                        b.to_string(),
                        fmt_real(lo),
                        fmt_real(hi),
                        c.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;

        let mut w = csv_writer(std::fs::File::create(dir.join("specialization.csv"))?);
        w.write_record(["layer", "modality", "concept", "tokens", "entropy_bits"])?;
        for s in &self.specialization {
            w.write_record([
                s.layer.to_string(),
                s.modality.as_str().into(),
                s.concept.to_string(),
                s.tokens.to_string(),
                fmt_real(s.entropy_bits),
            ])?;
        }
        w.flush()?;

        let mut w = csv_writer(std::fs::File::create(dir.join("summary.csv"))?);
        w.write_record(["metric", "value"])?;
        for (name, v) in self.summary_rows() {
            w.write_record([name.to_string(), fmt_real(v)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mergeable partial sums behind [`RunStats`]. Shards may be reduced in any
/// order with identical results: counts are integers, and real-valued sums
/// keep one partial per record, reduced in sorted order by [`Self::finish`].
#[derive(Debug, Clone, PartialEq)]
pub struct StatsAccumulator {
    num_experts: usize,
    all_slots: bool,
    expert_load: Vec<[Vec<u64>; 2]>,
    rpv_histogram: Vec<[Vec<u64>; 2]>,
    rpv_sum: [Vec<f64>; 2],
    rpv_count: [u64; 2],
    head_sum: Vec<f64>,
    head_count: u64,
    tail_sum: Vec<f64>,
    tail_count: u64,
    /// `(layer, modality, concept)` → expert counts.
    concept_experts: BTreeMap<(usize, Modality, usize), Vec<u64>>,
    correct: [u64; 3],
    seen: [u64; 3],
}

impl StatsAccumulator {
    pub fn new(num_experts: usize, all_slots: bool) -> Self {
        Self {
            num_experts,
            all_slots,
            expert_load: Vec::new(),
            rpv_histogram: Vec::new(),
            rpv_sum: [Vec::new(), Vec::new()],
            rpv_count: [0; 2],
            head_sum: Vec::new(),
            head_count: 0,
            tail_sum: Vec::new(),
            tail_count: 0,
            concept_experts: BTreeMap::new(),
            correct: [0; 3],
            seen: [0; 3],
        }
    }

    fn ensure_layer(&mut self, layer: usize) {
        let bins = rpv_bin_count(self.num_experts, RPV_BIN_WIDTH);
        while self.expert_load.len() <= layer {
            self.expert_load
                .push([vec![0; self.num_experts], vec![0; self.num_experts]]);
            self.rpv_histogram.push([vec![0; bins], vec![0; bins]]);
        }
    }

    pub fn add(&mut self, rec: &RouterRecord) -> Result<()> {
        let m = rec.output.len();
        if rec.modality.len() != m
            || rec.concepts.len() != m
            || rec.output.rpv.len() != m
            || rec.output.selection.len() != m
        {
            return Err(Error::Contract(format!(
                "router record (batch {}, layer {}) has inconsistent lengths",
                rec.batch, rec.layer
            )));
        }
        if rec.num_experts != self.num_experts {
            return Err(Error::Contract(format!(
                "record has K = {} but accumulator expects {}",
                rec.num_experts, self.num_experts
            )));
        }
        self.ensure_layer(rec.layer);
        let layer = rec.layer;

        for (t, sel) in rec.output.selection.iter().enumerate() {
            let slot = modality_slot(rec.modality[t]);
            for &(e, _) in sel {
                if e >= self.num_experts {
                    return Err(Error::Contract(format!("expert {e} out of range")));
                }
                self.expert_load[layer][slot][e] += 1;
            }
            let take = if self.all_slots { sel.len() } else { sel.len().min(1) };
            let counts = self
                .concept_experts
                .entry((layer, rec.modality[t], rec.concepts[t]))
                .or_insert_with(|| vec![0; self.num_experts]);
            for &(e, _) in &sel[..take] {
                counts[e] += 1;
            }
        }

        for m in MODALITIES {
            let slot = modality_slot(m);
            let values: Vec<f64> = rec
                .output
                .rpv
                .iter()
                .zip(&rec.modality)
                .filter(|(_, &mm)| mm == m)
                .map(|(&r, _)| r)
                .collect();
            let hist = rpv_histogram(&values, RPV_BIN_WIDTH, self.num_experts)?;
            self.rpv_histogram[layer][slot]
                .iter_mut()
                .zip(hist)
                .for_each(|(a, b)| *a += b);
            self.rpv_sum[slot].push(values.iter().sum::<f64>());
            self.rpv_count[slot] += values.len() as u64;
        }

        let tails = classify_by_rpv(&rec.output.rpv, &rec.modality, TailSelector::Vtt);
        let (mut head, mut tail) = (0.0, 0.0);
        for ((&r, m), &is_tail) in rec.output.rpv.iter().zip(&rec.modality).zip(&tails) {
            if !m.is_vision() {
                continue;
            }
            if is_tail {
                tail += r;
                self.tail_count += 1;
            } else {
                head += r;
                self.head_count += 1;
            }
        }
        self.head_sum.push(head);
        self.tail_sum.push(tail);

        // Predictions are shared by all layers of a batch; count them once.
        if layer == 0 {
            if rec.predictions.len() != m || rec.labels.len() != m {
                return Err(Error::Contract(format!(
                    "router record (batch {}) lacks per-token predictions",
                    rec.batch
                )));
            }
            for t in 0..m {
                let hit = u64::from(rec.predictions[t] == rec.labels[t]);
                self.correct[0] += hit;
                self.seen[0] += 1;
                if rec.modality[t].is_vision() {
                    let group = if rec.background_concepts.contains(&rec.concepts[t]) { 1 } else { 2 };
                    self.correct[group] += hit;
                    self.seen[group] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        self.ensure_layer(other.expert_load.len().saturating_sub(1));
        for (l, loads) in other.expert_load.iter().enumerate() {
            for s in 0..2 {
                self.expert_load[l][s]
                    .iter_mut()
                    .zip(&loads[s])
                    .for_each(|(a, b)| *a += b);
                self.rpv_histogram[l][s]
                    .iter_mut()
                    .zip(&other.rpv_histogram[l][s])
                    .for_each(|(a, b)| *a += b);
            }
        }
        for s in 0..2 {
            self.rpv_sum[s].extend_from_slice(&other.rpv_sum[s]);
            self.rpv_count[s] += other.rpv_count[s];
        }
        self.head_sum.extend_from_slice(&other.head_sum);
        self.head_count += other.head_count;
        self.tail_sum.extend_from_slice(&other.tail_sum);
        self.tail_count += other.tail_count;
        for (key, counts) in &other.concept_experts {
            let entry = self
                .concept_experts
                .entry(*key)
                .or_insert_with(|| vec![0; self.num_experts]);
            entry.iter_mut().zip(counts).for_each(|(a, b)| *a += b);
        }
        for i in 0..3 {
            self.correct[i] += other.correct[i];
            self.seen[i] += other.seen[i];
        }
    }

    pub fn finish(&self, num_layers: usize) -> RunStats {
        let mut acc = self.clone();
        if num_layers > 0 {
            acc.ensure_layer(num_layers - 1);
        }
        let specialization = acc
            .concept_experts
            .iter()
            .map(|(&(layer, modality, concept), counts)| SpecializationEntry {
                layer,
                modality,
                concept,
                tokens: counts.iter().sum(),
                entropy_bits: entropy_bits(counts),
            })
            .collect();
        let vision_tokens = acc.head_count + acc.tail_count;
        RunStats {
            num_layers: acc.expert_load.len(),
            num_experts: acc.num_experts,
            expert_load: acc.expert_load.clone(),
            rpv_histogram: acc.rpv_histogram.clone(),
            mean_rpv_head: ratio(canonical_sum(&acc.head_sum), acc.head_count),
            mean_rpv_tail: ratio(canonical_sum(&acc.tail_sum), acc.tail_count),
            mean_rpv_vision: ratio(canonical_sum(&acc.rpv_sum[0]), acc.rpv_count[0]),
            mean_rpv_language: ratio(canonical_sum(&acc.rpv_sum[1]), acc.rpv_count[1]),
            tail_fraction: ratio(acc.tail_count as f64, vision_tokens),
            specialization,
            accuracy_overall: ratio(acc.correct[0] as f64, acc.seen[0]),
            accuracy_head_concepts: ratio(acc.correct[1] as f64, acc.seen[1]),
            accuracy_tail_concepts: ratio(acc.correct[2] as f64, acc.seen[2]),
        }
    }
}

/// Sum in ascending order, so the result does not depend on input order.
fn canonical_sum(parts: &[f64]) -> f64 {
    let mut v = parts.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Statistics over a full set of router records.
pub fn compute_stats(
    records: &[RouterRecord],
    num_experts: usize,
    num_layers: usize,
    all_slots: bool,
) -> Result<RunStats> {
    let mut acc = StatsAccumulator::new(num_experts, all_slots);
    for rec in records {
        acc.add(rec)?;
    }
    Ok(acc.finish(num_layers))
}

pub fn write_router_log<W: Write>(records: &[RouterRecord], mut out: W) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_router_log<R: BufRead>(input: R) -> Result<Vec<RouterRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Recomputes statistics from a router log alone.
pub fn stats_from_log(records: &[RouterRecord], all_slots: bool) -> Result<RunStats> {
    let Some(first) = records.first() else {
        return Err(Error::Contract("router log is empty".to_string()));
    };
    let layers = records.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    compute_stats(records, first.num_experts, layers, all_slots)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_degenerate_and_one_hot() {
        let h = rpv_histogram(&[0.0; 5], 0.01, 4).unwrap();
        assert_eq!(h[0], 5);
        assert_eq!(h.iter().sum::<u64>(), 5);
        assert_eq!(h.len(), 19);

        let h = rpv_histogram(&[0.1875; 3], 0.01, 4).unwrap();
        assert_eq!(h[18], 3);
        assert_eq!(h.iter().sum::<u64>(), 3);
    }

    #[test]
    fn histogram_top_bin_is_closed() {
        // K = 2: max 0.25 is exactly a bin edge.
        let h = rpv_histogram(&[0.25, 0.2499, 0.0], 0.01, 2).unwrap();
        assert_eq!(h.len(), 25);
        assert_eq!(h[24], 2);
    }

    #[test]
    fn histogram_rejects_negative() {
        assert!(rpv_histogram(&[-0.01], 0.01, 4).is_err());
        assert!(rpv_histogram(&[0.0], 0.0, 4).is_err());
    }

    #[test]
    fn tail_fraction_cases() {
        let v = [Modality::Vision; 3];
        assert_eq!(tail_fraction(&[false, false, true], &v), 1.0 / 3.0);
        assert_eq!(tail_fraction(&[false; 3], &v), 0.0);
        assert_eq!(tail_fraction(&[false; 2], &[Modality::Language; 2]), 0.0);
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy_bits(&[7, 0, 0, 0]), 0.0);
        assert!((entropy_bits(&[3, 3, 3, 3]) - 2.0).abs() < 1e-15);
        assert!((entropy_bits(&[5, 5, 0, 0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn specialization_uses_top1() {
        let sel = vec![vec![0, 1], vec![0, 2], vec![1, 0], vec![3, 2]];
        let labels = [5, 5, 7, 7];
        let s = specialization_score(&sel, &labels, 4, false);
        assert_eq!(s[&5], 0.0);
        assert!((s[&7] - 1.0).abs() < 1e-15);
        assert!(!s.contains_key(&6));
    }

    #[test]
    fn max_rpv_closed_form() {
        assert_eq!(max_rpv(2), 0.25);
        assert_eq!(max_rpv(4), 0.1875);
        assert_eq!(max_rpv(8), 7.0 / 64.0);
    }
}
