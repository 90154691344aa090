//! Synthetic multimodal token batches.
//!
//! Language concepts are drawn uniformly. Vision concepts follow a Zipf law
//! whose rank-0 concept plays the dense, low-information background; the
//! rare high ranks are the informative foreground tail.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{csv_writer, fmt_real};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Language,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Language => "language",
        }
    }

    pub fn is_vision(self) -> bool {
        self == Modality::Vision
    }
}

/// Parameters of the synthetic concept world and the per-batch token mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub d: usize,
    pub vision_concepts: usize,
    pub language_concepts: usize,
    pub zipf_exponent: f64,
    pub noise_sigma: f64,
    pub background_concepts: Vec<usize>,
    pub n_vision: usize,
    pub n_language: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            d: 32,
            vision_concepts: 16,
            language_concepts: 16,
            zipf_exponent: 1.2,
            noise_sigma: 0.1,
            background_concepts: vec![0],
            n_vision: 256,
            n_language: 64,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::invalid("world.d", "feature width must be positive"));
        }
        if self.vision_concepts == 0 || self.language_concepts == 0 {
            return Err(Error::invalid(
                "world.vision_concepts",
                "each modality needs at least one concept",
            ));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::invalid("world.zipf_exponent", "must be finite and >= 0"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("world.noise_sigma", "must be finite and >= 0"));
        }
        if let Some(&c) = self
            .background_concepts
            .iter()
            .find(|&&c| c >= self.vision_concepts)
        {
            return Err(Error::invalid(
                "world.background_concepts",
                format!("concept {c} is not a vision concept"),
            ));
        }
        Ok(())
    }

    /// Total number of classes: vision concepts first, then language concepts.
    pub fn num_classes(&self) -> usize {
        self.vision_concepts + self.language_concepts
    }
}

/// Normalized Zipf mass `P(r) ∝ (r + 1)^(−s)` over ranks `0..c`.
pub fn zipf_mass(c: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..c).map(|r| ((r + 1) as f64).powf(-s)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Draws ranks from a truncated Zipf law by inverse-CDF lookup.
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    index: WeightedIndex<f64>,
}

impl ZipfSampler {
    pub fn new(c: usize, s: f64) -> Result<Self> {
        if c == 0 || !(s >= 0.0) {
            return Err(Error::invalid("zipf", format!("need C >= 1 and s >= 0, got C={c}, s={s}")));
        }
        let index = WeightedIndex::new(zipf_mass(c, s))
            .map_err(|e| Error::invalid("zipf", e.to_string()))?;
        Ok(Self { index })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index.sample(rng)
    }
}

/// One-shot Zipf draw; prefer [`ZipfSampler`] in loops.
pub fn zipf_sample<R: Rng + ?Sized>(c: usize, s: f64, rng: &mut R) -> Result<usize> {
    Ok(ZipfSampler::new(c, s)?.sample(rng))
}

/// Fixed concept means plus the sampling laws over them.
#[derive(Debug, Clone)]
pub struct ConceptWorld {
    config: WorldConfig,
    /// Unit-norm means: vision concepts `0..C_v`, then language concepts.
    means: Vec<Vec<f64>>,
    vision_sampler: ZipfSampler,
    seed: u64,
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

fn unit_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl ConceptWorld {
    /// Draws concept means uniformly on the unit sphere, redrawing any mean
    /// that lands within `4σ` of an earlier one.
    pub fn new(config: WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = config.num_classes();
        let min_dist = 4.0 * config.noise_sigma;
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(total);
        while means.len() < total {
            let mut attempts = 0;
            let candidate = loop {
                let v = unit_vector(config.d, &mut rng);
                if means.iter().all(|m| distance(m, &v) > min_dist) {
                    break v;
                }
                attempts += 1;
                if attempts >= MAX_PLACEMENT_ATTEMPTS {
                    return Err(Error::invalid(
                        "world",
                        format!(
                            "cannot place {total} separable concepts in d={} with sigma={}",
                            config.d, config.noise_sigma
                        ),
                    ));
                }
            };
            means.push(candidate);
        }
        let vision_sampler = ZipfSampler::new(config.vision_concepts, config.zipf_exponent)?;
        Ok(Self {
            config,
            means,
            vision_sampler,
            seed,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mean(&self, modality: Modality, concept: usize) -> &[f64] {
        &self.means[class_index(&self.config, modality, concept)]
    }

    pub fn is_background(&self, concept: usize) -> bool {
        self.config.background_concepts.contains(&concept)
    }

    /// Vision tokens first, then language tokens.
    pub fn generate_batch<R: Rng + ?Sized>(
        &self,
        n_vision: usize,
        n_language: usize,
        rng: &mut R,
    ) -> TokenBatch {
        let d = self.config.d;
        let m = n_vision + n_language;
        let mut modality = Vec::with_capacity(m);
        let mut concepts = Vec::with_capacity(m);
        for _ in 0..n_vision {
            modality.push(Modality::Vision);
            concepts.push(self.vision_sampler.sample(rng));
        }
        for _ in 0..n_language {
            modality.push(Modality::Language);
            concepts.push(rng.random_range(0..self.config.language_concepts));
        }
        let mut features = Vec::with_capacity(m * d);
        for (&md, &c) in modality.iter().zip(&concepts) {
            let mean = self.mean(md, c);
            for &mu in mean {
                let noise = if self.config.noise_sigma > 0.0 {
                    self.config.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                features.push(mu + noise);
            }
        }
        TokenBatch {
            features: Tensor::new(vec![m, d], features).expect("m*d features"),
            modality,
            concepts,
            seed: None,
        }
    }

    /// Batch drawn from a fresh generator seeded with `seed`.
    pub fn batch_from_seed(&self, n_vision: usize, n_language: usize, seed: u64) -> TokenBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut batch = self.generate_batch(n_vision, n_language, &mut rng);
        batch.seed = Some(seed);
        batch
    }

    pub fn default_batch(&self, seed: u64) -> TokenBatch {
        self.batch_from_seed(self.config.n_vision, self.config.n_language, seed)
    }
}

/// Global class index of a concept: vision concepts first.
pub fn class_index(config: &WorldConfig, modality: Modality, concept: usize) -> usize {
    match modality {
        Modality::Vision => concept,
        Modality::Language => config.vision_concepts + concept,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    /// `m×d` token features.
    pub features: Tensor,
    pub modality: Vec<Modality>,
    /// Concept index within the token's own modality.
    pub concepts: Vec<usize>,
    pub seed: Option<u64>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.is_empty()
    }

    pub fn vision_count(&self) -> usize {
        self.modality.iter().filter(|m| m.is_vision()).count()
    }

    pub fn class_labels(&self, config: &WorldConfig) -> Vec<usize> {
        self.modality
            .iter()
            .zip(&self.concepts)
            .map(|(&m, &c)| class_index(config, m, c))
            .collect()
    }

    /// Writes `token_id,modality,concept,f0..f{d-1}`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let d = self.features.cols();
        let mut w = csv_writer(out);
        let mut header = vec!["token_id".to_string(), "modality".into(), "concept".into()];
        header.extend((0..d).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for (i, row) in self.features.iter_rows().enumerate().take(self.len()) {
            let mut rec = vec![
                i.to_string(),
                self.modality[i].as_str().to_string(),
                self.concepts[i].to_string(),
            ];
            rec.extend(row.iter().map(|&x| fmt_real(x)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
