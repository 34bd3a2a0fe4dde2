//! Synthetic CTC task and a plain gradient-descent trainer.
//!
//! Each token owns an 80-bin sinusoid template; an utterance is a run of
//! tokens, each held for 8 to 16 noisy frames, with a stretch of noise-only
//! frames before, between and after the tokens. The gaps keep every target
//! emittable after the encoder's 8× subsampling.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctc::{ctc_loss_var, edit_distance, greedy_decode, min_frames};
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{config_err, Error, Result};
use crate::graph::Graph;
use crate::nn::Module;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    /// Non-blank symbols; CTC outputs are `vocab + 1` wide.
    pub vocab: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    /// Noise-only frames before, between and after tokens.
    pub gap_frames: usize,
    pub features: usize,
    /// Half-width of the uniform frame noise.
    pub noise: f64,
    templates: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl ToyTask {
    pub fn new(seed: u64) -> Self {
        Self::with_vocab(8, seed)
    }

    pub fn with_vocab(vocab: usize, seed: u64) -> Self {
        let features = 80;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let templates = (1..=vocab)
            .map(|k| {
                let phase = rng.gen_range(0.0..core::f64::consts::TAU);
                (0..features)
                    .map(|f| libm::sin(core::f64::consts::TAU * k as f64 * f as f64 / features as f64 + phase))
                    .collect()
            })
            .collect();
        Self {
            vocab,
            min_tokens: 3,
            max_tokens: 8,
            min_frames_per_token: 8,
            max_frames_per_token: 16,
            gap_frames: 8,
            features,
            noise: 0.5,
            templates,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(config_err("toy vocab needs at least 2 symbols to avoid repeats"));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(config_err("toy token range must satisfy 1 <= min <= max"));
        }
        if self.min_frames_per_token == 0 || self.min_frames_per_token > self.max_frames_per_token {
            return Err(config_err("toy frames-per-token range must satisfy 1 <= min <= max"));
        }
        if self.min_frames_per_token + self.gap_frames < 16 {
            return Err(config_err(
                "token plus gap must span >= 16 frames so targets survive 8x subsampling",
            ));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Utterance {
        let n = rng.gen_range(self.min_tokens..=self.max_tokens);
        let mut labels: Vec<usize> = Vec::with_capacity(n);
        while labels.len() < n {
            let k = rng.gen_range(1..=self.vocab);
            if labels.last() != Some(&k) {
                labels.push(k);
            }
        }
        let mut rows: Vec<f64> = Vec::new();
        let mut push = |rng: &mut R, template: Option<&[f64]>, count: usize| {
            for _ in 0..count {
                for f in 0..self.features {
                    let base = template.map_or(0.0, |t| t[f]);
                    rows.push(base + rng.gen_range(-self.noise..=self.noise));
                }
            }
        };
        push(rng, None, self.gap_frames);
        for &k in &labels {
            let len = rng.gen_range(self.min_frames_per_token..=self.max_frames_per_token);
            push(rng, Some(&self.templates[k - 1]), len);
            push(rng, None, self.gap_frames);
        }
        let t = rows.len() / self.features;
        Utterance {
            features: Tensor::new(&[t, self.features], rows).expect("whole frames"),
            labels,
        }
    }

    pub fn batch(&self, size: usize, seed: u64) -> Vec<Utterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..size).map(|_| self.sample(&mut rng)).collect()
    }

    /// The miniature encoder used for training: dims 32/48/64, two blocks per
    /// stage, four heads, group sizes (3, 1, 1).
    pub fn model_config(&self) -> EncoderConfig {
        let mut c = EncoderConfig::preset("effconf-ctc-s").expect("preset exists");
        for (s, d) in c.stages.iter_mut().zip([32, 48, 64]) {
            s.blocks = 2;
            s.dim = d;
            s.heads = 4;
        }
        c.input_features = self.features;
        c.stem_channels = 8;
        c.output_vocab = Some(self.vocab + 1);
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub eval_every: usize,
    pub eval_size: usize,
    /// Stop at the first evaluation reaching this accuracy.
    pub target_accuracy: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            learning_rate: 0.1,
            clip_norm: 1.0,
            eval_every: 50,
            eval_size: 16,
            target_accuracy: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainRecord {
    pub step: usize,
    /// Mean training loss of the last batch; `None` before the first step.
    pub loss: Option<f64>,
    /// Held-out greedy token accuracy.
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    pub log: Vec<TrainRecord>,
    pub accuracy: f64,
    pub steps: usize,
}

/// `1 - edits / reference tokens` with greedy decoding, floored at 0.
pub fn token_accuracy(model: &EncoderModel, data: &[Utterance]) -> Result<f64> {
    let (mut edits, mut total) = (0usize, 0usize);
    for u in data {
        let g = Graph::inference();
        let out = model.forward(&g, &g.constant(u.features.clone()), None)?;
        let lp = out.log_probs.ok_or_else(|| config_err("model has no CTC head"))?;
        edits += edit_distance(&greedy_decode(lp.value()), &u.labels);
        total += u.labels.len();
    }
    Ok((1.0 - edits as f64 / total.max(1) as f64).max(0.0))
}

/// Mean CTC loss and parameter gradients (in `params()` order) over `batch`.
pub fn batch_gradients(model: &EncoderModel, batch: &[Utterance]) -> Result<(f64, Vec<Vec<f64>>)> {
    let params = model.params();
    let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for u in batch {
        let g = Graph::new();
        let out = model.forward(&g, &g.constant(u.features.clone()), None)?;
        let lp = out.log_probs.ok_or_else(|| config_err("model has no CTC head"))?;
        if min_frames(&u.labels) > out.out_length {
            return Err(config_err("toy utterance too short for the encoder"));
        }
        let (l, r) = ctc_loss_var(&g, &lp, &u.labels)?;
        loss += r.nll * scale;
        let gr = g.backward(&l)?;
        for (acc, p) in grads.iter_mut().zip(&params) {
            if let Some(t) = gr.wrt_param(p) {
                for (a, v) in acc.iter_mut().zip(t.data()) {
                    *a += v * scale;
                }
            }
        }
    }
    Ok((loss, grads))
}

/// Trains `config` on `task`; calls `on_record` at every evaluation.
pub fn train(
    task: &ToyTask,
    config: &EncoderConfig,
    tc: &TrainConfig,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    task.validate()?;
    if tc.batch == 0 || tc.eval_every == 0 || tc.eval_size == 0 {
        return Err(config_err("batch, eval_every and eval_size must be >= 1"));
    }
    let mut model = EncoderModel::build(config, tc.seed)?;
    let held_out = task.batch(tc.eval_size, tc.seed ^ 0x5eed_0fe7a1);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut log = Vec::new();
    let mut last_loss = None;
    let mut step = 0;
    let mut accuracy = token_accuracy(&model, &held_out)?;
    let record = TrainRecord {
        step: 0,
        loss: last_loss,
        accuracy,
    };
    on_record(&record);
    log.push(record);
    while step < tc.steps {
        if tc.target_accuracy.is_some_and(|t| accuracy >= t) {
            break;
        }
        let batch: Vec<Utterance> = (0..tc.batch).map(|_| task.sample(&mut rng)).collect();
        let (loss, grads) = batch_gradients(&model, &batch)?;
        step += 1;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        last_loss = Some(loss);
        let norm = libm::sqrt(grads.iter().flatten().map(|g| g * g).sum::<f64>());
        let factor = tc.learning_rate * if norm > tc.clip_norm { tc.clip_norm / norm } else { 1.0 };
        for (p, g) in model.params_mut().into_iter().zip(&grads) {
            for (w, d) in p.make_mut().data_mut().iter_mut().zip(g) {
                *w -= factor * d;
            }
        }
        if step % tc.eval_every == 0 || step == tc.steps {
            accuracy = token_accuracy(&model, &held_out)?;
            let record = TrainRecord {
                step,
                loss: last_loss,
                accuracy,
            };
            on_record(&record);
            log.push(record);
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        accuracy,
        steps: step,
    })
}
