//! Query generation by masked, noise-perturbed autoencoding.
//!
//! The encoder maps a query to a single latent vector
//! `z = mean_i tanh(E[x_i] + P[i])`. The decoder reads every output position
//! independently: `logits_j = W2 tanh(W1 [z; Q[j]] + b1) + b2`, with [PAD]
//! as the target past the end of the query. Generation perturbs `z` with
//! isotropic Gaussian noise and decodes greedily.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::checkpoint::affine_shapes;
use crate::encoders::{Affine, Checkpointable, FIRST_WORD_ID, MASK, PAD};
use crate::distill::{lr_at, AdamW, Batcher, ParamGroup, TrainConfig};
use crate::error::{Error, Result};
use crate::numerics::{axpy, derive_seed, log_sum_exp, stable_softmax, Mat, Rng};

/// Minimum number of training queries.
pub const MIN_QUERIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub latent: usize,
    pub decoder_hidden: usize,
    pub position_dim: usize,
    /// Output length `M_a`; 0 means the longest training query.
    pub max_len: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Denoising noise applied to the latent during training.
    pub train_sigma: f64,
    /// Denoising mask rate applied to inputs during training.
    pub train_mask: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            latent: 64,
            decoder_hidden: 128,
            position_dim: 16,
            max_len: 0,
            steps: 3000,
            batch_size: 32,
            lr: 3e-3,
            train_sigma: 0.1,
            train_mask: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderParams {
    pub vocab_size: usize,
    pub max_len: usize,
    /// Encoder token embeddings, `V × latent`.
    pub tok_emb: Mat,
    /// Encoder position embeddings, `M × latent`.
    pub enc_pos: Mat,
    /// Decoder position embeddings, `M × position_dim`.
    pub dec_pos: Mat,
    pub hidden: Affine,
    pub output: Affine,
}

impl Checkpointable for AutoencoderParams {
    const KIND: &'static str = "autoencoder";

    fn pooling(&self) -> String {
        "Mean".to_string()
    }

    fn shapes(&self) -> BTreeMap<String, [usize; 2]> {
        let mut m = BTreeMap::new();
        m.insert("tok_emb".into(), [self.tok_emb.rows(), self.tok_emb.cols()]);
        m.insert("enc_pos".into(), [self.enc_pos.rows(), self.enc_pos.cols()]);
        m.insert("dec_pos".into(), [self.dec_pos.rows(), self.dec_pos.cols()]);
        affine_shapes("hidden", &self.hidden, &mut m);
        affine_shapes("output", &self.output, &mut m);
        m
    }
}

struct Pass {
    input: Vec<u32>,
    u: Mat,
    /// Per position: decoder input, hidden activation, softmax.
    ctx: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    loss: f64,
}

impl AutoencoderParams {
    pub fn init(vocab_size: usize, max_len: usize, cfg: &AutoencoderConfig, rng: &mut Rng) -> Self {
        let std = 1.0 / (cfg.latent as f64).sqrt();
        Self {
            vocab_size,
            max_len,
            tok_emb: Mat::gaussian(vocab_size, cfg.latent, std, rng),
            enc_pos: Mat::gaussian(max_len, cfg.latent, std, rng),
            dec_pos: Mat::gaussian(max_len, cfg.position_dim, 1.0, rng),
            hidden: Affine {
                w: Mat::xavier(cfg.decoder_hidden, cfg.latent + cfg.position_dim, rng),
                b: vec![0.0; cfg.decoder_hidden],
            },
            output: Affine::zeros(cfg.decoder_hidden, vocab_size),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.tok_emb.cols()
    }

    fn zeros_like(&self) -> Self {
        Self {
            vocab_size: self.vocab_size,
            max_len: self.max_len,
            tok_emb: Mat::zeros(self.tok_emb.rows(), self.tok_emb.cols()),
            enc_pos: Mat::zeros(self.enc_pos.rows(), self.enc_pos.cols()),
            dec_pos: Mat::zeros(self.dec_pos.rows(), self.dec_pos.cols()),
            hidden: self.hidden.zeros_like(),
            output: self.output.zeros_like(),
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = vec![
            self.tok_emb.as_slice(),
            self.enc_pos.as_slice(),
            self.dec_pos.as_slice(),
        ];
        out.extend(self.hidden.params());
        out.extend(self.output.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.tok_emb.as_mut_slice(),
            self.enc_pos.as_mut_slice(),
            self.dec_pos.as_mut_slice(),
        ];
        out.extend(self.hidden.params_mut());
        out.extend(self.output.params_mut());
        out
    }

    fn check_tokens(&self, x: &[u32]) -> Result<()> {
        if let Some(&t) = x.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::OutOfVocabulary(t));
        }
        Ok(())
    }

    /// Latent code of `x` (truncated to `max_len`).
    pub fn encode(&self, x: &[u32]) -> Result<Vec<f64>> {
        self.check_tokens(x)?;
        Ok(self.encode_inner(x).1)
    }

    fn encode_inner(&self, x: &[u32]) -> (Mat, Vec<f64>) {
        let x = &x[..x.len().min(self.max_len)];
        let l = self.latent_dim();
        let mut u = Mat::zeros(x.len(), l);
        let mut z = vec![0.0; l];
        for (i, &t) in x.iter().enumerate() {
            let row = u.row_mut(i);
            for ((r, e), p) in row
                .iter_mut()
                .zip(self.tok_emb.row(t as usize))
                .zip(self.enc_pos.row(i))
            {
                *r = (e + p).tanh();
            }
            axpy(1.0 / x.len() as f64, row, &mut z);
        }
        (u, z)
    }

    fn decoder_input(&self, z: &[f64], j: usize) -> Vec<f64> {
        let mut c = z.to_vec();
        c.extend_from_slice(self.dec_pos.row(j));
        c
    }

    /// Output logits for every position given a latent code.
    pub fn decode_logits(&self, z: &[f64]) -> Result<Vec<Vec<f64>>> {
        (0..self.max_len)
            .map(|j| {
                let mut h = self.hidden.apply(&self.decoder_input(z, j))?;
                h.iter_mut().for_each(|v| *v = v.tanh());
                self.output.apply(&h)
            })
            .collect()
    }

    /// Greedy decoding restricted to [PAD] and ordinary words; output stops
    /// at the first [PAD].
    pub fn decode(&self, z: &[f64]) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for logits in self.decode_logits(z)? {
            let mut best = PAD;
            let mut best_v = logits[PAD as usize];
            for (id, &v) in logits.iter().enumerate().skip(FIRST_WORD_ID as usize) {
                if v > best_v {
                    best = id as u32;
                    best_v = v;
                }
            }
            if best == PAD {
                break;
            }
            out.push(best);
        }
        Ok(out)
    }

    /// Reconstruction with no mask and no noise.
    pub fn round_trip(&self, x: &[u32]) -> Result<Vec<u32>> {
        self.decode(&self.encode(x)?)
    }

    fn forward(&self, input: &[u32], target: &[u32], noise: &[f64]) -> Result<Pass> {
        let input = input[..input.len().min(self.max_len)].to_vec();
        let (u, mut z) = self.encode_inner(&input);
        axpy(1.0, noise, &mut z);
        let mut ctx = Vec::with_capacity(self.max_len);
        let mut hs = Vec::with_capacity(self.max_len);
        let mut probs = Vec::with_capacity(self.max_len);
        let mut loss = 0.0;
        for j in 0..self.max_len {
            let c = self.decoder_input(&z, j);
            let mut h = self.hidden.apply(&c)?;
            h.iter_mut().for_each(|v| *v = v.tanh());
            let logits = self.output.apply(&h)?;
            let t = target.get(j).copied().unwrap_or(PAD) as usize;
            loss += log_sum_exp(&logits)? - logits[t];
            probs.push(stable_softmax(&logits)?);
            ctx.push(c);
            hs.push(h);
        }
        Ok(Pass {
            input,
            u,
            ctx,
            h: hs,
            probs,
            loss: loss / self.max_len as f64,
        })
    }

    fn backward(&self, pass: &Pass, target: &[u32], scale: f64, g: &mut Self) {
        let l = self.latent_dim();
        let inv_m = scale / self.max_len as f64;
        let mut dz = vec![0.0; l];
        for j in 0..self.max_len {
            let t = target.get(j).copied().unwrap_or(PAD) as usize;
            let mut dlogits: Vec<f64> = pass.probs[j].iter().map(|p| p * inv_m).collect();
            dlogits[t] -= inv_m;
            let dh = self.output.backward(&pass.h[j], &dlogits, &mut g.output);
            let da: Vec<f64> = dh
                .iter()
                .zip(&pass.h[j])
                .map(|(d, h)| d * (1.0 - h * h))
                .collect();
            let dc = self.hidden.backward(&pass.ctx[j], &da, &mut g.hidden);
            axpy(1.0, &dc[..l], &mut dz);
            axpy(1.0, &dc[l..], g.dec_pos.row_mut(j));
        }
        let n = pass.input.len();
        for (i, &t) in pass.input.iter().enumerate() {
            let du: Vec<f64> = dz
                .iter()
                .zip(pass.u.row(i))
                .map(|(d, u)| d / n as f64 * (1.0 - u * u))
                .collect();
            axpy(1.0, &du, g.tok_emb.row_mut(t as usize));
            axpy(1.0, &du, g.enc_pos.row_mut(i));
        }
    }

    /// Mean reconstruction loss over a batch and its gradient.
    fn batch_grad(&self, items: &[(Vec<u32>, Vec<u32>, Vec<f64>)]) -> Result<(f64, Self)> {
        let scale = 1.0 / items.len() as f64;
        let partials = items
            .par_chunks(8)
            .map(|chunk| {
                let mut g = self.zeros_like();
                let mut loss = 0.0;
                for (input, target, noise) in chunk {
                    let pass = self.forward(input, target, noise)?;
                    loss += pass.loss * scale;
                    self.backward(&pass, target, scale, &mut g);
                }
                Ok((loss, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = 0.0;
        let mut grads = self.zeros_like();
        for (l, g) in &partials {
            total += l;
            for (a, b) in grads.params_mut().into_iter().zip(g.params()) {
                axpy(1.0, b, a);
            }
        }
        Ok((total, grads))
    }
}

/// Replaces each token by [MASK] with probability `p`.
pub fn mask_tokens(x: &[u32], p: f64, rng: &mut Rng) -> Vec<u32> {
    x.iter()
        .map(|&t| if p > 0.0 && rng.bernoulli(p) { MASK } else { t })
        .collect()
}

/// Fraction of queries reproduced exactly by a clean round trip.
pub fn round_trip_accuracy(ae: &AutoencoderParams, queries: &[Vec<u32>]) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::EmptyVector);
    }
    let hits = queries
        .par_iter()
        .map(|q| {
            let q = &q[..q.len().min(ae.max_len)];
            Ok(usize::from(ae.round_trip(q)? == q))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / queries.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderHistory {
    /// `(step, batch loss)` for every step.
    pub losses: Vec<(usize, f64)>,
    /// `(step, round-trip accuracy)` at each checkpoint.
    pub accuracy: Vec<(usize, f64)>,
}

/// Trains the denoising autoencoder on content token sequences.
/// Accuracy is recorded every `checkpoint_every` steps (0 disables).
pub fn train_autoencoder(
    queries: &[Vec<u32>],
    vocab_size: usize,
    cfg: &AutoencoderConfig,
    checkpoint_every: usize,
) -> Result<(AutoencoderParams, AutoencoderHistory)> {
    if queries.len() < MIN_QUERIES {
        return Err(Error::invalid(format!(
            "autoencoder training needs at least {MIN_QUERIES} queries, got {}",
            queries.len()
        )));
    }
    let max_len = if cfg.max_len == 0 {
        queries.iter().map(Vec::len).max().unwrap_or(1).max(1)
    } else {
        cfg.max_len
    };
    let train = TrainConfig {
        batch_size: cfg.batch_size,
        steps: cfg.steps,
        lr: cfg.lr,
        weight_decay: 0.0,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    train.validate()?;
    let mut ae = AutoencoderParams::init(vocab_size, max_len, cfg, &mut Rng::derived(cfg.seed, "init"));
    for q in queries {
        ae.check_tokens(q)?;
    }
    let mut opt = AdamW::new(&train);
    let mut batcher = Batcher::new(queries.len(), Rng::derived(cfg.seed, "batching"));
    let mut noise_rng = Rng::derived(cfg.seed, "augmentation");
    let mut history = AutoencoderHistory::default();
    for step in 0..cfg.steps {
        let items: Vec<(Vec<u32>, Vec<u32>, Vec<f64>)> = batcher
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| {
                let target = queries[i][..queries[i].len().min(max_len)].to_vec();
                let input = mask_tokens(&target, cfg.train_mask, &mut noise_rng);
                let noise = (0..ae.latent_dim())
                    .map(|_| cfg.train_sigma * noise_rng.normal())
                    .collect();
                (input, target, noise)
            })
            .collect();
        let (loss, grads) = ae.batch_grad(&items)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let lr = lr_at(step, &train)?;
        let groups = ae
            .params_mut()
            .into_iter()
            .zip(grads.params())
            .map(|(param, grad)| ParamGroup {
                param,
                grad,
                decay: false,
            })
            .collect();
        opt.step(groups, lr).map_err(|_| Error::Diverged { step })?;
        history.losses.push((step, loss));
        if checkpoint_every > 0 && (step + 1) % checkpoint_every == 0 {
            history.accuracy.push((step + 1, round_trip_accuracy(&ae, queries)?));
        }
    }
    Ok((ae, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedQuery {
    pub source_query_id: u32,
    pub generated_tokens: Vec<u32>,
    pub sigma: f64,
    pub mask_prob: f64,
    pub seed: u64,
}

/// `n` perturbed reconstructions of `x`: each masks the input, adds
/// `N(0, σ²I)` noise to the latent code and decodes greedily.
pub fn generate_queries(
    ae: &AutoencoderParams,
    x: &[u32],
    n: usize,
    sigma: f64,
    mask_prob: f64,
    seed: u64,
) -> Result<Vec<Vec<u32>>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma must be finite and non-negative"));
    }
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::invalid("mask_prob must be in [0, 1]"));
    }
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let masked = mask_tokens(x, mask_prob, &mut rng);
            let mut z = ae.encode(&masked)?;
            if sigma > 0.0 {
                z.iter_mut().for_each(|v| *v += sigma * rng.normal());
            }
            ae.decode(&z)
        })
        .collect()
}

/// Generates `n` queries from each `(query_id, tokens)` source. Each source
/// draws from its own stream derived from `seed` and its id.
pub fn augment_queries(
    ae: &AutoencoderParams,
    sources: &[(u32, &[u32])],
    n: usize,
    sigma: f64,
    mask_prob: f64,
    seed: u64,
) -> Result<Vec<GeneratedQuery>> {
    let per = sources
        .par_iter()
        .map(|&(id, x)| {
            let s = derive_seed(seed, &format!("query-{id}"));
            let out = generate_queries(ae, x, n, sigma, mask_prob, s)?;
            Ok(out
                .into_iter()
                .map(|generated_tokens| GeneratedQuery {
                    source_query_id: id,
                    generated_tokens,
                    sigma,
                    mask_prob,
                    seed: s,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Uniformly random word sequences with the source lengths, used as the
/// unstructured baseline for augmentation.
pub fn random_queries(
    vocab_size: usize,
    sources: &[(u32, &[u32])],
    n: usize,
    seed: u64,
) -> Result<Vec<GeneratedQuery>> {
    if vocab_size <= FIRST_WORD_ID as usize {
        return Err(Error::invalid("vocabulary has no ordinary words"));
    }
    let words = vocab_size - FIRST_WORD_ID as usize;
    let mut out = Vec::with_capacity(sources.len() * n);
    for &(id, x) in sources {
        let s = derive_seed(seed, &format!("random-{id}"));
        let mut rng = Rng::new(s);
        for _ in 0..n {
            out.push(GeneratedQuery {
                source_query_id: id,
                generated_tokens: (0..x.len().max(1))
                    .map(|_| FIRST_WORD_ID + rng.below(words) as u32)
                    .collect(),
                sigma: 0.0,
                mask_prob: 0.0,
                seed: s,
            });
        }
    }
    Ok(out)
}

pub fn generated_to_jsonl(items: &[GeneratedQuery]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for g in items {
        serde_json::to_writer(&mut out, g)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn generated_from_jsonl(text: &str, path: &std::path::Path) -> Result<Vec<GeneratedQuery>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn tiny() -> AutoencoderParams {
        let cfg = AutoencoderConfig {
            latent: 4,
            decoder_hidden: 5,
            position_dim: 2,
            ..AutoencoderConfig::default()
        };
        let mut ae = AutoencoderParams::init(12, 4, &cfg, &mut Rng::new(0));
        let mut rng = Rng::new(1);
        ae.output.w = Mat::gaussian(12, 5, 0.5, &mut rng);
        ae
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let base = tiny();
        let items = vec![
            (vec![5, 3, 7], vec![5, 6, 7], vec![0.1, -0.2, 0.0, 0.3]),
            (vec![9], vec![9], vec![0.0; 4]),
        ];
        let flat = |a: &AutoencoderParams| -> Vec<f64> { a.params().concat() };
        let err = grad_check(
            |x| {
                let mut a = base.clone();
                let mut off = 0;
                for p in a.params_mut() {
                    let n = p.len();
                    p.copy_from_slice(&x[off..off + n]);
                    off += n;
                }
                let (l, g) = a.batch_grad(&items).unwrap();
                (l, flat(&g))
            },
            &flat(&base),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn untrained_near_chance() {
        let ae = tiny();
        let logits = ae.decode_logits(&ae.encode(&[5, 6]).unwrap()).unwrap();
        let zero = AutoencoderParams {
            output: Affine::zeros(5, 12),
            ..ae
        };
        let z = zero.encode(&[5, 6]).unwrap();
        for l in zero.decode_logits(&z).unwrap() {
            let p = stable_softmax(&l).unwrap();
            assert!(p.iter().all(|x| (x - 1.0 / 12.0).abs() < 1e-12));
        }
        assert_eq!(logits.len(), 4);
    }

    #[test]
    fn no_perturbation_equals_round_trip() {
        let ae = tiny();
        let x = [5, 6, 7];
        let g = generate_queries(&ae, &x, 2, 0.0, 0.0, 3).unwrap();
        let rt = ae.round_trip(&x).unwrap();
        assert!(g.iter().all(|q| *q == rt));
    }

    #[test]
    fn deterministic_and_bounded() {
        let ae = tiny();
        let a = generate_queries(&ae, &[5, 6, 7], 2, 0.1, 0.1, 11).unwrap();
        let b = generate_queries(&ae, &[5, 6, 7], 2, 0.1, 0.1, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        for q in &a {
            assert!(q.len() <= ae.max_len);
            assert!(!q.contains(&PAD));
        }
        assert!(generate_queries(&ae, &[5], 1, -1.0, 0.0, 0).is_err());
        assert!(generate_queries(&ae, &[5], 1, 0.0, 1.5, 0).is_err());
    }

    #[test]
    fn too_few_queries() {
        let q = vec![vec![5u32]; 10];
        assert!(train_autoencoder(&q, 12, &AutoencoderConfig::default(), 0).is_err());
    }
}
