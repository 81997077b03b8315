//! Fully connected VAE over fixed-length symbol strings.

use limo_chem::selfies::decode as decode_selfies;
use limo_chem::{Alphabet, MolGraph, SelfiesString};
use limo_tensor::nn::{assign_grads, BatchNorm, Binder, Linear};
use limo_tensor::{Adam, BatchStats, Graph, Param, Tensor, Var};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Kind};
use crate::error::{LimoError, Result};

/// Model dimensions. The decoder mirrors the encoder's hidden widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeDims {
    /// String length.
    pub n: usize,
    /// Alphabet size.
    pub d: usize,
    /// Latent size.
    pub m: usize,
    pub embed: usize,
    pub hidden: Vec<usize>,
}

impl VaeDims {
    pub fn desk() -> Self {
        VaeDims {
            n: limo_chem::selfies::DEFAULT_LENGTH,
            d: Alphabet::standard().len(),
            m: 64,
            embed: 64,
            hidden: vec![256; 4],
        }
    }

    pub fn paper() -> Self {
        VaeDims {
            n: limo_chem::selfies::DEFAULT_LENGTH,
            d: Alphabet::standard().len(),
            m: 1024,
            embed: 64,
            hidden: vec![2000, 1000, 1000, 1000],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = Alphabet::standard().len();
        if self.d != d {
            return Err(LimoError::InvalidInput(format!(
                "alphabet has {d} symbols, dims say {}",
                self.d
            )));
        }
        if self.n == 0
            || self.m == 0
            || self.embed == 0
            || self.hidden.is_empty()
            || self.hidden.contains(&0)
        {
            return Err(LimoError::InvalidInput(format!("degenerate dims {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
    pub recon_weight: f32,
    pub kl_weight: f32,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            epochs: 18,
            lr: 1e-4,
            batch: 128,
            seed: 0,
            recon_weight: 0.9,
            kl_weight: 0.1,
        }
    }
}

/// `n × d` per-position symbol probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolDistribution {
    n: usize,
    d: usize,
    probs: Vec<f32>,
}

impl SymbolDistribution {
    pub fn new(n: usize, d: usize, probs: Vec<f32>) -> Result<Self> {
        if probs.len() != n * d {
            return Err(LimoError::InvalidInput(format!(
                "{} probabilities for {n}x{d}",
                probs.len()
            )));
        }
        Ok(SymbolDistribution { n, d, probs })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.probs[i * self.d..(i + 1) * self.d]
    }

    /// Most likely symbol per position, lowest id on ties.
    pub fn argmax_ids(&self) -> Vec<u8> {
        argmax_rows(&self.probs, self.d)
    }
}

/// Row-wise argmax of a flat `[rows, d]` buffer, lowest index on ties.
pub fn argmax_rows(probs: &[f32], d: usize) -> Vec<u8> {
    probs
        .chunks(d)
        .map(|row| {
            let mut best = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}

pub fn argmax_symbols(y: &SymbolDistribution, alphabet: &Alphabet) -> Result<SelfiesString> {
    Ok(SelfiesString::from_ids(y.argmax_ids(), alphabet)?)
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    linear: Linear,
    norm: BatchNorm,
}

impl Block {
    fn new<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Block {
            linear: Linear::new(rng, inputs, outputs),
            norm: BatchNorm::new(outputs),
        }
    }

    fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        binder: &mut Binder,
        x: Var,
        stats: Option<&mut Vec<BatchStats>>,
    ) -> Result<Var> {
        let h = self.linear.forward(g, binder, x)?;
        let h = match stats {
            Some(stats) => {
                let (h, s) = self.norm.forward_train(g, binder, h)?;
                stats.push(s);
                h
            }
            None => self.norm.forward_eval(g, binder, h)?,
        };
        Ok(g.relu(h))
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    /// Mean per-string loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    dims: VaeDims,
    alphabet: Alphabet,
    embedding: Param,
    encoder: Vec<Block>,
    mu_head: Linear,
    logvar_head: Linear,
    decoder: Vec<Block>,
    output: Linear,
}

fn standard_normal(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// `count × m` matrix of i.i.d. standard normal draws.
pub fn sample_latents(count: usize, m: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(count, m, standard_normal(&mut rng, count * m)).expect("length from shape")
}

impl Vae {
    pub fn new(dims: VaeDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Param::new(
            Tensor::matrix(
                dims.d,
                dims.embed,
                standard_normal(&mut rng, dims.d * dims.embed),
            )
            .expect("length from shape"),
        );
        let mut encoder = Vec::new();
        let mut width = dims.n * dims.embed;
        for &h in &dims.hidden {
            encoder.push(Block::new(&mut rng, width, h));
            width = h;
        }
        let mu_head = Linear::new(&mut rng, width, dims.m);
        let logvar_head = Linear::new(&mut rng, width, dims.m);
        let mut decoder = Vec::new();
        let mut width = dims.m;
        for &h in dims.hidden.iter().rev() {
            decoder.push(Block::new(&mut rng, width, h));
            width = h;
        }
        let output = Linear::new(&mut rng, width, dims.n * dims.d);
        Ok(Vae {
            dims,
            alphabet: Alphabet::standard(),
            embedding,
            encoder,
            mu_head,
            logvar_head,
            decoder,
            output,
        })
    }

    pub fn dims(&self) -> &VaeDims {
        &self.dims
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    /// Flattened symbol ids of a batch, checking string lengths.
    fn batch_ids(&self, strings: &[&SelfiesString]) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(strings.len() * self.dims.n);
        for s in strings {
            if s.len() != self.dims.n {
                return Err(LimoError::InvalidInput(format!(
                    "string length {} but the model uses {}",
                    s.len(),
                    self.dims.n
                )));
            }
            ids.extend(s.ids().iter().map(|&i| i as usize));
        }
        Ok(ids)
    }

    /// Encoder heads `(mu, logvar)`, each `[batch, m]`.
    pub fn encoder_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        binder: &mut Binder,
        ids: &[usize],
        batch: usize,
        mut stats: Option<&mut Vec<BatchStats>>,
    ) -> Result<(Var, Var)> {
        let table = binder.bind(g, &self.embedding);
        let e = g.embedding(table, ids)?;
        let mut h = g.reshape(e, &[batch, self.dims.n * self.dims.embed])?;
        for block in &self.encoder {
            h = block.forward(g, binder, h, stats.as_deref_mut())?;
        }
        let mu = self.mu_head.forward(g, binder, h)?;
        let logvar = self.logvar_head.forward(g, binder, h)?;
        Ok((mu, logvar))
    }

    /// Output logits `[batch, n·d]`.
    pub fn decoder_logits<'a>(
        &'a self,
        g: &mut Graph<'a>,
        binder: &mut Binder,
        z: Var,
        mut stats: Option<&mut Vec<BatchStats>>,
    ) -> Result<Var> {
        let mut h = z;
        for block in &self.decoder {
            h = block.forward(g, binder, h, stats.as_deref_mut())?;
        }
        Ok(self.output.forward(g, binder, h)?)
    }

    /// Evaluation-mode decoder probabilities `[batch, n·d]`, softmax per position.
    pub fn decoder_probs<'a>(
        &'a self,
        g: &mut Graph<'a>,
        binder: &mut Binder,
        z: Var,
    ) -> Result<Var> {
        let batch = g.value(z).rows();
        let logits = self.decoder_logits(g, binder, z, None)?;
        let rows = g.reshape(logits, &[batch * self.dims.n, self.dims.d])?;
        let probs = g.softmax(rows)?;
        Ok(g.reshape(probs, &[batch, self.dims.n * self.dims.d])?)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = vec![&mut self.embedding];
        for b in &mut self.encoder {
            out.extend(b.linear.params_mut());
            out.extend(b.norm.params_mut());
        }
        out.extend(self.mu_head.params_mut());
        out.extend(self.logvar_head.params_mut());
        for b in &mut self.decoder {
            out.extend(b.linear.params_mut());
            out.extend(b.norm.params_mut());
        }
        out.extend(self.output.params_mut());
        out
    }

    fn norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .map(|b| &mut b.norm)
    }

    /// ELBO on a batch in training mode: `(w_r·NLL + w_kl·KL) / batch`.
    /// Returns the loss value, the parameter gradients and batchnorm statistics.
    fn train_step_grads(
        &self,
        batch: &[&SelfiesString],
        cfg: &VaeTrainConfig,
        eps: Tensor,
    ) -> Result<(f64, Vec<Option<Tensor>>, Vec<BatchStats>)> {
        let ids = self.batch_ids(batch)?;
        let b = batch.len();
        let mut g = Graph::new();
        let mut binder = Binder::trainable();
        let mut stats = Vec::new();
        let (mu, logvar) = self.encoder_graph(&mut g, &mut binder, &ids, b, Some(&mut stats))?;
        let half = g.scale(logvar, 0.5);
        let sigma = g.exp(half);
        let z = g.gaussian_sample(mu, sigma, eps)?;
        let logits = self.decoder_logits(&mut g, &mut binder, z, Some(&mut stats))?;
        let rows = g.reshape(logits, &[b * self.dims.n, self.dims.d])?;
        let nll = g.cross_entropy(rows, &ids)?;
        let kl = g.gaussian_kl(mu, sigma)?;
        let nll = g.scale(nll, cfg.recon_weight / b as f32);
        let kl = g.scale(kl, cfg.kl_weight / b as f32);
        let loss = g.add(nll, kl)?;
        let value = f64::from(g.value(loss).item().expect("scalar loss"));
        if !value.is_finite() {
            return Err(LimoError::NonFinite("vae loss"));
        }
        g.backward(loss)?;
        let grads = binder.take_grads(&mut g);
        Ok((value, grads, stats))
    }

    /// Evaluation-mode ELBO of a batch with the given noise.
    pub fn elbo(&self, batch: &[SelfiesString], cfg: &VaeTrainConfig, eps: Tensor) -> Result<f64> {
        let refs: Vec<&SelfiesString> = batch.iter().collect();
        let ids = self.batch_ids(&refs)?;
        let b = batch.len();
        let mut g = Graph::new();
        let mut binder = Binder::frozen();
        let (mu, logvar) = self.encoder_graph(&mut g, &mut binder, &ids, b, None)?;
        let half = g.scale(logvar, 0.5);
        let sigma = g.exp(half);
        let z = g.gaussian_sample(mu, sigma, eps)?;
        let logits = self.decoder_logits(&mut g, &mut binder, z, None)?;
        let rows = g.reshape(logits, &[b * self.dims.n, self.dims.d])?;
        let nll = g.cross_entropy(rows, &ids)?;
        let kl = g.gaussian_kl(mu, sigma)?;
        let nll = f64::from(g.value(nll).item().expect("scalar"));
        let kl = f64::from(g.value(kl).item().expect("scalar"));
        Ok((f64::from(cfg.recon_weight) * nll + f64::from(cfg.kl_weight) * kl) / b as f64)
    }

    /// Trains in place; the epoch order and noise are drawn from `cfg.seed`.
    pub fn train(&mut self, dataset: &[SelfiesString], cfg: &VaeTrainConfig) -> Result<TrainLog> {
        if dataset.is_empty() {
            return Err(LimoError::EmptyDataset);
        }
        if cfg.batch < 2 {
            return Err(LimoError::InvalidInput(
                "batch size must be at least 2".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
        let mut adam = Adam::new(cfg.lr);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut log = TrainLog::default();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut seen = 0usize;
            for chunk in order.chunks(cfg.batch) {
                // A single row has no batch variance to normalize with.
                if chunk.len() < 2 {
                    continue;
                }
                let batch: Vec<&SelfiesString> = chunk.iter().map(|&i| &dataset[i]).collect();
                let eps = Tensor::matrix(
                    chunk.len(),
                    self.dims.m,
                    standard_normal(&mut rng, chunk.len() * self.dims.m),
                )?;
                let (loss, grads, stats) = self.train_step_grads(&batch, cfg, eps)?;
                let mut params = self.params_mut();
                assign_grads(&mut params, grads);
                adam.step(&mut params)?;
                for (norm, s) in self.norms_mut().zip(&stats) {
                    norm.update_running(s);
                }
                total += loss * chunk.len() as f64;
                seen += chunk.len();
            }
            let mean = total / seen.max(1) as f64;
            info!("vae epoch {} loss {mean:.4}", epoch + 1);
            log.epoch_losses.push(mean);
        }
        Ok(log)
    }

    /// Posterior means and log-variances, `[batch, m]` each.
    pub fn encode_batch(&self, strings: &[SelfiesString]) -> Result<(Tensor, Tensor)> {
        let refs: Vec<&SelfiesString> = strings.iter().collect();
        let ids = self.batch_ids(&refs)?;
        let mut g = Graph::new();
        let mut binder = Binder::frozen();
        let (mu, logvar) = self.encoder_graph(&mut g, &mut binder, &ids, strings.len(), None)?;
        Ok((g.value(mu).clone(), g.value(logvar).clone()))
    }

    pub fn encode(&self, s: &SelfiesString) -> Result<(Vec<f32>, Vec<f32>)> {
        let (mu, logvar) = self.encode_batch(std::slice::from_ref(s))?;
        Ok((mu.into_data(), logvar.into_data()))
    }

    /// Decoder probabilities `[batch, n·d]` for a `[batch, m]` latent matrix.
    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape().len() != 2 || z.shape()[1] != self.dims.m {
            return Err(LimoError::InvalidInput(format!(
                "latent shape {:?}, m = {}",
                z.shape(),
                self.dims.m
            )));
        }
        if !z.all_finite() {
            return Err(LimoError::NonFinite("latent vector"));
        }
        let mut out = Vec::with_capacity(z.rows() * self.dims.n * self.dims.d);
        for start in (0..z.rows()).step_by(256) {
            let end = (start + 256).min(z.rows());
            let mut g = Graph::new();
            let mut binder = Binder::frozen();
            let zv = g.constant(z.slice_rows(start, end));
            let probs = self.decoder_probs(&mut g, &mut binder, zv)?;
            out.extend_from_slice(g.value(probs).data());
        }
        Ok(Tensor::matrix(z.rows(), self.dims.n * self.dims.d, out)?)
    }

    pub fn decode(&self, z: &[f32]) -> Result<SymbolDistribution> {
        let t = Tensor::matrix(1, z.len(), z.to_vec())?;
        let probs = self.decode_batch(&t)?;
        SymbolDistribution::new(self.dims.n, self.dims.d, probs.into_data())
    }

    /// Argmax strings of a `[batch, n·d]` probability matrix.
    pub fn argmax_strings(&self, probs: &Tensor) -> Result<Vec<SelfiesString>> {
        let d = self.dims.d;
        let width = self.dims.n * d;
        probs
            .data()
            .chunks(width)
            .map(|row| {
                Ok(SelfiesString::from_ids(
                    argmax_rows(row, d),
                    &self.alphabet,
                )?)
            })
            .collect()
    }

    /// Decodes latent rows all the way to molecules.
    pub fn molecules(&self, z: &Tensor) -> Result<Vec<(SelfiesString, MolGraph)>> {
        let probs = self.decode_batch(z)?;
        Ok(self
            .argmax_strings(&probs)?
            .into_iter()
            .map(|s| {
                let g = decode_selfies(&s, &self.alphabet);
                (s, g)
            })
            .collect())
    }

    /// `k` molecules from `z ~ N(0, I)`.
    pub fn sample_random(&self, k: usize, seed: u64) -> Result<Vec<MolGraph>> {
        let z = sample_latents(k, self.dims.m, seed);
        Ok(self.molecules(&z)?.into_iter().map(|(_, g)| g).collect())
    }

    /// Fraction of symbols reproduced by `argmax(decode(mu(x)))`.
    pub fn reconstruction_accuracy(&self, strings: &[SelfiesString]) -> Result<f64> {
        if strings.is_empty() {
            return Err(LimoError::EmptyDataset);
        }
        let mut hits = 0usize;
        for chunk in strings.chunks(256) {
            let (mu, _) = self.encode_batch(chunk)?;
            let decoded = self.argmax_strings(&self.decode_batch(&mu)?)?;
            for (a, b) in chunk.iter().zip(&decoded) {
                hits += a.ids().iter().zip(b.ids()).filter(|(x, y)| x == y).count();
            }
        }
        Ok(hits as f64 / (strings.len() * self.dims.n) as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let d = &self.dims;
        let mut header = vec![
            d.n as u32,
            d.d as u32,
            d.m as u32,
            d.embed as u32,
            d.hidden.len() as u32,
        ];
        header.extend(d.hidden.iter().map(|&h| h as u32));
        let mut ck = Checkpoint::new(Kind::Vae, header, Vec::new());
        ck.push("embedding", self.embedding.value.clone());
        let put_block = |ck: &mut Checkpoint, prefix: &str, b: &Block| {
            ck.push(format!("{prefix}.weight"), b.linear.weight.value.clone());
            ck.push(format!("{prefix}.bias"), b.linear.bias.value.clone());
            ck.push(format!("{prefix}.gamma"), b.norm.gamma.value.clone());
            ck.push(format!("{prefix}.beta"), b.norm.beta.value.clone());
            let f = b.norm.features();
            ck.push(
                format!("{prefix}.running_mean"),
                Tensor::new(vec![f], b.norm.running_mean.clone()).expect("len"),
            );
            ck.push(
                format!("{prefix}.running_var"),
                Tensor::new(vec![f], b.norm.running_var.clone()).expect("len"),
            );
        };
        for (i, b) in self.encoder.iter().enumerate() {
            put_block(&mut ck, &format!("enc{i}"), b);
        }
        ck.push("mu.weight", self.mu_head.weight.value.clone());
        ck.push("mu.bias", self.mu_head.bias.value.clone());
        ck.push("logvar.weight", self.logvar_head.weight.value.clone());
        ck.push("logvar.bias", self.logvar_head.bias.value.clone());
        for (i, b) in self.decoder.iter().enumerate() {
            put_block(&mut ck, &format!("dec{i}"), b);
        }
        ck.push("out.weight", self.output.weight.value.clone());
        ck.push("out.bias", self.output.bias.value.clone());
        ck
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        if ck.kind != Kind::Vae {
            return Err(LimoError::Checkpoint("not a VAE checkpoint".into()));
        }
        let h = &ck.header;
        if h.len() < 5 || h.len() != 5 + h[4] as usize {
            return Err(LimoError::Checkpoint(format!("bad VAE header {h:?}")));
        }
        let dims = VaeDims {
            n: h[0] as usize,
            d: h[1] as usize,
            m: h[2] as usize,
            embed: h[3] as usize,
            hidden: h[5..].iter().map(|&x| x as usize).collect(),
        };
        let mut vae = Vae::new(dims.clone(), 0)?;
        vae.embedding.value = ck.take("embedding", &[dims.d, dims.embed])?;
        let load_block = |ck: &mut Checkpoint, prefix: &str, b: &mut Block| -> Result<()> {
            let (i, o) = (b.linear.inputs(), b.linear.outputs());
            b.linear.weight.value = ck.take(&format!("{prefix}.weight"), &[i, o])?;
            b.linear.bias.value = ck.take(&format!("{prefix}.bias"), &[o])?;
            b.norm.gamma.value = ck.take(&format!("{prefix}.gamma"), &[o])?;
            b.norm.beta.value = ck.take(&format!("{prefix}.beta"), &[o])?;
            b.norm.running_mean = ck
                .take(&format!("{prefix}.running_mean"), &[o])?
                .into_data();
            b.norm.running_var = ck.take(&format!("{prefix}.running_var"), &[o])?.into_data();
            Ok(())
        };
        for (i, b) in vae.encoder.iter_mut().enumerate() {
            load_block(&mut ck, &format!("enc{i}"), b)?;
        }
        let width = *dims.hidden.last().expect("validated");
        vae.mu_head.weight.value = ck.take("mu.weight", &[width, dims.m])?;
        vae.mu_head.bias.value = ck.take("mu.bias", &[dims.m])?;
        vae.logvar_head.weight.value = ck.take("logvar.weight", &[width, dims.m])?;
        vae.logvar_head.bias.value = ck.take("logvar.bias", &[dims.m])?;
        for (i, b) in vae.decoder.iter_mut().enumerate() {
            load_block(&mut ck, &format!("dec{i}"), b)?;
        }
        let width = dims.hidden[0];
        vae.output.weight.value = ck.take("out.weight", &[width, dims.n * dims.d])?;
        vae.output.bias.value = ck.take("out.bias", &[dims.n * dims.d])?;
        Ok(vae)
    }
}
