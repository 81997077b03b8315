//! Property predictors on decoder output (or, for comparison, on z).

use limo_chem::MolGraph;
use limo_tensor::nn::{assign_grads, Binder, Linear};
use limo_tensor::{Adam, Graph, Param, Tensor, Var};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Kind};
use crate::error::{LimoError, Result};
use crate::oracles::PropertyOracle;
use crate::vae::{sample_latents, Vae};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Soft decoder output `y = f_dec(z)`.
    Decoded,
    /// The latent vector itself.
    Latent,
}

impl InputMode {
    fn code(self) -> u32 {
        match self {
            InputMode::Decoded => 0,
            InputMode::Latent => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub width: usize,
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            width: 128,
            epochs: 20,
            lr: 1e-3,
            batch: 64,
            seed: 0,
        }
    }
}

/// Latent vectors with oracle values of their argmax-decoded molecules.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyDataset {
    /// `[count, m]`.
    pub z: Tensor,
    pub values: Vec<f64>,
}

impl PropertyDataset {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> PropertyDataset {
        let m = self.z.cols();
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            data.extend_from_slice(self.z.row(r));
        }
        PropertyDataset {
            z: Tensor::matrix(rows.len(), m, data).expect("length from shape"),
            values: rows.iter().map(|&r| self.values[r]).collect(),
        }
    }

    /// Seeded shuffle, then `(train, heldout)` with `heldout_fraction` of rows held out.
    pub fn split(&self, heldout_fraction: f64, seed: u64) -> (PropertyDataset, PropertyDataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * heldout_fraction).round() as usize;
        (self.select(&order[cut..]), self.select(&order[..cut]))
    }
}

/// Samples `count` latents, decodes them and labels them with `oracle`.
/// Items the oracle fails on are dropped.
pub fn gen_training_set(
    vae: &Vae,
    oracle: &dyn PropertyOracle,
    count: usize,
    seed: u64,
) -> Result<PropertyDataset> {
    let m = vae.dims().m;
    if count == 0 {
        return Ok(PropertyDataset {
            z: Tensor::zeros(&[0, m]),
            values: Vec::new(),
        });
    }
    let z = sample_latents(count, m, seed);
    let mols: Vec<MolGraph> = vae.molecules(&z)?.into_iter().map(|(_, g)| g).collect();
    let scores = oracle.score_batch(&mols)?;
    let mut keep = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for (i, s) in scores.into_iter().enumerate() {
        match s {
            Ok(v) if v.is_finite() => {
                keep.push(i);
                values.push(v);
            }
            Ok(v) => warn!("{}: item {i} scored {v}, dropped", oracle.name()),
            Err(e) => warn!("{}: item {i} failed ({e}), dropped", oracle.name()),
        }
    }
    let mut ds = PropertyDataset {
        z,
        values: vec![0.0; count],
    }
    .select(&keep);
    ds.values = values;
    Ok(ds)
}

/// Three-layer MLP predicting a standardized target.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    mode: InputMode,
    oracle: String,
    mean: f32,
    std: f32,
    layers: [Linear; 3],
}

impl Predictor {
    pub fn new(
        mode: InputMode,
        oracle: impl Into<String>,
        inputs: usize,
        width: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Predictor {
            mode,
            oracle: oracle.into(),
            mean: 0.0,
            std: 1.0,
            layers: [
                Linear::new(&mut rng, inputs, width),
                Linear::new(&mut rng, width, width),
                Linear::new(&mut rng, width, 1),
            ],
        }
    }

    pub fn mode(&self) -> InputMode {
        self.mode
    }

    pub fn oracle_name(&self) -> &str {
        &self.oracle
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    fn check_input(&self, vae: &Vae) -> Result<()> {
        let d = vae.dims();
        let want = match self.mode {
            InputMode::Decoded => d.n * d.d,
            InputMode::Latent => d.m,
        };
        if want != self.inputs() {
            return Err(LimoError::InvalidInput(format!(
                "{:?} predictor takes {} inputs, the VAE provides {want}",
                self.mode,
                self.inputs()
            )));
        }
        Ok(())
    }

    /// Raw (standardized-scale) network output `[batch, 1]`.
    fn network<'a>(&'a self, g: &mut Graph<'a>, binder: &mut Binder, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(g, binder, x)?;
        let h = g.relu(h);
        let h = self.layers[1].forward(g, binder, h)?;
        let h = g.relu(h);
        Ok(self.layers[2].forward(g, binder, h)?)
    }

    /// Prediction in target units `[batch, 1]` from the model input `x`
    /// (`y` in decoded mode, `z` in latent mode). Weights are frozen.
    pub fn forward_input<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        let mut binder = Binder::frozen();
        let out = self.network(g, &mut binder, x)?;
        let out = g.scale(out, self.std);
        Ok(g.add_scalar(out, self.mean))
    }

    /// Prediction `[batch, 1]` from latent rows `z`, reusing a decoder output
    /// already on the graph when one is given.
    pub fn forward<'a>(
        &'a self,
        vae: &'a Vae,
        g: &mut Graph<'a>,
        z: Var,
        y: Option<Var>,
    ) -> Result<Var> {
        self.check_input(vae)?;
        let x = match self.mode {
            InputMode::Latent => z,
            InputMode::Decoded => match y {
                Some(y) => y,
                None => vae.decoder_probs(g, &mut Binder::frozen(), z)?,
            },
        };
        self.forward_input(g, x)
    }

    pub fn predict_batch(&self, vae: &Vae, z: &Tensor) -> Result<Vec<f64>> {
        if !z.all_finite() {
            return Err(LimoError::NonFinite("latent vector"));
        }
        let mut out = Vec::with_capacity(z.rows());
        for start in (0..z.rows()).step_by(256) {
            let end = (start + 256).min(z.rows());
            let mut g = Graph::new();
            let zv = g.constant(z.slice_rows(start, end));
            let p = self.forward(vae, &mut g, zv, None)?;
            out.extend(g.value(p).data().iter().map(|&v| f64::from(v)));
        }
        Ok(out)
    }

    pub fn predict(&self, vae: &Vae, z: &[f32]) -> Result<f64> {
        let t = Tensor::matrix(1, z.len(), z.to_vec())?;
        Ok(self.predict_batch(vae, &t)?[0])
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let header = vec![
            self.mode.code(),
            self.inputs() as u32,
            self.layers[0].outputs() as u32,
        ];
        let mut ck = Checkpoint::new(Kind::Predictor, header, vec![self.oracle.clone()]);
        for (i, l) in self.layers.iter().enumerate() {
            ck.push(format!("l{i}.weight"), l.weight.value.clone());
            ck.push(format!("l{i}.bias"), l.bias.value.clone());
        }
        ck.push(
            "target",
            Tensor::new(vec![2], vec![self.mean, self.std]).expect("len"),
        );
        ck
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        if ck.kind != Kind::Predictor {
            return Err(LimoError::Checkpoint("not a predictor checkpoint".into()));
        }
        let (mode, inputs, width) = match ck.header[..] {
            [0, i, w] => (InputMode::Decoded, i as usize, w as usize),
            [1, i, w] => (InputMode::Latent, i as usize, w as usize),
            _ => {
                return Err(LimoError::Checkpoint(format!(
                    "bad predictor header {:?}",
                    ck.header
                )))
            }
        };
        let oracle = ck
            .texts
            .first()
            .cloned()
            .ok_or_else(|| LimoError::Checkpoint("predictor without oracle name".into()))?;
        let mut p = Predictor::new(mode, oracle, inputs, width, 0);
        for (i, l) in p.layers.iter_mut().enumerate() {
            let (a, b) = (l.inputs(), l.outputs());
            l.weight.value = ck.take(&format!("l{i}.weight"), &[a, b])?;
            l.bias.value = ck.take(&format!("l{i}.bias"), &[b])?;
        }
        let t = ck.take("target", &[2])?;
        p.mean = t.data()[0];
        p.std = t.data()[1];
        Ok(p)
    }
}

/// Model inputs for a dataset: decoder probabilities or the latents themselves.
fn model_inputs(vae: &Vae, data: &PropertyDataset, mode: InputMode) -> Result<Tensor> {
    match mode {
        InputMode::Decoded => vae.decode_batch(&data.z),
        InputMode::Latent => Ok(data.z.clone()),
    }
}

/// Fits a predictor by MSE on standardized targets; returns it with the
/// per-epoch mean training loss.
pub fn train_predictor(
    vae: &Vae,
    data: &PropertyDataset,
    mode: InputMode,
    oracle: &str,
    cfg: &PredictorConfig,
) -> Result<(Predictor, Vec<f64>)> {
    if data.len() < 2 {
        return Err(LimoError::TooFewExamples {
            needed: 2,
            got: data.len(),
        });
    }
    if cfg.batch == 0 || cfg.width == 0 {
        return Err(LimoError::InvalidInput(
            "predictor batch and width must be positive".into(),
        ));
    }
    let x = model_inputs(vae, data, mode)?;
    let count = data.len() as f64;
    let mean = data.values.iter().sum::<f64>() / count;
    let var = data.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
    let std = if var > 1e-12 {
        var.sqrt()
    } else {
        warn!("{oracle}: constant training targets");
        1.0
    };
    let targets: Vec<f32> = data
        .values
        .iter()
        .map(|v| ((v - mean) / std) as f32)
        .collect();

    let mut p = Predictor::new(mode, oracle, x.cols(), cfg.width, cfg.seed);
    p.mean = mean as f32;
    p.std = std as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_6564);
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let cols = x.cols();
            let mut rows = Vec::with_capacity(chunk.len() * cols);
            for &i in chunk {
                rows.extend_from_slice(x.row(i));
            }
            let batch_t: Vec<f32> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, grads) = {
                let mut g = Graph::new();
                let mut binder = Binder::trainable();
                let xv = g.constant(Tensor::matrix(chunk.len(), cols, rows)?);
                let out = p.network(&mut g, &mut binder, xv)?;
                let t = g.constant(Tensor::matrix(chunk.len(), 1, batch_t)?);
                let diff = g.sub(out, t)?;
                let sq = g.square(diff);
                let sum = g.sum(sq);
                let loss = g.scale(sum, 1.0 / chunk.len() as f32);
                let value = f64::from(g.value(loss).item().expect("scalar"));
                if !value.is_finite() {
                    return Err(LimoError::NonFinite("predictor loss"));
                }
                g.backward(loss)?;
                (value, binder.take_grads(&mut g))
            };
            let mut params = p.params_mut();
            assign_grads(&mut params, grads);
            adam.step(&mut params)?;
            total += loss * chunk.len() as f64;
        }
        let mean_loss = total / count;
        info!(
            "predictor {oracle} ({mode:?}) epoch {} loss {mean_loss:.4}",
            epoch + 1
        );
        losses.push(mean_loss);
    }
    Ok((p, losses))
}

/// Coefficient of determination of `p` on held-out pairs.
pub fn r_squared(p: &Predictor, vae: &Vae, heldout: &PropertyDataset) -> Result<f64> {
    if heldout.len() < 2 {
        return Err(LimoError::TooFewExamples {
            needed: 2,
            got: heldout.len(),
        });
    }
    let predicted = p.predict_batch(vae, &heldout.z)?;
    r_squared_of(&predicted, &heldout.values)
}

/// `1 − SS_res / SS_tot`.
pub fn r_squared_of(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() || actual.len() < 2 {
        return Err(LimoError::TooFewExamples {
            needed: 2,
            got: actual.len().min(predicted.len()),
        });
    }
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean).powi(2)).sum();
    if ss_tot <= 0.0 {
        return Err(LimoError::ZeroVariance);
    }
    let ss_res: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| (a - p).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}
