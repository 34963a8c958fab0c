//! Token-wise state compressor.
//!
//! The encoder maps every visual token independently from `input_dim` to
//! `latent_dim` through one hidden layer (`Linear -> LayerNorm -> GELU ->
//! Linear`); the decoder mirrors it. Only the encoder is used once training
//! is done, and it is frozen from then on.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gelu_backward, join, Adam, AdamConfig, LayerNorm, LayerNormCache, Linear, Module};
use crate::tensor::{gelu_scalar, Matrix, Parameter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
}

impl Default for AutoencoderDims {
    fn default() -> Self {
        Self {
            input_dim: 64,
            hidden_dim: 32,
            latent_dim: 8,
        }
    }
}

/// `Linear -> LayerNorm -> GELU -> Linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct Coder {
    pub input: Linear,
    pub norm: LayerNorm,
    pub output: Linear,
}

struct CoderCache {
    x: Matrix,
    norm: LayerNormCache,
    normed: Matrix,
    hidden: Matrix,
}

impl Coder {
    fn new(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            input: Linear::new(input, hidden, rng),
            norm: LayerNorm::new(hidden),
            output: Linear::new(hidden, output, rng),
        }
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let (normed, _) = self.norm.forward(&self.input.forward(x));
        self.output.forward(&normed.map(gelu_scalar))
    }

    fn forward_cached(&self, x: &Matrix) -> (Matrix, CoderCache) {
        let (normed, norm) = self.norm.forward(&self.input.forward(x));
        let hidden = normed.map(gelu_scalar);
        let y = self.output.forward(&hidden);
        (
            y,
            CoderCache {
                x: x.clone(),
                norm,
                normed,
                hidden,
            },
        )
    }

    fn backward(&mut self, cache: &CoderCache, dy: &Matrix) -> Matrix {
        let dhidden = self.output.backward(&cache.hidden, dy);
        let dnormed = gelu_backward(&cache.normed, &dhidden);
        let dpre = self.norm.backward(&cache.norm, &dnormed);
        self.input.backward(&cache.x, &dpre)
    }
}

impl Module for Coder {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        self.input.visit_params(&join(prefix, "input"), out);
        self.norm.visit_params(&join(prefix, "norm"), out);
        self.output.visit_params(&join(prefix, "output"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter)>) {
        self.input.visit_params_mut(&join(prefix, "input"), out);
        self.norm.visit_params_mut(&join(prefix, "norm"), out);
        self.output.visit_params_mut(&join(prefix, "output"), out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub encoder: Coder,
    pub decoder: Coder,
    frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    /// Held-out per-token squared reconstruction error, averaged over tokens.
    pub mse: f64,
    /// Held-out mean of `|h - D(E(h))| / |h|`.
    pub relative_error: f64,
    /// 0 is the untrained initialization.
    pub epoch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Samples (token matrices) per optimizer step.
    pub batch_samples: usize,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            batch_samples: 1,
            seed: 0,
        }
    }
}

impl Autoencoder {
    pub fn new(dims: AutoencoderDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            encoder: Coder::new(dims.input_dim, dims.hidden_dim, dims.latent_dim, &mut rng),
            decoder: Coder::new(dims.latent_dim, dims.hidden_dim, dims.input_dim, &mut rng),
            frozen: false,
        }
    }

    pub fn dims(&self) -> AutoencoderDims {
        AutoencoderDims {
            input_dim: self.encoder.input.input_dim(),
            hidden_dim: self.encoder.input.output_dim(),
            latent_dim: self.encoder.output.output_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output.output_dim()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Idempotent.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Mutable access to all parameters, refused once frozen.
    pub fn trainable_params(&mut self) -> Result<Vec<(String, &mut Parameter)>> {
        if self.frozen {
            return Err(Error::State("autoencoder is frozen".into()));
        }
        Ok(self.params_mut())
    }

    fn check_input(&self, tokens: &Matrix) -> Result<()> {
        if tokens.cols() != self.input_dim() {
            return Err(Error::dim(
                "encode",
                format!("tokens have {} features, encoder expects {}", tokens.cols(), self.input_dim()),
            ));
        }
        Ok(())
    }

    /// `N x input_dim -> N x latent_dim`, row by row.
    pub fn encode(&self, tokens: &Matrix) -> Result<Matrix> {
        self.check_input(tokens)?;
        Ok(self.encoder.forward(tokens))
    }

    pub fn decode(&self, codes: &Matrix) -> Result<Matrix> {
        if codes.cols() != self.latent_dim() {
            return Err(Error::dim(
                "decode",
                format!("codes have {} features, decoder expects {}", codes.cols(), self.latent_dim()),
            ));
        }
        Ok(self.decoder.forward(codes))
    }

    pub fn reconstruct(&self, tokens: &Matrix) -> Result<Matrix> {
        self.decode(&self.encode(tokens)?)
    }

    /// `(1/N) sum_i |h_i - D(E(h_i))|^2`.
    pub fn recon_loss(&self, tokens: &Matrix) -> Result<f64> {
        if tokens.rows() == 0 {
            return Err(Error::Precondition("reconstruction loss of an empty token set".into()));
        }
        let recon = self.reconstruct(tokens)?;
        let sq: f64 = recon
            .data()
            .iter()
            .zip(tokens.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sq / tokens.rows() as f64)
    }

    /// Mean over tokens of `|h - D(E(h))| / |h|`; zero-norm tokens are skipped.
    pub fn relative_error(&self, tokens: &Matrix) -> Result<f64> {
        let recon = self.reconstruct(tokens)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 0..tokens.rows() {
            let norm = tokens.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let err = recon
                .row(r)
                .iter()
                .zip(tokens.row(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            total += err / norm;
            count += 1;
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    /// Loss plus gradient accumulation into the parameter buffers.
    pub fn loss_and_backward(&mut self, tokens: &Matrix) -> Result<f64> {
        if self.frozen {
            return Err(Error::State("autoencoder is frozen".into()));
        }
        if tokens.rows() == 0 {
            return Err(Error::Precondition("reconstruction loss of an empty token set".into()));
        }
        self.check_input(tokens)?;
        let n = tokens.rows() as f64;
        let (codes, enc_cache) = self.encoder.forward_cached(tokens);
        let (recon, dec_cache) = self.decoder.forward_cached(&codes);
        let mut loss = 0.0;
        let mut dy = recon.clone();
        for (d, t) in dy.data_mut().iter_mut().zip(tokens.data()) {
            let diff = *d - t;
            loss += diff * diff;
            *d = 2.0 * diff / n;
        }
        let dcodes = self.decoder.backward(&dec_cache, &dy);
        self.encoder.backward(&enc_cache, &dcodes);
        Ok(loss / n)
    }

    fn held_out_report(&self, held_out: &[&Matrix], epoch: usize) -> Result<ReconReport> {
        let mut mse = 0.0;
        let mut rel = 0.0;
        for t in held_out {
            mse += self.recon_loss(t)?;
            rel += self.relative_error(t)?;
        }
        let n = held_out.len().max(1) as f64;
        Ok(ReconReport {
            mse: mse / n,
            relative_error: rel / n,
            epoch,
        })
    }
}

impl Module for Autoencoder {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        self.encoder.visit_params(&join(prefix, "encoder"), out);
        self.decoder.visit_params(&join(prefix, "decoder"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter)>) {
        self.encoder.visit_params_mut(&join(prefix, "encoder"), out);
        self.decoder.visit_params_mut(&join(prefix, "decoder"), out);
    }
}

/// Deterministic 90/10 split: every tenth sample (index % 10 == 9) is held out.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for i in 0..n {
        if n >= 10 && i % 10 == 9 {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    if held.is_empty() && n > 1 {
        held.push(train.pop().unwrap());
    }
    (train, held)
}

/// Trains on the 90% split and reports held-out error before training and
/// after every epoch. The returned autoencoder is not frozen.
pub fn train_autoencoder(
    mut ae: Autoencoder,
    dataset: &[Matrix],
    cfg: &AeTrainConfig,
) -> Result<(Autoencoder, Vec<ReconReport>)> {
    if ae.is_frozen() {
        return Err(Error::State("cannot train a frozen autoencoder".into()));
    }
    if dataset.len() < 2 {
        return Err(Error::Precondition("autoencoder training needs at least two samples".into()));
    }
    let (train, held) = split_indices(dataset.len());
    let held_out: Vec<&Matrix> = held.iter().map(|&i| &dataset[i]).collect();
    let mut reports = vec![ae.held_out_report(&held_out, 0)?];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut order = train.clone();
    let batch = cfg.batch_samples.max(1);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            ae.zero_grad();
            for &i in chunk {
                let loss = ae.loss_and_backward(&dataset[i])?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        name: format!("reconstruction loss (epoch {epoch}, sample {i})"),
                        phase: "train_autoencoder",
                    });
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for (_, p) in ae.params_mut() {
                p.grad = p.grad.scale(scale);
            }
            opt.step(ae.trainable_params()?)?;
        }
        let report = ae.held_out_report(&held_out, epoch)?;
        log::debug!("autoencoder epoch {epoch}: held-out mse {:.5}", report.mse);
        reports.push(report);
    }
    Ok((ae, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::adam_step;
    use crate::nn::AdamState;

    fn dims() -> AutoencoderDims {
        AutoencoderDims {
            input_dim: 12,
            hidden_dim: 8,
            latent_dim: 3,
        }
    }

    fn tokens(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::uniform_init(rows, cols, 1, &mut rng).scale(3.0)
    }

    #[test]
    fn empty_input_encodes_to_empty() {
        let ae = Autoencoder::new(dims(), 0);
        let out = ae.encode(&Matrix::zeros(0, 12)).unwrap();
        assert_eq!(out.shape(), (0, 3));
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let ae = Autoencoder::new(dims(), 0);
        assert!(matches!(ae.encode(&Matrix::zeros(2, 5)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn encode_is_token_wise() {
        let ae = Autoencoder::new(dims(), 1);
        let x = tokens(5, 12, 2);
        let batch = ae.encode(&x).unwrap();
        for r in 0..5 {
            let single = ae.encode(&x.select_rows(&[r])).unwrap();
            assert!(single.max_abs_diff(&batch.select_rows(&[r])) <= 1e-12);
        }
        let dup = ae.encode(&x.select_rows(&[0, 1, 1, 2])).unwrap();
        assert_eq!(dup.row(1), dup.row(2));
        assert_eq!(dup.rows(), 4);
    }

    #[test]
    fn recon_loss_is_mean_of_per_token_losses() {
        let ae = Autoencoder::new(dims(), 3);
        let x = tokens(7, 12, 4);
        let full = ae.recon_loss(&x).unwrap();
        let mut oracle = 0.0;
        for r in 0..7 {
            let h = x.select_rows(&[r]);
            let y = ae.decoder.forward(&ae.encoder.forward(&h));
            oracle += h.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        oracle /= 7.0;
        assert!((full - oracle).abs() <= 1e-12);
        assert!(ae.recon_loss(&Matrix::zeros(0, 12)).is_err());
    }

    #[test]
    fn zero_network_loss_is_mean_squared_norm() {
        let mut ae = Autoencoder::new(dims(), 5);
        for (_, p) in ae.params_mut() {
            p.value.fill(0.0);
        }
        let x = tokens(4, 12, 6);
        let mean_sq: f64 = (0..4)
            .map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / 4.0;
        assert!((ae.recon_loss(&x).unwrap() - mean_sq).abs() < 1e-12);
    }

    #[test]
    fn constant_tokens_reconstructed_exactly_by_bias() {
        // With the decoder output weights zeroed, its bias alone reproduces a
        // constant token set, giving a loss of exactly zero.
        let mut ae = Autoencoder::new(dims(), 7);
        let row: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let x = Matrix::from_rows(&[row.clone(), row.clone(), row.clone()]);
        ae.decoder.output.weight.value.fill(0.0);
        ae.decoder.output.bias.value = Matrix::row_vector(&row);
        assert_eq!(ae.recon_loss(&x).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_gradient_matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..5 {
            let mut ae = Autoencoder::new(dims(), seed);
            let x = tokens(4, 12, seed + 50);
            ae.zero_grad();
            ae.loss_and_backward(&x).unwrap();
            let count = ae.params().len();
            let mut worst: f64 = 0.0;
            for pi in 0..count {
                let len = ae.params()[pi].1.value.data().len();
                for e in 0..len {
                    let mut plus = ae.clone();
                    plus.params_mut()[pi].1.value.data_mut()[e] += h;
                    let mut minus = ae.clone();
                    minus.params_mut()[pi].1.value.data_mut()[e] -= h;
                    let fd = (plus.recon_loss(&x).unwrap() - minus.recon_loss(&x).unwrap()) / (2.0 * h);
                    let an = ae.params()[pi].1.grad.data()[e];
                    if fd.abs() > 1e-7 || an.abs() > 1e-7 {
                        worst = worst.max((fd - an).abs() / (fd.abs() + an.abs()));
                    }
                }
            }
            assert!(worst <= 1e-4, "seed {seed}: rel err {worst}");
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_and_loss_unchanged() {
        let ae = Autoencoder::new(dims(), 8);
        let data: Vec<Matrix> = (0..10).map(|s| tokens(6, 12, 100 + s)).collect();
        let cfg = AeTrainConfig {
            epochs: 1,
            lr: 0.0,
            ..Default::default()
        };
        let (trained, reports) = train_autoencoder(ae.clone(), &data, &cfg).unwrap();
        for ((_, a), (_, b)) in trained.params().iter().zip(ae.params()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(reports[0].mse, reports[1].mse);
    }

    #[test]
    fn freeze_blocks_updates_and_keeps_outputs() {
        let mut ae = Autoencoder::new(dims(), 9);
        let x = tokens(3, 12, 10);
        let before = ae.encode(&x).unwrap();
        ae.freeze();
        ae.freeze();
        assert!(ae.is_frozen());
        assert_eq!(ae.encode(&x).unwrap(), before);
        assert!(matches!(ae.trainable_params(), Err(Error::State(_))));
        assert!(matches!(ae.loss_and_backward(&x), Err(Error::State(_))));
        assert!(train_autoencoder(ae.clone(), &[x.clone(), x.clone()], &AeTrainConfig::default()).is_err());
        // a direct adam_step on a parameter is still possible on a clone; the
        // frozen model itself only hands out parameters through trainable_params
        let mut p = ae.encoder.input.weight.clone();
        let mut s = AdamState::new(p.shape().0, p.shape().1);
        adam_step("w", &mut p, &mut s, &AdamConfig::default()).unwrap();
    }

    #[test]
    fn split_is_ninety_ten() {
        let (train, held) = split_indices(100);
        assert_eq!(train.len(), 90);
        assert_eq!(held.len(), 10);
        assert!(held.iter().all(|i| i % 10 == 9));
    }
}
