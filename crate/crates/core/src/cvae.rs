//! Conditional β-VAE over FE activations and the per-class unconditional
//! VAE pack it is compared against.
//!
//! ```text
//! [A_s | onehot(y)] → encoder → (μ, log σ²) → z = μ + σ⊙n → [z | onehot(y)] → decoder → Â_s
//! loss = Σ_dims (Â_s − A_s)² + β · KL(N(μ, σ²) ‖ N(0, I))      (both meaned over the batch)
//! ```
//!
//! An unconditional VAE is the same machine with zero conditioning classes.
//!
//! Both networks see activations through a fixed [`Standardizer`] fitted on the
//! training set: per-dimension centring and one shared scale. The loss above is
//! taken in that space and generated rows are mapped back.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ActivationBatch, Provenance};
use crate::numerics::{
    batches, mse_loss, Activation, LayerGrads, LrSchedule, Matrix, Network, Optimizer,
    OptimizerConfig, OptimizerKind, Rng, F32_BYTES,
};

/// KL annealing: `β(epoch) = min(β_max, β₀ + δ·⌊epoch / every⌋)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub start: f32,
    pub step: f32,
    pub every: usize,
    pub max: f32,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            start: 0.0,
            step: 0.1,
            every: 3,
            max: 1.0,
        }
    }
}

impl BetaSchedule {
    pub fn at(&self, epoch: usize) -> f32 {
        let k = (epoch / self.every.max(1)) as f32;
        (self.start + self.step * k).min(self.max)
    }
}

/// Closed-form `KL(N(μ, diag σ²) ‖ N(0, I))`, summed over latent dims and
/// averaged over the batch.
pub fn kl_diag_gauss(mu: &Matrix, log_var: &Matrix) -> Result<f32> {
    if mu.shape() != log_var.shape() {
        return Err(Error::Shape {
            op: "kl_diag_gauss",
            left: mu.shape(),
            right: log_var.shape(),
        });
    }
    let mut total = 0.0f64;
    for (&m, &lv) in mu.data().iter().zip(log_var.data()) {
        let (m, lv) = (m as f64, lv as f64);
        total += 0.5 * (m * m + lv.exp() - lv - 1.0);
    }
    Ok((total / mu.rows().max(1) as f64) as f32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeArch {
    pub data_dim: usize,
    /// Width of the one-hot conditioning; 0 for an unconditional VAE.
    pub num_classes: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
}

impl VaeArch {
    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.data_dim + self.num_classes];
        w.extend(&self.encoder_hidden);
        w.push(2 * self.latent_dim);
        w
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.latent_dim + self.num_classes];
        w.extend(&self.decoder_hidden);
        w.push(self.data_dim);
        w
    }
}

/// `x ↦ (x − shift) / scale`, one shift per dimension and a single scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub shift: Vec<f32>,
    pub scale: f32,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: 1.0,
        }
    }

    /// Column means and the root-mean-square centred value over all entries.
    /// A constant input keeps scale 1.
    pub fn fit(features: &Matrix) -> Self {
        let (rows, cols) = features.shape();
        let n = rows.max(1) as f64;
        let mut mean = vec![0.0f64; cols];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(features.row(r)) {
                *m += v as f64 / n;
            }
        }
        let mut ss = 0.0f64;
        for r in 0..rows {
            for (m, &v) in mean.iter().zip(features.row(r)) {
                ss += (v as f64 - m).powi(2);
            }
        }
        let rms = (ss / (n * cols.max(1) as f64)).sqrt();
        Self {
            shift: mean.iter().map(|&m| m as f32).collect(),
            scale: if rms > 1e-6 { rms as f32 } else { 1.0 },
        }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (v, &m) in out.row_mut(r).iter_mut().zip(&self.shift) {
                *v = (*v - m) / self.scale;
            }
        }
        out
    }

    pub fn invert(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (v, &m) in out.row_mut(r).iter_mut().zip(&self.shift) {
                *v = *v * self.scale + m;
            }
        }
        out
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let ok = self.shift.len() == dim
            && self.shift.iter().all(|v| v.is_finite())
            && self.scale.is_finite()
            && self.scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "standardizer needs {dim} finite shifts and a positive scale"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLoss {
    pub total: f32,
    pub reconstruction: f32,
    pub kl: f32,
}

#[derive(Debug, Clone)]
pub struct VaeGrads {
    pub encoder: Vec<LayerGrads>,
    pub decoder: Vec<LayerGrads>,
}

impl VaeGrads {
    /// Encoder then decoder; per layer the weight (row-major) then the bias.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for g in self.encoder.iter().chain(&self.decoder) {
            out.extend_from_slice(g.weight.data());
            out.extend_from_slice(&g.bias);
        }
        out
    }
}

/// Variational autoencoder, conditional when `arch.num_classes > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    arch: VaeArch,
    encoder: Network,
    decoder: Network,
    standardizer: Standardizer,
}

/// The conditional model used for activation replay.
pub type CvaeModel = Vae;

impl Vae {
    pub fn new(arch: VaeArch, rng: &mut Rng) -> Result<Self> {
        if arch.latent_dim == 0 || arch.data_dim == 0 {
            return Err(Error::InvalidArgument(
                "latent and data dims must be positive".into(),
            ));
        }
        let encoder = Network::init(&arch.encoder_widths(), Activation::Identity, rng);
        let decoder = Network::init(&arch.decoder_widths(), Activation::Identity, rng);
        Ok(Self {
            standardizer: Standardizer::identity(arch.data_dim),
            arch,
            encoder,
            decoder,
        })
    }

    /// Reassembles a VAE from stored parts, validating every width.
    pub fn from_parts(
        arch: VaeArch,
        encoder: Network,
        decoder: Network,
        standardizer: Standardizer,
    ) -> Result<Self> {
        let check = |net: &Network, widths: Vec<usize>, what: &str| -> Result<()> {
            let got: Vec<usize> = std::iter::once(net.input_dim())
                .chain(net.layers.iter().map(|l| l.outputs()))
                .collect();
            let chained = net
                .layers
                .windows(2)
                .all(|w| w[0].outputs() == w[1].inputs());
            if got != widths || !chained {
                return Err(Error::InvalidArgument(format!(
                    "{what} widths {got:?} do not match architecture {widths:?}"
                )));
            }
            Ok(())
        };
        check(&encoder, arch.encoder_widths(), "encoder")?;
        check(&decoder, arch.decoder_widths(), "decoder")?;
        standardizer.validate(arch.data_dim)?;
        Ok(Self {
            arch,
            encoder,
            decoder,
            standardizer,
        })
    }

    pub fn arch(&self) -> &VaeArch {
        &self.arch
    }

    pub fn encoder(&self) -> &Network {
        &self.encoder
    }

    pub fn decoder(&self) -> &Network {
        &self.decoder
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn is_conditional(&self) -> bool {
        self.arch.num_classes > 0
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    /// Encoder then decoder parameters, in `VaeGrads::flatten` order.
    pub fn flat_params(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.encoder.layers.iter().chain(&self.decoder.layers) {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    fn with_condition(&self, x: &Matrix, labels: Option<&[usize]>) -> Result<Matrix> {
        if !self.is_conditional() {
            return Ok(x.clone());
        }
        let labels = labels
            .ok_or_else(|| Error::InvalidArgument("conditional VAE needs class labels".into()))?;
        if labels.len() != x.rows() {
            return Err(Error::Shape {
                op: "vae condition",
                left: x.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&c) = labels.iter().find(|&&c| c >= self.arch.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "class {c} outside the {} conditioning classes",
                self.arch.num_classes
            )));
        }
        x.hcat(&Matrix::one_hot(labels, self.arch.num_classes))
    }

    /// Posterior parameters `(μ, log σ²)` of raw activations.
    pub fn encode(&self, features: &Matrix, labels: Option<&[usize]>) -> Result<(Matrix, Matrix)> {
        let x = self.standardizer.apply(features);
        let out = self.encoder.infer(&self.with_condition(&x, labels)?)?;
        let z = self.arch.latent_dim;
        Ok((out.columns(0, z), out.columns(z, 2 * z)))
    }

    /// Decoded activations in the raw space.
    pub fn decode(&self, z: &Matrix, labels: Option<&[usize]>) -> Result<Matrix> {
        let out = self.decoder.infer(&self.with_condition(z, labels)?)?;
        Ok(self.standardizer.invert(&out))
    }

    /// Loss and pathwise gradients for one batch of already standardized
    /// features with the noise `n` given.
    pub fn loss_and_grads(
        &mut self,
        features: &Matrix,
        labels: Option<&[usize]>,
        beta: f32,
        noise: &Matrix,
    ) -> Result<(VaeLoss, VaeGrads)> {
        let zd = self.arch.latent_dim;
        if noise.shape() != (features.rows(), zd) {
            return Err(Error::Shape {
                op: "vae noise",
                left: noise.shape(),
                right: (features.rows(), zd),
            });
        }
        let enc_in = self.with_condition(features, labels)?;
        let enc_out = self.encoder.forward(&enc_in)?;
        let mu = enc_out.columns(0, zd);
        let log_var = enc_out.columns(zd, 2 * zd);
        let sigma = log_var.map(|v| (0.5 * v).exp());
        let z = reparameterize(&mu, &sigma, noise);
        let dec_in = self.with_condition(&z, labels)?;
        let recon = self.decoder.forward(&dec_in)?;
        let (rec_loss, g_recon) = mse_loss(&recon, features)?;
        let kl = kl_diag_gauss(&mu, &log_var)?;
        let total = rec_loss + beta * kl;

        let (g_dec_in, dec_grads) = self.decoder.backward(&g_recon)?;
        let batch = features.rows().max(1) as f32;
        let mut g_enc = Matrix::zeros(features.rows(), 2 * zd);
        for r in 0..features.rows() {
            for j in 0..zd {
                let gz = g_dec_in.get(r, j);
                let m = mu.get(r, j);
                let lv = log_var.get(r, j);
                let s = sigma.get(r, j);
                g_enc.set(r, j, gz + beta * m / batch);
                g_enc.set(
                    r,
                    zd + j,
                    gz * noise.get(r, j) * 0.5 * s + beta * 0.5 * (lv.exp() - 1.0) / batch,
                );
            }
        }
        let (_, enc_grads) = self.encoder.backward(&g_enc)?;
        Ok((
            VaeLoss {
                total,
                reconstruction: rec_loss,
                kl,
            },
            VaeGrads {
                encoder: enc_grads,
                decoder: dec_grads,
            },
        ))
    }

    /// Draws fresh noise and evaluates the loss.
    pub fn loss(
        &mut self,
        batch: &ActivationBatch,
        beta: f32,
        rng: &mut Rng,
    ) -> Result<(VaeLoss, VaeGrads)> {
        if beta < 0.0 {
            return Err(Error::InvalidArgument(format!("β must be ≥ 0, got {beta}")));
        }
        let noise = rng.normal_matrix(batch.len(), self.arch.latent_dim);
        let labels = if self.is_conditional() {
            Some(batch.labels()?)
        } else {
            None
        };
        let x = self.standardizer.apply(&batch.features);
        self.loss_and_grads(&x, labels, beta, &noise)
    }

    fn clear_cache(&mut self) {
        self.encoder.clear_cache();
        self.decoder.clear_cache();
    }
}

/// `z = μ + σ ⊙ n`.
pub fn reparameterize(mu: &Matrix, sigma: &Matrix, noise: &Matrix) -> Matrix {
    let mut z = mu.clone();
    for ((zv, &s), &n) in z.data_mut().iter_mut().zip(sigma.data()).zip(noise.data()) {
        *zv += s * n;
    }
    z
}

/// Network parameters plus the standardizer's `|A_s| + 1` floats.
pub fn vae_memory_bytes(vae: &Vae) -> u64 {
    (vae.param_count() + vae.arch.data_dim + 1) as u64 * F32_BYTES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lr_schedule: LrSchedule,
    pub beta: BetaSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeEpochLog {
    pub epoch: usize,
    pub beta: f32,
    pub lr: f32,
    pub loss: f32,
    pub reconstruction: f32,
    pub kl: f32,
}

fn train_vae(
    mut model: Vae,
    features: &Matrix,
    labels: Option<&[usize]>,
    cfg: &VaeTrainConfig,
    rng: &mut Rng,
) -> Result<(Vae, Vec<VaeEpochLog>)> {
    let mut opt = Optimizer::new(OptimizerConfig {
        kind: OptimizerKind::ADAM,
        lr: cfg.lr,
        schedule: cfg.lr_schedule,
    })?;
    model.standardizer = Standardizer::fit(features);
    let features = &model.standardizer.apply(features);
    let n = features.rows();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.clone();
    for epoch in 0..cfg.epochs {
        let beta = cfg.beta.at(epoch);
        let order = rng.permutation(n);
        let (mut tot, mut rec, mut kl) = (0.0f64, 0.0f64, 0.0f64);
        for (b, idx) in batches(&order, cfg.batch_size).enumerate() {
            let x = features.select_rows(idx);
            let y: Option<Vec<usize>> = labels.map(|l| idx.iter().map(|&i| l[i]).collect());
            let noise = rng.normal_matrix(idx.len(), model.arch.latent_dim);
            let (loss, grads) = model.loss_and_grads(&x, y.as_deref(), beta, &noise)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    context: format!("VAE loss is {} at epoch {epoch}, batch {b}", loss.total),
                    last_good: Some(Box::new(last_good)),
                });
            }
            let w = idx.len() as f64;
            tot += loss.total as f64 * w;
            rec += loss.reconstruction as f64 * w;
            kl += loss.kl as f64 * w;
            let mut params = model.encoder.params(&grads.encoder, "encoder.");
            params.extend(model.decoder.params(&grads.decoder, "decoder."));
            if let Err(e) = opt.step(epoch, &mut params) {
                return Err(match e {
                    Error::NonFinite(msg) => Error::Diverged {
                        context: format!("{msg} at epoch {epoch}, batch {b}"),
                        last_good: Some(Box::new(last_good)),
                    },
                    other => other,
                });
            }
        }
        model.clear_cache();
        let denom = n.max(1) as f64;
        log.push(VaeEpochLog {
            epoch,
            beta,
            lr: opt.lr_at(epoch),
            loss: (tot / denom) as f32,
            reconstruction: (rec / denom) as f32,
            kl: (kl / denom) as f32,
        });
        last_good = model.clone();
    }
    Ok((model, log))
}

/// β-annealed training of a conditional VAE on labeled activations.
pub fn train_cvae(
    model: CvaeModel,
    activations: &ActivationBatch,
    cfg: &VaeTrainConfig,
    rng: &mut Rng,
) -> Result<(CvaeModel, Vec<VaeEpochLog>)> {
    if !model.is_conditional() {
        return Err(Error::InvalidArgument(
            "train_cvae needs a conditional model".into(),
        ));
    }
    let labels = activations.labels()?;
    activations.validate(model.arch.num_classes)?;
    if activations.features.cols() != model.arch.data_dim {
        return Err(Error::Shape {
            op: "train_cvae",
            left: activations.features.shape(),
            right: (activations.len(), model.arch.data_dim),
        });
    }
    train_vae(model, &activations.features, Some(labels), cfg, rng)
}

/// Anything that can synthesize labeled activations for requested classes.
pub trait ActivationGenerator {
    fn data_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn memory_bytes(&self) -> u64;
    /// Deterministic in `(self, counts, seed)`; class `c` draws from a stream
    /// derived from `seed` and `c` only.
    fn generate(&self, counts: &BTreeMap<usize, usize>, seed: u64) -> Result<ActivationBatch>;
}

fn check_classes(counts: &BTreeMap<usize, usize>, classes: usize) -> Result<()> {
    match counts.keys().find(|&&c| c >= classes) {
        Some(c) => Err(Error::InvalidArgument(format!(
            "requested class {c} but the generator knows {classes} classes"
        ))),
        None => Ok(()),
    }
}

fn assemble(parts: Vec<Matrix>, labels: Vec<usize>, cols: usize) -> Result<ActivationBatch> {
    let features = if parts.is_empty() {
        Matrix::zeros(0, cols)
    } else {
        Matrix::vstack(&parts)?
    };
    Ok(ActivationBatch {
        features,
        labels: Some(labels),
        provenance: Provenance::Generated,
    })
}

/// Decodes `count_c` prior draws conditioned on each requested class `c`.
pub fn generate_activations(
    model: &CvaeModel,
    counts: &BTreeMap<usize, usize>,
    seed: u64,
) -> Result<ActivationBatch> {
    if !model.is_conditional() {
        return Err(Error::InvalidArgument(
            "generate_activations needs a conditional model".into(),
        ));
    }
    check_classes(counts, model.arch.num_classes)?;
    let root = Rng::new(seed);
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    for (&class, &count) in counts {
        if count == 0 {
            continue;
        }
        let mut rng = root.derive_index(class as u64);
        let z = rng.normal_matrix(count, model.arch.latent_dim);
        let y = vec![class; count];
        parts.push(model.decode(&z, Some(&y))?);
        labels.extend(y);
    }
    assemble(parts, labels, model.arch.data_dim)
}

impl ActivationGenerator for Vae {
    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn memory_bytes(&self) -> u64 {
        vae_memory_bytes(self)
    }

    fn generate(&self, counts: &BTreeMap<usize, usize>, seed: u64) -> Result<ActivationBatch> {
        generate_activations(self, counts, seed)
    }
}

/// One unconditional VAE per source class.
#[derive(Debug, Clone, PartialEq)]
pub struct UncondVaePack {
    vaes: Vec<Vae>,
}

impl UncondVaePack {
    pub fn new(vaes: Vec<Vae>) -> Result<Self> {
        let Some(first) = vaes.first() else {
            return Err(Error::InvalidArgument("empty VAE pack".into()));
        };
        if vaes
            .iter()
            .any(|v| v.is_conditional() || v.arch != first.arch)
        {
            return Err(Error::InvalidArgument(
                "pack members must share one unconditional architecture".into(),
            ));
        }
        Ok(Self { vaes })
    }

    pub fn vaes(&self) -> &[Vae] {
        &self.vaes
    }

    pub fn member_bytes(&self) -> u64 {
        vae_memory_bytes(&self.vaes[0])
    }
}

/// Trains `arch.num_classes`-free VAEs, one per class present in `0..classes`.
pub fn train_uncond_pack(
    arch: &VaeArch,
    classes: usize,
    activations: &ActivationBatch,
    cfg: &VaeTrainConfig,
    rng: &mut Rng,
) -> Result<(UncondVaePack, Vec<Vec<VaeEpochLog>>)> {
    if arch.num_classes != 0 {
        return Err(Error::InvalidArgument(
            "pack members take no conditioning input".into(),
        ));
    }
    let labels = activations.labels()?;
    activations.validate(classes)?;
    let mut vaes = Vec::with_capacity(classes);
    let mut logs = Vec::with_capacity(classes);
    for c in 0..classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no activations for class {c}"
            )));
        }
        let mut class_rng = rng.derive_index(c as u64);
        let vae = Vae::new(arch.clone(), &mut class_rng)?;
        let x = activations.features.select_rows(&idx);
        let (vae, log) = train_vae(vae, &x, None, cfg, &mut class_rng)?;
        vaes.push(vae);
        logs.push(log);
    }
    Ok((UncondVaePack::new(vaes)?, logs))
}

/// Samples the VAE of each requested class.
pub fn generate_uncond(
    pack: &UncondVaePack,
    counts: &BTreeMap<usize, usize>,
    seed: u64,
) -> Result<ActivationBatch> {
    check_classes(counts, pack.vaes.len())?;
    let root = Rng::new(seed);
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    for (&class, &count) in counts {
        if count == 0 {
            continue;
        }
        let vae = &pack.vaes[class];
        let mut rng = root.derive_index(class as u64);
        let z = rng.normal_matrix(count, vae.arch.latent_dim);
        parts.push(vae.decode(&z, None)?);
        labels.extend(std::iter::repeat_n(class, count));
    }
    assemble(parts, labels, pack.vaes[0].arch.data_dim)
}

impl ActivationGenerator for UncondVaePack {
    fn data_dim(&self) -> usize {
        self.vaes[0].arch.data_dim
    }

    fn num_classes(&self) -> usize {
        self.vaes.len()
    }

    fn memory_bytes(&self) -> u64 {
        self.vaes.iter().map(vae_memory_bytes).sum()
    }

    fn generate(&self, counts: &BTreeMap<usize, usize>, seed: u64) -> Result<ActivationBatch> {
        generate_uncond(self, counts, seed)
    }
}
