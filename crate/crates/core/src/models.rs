//! Desk-scale stand-ins for the deployed model and its pruned variant: an MLP
//! split into a feature extractor (FE) and a single linear classifier (FC).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    batches, softmax_xent_loss, Activation, DenseLayer, Matrix, Network, Optimizer,
    OptimizerConfig, Rng, F32_BYTES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelRole {
    Deployed,
    Pruned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub role: ModelRole,
    pub prune_fraction: f32,
    pub num_classes: usize,
    pub activation_dim: usize,
}

/// MLP whose layers `[0, feature_boundary)` form the feature extractor and
/// whose single remaining layer is the linear classifier `[s × |A_s|]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    network: Network,
    feature_boundary: usize,
    meta: ModelMeta,
}

impl MlpModel {
    pub fn new(layers: Vec<DenseLayer>, feature_boundary: usize, meta: ModelMeta) -> Result<Self> {
        if layers.is_empty() || feature_boundary + 1 != layers.len() {
            return Err(Error::InvalidArgument(format!(
                "classifier must be exactly one layer after the boundary \
                 ({} layers, boundary {feature_boundary})",
                layers.len()
            )));
        }
        for w in layers.windows(2) {
            if w[0].outputs() != w[1].inputs() {
                return Err(Error::Shape {
                    op: "MlpModel::new (layer chain)",
                    left: w[0].weight.shape(),
                    right: w[1].weight.shape(),
                });
            }
        }
        let fc = &layers[feature_boundary];
        if fc.activation != Activation::Identity {
            return Err(Error::InvalidArgument(
                "classifier layer must be linear".into(),
            ));
        }
        if fc.outputs() != meta.num_classes || fc.inputs() != meta.activation_dim {
            return Err(Error::Shape {
                op: "MlpModel::new (classifier vs metadata)",
                left: fc.weight.shape(),
                right: (meta.num_classes, meta.activation_dim),
            });
        }
        if !(0.0..1.0).contains(&meta.prune_fraction) {
            return Err(Error::InvalidArgument(format!(
                "prune fraction {} outside [0, 1)",
                meta.prune_fraction
            )));
        }
        Ok(Self {
            network: Network { layers },
            feature_boundary,
            meta,
        })
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.network.layers
    }

    pub fn feature_boundary(&self) -> usize {
        self.feature_boundary
    }

    pub fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    pub fn activation_dim(&self) -> usize {
        self.meta.activation_dim
    }

    pub fn feature_layers(&self) -> &[DenseLayer] {
        &self.network.layers[..self.feature_boundary]
    }

    pub fn classifier(&self) -> &DenseLayer {
        &self.network.layers[self.feature_boundary]
    }

    pub(crate) fn classifier_mut(&mut self) -> &mut DenseLayer {
        &mut self.network.layers[self.feature_boundary]
    }

    pub fn param_count(&self) -> usize {
        self.network.param_count()
    }

    pub fn feature_param_count(&self) -> usize {
        self.feature_layers()
            .iter()
            .map(DenseLayer::param_count)
            .sum()
    }

    /// FE output `A_s` for a batch of inputs.
    pub fn features(&self, inputs: &Matrix) -> Result<Matrix> {
        let mut x = inputs.clone();
        for layer in self.feature_layers() {
            x = layer.infer(&x)?;
        }
        Ok(x)
    }

    /// FC applied to precomputed activations.
    pub fn classify(&self, activations: &Matrix) -> Result<Matrix> {
        self.classifier().infer(activations)
    }

    pub fn logits(&self, inputs: &Matrix) -> Result<Matrix> {
        self.network.infer(inputs)
    }

    pub fn predict(&self, inputs: &Matrix) -> Result<Vec<usize>> {
        Ok(self.logits(inputs)?.argmax_rows())
    }
}

/// Static storage of a model: every parameter at 4 bytes.
pub fn model_memory_bytes(model: &MlpModel) -> u64 {
    model.param_count() as u64 * F32_BYTES
}

/// Inputs with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows whose label lies in `classes`, in original order.
    pub fn restrict(&self, classes: &[usize]) -> Dataset {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Gaussian-mixture generator parameters for the source domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Standard deviation of the class-mean prior `μ_c ~ N(0, scale² I)`.
    pub mean_scale: f32,
    pub within_sigma: f32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Dataset,
    pub val: Dataset,
    /// `[s × d_in]`, row c is `μ_c`.
    pub class_means: Matrix,
    pub within_sigma: f32,
}

impl SyntheticData {
    /// Fresh samples of `classes` from the same mixture, e.g. a target stream.
    pub fn sample(&self, classes: &[usize], per_class: usize, rng: &mut Rng) -> Result<Dataset> {
        sample_mixture(
            &self.class_means,
            self.within_sigma,
            classes,
            per_class,
            rng,
        )
    }
}

pub fn sample_mixture(
    means: &Matrix,
    sigma: f32,
    classes: &[usize],
    per_class: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    if let Some(&c) = classes.iter().find(|&&c| c >= means.rows()) {
        return Err(Error::InvalidArgument(format!(
            "class {c} outside mixture of {} classes",
            means.rows()
        )));
    }
    let d = means.cols();
    let mut inputs = Matrix::zeros(classes.len() * per_class, d);
    let mut labels = Vec::with_capacity(classes.len() * per_class);
    let mut r = 0;
    for &c in classes {
        for _ in 0..per_class {
            let row = inputs.row_mut(r);
            for (j, x) in row.iter_mut().enumerate() {
                *x = means.get(c, j) + sigma * rng.normal();
            }
            labels.push(c);
            r += 1;
        }
    }
    let order = rng.permutation(labels.len());
    Ok(Dataset {
        inputs: inputs.select_rows(&order),
        labels: order.iter().map(|&i| labels[i]).collect(),
    })
}

pub fn synth_dataset(spec: &DatasetSpec) -> Result<SyntheticData> {
    if spec.num_classes < 2 || spec.input_dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes and 2 input dims, got s={} d_in={}",
            spec.num_classes, spec.input_dim
        )));
    }
    if !(spec.within_sigma >= 0.0 && spec.within_sigma.is_finite()) || !spec.mean_scale.is_finite()
    {
        return Err(Error::InvalidArgument(format!(
            "degenerate spread (within σ = {}, mean scale = {})",
            spec.within_sigma, spec.mean_scale
        )));
    }
    let root = Rng::new(spec.seed);
    let mut mean_rng = root.derive("class-means");
    let class_means = mean_rng
        .normal_matrix(spec.num_classes, spec.input_dim)
        .map(|v| v * spec.mean_scale);
    let classes: Vec<usize> = (0..spec.num_classes).collect();
    let train = sample_mixture(
        &class_means,
        spec.within_sigma,
        &classes,
        spec.train_per_class,
        &mut root.derive("train"),
    )?;
    let val = sample_mixture(
        &class_means,
        spec.within_sigma,
        &classes,
        spec.val_per_class,
        &mut root.derive("val"),
    )?;
    Ok(SyntheticData {
        train,
        val,
        class_means,
        within_sigma: spec.within_sigma,
    })
}

/// Supervised training recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f32,
    pub train_accuracy: f32,
    pub val_accuracy: Option<f32>,
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f32 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f32 / labels.len() as f32
}

/// Minibatch softmax-cross-entropy training of `net` on `(inputs, labels)`.
/// Returns the mean training loss of each epoch.
pub(crate) fn train_softmax(
    net: &mut Network,
    inputs: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(usize, &Network) -> Result<()>,
) -> Result<Vec<f32>> {
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = rng.permutation(labels.len());
        let mut total = 0.0f64;
        for (b, idx) in batches(&order, cfg.batch_size).enumerate() {
            let x = inputs.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let logits = net.forward(&x)?;
            let (loss, grad) = softmax_xent_loss(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {b}"
                )));
            }
            total += loss as f64 * idx.len() as f64;
            let (_, grads) = net.backward(&grad)?;
            opt.step(epoch, &mut net.params(&grads, ""))?;
        }
        net.clear_cache();
        losses.push((total / labels.len().max(1) as f64) as f32);
        on_epoch(epoch, net)?;
    }
    Ok(losses)
}

/// Feature-extractor widths; the last entry is `|A_s|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub feature_widths: Vec<usize>,
}

pub fn init_model(
    input_dim: usize,
    num_classes: usize,
    arch: &ArchSpec,
    rng: &mut Rng,
) -> Result<MlpModel> {
    if arch.feature_widths.is_empty() {
        return Err(Error::InvalidArgument(
            "feature extractor needs at least one layer".into(),
        ));
    }
    let mut widths = vec![input_dim];
    widths.extend(&arch.feature_widths);
    let mut layers = Network::init(&widths, Activation::Relu, rng).layers;
    let activation_dim = *arch.feature_widths.last().unwrap();
    layers.push(DenseLayer::init(
        activation_dim,
        num_classes,
        Activation::Identity,
        rng,
    ));
    MlpModel::new(
        layers,
        arch.feature_widths.len(),
        ModelMeta {
            role: ModelRole::Deployed,
            prune_fraction: 0.0,
            num_classes,
            activation_dim,
        },
    )
}

/// Trains every layer of `model` and logs per-epoch loss/accuracy.
pub fn fit_model(
    model: &mut MlpModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<EpochLog>> {
    let mut accs = Vec::with_capacity(cfg.epochs);
    let losses = train_softmax(
        &mut model.network,
        &train.inputs,
        &train.labels,
        cfg,
        rng,
        |_, net| {
            let tr = accuracy(&net.infer(&train.inputs)?.argmax_rows(), &train.labels);
            let va = if val.is_empty() {
                None
            } else {
                Some(accuracy(
                    &net.infer(&val.inputs)?.argmax_rows(),
                    &val.labels,
                ))
            };
            accs.push((tr, va));
            Ok(())
        },
    )?;
    Ok(losses
        .into_iter()
        .zip(accs)
        .enumerate()
        .map(|(epoch, (loss, (train_accuracy, val_accuracy)))| EpochLog {
            epoch,
            loss,
            train_accuracy,
            val_accuracy,
        })
        .collect())
}

/// Trains the deployed model `M^0` from scratch.
pub fn train_source_model(
    data: &SyntheticData,
    arch: &ArchSpec,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(MlpModel, Vec<EpochLog>)> {
    let num_classes = data.class_means.rows();
    let mut model = init_model(data.train.inputs.cols(), num_classes, arch, rng)?;
    let log = fit_model(&mut model, &data.train, &data.val, cfg, rng)?;
    Ok((model, log))
}

/// Units kept in a layer of `width` when pruning fraction `p`.
pub fn retained_width(width: usize, p: f32) -> usize {
    // The f32 product rounds back onto the integer when p·width is one, so
    // 0.9 × 10 removes 9 units rather than 8.
    width - (p * width as f32).floor() as usize
}

/// Magnitude pruning of the FE hidden layers followed by a fresh classifier
/// and a short finetune on the source data.
///
/// Every FE layer except the one producing `A_s` loses its `⌊p·width⌋` units
/// with the smallest incoming-weight L2 norm; the next layer's input columns
/// are dropped to match. `|A_s|` is preserved.
pub fn prune_model(
    m0: &MlpModel,
    p: f32,
    train: &Dataset,
    finetune: &TrainConfig,
    rng: &mut Rng,
) -> Result<MlpModel> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "prune fraction {p} outside [0, 1)"
        )));
    }
    let mut layers: Vec<DenseLayer> = m0.feature_layers().to_vec();
    let last = layers.len() - 1;
    for i in 0..last {
        let width = layers[i].outputs();
        let keep = retained_width(width, p);
        if keep < 2 {
            return Err(Error::InvalidArgument(format!(
                "pruning {p} leaves {keep} units in FE layer {i} (width {width})"
            )));
        }
        let w = &layers[i].weight;
        let mut ranked: Vec<(f32, usize)> = (0..width)
            .map(|u| (w.row(u).iter().map(|v| v * v).sum::<f32>(), u))
            .collect();
        // largest norm first, lower index wins ties
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut kept: Vec<usize> = ranked[..keep].iter().map(|&(_, u)| u).collect();
        kept.sort_unstable();

        let cur = &layers[i];
        let weight = cur.weight.select_rows(&kept);
        let bias = kept.iter().map(|&u| cur.bias[u]).collect();
        layers[i] = DenseLayer::new(weight, bias, cur.activation)?;

        let next = &layers[i + 1];
        let weight = Matrix::from_fn(next.outputs(), kept.len(), |r, c| {
            next.weight.get(r, kept[c])
        });
        layers[i + 1] = DenseLayer::new(weight, next.bias.clone(), next.activation)?;
    }
    let activation_dim = m0.activation_dim();
    layers.push(DenseLayer::init(
        activation_dim,
        m0.num_classes(),
        Activation::Identity,
        rng,
    ));
    let mut mp = MlpModel::new(
        layers,
        m0.feature_boundary(),
        ModelMeta {
            role: ModelRole::Pruned,
            prune_fraction: p,
            num_classes: m0.num_classes(),
            activation_dim,
        },
    )?;
    train_softmax(
        &mut mp.network,
        &train.inputs,
        &train.labels,
        finetune,
        rng,
        |_, _| Ok(()),
    )?;
    Ok(mp)
}

/// Parameter count implied by layer widths `[d_in, h_1, …, h_k, s]`.
pub fn param_count_for_widths(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Real,
    Generated,
}

/// Rows of FE activations, real or generated, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub provenance: Provenance,
}

impl ActivationBatch {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            if labels.len() != self.features.rows() {
                return Err(Error::Shape {
                    op: "ActivationBatch labels",
                    left: self.features.shape(),
                    right: (labels.len(), 1),
                });
            }
            if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::InvalidArgument(format!(
                    "label {l} outside {num_classes} classes"
                )));
            }
        }
        if !self.features.is_finite() {
            return Err(Error::NonFinite("activation batch contains NaN/Inf".into()));
        }
        Ok(())
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("activation batch carries no labels".into()))
    }
}

/// Forward through the FE only.
pub fn extract_activations(
    model: &MlpModel,
    inputs: &Matrix,
    labels: Option<&[usize]>,
) -> Result<ActivationBatch> {
    if inputs.cols() != model.input_dim() {
        return Err(Error::Shape {
            op: "extract_activations",
            left: inputs.shape(),
            right: (model.input_dim(), model.activation_dim()),
        });
    }
    Ok(ActivationBatch {
        features: model.features(inputs)?,
        labels: labels.map(<[usize]>::to_vec),
        provenance: Provenance::Real,
    })
}
