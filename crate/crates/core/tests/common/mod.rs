//! Independent f64 reference forwards used as finite-difference oracles,
//! plus statistics helpers shared by the integration tests.

#![allow(dead_code)]

use loco_core::cvae::{ActivationGenerator, Vae};
use loco_core::numerics::{
    gradcheck, Activation, DenseLayer, GradcheckReport, Matrix, Network, Probe, Rng,
};

pub const H: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub relu: bool,
}

pub fn shapes(net: &Network) -> Vec<LayerShape> {
    net.layers
        .iter()
        .map(|l| LayerShape {
            inputs: l.inputs(),
            outputs: l.outputs(),
            relu: l.activation == Activation::Relu,
        })
        .collect()
}

pub fn flat(layers: &[DenseLayer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weight.data().iter().chain(&l.bias).map(|&v| v as f64))
        .collect()
}

pub fn to_f64(m: &Matrix) -> Vec<f64> {
    m.data().iter().map(|&v| v as f64).collect()
}

/// Row-major `rows × shapes[0].inputs` input through the layers; parameters
/// laid out per layer as weight (out × in, row-major) then bias. ReLU on/off
/// states are appended to `pattern`.
pub fn mlp_forward(
    shapes: &[LayerShape],
    params: &[f64],
    x: &[f64],
    rows: usize,
    pattern: &mut Vec<bool>,
) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut off = 0;
    for s in shapes {
        let w = &params[off..off + s.outputs * s.inputs];
        let b = &params[off + s.outputs * s.inputs..off + s.outputs * s.inputs + s.outputs];
        off += s.outputs * s.inputs + s.outputs;
        let mut next = vec![0.0; rows * s.outputs];
        for r in 0..rows {
            for o in 0..s.outputs {
                let mut acc = b[o];
                for i in 0..s.inputs {
                    acc += cur[r * s.inputs + i] * w[o * s.inputs + i];
                }
                if s.relu {
                    pattern.push(acc > 0.0);
                    acc = acc.max(0.0);
                }
                next[r * s.outputs + o] = acc;
            }
        }
        cur = next;
    }
    cur
}

pub fn mse(pred: &[f64], target: &[f64], rows: usize) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / rows as f64
}

pub fn softmax_xent(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let rows = labels.len();
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / rows as f64
}

fn one_hot_cat(
    x: &[f64],
    rows: usize,
    cols: usize,
    labels: Option<&[usize]>,
    classes: usize,
) -> Vec<f64> {
    let Some(labels) = labels else {
        return x.to_vec();
    };
    let mut out = Vec::with_capacity(rows * (cols + classes));
    for r in 0..rows {
        out.extend_from_slice(&x[r * cols..(r + 1) * cols]);
        out.extend((0..classes).map(|c| if c == labels[r] { 1.0 } else { 0.0 }));
    }
    out
}

/// Reparameterized VAE objective: MSE reconstruction plus β times the
/// diagonal-Gaussian KL to N(0, I), both averaged over rows.
#[allow(clippy::too_many_arguments)]
pub fn vae_loss(
    enc: &[LayerShape],
    dec: &[LayerShape],
    params: &[f64],
    x: &[f64],
    rows: usize,
    labels: Option<&[usize]>,
    classes: usize,
    beta: f64,
    noise: &[f64],
) -> Probe {
    let data_dim = x.len() / rows;
    let z_dim = noise.len() / rows;
    let enc_len: usize = enc.iter().map(|s| s.outputs * s.inputs + s.outputs).sum();
    let mut pattern = Vec::new();
    let enc_in = one_hot_cat(x, rows, data_dim, labels, classes);
    let out = mlp_forward(enc, &params[..enc_len], &enc_in, rows, &mut pattern);
    let mut z = vec![0.0; rows * z_dim];
    let mut kl = 0.0;
    for r in 0..rows {
        for j in 0..z_dim {
            let mu = out[r * 2 * z_dim + j];
            let lv = out[r * 2 * z_dim + z_dim + j];
            z[r * z_dim + j] = mu + (0.5 * lv).exp() * noise[r * z_dim + j];
            kl += 0.5 * (mu * mu + lv.exp() - lv - 1.0);
        }
    }
    let dec_in = one_hot_cat(&z, rows, z_dim, labels, classes);
    let recon = mlp_forward(dec, &params[enc_len..], &dec_in, rows, &mut pattern);
    Probe {
        value: mse(&recon, x, rows) + beta * kl / rows as f64,
        pattern,
    }
}

pub fn random_layer(inputs: usize, outputs: usize, act: Activation, rng: &mut Rng) -> DenseLayer {
    let w = rng.uniform_matrix(outputs, inputs, -1.0, 1.0);
    let b = (0..outputs).map(|_| rng.uniform_range(-0.5, 0.5)).collect();
    DenseLayer::new(w, b, act).unwrap()
}

/// Dense layer under the scalar `Σ out ⊙ G` for a fixed random `G`: weight,
/// bias and input gradients in one vector.
pub fn check_dense(act: Activation, seed: u64) -> GradcheckReport {
    let mut rng = Rng::new(seed);
    let (rows, inputs, outputs) = (4, 6, 5);
    let mut layer = random_layer(inputs, outputs, act, &mut rng);
    let x = rng.normal_matrix(rows, inputs);
    let g = rng.normal_matrix(rows, outputs);
    layer.forward(&x).unwrap();
    let grads = layer.backward(&g).unwrap();
    let mut analytic: Vec<f32> = grads.weight.data().to_vec();
    analytic.extend(&grads.bias);
    analytic.extend(grads.input.data());

    let shape = [LayerShape {
        inputs,
        outputs,
        relu: act == Activation::Relu,
    }];
    let n_params = outputs * inputs + outputs;
    let mut point = flat(std::slice::from_ref(&layer));
    point.extend(to_f64(&x));
    let gv = to_f64(&g);
    gradcheck(
        |p| {
            let mut pattern = Vec::new();
            let out = mlp_forward(&shape, &p[..n_params], &p[n_params..], rows, &mut pattern);
            Probe {
                value: out.iter().zip(&gv).map(|(a, b)| a * b).sum(),
                pattern,
            }
        },
        &point,
        &analytic,
        H,
    )
}

pub fn check_mse(seed: u64) -> GradcheckReport {
    let mut rng = Rng::new(seed);
    let pred = rng.normal_matrix(3, 7);
    let target = rng.normal_matrix(3, 7);
    let (_, grad) = loco_core::numerics::mse_loss(&pred, &target).unwrap();
    let t = to_f64(&target);
    gradcheck(
        |p| Probe::smooth(mse(p, &t, 3)),
        &to_f64(&pred),
        grad.data(),
        H,
    )
}

pub fn check_xent(seed: u64) -> GradcheckReport {
    let mut rng = Rng::new(seed);
    let classes = 6;
    let logits = rng.normal_matrix(5, classes);
    let labels: Vec<usize> = (0..5).map(|_| rng.below(classes)).collect();
    let (_, grad) = loco_core::numerics::softmax_xent_loss(&logits, &labels).unwrap();
    gradcheck(
        |p| Probe::smooth(softmax_xent(p, &labels, classes)),
        &to_f64(&logits),
        grad.data(),
        H,
    )
}

/// Two-layer ReLU network under MSE, with respect to all parameters.
pub fn check_mlp_mse(seed: u64) -> GradcheckReport {
    let mut rng = Rng::new(seed);
    let rows = 6;
    let mut net = Network {
        layers: vec![
            random_layer(5, 8, Activation::Relu, &mut rng),
            random_layer(8, 3, Activation::Identity, &mut rng),
        ],
    };
    let x = rng.normal_matrix(rows, 5);
    let t = rng.normal_matrix(rows, 3);
    let out = net.forward(&x).unwrap();
    let (_, g) = loco_core::numerics::mse_loss(&out, &t).unwrap();
    let (_, grads) = net.backward(&g).unwrap();
    let analytic: Vec<f32> = grads
        .iter()
        .flat_map(|lg| lg.weight.data().iter().chain(&lg.bias).copied())
        .collect();
    let sh = shapes(&net);
    let (xv, tv) = (to_f64(&x), to_f64(&t));
    gradcheck(
        |p| {
            let mut pattern = Vec::new();
            let out = mlp_forward(&sh, p, &xv, rows, &mut pattern);
            Probe {
                value: mse(&out, &tv, rows),
                pattern,
            }
        },
        &flat(&net.layers),
        &analytic,
        H,
    )
}

/// Full conditional VAE loss with frozen noise, with respect to every
/// encoder and decoder parameter.
pub fn check_cvae(seed: u64, beta: f32) -> GradcheckReport {
    use loco_core::cvae::VaeArch;
    let mut rng = Rng::new(seed);
    let arch = VaeArch {
        data_dim: 4,
        num_classes: 3,
        latent_dim: 2,
        encoder_hidden: vec![10, 6],
        decoder_hidden: vec![8],
    };
    let mut vae = Vae::new(arch.clone(), &mut rng).unwrap();
    let rows = 5;
    let x = rng.normal_matrix(rows, 4);
    let labels: Vec<usize> = (0..rows).map(|r| r % 3).collect();
    let noise = rng.normal_matrix(rows, 2);
    let (_, grads) = vae.loss_and_grads(&x, Some(&labels), beta, &noise).unwrap();
    let enc = shapes(vae.encoder());
    let dec = shapes(vae.decoder());
    let (xv, nv) = (to_f64(&x), to_f64(&noise));
    gradcheck(
        |p| vae_loss(&enc, &dec, p, &xv, rows, Some(&labels), 3, beta as f64, &nv),
        &vae.flat_params()
            .iter()
            .map(|&v| v as f64)
            .collect::<Vec<_>>(),
        &grads.flatten(),
        H,
    )
}

/// The library's closed-form KL for a single row.
pub fn kl_closed_form(mu: &[f64], sigma: &[f64]) -> f64 {
    let d = mu.len();
    let mu = Matrix::from_vec(1, d, mu.iter().map(|&m| m as f32).collect()).unwrap();
    let lv =
        Matrix::from_vec(1, d, sigma.iter().map(|&s| (2.0 * s.ln()) as f32).collect()).unwrap();
    loco_core::cvae::kl_diag_gauss(&mu, &lv).unwrap() as f64
}

/// Monte-Carlo estimate of KL(N(μ, σ²) ‖ N(0, I)) from `n` samples of the
/// log-density ratio.
pub fn kl_monte_carlo(mu: &[f64], sigma: &[f64], n: usize, rng: &mut Rng) -> f64 {
    let mut total = 0.0;
    for _ in 0..n {
        let mut log_ratio = 0.0;
        for (&m, &s) in mu.iter().zip(sigma) {
            let e = rng.normal_f64();
            let z = m + s * e;
            // log q(z) − log p(z), the 2π terms cancel
            log_ratio += -0.5 * e * e - s.ln() + 0.5 * z * z;
        }
        total += log_ratio;
    }
    total / n as f64
}

/// Per-class mean and per-dimension variance of labelled rows.
pub struct ClassStats {
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

pub fn class_stats(features: &Matrix, labels: &[usize], classes: usize) -> ClassStats {
    let d = features.cols();
    let mut means = vec![vec![0.0; d]; classes];
    let mut vars = vec![vec![0.0; d]; classes];
    let mut n = vec![0usize; classes];
    for (r, &c) in labels.iter().enumerate() {
        n[c] += 1;
        for (m, &v) in means[c].iter_mut().zip(features.row(r)) {
            *m += v as f64;
        }
    }
    for c in 0..classes {
        for v in &mut means[c] {
            *v /= n[c].max(1) as f64;
        }
    }
    for (r, &c) in labels.iter().enumerate() {
        for j in 0..d {
            vars[c][j] += (features.get(r, j) as f64 - means[c][j]).powi(2) / n[c].max(1) as f64;
        }
    }
    ClassStats { means, vars }
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn min_pairwise(means: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..means.len() {
        for j in 0..i {
            best = best.min(dist(&means[i], &means[j]));
        }
    }
    best
}

/// Worst class-mean error over the minimum inter-class distance, and the
/// range of generated/real per-dimension variance ratios (dimensions with
/// real variance below `1e-6` are ignored).
pub fn matching(
    generator: &dyn ActivationGenerator,
    real: &Matrix,
    labels: &[usize],
    classes: usize,
    per_class: usize,
    seed: u64,
) -> (f64, f64, f64) {
    let truth = class_stats(real, labels, classes);
    let counts = (0..classes).map(|c| (c, per_class)).collect();
    let gen = generator.generate(&counts, seed).unwrap();
    let g = class_stats(&gen.features, gen.labels.as_ref().unwrap(), classes);
    let scale = min_pairwise(&truth.means);
    let worst = (0..classes)
        .map(|c| dist(&g.means[c], &truth.means[c]) / scale)
        .fold(0.0, f64::max);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for c in 0..classes {
        for (gv, tv) in g.vars[c].iter().zip(&truth.vars[c]) {
            if *tv > 1e-6 {
                lo = lo.min(gv / tv);
                hi = hi.max(gv / tv);
            }
        }
    }
    (worst, lo, hi)
}
