//! Small dense feed-forward classifiers with exact analytic gradients for
//! the composite loss: per-instance-weighted cross entropy plus per-expert
//! weighted temperature-softmax distillation.
//!
//! Hidden layers use a rectifier, the output layer is linear (logits).
//! Everything is hand-rolled; no autodiff.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    /// Row-major `out x in`.
    pub weights: Vec<F>,
    pub biases: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet<F> {
    dims: Vec<usize>,
    layers: Vec<Layer<F>>,
}

impl<F: Real> DenseNet<F> {
    /// Zero-initialized network with the given layer dims `[d, h_1, .., out]`.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("bad layer dims {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weights: vec![F::zero(); w[0] * w[1]],
                biases: vec![F::zero(); w[1]],
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    /// Scaled-uniform fan-in initialization, seeded by the caller's rng.
    pub fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        for (layer, w) in net.layers.iter_mut().zip(dims.windows(2)) {
            let bound = (1.0 / w[0] as f64).sqrt();
            let bound = F::from_f64_lossy(bound);
            for weight in &mut layer.weights {
                *weight = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<F>] {
        &mut self.layers
    }

    pub fn forward(&self, x: &[F]) -> Result<Vec<F>> {
        Ok(self.forward_trace(x)?.pop().unwrap())
    }

    /// All layer outputs: `[input, h_1, .., logits]`. Hidden entries are
    /// post-rectifier.
    fn forward_trace(&self, x: &[F]) -> Result<Vec<Vec<F>>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input dimension {} (expected {})",
                x.len(),
                self.input_dim()
            )));
        }
        let mut acts: Vec<Vec<F>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let input = acts.last().unwrap();
            let n_in = self.dims[k];
            let n_out = self.dims[k + 1];
            let mut out = Vec::with_capacity(n_out);
            for i in 0..n_out {
                let row = &layer.weights[i * n_in..(i + 1) * n_in];
                let mut acc = layer.biases[i];
                for (w, xi) in row.iter().zip(input.iter()) {
                    acc = acc + *w * *xi;
                }
                if k < last && acc < F::zero() {
                    acc = F::zero();
                }
                out.push(acc);
            }
            acts.push(out);
        }
        Ok(acts)
    }
}

/// Softmax over `z / T`, max-stabilized.
pub fn temperature_softmax<F: Real>(z: &[F], t: F) -> Result<Vec<F>> {
    Ok(log_temperature_softmax(z, t)?.into_iter().map(|l| l.exp()).collect())
}

fn log_temperature_softmax<F: Real>(z: &[F], t: F) -> Result<Vec<F>> {
    if t <= F::zero() {
        return Err(Error::InvalidSpec(format!("temperature must be positive, got {t}")));
    }
    let max = z.iter().cloned().fold(F::neg_infinity(), F::max);
    let scaled: Vec<F> = z.iter().map(|&zi| (zi - max) / t).collect();
    let log_sum = scaled.iter().map(|&s| s.exp()).sum::<F>().ln();
    Ok(scaled.into_iter().map(|s| s - log_sum).collect())
}

/// Standard cross entropy at temperature 1: `-log softmax(logits)[label]`.
pub fn ce_loss<F: Real>(logits: &[F], label: usize) -> Result<F> {
    if label >= logits.len() {
        return Err(Error::Shape(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(-log_temperature_softmax(logits, F::one())?[label])
}

/// Cross entropy between the expert's and the student's tempered softmax
/// distributions over one subset's classes. The expert side is a constant;
/// no gradient flows into it.
pub fn kd_loss<F: Real>(expert_logits: &[F], student_slice: &[F], t: F) -> Result<F> {
    if expert_logits.len() != student_slice.len() {
        return Err(Error::Shape(format!(
            "expert slice len {} vs student slice len {}",
            expert_logits.len(),
            student_slice.len()
        )));
    }
    let p = temperature_softmax(expert_logits, t)?;
    let log_q = log_temperature_softmax(student_slice, t)?;
    Ok(-p.iter().zip(log_q.iter()).map(|(&pi, &lq)| pi * lq).sum::<F>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<F> {
    pub weighted_ce: F,
    /// Unweighted per-expert distillation terms; `total` applies `w`.
    pub kd_per_expert: Vec<F>,
    pub total: F,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<F> {
    pub layers: Vec<Layer<F>>,
}

impl<F: Real> GradientSet<F> {
    pub fn zeros_like(net: &DenseNet<F>) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| Layer {
                    weights: vec![F::zero(); l.weights.len()],
                    biases: vec![F::zero(); l.biases.len()],
                })
                .collect(),
        }
    }
}

/// Frozen expert outputs for one distillation term: per-instance logits over
/// the expert's classes, plus the indices of those classes in the student's
/// logit vector.
#[derive(Debug, Clone)]
pub struct ExpertTerm<F> {
    pub logits: Vec<Vec<F>>,
    pub slice: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig<F> {
    pub temperature: F,
    /// Multiply KD terms by T^2, the classic compensation factor. Off by
    /// default: the loss is used exactly as written.
    pub kd_t2_scaling: bool,
}

impl<F: Real> LossConfig<F> {
    pub fn new(temperature: F) -> Self {
        Self {
            temperature,
            kd_t2_scaling: false,
        }
    }

    fn kd_scale(&self) -> F {
        if self.kd_t2_scaling {
            self.temperature * self.temperature
        } else {
            F::one()
        }
    }
}

/// Batch-mean composite loss and its exact gradients.
///
/// `total = (1/B) sum_i v_i CE_i + sum_l w_l (1/B) sum_i KD_{l,i}`.
pub fn loss_and_gradients<F: Real>(
    net: &DenseNet<F>,
    batch: &[Vec<F>],
    labels: &[usize],
    v: &[F],
    experts: &[ExpertTerm<F>],
    w: &[F],
    cfg: &LossConfig<F>,
) -> Result<(LossBreakdown<F>, GradientSet<F>)> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if labels.len() != b || v.len() != b {
        return Err(Error::Shape("labels/v length does not match batch".into()));
    }
    if experts.len() != w.len() {
        return Err(Error::Shape("experts/w length mismatch".into()));
    }
    let out_dim = net.output_dim();
    for term in experts {
        if term.logits.len() != b {
            return Err(Error::Shape("expert logits do not cover the batch".into()));
        }
        if term.slice.iter().any(|&c| c >= out_dim) {
            return Err(Error::Shape("expert slice index out of range".into()));
        }
    }

    let inv_b = F::one() / F::from_usize_lossy(b);
    let t = cfg.temperature;
    let kd_scale = cfg.kd_scale();
    let mut weighted_ce = F::zero();
    let mut kd_per_expert = vec![F::zero(); experts.len()];
    let mut grads = GradientSet::zeros_like(net);

    for (i, x) in batch.iter().enumerate() {
        let acts = net.forward_trace(x)?;
        let logits = acts.last().unwrap();

        // d(total)/d(logits) for this instance
        let mut dlogits = vec![F::zero(); out_dim];
        weighted_ce = weighted_ce + v[i] * ce_loss(logits, labels[i])? * inv_b;
        let probs = temperature_softmax(logits, F::one())?;
        for (c, &p) in probs.iter().enumerate() {
            let target = if c == labels[i] { F::one() } else { F::zero() };
            dlogits[c] = dlogits[c] + v[i] * inv_b * (p - target);
        }
        for (l, term) in experts.iter().enumerate() {
            let slice_logits: Vec<F> = term.slice.iter().map(|&c| logits[c]).collect();
            let kd = kd_loss(&term.logits[i], &slice_logits, t)? * kd_scale;
            kd_per_expert[l] = kd_per_expert[l] + kd * inv_b;
            let p = temperature_softmax(&term.logits[i], t)?;
            let q = temperature_softmax(&slice_logits, t)?;
            let coeff = w[l] * inv_b * kd_scale / t;
            for (j, &c) in term.slice.iter().enumerate() {
                dlogits[c] = dlogits[c] + coeff * (q[j] - p[j]);
            }
        }

        backprop(net, &acts, &dlogits, &mut grads);
    }

    let kd_weighted: F = kd_per_expert
        .iter()
        .zip(w.iter())
        .map(|(&kd, &wl)| wl * kd)
        .sum();
    Ok((
        LossBreakdown {
            weighted_ce,
            kd_per_expert,
            total: weighted_ce + kd_weighted,
        },
        grads,
    ))
}

fn backprop<F: Real>(net: &DenseNet<F>, acts: &[Vec<F>], dlogits: &[F], grads: &mut GradientSet<F>) {
    let mut delta = dlogits.to_vec();
    for k in (0..net.layers().len()).rev() {
        let n_in = net.dims()[k];
        let input = &acts[k];
        let layer = &net.layers()[k];
        let grad = &mut grads.layers[k];
        for (i, &d) in delta.iter().enumerate() {
            grad.biases[i] = grad.biases[i] + d;
            let row = &mut grad.weights[i * n_in..(i + 1) * n_in];
            for (g, &xj) in row.iter_mut().zip(input.iter()) {
                *g = *g + d * xj;
            }
        }
        if k > 0 {
            let mut prev = vec![F::zero(); n_in];
            for (i, &d) in delta.iter().enumerate() {
                let row = &layer.weights[i * n_in..(i + 1) * n_in];
                for (p, &wij) in prev.iter_mut().zip(row.iter()) {
                    *p = *p + d * wij;
                }
            }
            // rectifier gate: post-activation zero means the unit was off
            for (p, &a) in prev.iter_mut().zip(acts[k].iter()) {
                if a <= F::zero() {
                    *p = F::zero();
                }
            }
            delta = prev;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig<F> {
    pub lr: F,
    pub momentum: F,
    pub weight_decay: F,
}

#[derive(Debug, Clone)]
pub struct SgdState<F> {
    velocity: Vec<Layer<F>>,
}

impl<F: Real> SgdState<F> {
    pub fn new(net: &DenseNet<F>) -> Self {
        Self {
            velocity: GradientSet::zeros_like(net).layers,
        }
    }
}

/// Classic momentum SGD; weight decay is added to the gradient as `lambda *
/// theta` and skips biases.
pub fn sgd_step<F: Real>(
    net: &mut DenseNet<F>,
    grads: &GradientSet<F>,
    state: &mut SgdState<F>,
    cfg: &SgdConfig<F>,
) {
    for ((layer, grad), vel) in net
        .layers_mut()
        .iter_mut()
        .zip(grads.layers.iter())
        .zip(state.velocity.iter_mut())
    {
        for ((w, &g), v) in layer
            .weights
            .iter_mut()
            .zip(grad.weights.iter())
            .zip(vel.weights.iter_mut())
        {
            let g = g + cfg.weight_decay * *w;
            *v = cfg.momentum * *v + g;
            *w = *w - cfg.lr * *v;
        }
        for ((b, &g), v) in layer
            .biases
            .iter_mut()
            .zip(grad.biases.iter())
            .zip(vel.biases.iter_mut())
        {
            *v = cfg.momentum * *v + g;
            *b = *b - cfg.lr * *v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compare analytic gradients against central finite differences on random
/// configurations (random nets, batches, expert slices, weights).
pub fn grad_check(trials: usize, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err = 0.0f64;
    let step = 1e-5;

    for _ in 0..trials {
        let d = rng.gen_range(2..=8usize);
        let hidden = rng.gen_range(3..=16usize);
        let c = rng.gen_range(3..=10usize);
        let num_experts = rng.gen_range(1..=3usize);
        let t = [1.0, 2.0, 4.0][rng.gen_range(0..3)];
        let batch_size = rng.gen_range(1..=4usize);

        let net = DenseNet::<f64>::init(&[d, hidden, c], &mut rng)?;
        let batch: Vec<Vec<f64>> = (0..batch_size)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..c)).collect();
        let v: Vec<f64> = (0..batch_size).map(|_| rng.gen_range(0.0..1.0)).collect();
        let w: Vec<f64> = (0..num_experts).map(|_| rng.gen_range(0.0..1.0)).collect();
        let experts: Vec<ExpertTerm<f64>> = (0..num_experts)
            .map(|_| {
                let size = rng.gen_range(2..=c);
                let mut slice: Vec<usize> = (0..c).collect();
                for i in (1..slice.len()).rev() {
                    slice.swap(i, rng.gen_range(0..=i));
                }
                slice.truncate(size);
                slice.sort_unstable();
                ExpertTerm {
                    logits: (0..batch_size)
                        .map(|_| (0..size).map(|_| rng.gen_range(-2.0..2.0)).collect())
                        .collect(),
                    slice,
                }
            })
            .collect();
        let cfg = LossConfig::new(t);

        let (_, analytic) = loss_and_gradients(&net, &batch, &labels, &v, &experts, &w, &cfg)?;
        let err = max_finite_diff_error(&net, &batch, &labels, &v, &experts, &w, &cfg, &analytic, step)?;
        max_rel_err = max_rel_err.max(err);
    }

    Ok(GradCheckReport {
        trials,
        max_rel_err,
        tolerance,
        pass: max_rel_err < tolerance,
    })
}

#[allow(clippy::too_many_arguments)]
fn max_finite_diff_error(
    net: &DenseNet<f64>,
    batch: &[Vec<f64>],
    labels: &[usize],
    v: &[f64],
    experts: &[ExpertTerm<f64>],
    w: &[f64],
    cfg: &LossConfig<f64>,
    analytic: &GradientSet<f64>,
    step: f64,
) -> Result<f64> {
    let mut max_err = 0.0f64;
    let mut probe = net.clone();
    let num_layers = net.layers().len();
    for k in 0..num_layers {
        let n_params = net.layers()[k].weights.len() + net.layers()[k].biases.len();
        for p in 0..n_params {
            let eval = |net: &DenseNet<f64>| -> Result<f64> {
                Ok(loss_and_gradients(net, batch, labels, v, experts, w, cfg)?.0.total)
            };
            let get = |layer: &Layer<f64>| {
                if p < layer.weights.len() {
                    layer.weights[p]
                } else {
                    layer.biases[p - layer.weights.len()]
                }
            };
            let set = |layer: &mut Layer<f64>, val: f64| {
                if p < layer.weights.len() {
                    layer.weights[p] = val;
                } else {
                    let idx = p - layer.weights.len();
                    layer.biases[idx] = val;
                }
            };
            let orig = get(&probe.layers()[k]);
            set(&mut probe.layers_mut()[k], orig + step);
            let plus = eval(&probe)?;
            set(&mut probe.layers_mut()[k], orig - step);
            let minus = eval(&probe)?;
            set(&mut probe.layers_mut()[k], orig);
            let numeric = (plus - minus) / (2.0 * step);
            let exact = get(&analytic.layers[k]);
            let rel = (exact - numeric).abs() / (exact.abs() + numeric.abs()).max(1.0);
            max_err = max_err.max(rel);
        }
    }
    Ok(max_err)
}

const CHECKPOINT_MAGIC: &str = "lfme-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Save all parameters with full round-trip precision.
pub fn save_checkpoint<F: Real>(net: &DenseNet<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let mut write = |s: String| out.write_all(s.as_bytes()).map_err(|e| Error::io(path, e));
    write(format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\n"))?;
    let dims: Vec<String> = net.dims().iter().map(|d| d.to_string()).collect();
    write(format!("dims {}\n", dims.join(" ")))?;
    for layer in net.layers() {
        for (tag, values) in [("w", &layer.weights), ("b", &layer.biases)] {
            let vals: Vec<String> = values
                .iter()
                .map(|v| format!("{:?}", v.to_f64().unwrap()))
                .collect();
            write(format!("{tag} {}\n", vals.join(" ")))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<F: Real>(path: impl AsRef<Path>) -> Result<DenseNet<F>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?
            .map_err(|e| Error::io(path, e))
    };
    let header = next()?;
    if header != format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}") {
        return Err(Error::Format(format!("bad checkpoint header `{header}`")));
    }
    let dims_line = next()?;
    let dims: Vec<usize> = dims_line
        .strip_prefix("dims ")
        .ok_or_else(|| Error::Format("missing dims line".into()))?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::Format(format!("bad dim `{s}`"))))
        .collect::<Result<_>>()?;
    let mut net = DenseNet::<F>::zeros(&dims)?;
    for layer in net.layers_mut() {
        for (tag, values) in [("w", &mut layer.weights), ("b", &mut layer.biases)] {
            let line = next()?;
            let body = line
                .strip_prefix(&format!("{tag} "))
                .ok_or_else(|| Error::Format(format!("expected `{tag}` line")))?;
            let parsed: Vec<f64> = body
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| Error::Format(format!("bad value `{s}`"))))
                .collect::<Result<_>>()?;
            if parsed.len() != values.len() {
                return Err(Error::Format(format!(
                    "layer size mismatch: {} values, expected {}",
                    parsed.len(),
                    values.len()
                )));
            }
            for (slot, val) in values.iter_mut().zip(parsed) {
                *slot = F::from_f64_lossy(val);
            }
        }
    }
    Ok(net)
}
