use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::act::Activation;
use super::layers::{Conv1d, Dense, Gru, GruCache};
use super::loss::{dice_loss, DiceKind};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Hybrid,
    CnnOnly,
    RnnOnly,
    /// Conv stack widened to the hybrid's parameter count, no GRU.
    CnnFull,
    /// Two GRU layers sized to the hybrid's parameter count, no conv.
    RnnFull,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Hybrid,
        Variant::CnnOnly,
        Variant::RnnOnly,
        Variant::CnnFull,
        Variant::RnnFull,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Hybrid => "hybrid",
            Variant::CnnOnly => "cnn_only",
            Variant::RnnOnly => "rnn_only",
            Variant::CnnFull => "cnn_full",
            Variant::RnnFull => "rnn_full",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
}

/// Architecture and training hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub conv_stack: Vec<ConvSpec>,
    pub gru_stack: Vec<usize>,
    pub dense_hidden: usize,
    pub leaky_alpha: f64,
    pub n_states: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub loss: DiceKind,
    /// Tolerance (seconds) for the validation change-point score.
    pub val_tau_s: f64,
}

fn conv(stack: &[(usize, usize)]) -> Vec<ConvSpec> {
    stack.iter().map(|&(filters, kernel)| ConvSpec { filters, kernel }).collect()
}

impl Default for ModelConfig {
    /// Five conv layers of 64 filters (kernels 3, 5, 10, 15, 20), two GRU
    /// layers of 128 cells, a 128-wide leaky dense layer.
    fn default() -> Self {
        Self {
            variant: Variant::Hybrid,
            conv_stack: conv(&[(64, 3), (64, 5), (64, 10), (64, 15), (64, 20)]),
            gru_stack: vec![128, 128],
            dense_hidden: 128,
            leaky_alpha: 0.3,
            n_states: 11,
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 80,
            patience: 10,
            seed: 0,
            loss: DiceKind::Soft,
            val_tau_s: 5.0,
        }
    }
}

impl ModelConfig {
    /// A narrower network that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            conv_stack: conv(&[(16, 3), (16, 5), (16, 10)]),
            gru_stack: vec![48],
            dense_hidden: 48,
            batch_size: 4,
            patience: 20,
            ..Self::default()
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("model config: {m}")));
        if self.n_states < 2 {
            return bad("need at least two states");
        }
        if self.dense_hidden == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("dense width, batch size and epochs must be ≥ 1");
        }
        if self.conv_stack.iter().any(|c| c.filters == 0 || c.kernel == 0) || self.gru_stack.contains(&0) {
            return bad("filter, kernel and cell counts must be ≥ 1");
        }
        if self.conv_stack.windows(2).any(|w| w[1].kernel < w[0].kernel) {
            return bad("kernel sizes must not decrease through the stack");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.leaky_alpha) {
            return bad("leaky slope must lie in [0, 1)");
        }
        if !(self.val_tau_s > 0.0) {
            return bad("validation tolerance must be positive");
        }
        let needs_conv = matches!(self.variant, Variant::Hybrid | Variant::CnnOnly | Variant::CnnFull);
        let needs_gru = matches!(self.variant, Variant::Hybrid | Variant::RnnOnly | Variant::RnnFull);
        if needs_conv && self.conv_stack.is_empty() {
            return bad("this variant needs a conv stack");
        }
        if needs_gru && self.gru_stack.is_empty() {
            return bad("this variant needs a GRU stack");
        }
        Ok(())
    }

    fn hybrid_stacks(&self) -> (Vec<ConvSpec>, Vec<usize>) {
        (self.conv_stack.clone(), self.gru_stack.clone())
    }

    /// Conv and GRU stacks actually built for this variant and input width.
    pub fn resolved_stacks(&self, n_inputs: usize) -> (Vec<ConvSpec>, Vec<usize>) {
        let (c, g) = self.hybrid_stacks();
        match self.variant {
            Variant::Hybrid => (c, g),
            Variant::CnnOnly => (c, vec![]),
            Variant::RnnOnly => (vec![], g),
            Variant::RnnFull => {
                let target = param_count(self, &c, &g, n_inputs);
                let w = match_width(target, |w| param_count(self, &[], &[w, w], n_inputs));
                (vec![], vec![w, w])
            }
            Variant::CnnFull => {
                let target = param_count(self, &c, &g, n_inputs);
                let w = match_width(target, |w| {
                    let wide: Vec<ConvSpec> = c.iter().map(|s| ConvSpec { filters: w, kernel: s.kernel }).collect();
                    param_count(self, &wide, &[], n_inputs)
                });
                (c.iter().map(|s| ConvSpec { filters: w, kernel: s.kernel }).collect(), vec![])
            }
        }
    }
}

/// Width whose parameter count is closest to `target`: multiples of 8 when
/// that lands within 10 %, any width otherwise.
fn match_width(target: usize, count: impl Fn(usize) -> usize) -> usize {
    let closest = |step: usize| {
        (1..=4096 / step)
            .map(|k| k * step)
            .min_by_key(|&w| count(w).abs_diff(target))
            .expect("non-empty range")
    };
    let w8 = closest(8);
    if count(w8).abs_diff(target) * 10 <= target {
        w8
    } else {
        closest(1)
    }
}

fn param_count(cfg: &ModelConfig, conv: &[ConvSpec], gru: &[usize], n_inputs: usize) -> usize {
    let mut width = n_inputs;
    let mut total = 0;
    for c in conv {
        total += c.kernel * width * c.filters + c.filters;
        width = c.filters;
    }
    for &h in gru {
        total += 3 * h * (width + h + 1);
        width = h;
    }
    total += width * cfg.dense_hidden + cfg.dense_hidden;
    total + cfg.dense_hidden * cfg.n_states + cfg.n_states
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv(Conv1d<T>),
    Gru(Gru<T>),
    Dense(Dense<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Conv(c) => c.out_ch,
            Layer::Gru(g) => g.hidden,
            Layer::Dense(d) => d.output,
        }
    }

    fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[T])> {
        match self {
            Layer::Conv(c) => vec![
                ("weight", vec![c.kernel, c.in_ch, c.out_ch], &c.weight[..]),
                ("bias", vec![c.out_ch], &c.bias[..]),
            ],
            Layer::Gru(g) => vec![
                ("w", vec![g.input, 3 * g.hidden], &g.w[..]),
                ("u", vec![g.hidden, 3 * g.hidden], &g.u[..]),
                ("b", vec![3 * g.hidden], &g.b[..]),
            ],
            Layer::Dense(d) => vec![
                ("weight", vec![d.input, d.output], &d.weight[..]),
                ("bias", vec![d.output], &d.bias[..]),
            ],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight[..], &mut c.bias[..]],
            Layer::Gru(g) => vec![&mut g.w[..], &mut g.u[..], &mut g.b[..]],
            Layer::Dense(d) => vec![&mut d.weight[..], &mut d.bias[..]],
        }
    }
}

/// Descriptor of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    /// `<layer>.<tensor>`, e.g. `gru1.u`
    pub name: String,
    pub layer: String,
    pub shape: Vec<usize>,
}

/// A built network. Layers are named `conv<i>`, `gru<i>`, `dense_hidden`
/// and `dense_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    n_inputs: usize,
    names: Vec<String>,
    layers: Vec<Layer<T>>,
}

/// Intermediate results of one sequence's forward pass.
pub struct Trace<T> {
    len: usize,
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Vec<T>>,
    gru: Vec<Option<GruCache<T>>>,
}

impl<T> Trace<T> {
    pub fn probs(&self) -> &[T] {
        self.acts.last().expect("at least the input")
    }
}

/// Per-tensor gradient buffers, in [`Model::tensor_info`] order.
pub type Grads<T> = Vec<Vec<T>>;

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig, n_inputs: usize) -> Result<Self> {
        config.validate()?;
        if n_inputs == 0 {
            return Err(Error::invalid("model needs at least one input channel"));
        }
        let (conv, gru) = config.resolved_stacks(n_inputs);
        let mut layers = Vec::new();
        let mut names = Vec::new();
        let mut width = n_inputs;
        let mut idx = 0u64;
        let mut next_rng = || {
            idx += 1;
            rng::stream(config.seed, "init", idx)
        };
        for (i, c) in conv.iter().enumerate() {
            layers.push(Layer::Conv(Conv1d::new(width, c.filters, c.kernel, Activation::Relu, &mut next_rng())));
            names.push(format!("conv{i}"));
            width = c.filters;
        }
        for (i, &h) in gru.iter().enumerate() {
            layers.push(Layer::Gru(Gru::new(width, h, &mut next_rng())));
            names.push(format!("gru{i}"));
            width = h;
        }
        let leaky = Activation::LeakyRelu {
            alpha: config.leaky_alpha,
        };
        layers.push(Layer::Dense(Dense::new(width, config.dense_hidden, leaky, &mut next_rng())));
        names.push("dense_hidden".into());
        layers.push(Layer::Dense(Dense::new(
            config.dense_hidden,
            config.n_states,
            Activation::Softmax,
            &mut next_rng(),
        )));
        names.push("dense_out".into());
        Ok(Self {
            config: config.clone(),
            n_inputs,
            names,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_states(&self) -> usize {
        self.config.n_states
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn tensor_info(&self) -> Vec<TensorInfo> {
        self.layers
            .iter()
            .zip(&self.names)
            .flat_map(|(l, n)| {
                l.tensors().into_iter().map(move |(t, shape, _)| TensorInfo {
                    name: format!("{n}.{t}"),
                    layer: n.clone(),
                    shape,
                })
            })
            .collect()
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.tensors().into_iter().map(|t| t.2)).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn recurrent_param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Gru(g) => Some(g.w.len() + g.u.len() + g.b.len()),
                _ => None,
            })
            .sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect()
    }

    fn check_input(&self, x: &[T], len: usize) -> Result<()> {
        if len == 0 || x.len() != len * self.n_inputs {
            return Err(Error::Shape(format!(
                "{} values for {len} steps of {} channels",
                x.len(),
                self.n_inputs
            )));
        }
        Ok(())
    }

    /// Run one sequence, keeping what the backward pass needs.
    pub fn forward_trace(&self, x: &[T], len: usize) -> Result<Trace<T>> {
        self.check_input(x, len)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut gru = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        for layer in &self.layers {
            let input = acts.last().expect("input present");
            let (y, cache) = match layer {
                Layer::Conv(c) => (c.forward(input, len), None),
                Layer::Dense(d) => (d.forward(input, len), None),
                Layer::Gru(g) => {
                    let (h, c) = g.forward(input, len);
                    (h, Some(c))
                }
            };
            acts.push(y);
            gru.push(cache);
        }
        Ok(Trace { len, acts, gru })
    }

    /// Class probabilities, `len × n_states`.
    pub fn forward(&self, x: &[T], len: usize) -> Result<Vec<T>> {
        self.check_input(x, len)?;
        let mut cur = x.to_vec();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(c) => c.forward(&cur, len),
                Layer::Dense(d) => d.forward(&cur, len),
                Layer::Gru(g) => g.forward(&cur, len).0,
            };
        }
        Ok(cur)
    }

    /// Backpropagate `dprobs` through one traced sequence, accumulating
    /// into `grads`. Layers below `first_trainable` get no gradient and the
    /// pass stops early.
    pub fn backward(&self, trace: &Trace<T>, dprobs: Vec<T>, grads: &mut Grads<T>, first_trainable: usize) {
        let len = trace.len;
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut k = 0;
        for l in &self.layers {
            offsets.push(k);
            k += l.tensors().len();
        }
        let mut dy = dprobs;
        for i in (first_trainable..self.layers.len()).rev() {
            let x = &trace.acts[i];
            let y = &trace.acts[i + 1];
            let need_dx = i > first_trainable;
            let o = offsets[i];
            let dx = match &self.layers[i] {
                Layer::Conv(c) => {
                    let (gw, gb) = two(grads, o);
                    c.backward(x, y, dy, len, gw, gb, need_dx)
                }
                Layer::Dense(d) => {
                    let (gw, gb) = two(grads, o);
                    d.backward(x, y, dy, len, gw, gb, need_dx)
                }
                Layer::Gru(g) => {
                    let (gw, rest) = grads[o..].split_at_mut(1);
                    let (gu, gb) = rest.split_at_mut(1);
                    let cache = trace.gru[i].as_ref().expect("GRU cache");
                    g.backward(x, y, cache, &dy, len, &mut gw[0], &mut gu[0], &mut gb[0], need_dx)
                }
            };
            match dx {
                Some(d) => dy = d,
                None => break,
            }
        }
    }

    /// Which rectified units are active (`y > 0`) in a traced pass.
    pub fn rectifier_pattern(&self, trace: &Trace<T>) -> Vec<bool> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let act = match layer {
                Layer::Conv(c) => c.activation,
                Layer::Dense(d) => d.activation,
                Layer::Gru(_) => continue,
            };
            if matches!(act, Activation::Relu | Activation::LeakyRelu { .. }) {
                out.extend(trace.acts[i + 1].iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    /// Dice loss and parameter gradients over a batch of
    /// `(inputs, labels)` sequences. Sequences are processed independently
    /// (in parallel when a pool is available) and gradients are summed in
    /// batch order.
    pub fn loss_and_grads(&self, batch: &[(&[T], &[usize])], first_trainable: usize) -> Result<(T, Grads<T>)> {
        let traces: Vec<Trace<T>> = batch
            .par_iter()
            .map(|(x, l)| self.forward_trace(x, l.len()))
            .collect::<Result<_>>()?;
        let probs: Vec<&[T]> = traces.iter().map(|t| t.probs()).collect();
        let labels: Vec<&[usize]> = batch.iter().map(|b| b.1).collect();
        let (loss, dprobs) = dice_loss(&probs, &labels, self.config.n_states, self.config.loss)?;
        let parts: Vec<Grads<T>> = traces
            .par_iter()
            .zip(dprobs.into_par_iter())
            .map(|(t, d)| {
                let mut g = self.zero_grads();
                self.backward(t, d, &mut g, first_trainable);
                g
            })
            .collect();
        let mut total = self.zero_grads();
        for part in parts {
            for (acc, g) in total.iter_mut().zip(part) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Ok((loss, total))
    }

    /// Dice loss of a batch without gradients.
    pub fn loss(&self, batch: &[(&[T], &[usize])]) -> Result<T> {
        let probs: Vec<Vec<T>> = batch
            .par_iter()
            .map(|(x, l)| self.forward(x, l.len()))
            .collect::<Result<_>>()?;
        let p: Vec<&[T]> = probs.iter().map(|v| &v[..]).collect();
        let labels: Vec<&[usize]> = batch.iter().map(|b| b.1).collect();
        Ok(dice_loss(&p, &labels, self.config.n_states, self.config.loss)?.0)
    }

    /// Replace every tensor, checking sizes.
    pub fn set_tensors(&mut self, values: Vec<Vec<T>>) -> Result<()> {
        let mut slots = self.tensors_mut();
        if slots.len() != values.len() {
            return Err(Error::Shape(format!("{} tensors for {} slots", values.len(), slots.len())));
        }
        for (s, v) in slots.iter_mut().zip(&values) {
            if s.len() != v.len() {
                return Err(Error::Shape(format!("tensor of {} values for {} slots", v.len(), s.len())));
            }
        }
        for (s, v) in slots.iter_mut().zip(values) {
            s.copy_from_slice(&v);
        }
        Ok(())
    }
}

fn two<T>(grads: &mut [Vec<T>], o: usize) -> (&mut [T], &mut [T]) {
    let (a, b) = grads[o..].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

/// Padded batch: `batch × time × features` with per-sequence valid lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTensor<T> {
    pub data: Vec<T>,
    pub batch: usize,
    pub time: usize,
    pub features: usize,
    pub lengths: Vec<usize>,
}

impl<T: Scalar> BatchTensor<T> {
    /// Pad sequences (each `len_i × features`) to the longest one.
    pub fn from_sequences(seqs: &[&[T]], features: usize) -> Result<Self> {
        if features == 0 || seqs.iter().any(|s| s.is_empty() || s.len() % features != 0) {
            return Err(Error::Shape("sequences must be non-empty rows of `features`".into()));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len() / features).collect();
        let time = lengths.iter().copied().max().unwrap_or(0);
        let mut data = vec![T::zero(); seqs.len() * time * features];
        for (b, s) in seqs.iter().enumerate() {
            data[b * time * features..b * time * features + s.len()].copy_from_slice(s);
        }
        Ok(Self {
            data,
            batch: seqs.len(),
            time,
            features,
            lengths,
        })
    }

    pub fn mask(&self, b: usize) -> Vec<bool> {
        (0..self.time).map(|t| t < self.lengths[b]).collect()
    }

    /// Valid rows of sequence `b`.
    pub fn sequence(&self, b: usize) -> &[T] {
        let start = b * self.time * self.features;
        &self.data[start..start + self.lengths[b] * self.features]
    }
}

impl<T: Scalar> Model<T> {
    /// Probabilities for a padded batch; padded steps are left at zero.
    pub fn forward_batch(&self, batch: &BatchTensor<T>) -> Result<BatchTensor<T>> {
        if batch.features != self.n_inputs {
            return Err(Error::Shape(format!(
                "batch has {} features, model expects {}",
                batch.features, self.n_inputs
            )));
        }
        let outs: Vec<Vec<T>> = (0..batch.batch)
            .into_par_iter()
            .map(|b| self.forward(batch.sequence(b), batch.lengths[b]))
            .collect::<Result<_>>()?;
        let k = self.config.n_states;
        let mut data = vec![T::zero(); batch.batch * batch.time * k];
        for (b, o) in outs.iter().enumerate() {
            data[b * batch.time * k..b * batch.time * k + o.len()].copy_from_slice(o);
        }
        Ok(BatchTensor {
            data,
            batch: batch.batch,
            time: batch.time,
            features: k,
            lengths: batch.lengths.clone(),
        })
    }
}

/// Per-step argmax; ties go to the lowest class id.
pub fn argmax_rows<T: Scalar>(probs: &[T], n_states: usize) -> Vec<usize> {
    probs
        .chunks(n_states)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
