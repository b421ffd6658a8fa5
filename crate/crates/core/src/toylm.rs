//! A miniature autoregressive model around one attention block: token
//! embedding, Q/K/V projections, per-dimension causal attention with rotary
//! positions, and a last-position readout. Trained with plain SGD and global
//! gradient clipping on a synthetic key-value recall task, it exercises the
//! forward pass, the analytic backward pass, masks and positions end to end.
//!
//! The causal structure here is the hierarchical per-dimension mask: a
//! position attends within the cone of positions whose every coordinate is
//! at most its own. That is coarser than strict sequence causality, which
//! is fine for a recall task but worth remembering when reading traces.

use crate::attention::{
    tensorized_attention_backward, tensorized_attention_forward, DimMask,
};
use crate::error::{Error, Result};
use crate::position::RopeConfig;
use crate::rng;
use crate::tensor::{
    matmul, matmul_transa, matmul_transb, DenseTensor, MaskPolicy, TensorizationScheme,
};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Single-block model. Parameter shapes: embed [V, d], projections [d, d],
/// readout [d, V].
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub vocab: usize,
    pub embed: DenseTensor,
    pub w_q: DenseTensor,
    pub w_k: DenseTensor,
    pub w_v: DenseTensor,
    pub w_out: DenseTensor,
    pub scheme: TensorizationScheme,
    pub rope: RopeConfig,
    masks: DimMask,
}

impl ToyModel {
    /// Fresh model: embeddings N(0, 0.5^2), projections N(0, 1/d), readout
    /// zeroed so the initial loss is exactly ln V.
    pub fn new(scheme: TensorizationScheme, vocab: usize, seed: u64) -> Result<ToyModel> {
        let d = scheme.feature_dim();
        if vocab < 2 {
            return Err(Error::InvalidArgument("vocab must be at least 2".into()));
        }
        let rope = RopeConfig::per_dimension(d)?;
        let masks = DimMask::hierarchical_causal(&scheme);
        let mut r = rng::substream(seed, 0x746f79);
        let emb_dist = Normal::new(0.0, 0.5).expect("finite");
        let proj_dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite");
        let mut draw = |shape: &[usize], dist: &Normal<f64>| {
            let mut t = DenseTensor::zeros(shape);
            for v in t.data_mut() {
                *v = dist.sample(&mut r);
            }
            t
        };
        Ok(ToyModel {
            vocab,
            embed: draw(&[vocab, d], &emb_dist),
            w_q: draw(&[d, d], &proj_dist),
            w_k: draw(&[d, d], &proj_dist),
            w_v: draw(&[d, d], &proj_dist),
            w_out: DenseTensor::zeros(&[d, vocab]),
            scheme,
            rope,
            masks,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.scheme.seq_len()
    }

    pub fn param_count(&self) -> usize {
        self.embed.len() + self.w_q.len() + self.w_k.len() + self.w_v.len() + self.w_out.len()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.seq_len() {
            return Err(Error::ShapeMismatch(format!(
                "sequence length {} != scheme length {}",
                tokens.len(),
                self.seq_len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::InvalidArgument(format!(
                "token id {t} outside vocab {}",
                self.vocab
            )));
        }
        Ok(())
    }

    /// Hidden states [n, d] after the attention block, plus the caches the
    /// backward pass needs.
    fn forward_hidden(&self, tokens: &[usize]) -> Result<SampleCache> {
        self.check_tokens(tokens)?;
        let n = self.seq_len();
        let d = self.scheme.feature_dim();
        let mut x = DenseTensor::zeros(&[n, d]);
        for (t, &tok) in tokens.iter().enumerate() {
            let row = &self.embed.data()[tok * d..(tok + 1) * d];
            x.data_mut()[t * d..(t + 1) * d].copy_from_slice(row);
        }
        let q = matmul(&x, &self.w_q)?.reshape(&self.scheme.tensor_shape())?;
        let k = matmul(&x, &self.w_k)?.reshape(&self.scheme.tensor_shape())?;
        let v = matmul(&x, &self.w_v)?.reshape(&self.scheme.tensor_shape())?;
        let (o, inter) = tensorized_attention_forward(
            &q,
            &k,
            &v,
            &self.scheme,
            &self.masks,
            Some(&self.rope),
            MaskPolicy::Strict,
        )?;
        let h = o.reshape(&[n, d])?;
        Ok(SampleCache { x, q, k, v, h, inter })
    }

    /// Logits at every position, [n, vocab].
    pub fn logits_all(&self, tokens: &[usize]) -> Result<DenseTensor> {
        let cache = self.forward_hidden(tokens)?;
        matmul(&cache.h, &self.w_out)
    }
}

struct SampleCache {
    x: DenseTensor,
    q: DenseTensor,
    k: DenseTensor,
    v: DenseTensor,
    h: DenseTensor,
    inter: crate::attention::AttentionIntermediates,
}

/// Gradients for every parameter tensor, in model layout.
#[derive(Debug, Clone)]
pub struct ToyGrads {
    pub embed: DenseTensor,
    pub w_q: DenseTensor,
    pub w_k: DenseTensor,
    pub w_v: DenseTensor,
    pub w_out: DenseTensor,
}

impl ToyGrads {
    fn zeros_like(m: &ToyModel) -> ToyGrads {
        ToyGrads {
            embed: DenseTensor::zeros(m.embed.shape()),
            w_q: DenseTensor::zeros(m.w_q.shape()),
            w_k: DenseTensor::zeros(m.w_k.shape()),
            w_v: DenseTensor::zeros(m.w_v.shape()),
            w_out: DenseTensor::zeros(m.w_out.shape()),
        }
    }

    pub fn global_norm(&self) -> f64 {
        let sq = |t: &DenseTensor| t.data().iter().map(|x| x * x).sum::<f64>();
        (sq(&self.embed) + sq(&self.w_q) + sq(&self.w_k) + sq(&self.w_v) + sq(&self.w_out)).sqrt()
    }

    fn scale(&mut self, f: f64) {
        for t in [
            &mut self.embed,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_out,
        ] {
            t.scale(f);
        }
    }
}

/// Mean cross-entropy over the batch and the last-position logits [B, V].
pub fn forward_loss(
    model: &ToyModel,
    tokens: &[Vec<usize>],
    labels: &[usize],
) -> Result<(f64, DenseTensor)> {
    let (loss, logits, _) = loss_logits_grads(model, tokens, labels, false)?;
    Ok((loss, logits))
}

/// Same forward as [`forward_loss`] plus full parameter gradients.
pub fn loss_and_grads(
    model: &ToyModel,
    tokens: &[Vec<usize>],
    labels: &[usize],
) -> Result<(f64, DenseTensor, ToyGrads)> {
    let (loss, logits, grads) = loss_logits_grads(model, tokens, labels, true)?;
    Ok((loss, logits, grads.expect("requested")))
}

fn loss_logits_grads(
    model: &ToyModel,
    tokens: &[Vec<usize>],
    labels: &[usize],
    want_grads: bool,
) -> Result<(f64, DenseTensor, Option<ToyGrads>)> {
    if tokens.is_empty() || tokens.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} sequences vs {} labels",
            tokens.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= model.vocab) {
        return Err(Error::InvalidArgument(format!(
            "label {l} outside vocab {}",
            model.vocab
        )));
    }
    let b = tokens.len();
    let n = model.seq_len();
    let d = model.scheme.feature_dim();
    let v = model.vocab;
    let mut logits = DenseTensor::zeros(&[b, v]);
    let mut grads = want_grads.then(|| ToyGrads::zeros_like(model));
    let mut loss = 0.0f64;

    for (s, (toks, &label)) in tokens.iter().zip(labels).enumerate() {
        let cache = model.forward_hidden(toks)?;
        let h_last = &cache.h.data()[(n - 1) * d..n * d];
        // final-position readout
        let mut row = vec![0.0f64; v];
        for (c, rv) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..d {
                acc += h_last[j] * model.w_out.get(&[j, c]);
            }
            *rv = acc;
        }
        // stable log-softmax
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        loss += (log_z - row[label]) / b as f64;
        logits.data_mut()[s * v..(s + 1) * v].copy_from_slice(&row);

        let Some(g) = grads.as_mut() else { continue };
        // d loss / d logits = (softmax - onehot) / B
        let mut dlogits = vec![0.0f64; v];
        for (c, dl) in dlogits.iter_mut().enumerate() {
            *dl = (row[c] - log_z).exp() / b as f64;
        }
        dlogits[label] -= 1.0 / b as f64;
        // readout gradients and upstream into the hidden state
        let mut dh_last = vec![0.0f64; d];
        for j in 0..d {
            for c in 0..v {
                g.w_out.data_mut()[j * v + c] += h_last[j] * dlogits[c];
                dh_last[j] += model.w_out.get(&[j, c]) * dlogits[c];
            }
        }
        let mut d_out = DenseTensor::zeros(&model.scheme.tensor_shape());
        let base = d_out.len() - d;
        d_out.data_mut()[base..].copy_from_slice(&dh_last);
        let (dq, dk, dv) =
            tensorized_attention_backward(&d_out, &cache.q, &cache.k, &cache.v, &cache.inter)?;
        let dq = dq.reshape(&[n, d])?;
        let dk = dk.reshape(&[n, d])?;
        let dv = dv.reshape(&[n, d])?;
        // through the projections: dX = sum dP W_p^T, dW_p = X^T dP
        let mut dx = matmul_transb(&dq, &model.w_q)?;
        dx.add_assign(&matmul_transb(&dk, &model.w_k)?)?;
        dx.add_assign(&matmul_transb(&dv, &model.w_v)?)?;
        g.w_q.add_assign(&matmul_transa(&cache.x, &dq)?)?;
        g.w_k.add_assign(&matmul_transa(&cache.x, &dk)?)?;
        g.w_v.add_assign(&matmul_transa(&cache.x, &dv)?)?;
        for (t, &tok) in toks.iter().enumerate() {
            let src = &dx.data()[t * d..(t + 1) * d];
            let dst = &mut g.embed.data_mut()[tok * d..(tok + 1) * d];
            for (a, b_) in dst.iter_mut().zip(src) {
                *a += b_;
            }
        }
        let _ = s;
    }
    Ok((loss, logits, grads))
}

/// Key-value recall: one planted (key, value) bigram in filler noise, a
/// query marker at the end, and the planted value as the label. Token
/// classes partition the vocabulary: values first, then keys, then filler,
/// with the last id reserved for the marker.
#[derive(Debug, Clone)]
pub struct RecallTask {
    pub seq_len: usize,
    pub vocab: usize,
    n_values: usize,
    n_keys: usize,
}

impl RecallTask {
    /// Needs seq_len >= 3 (key, value, marker) and vocab >= 5 so every
    /// class is nonempty.
    pub fn new(seq_len: usize, vocab: usize) -> Result<RecallTask> {
        if seq_len < 3 {
            return Err(Error::InvalidArgument(
                "recall needs room for key, value and marker".into(),
            ));
        }
        if vocab < 5 {
            return Err(Error::InvalidArgument(
                "recall needs at least 5 symbols".into(),
            ));
        }
        let rest = vocab - 1;
        let n_values = rest / 2;
        let n_keys = (rest - n_values).div_ceil(2);
        Ok(RecallTask {
            seq_len,
            vocab,
            n_values,
            n_keys,
        })
    }

    pub fn values(&self) -> std::ops::Range<usize> {
        0..self.n_values
    }

    pub fn keys(&self) -> std::ops::Range<usize> {
        self.n_values..self.n_values + self.n_keys
    }

    pub fn filler(&self) -> std::ops::Range<usize> {
        self.n_values + self.n_keys..self.vocab - 1
    }

    pub fn marker(&self) -> usize {
        self.vocab - 1
    }

    pub fn chance(&self) -> f64 {
        1.0 / self.vocab as f64
    }

    /// One sequence and its label.
    pub fn sample(&self, r: &mut impl Rng) -> (Vec<usize>, usize) {
        let n = self.seq_len;
        let filler = self.filler();
        let mut toks: Vec<usize> = (0..n)
            .map(|_| r.random_range(filler.start..filler.end))
            .collect();
        let p = r.random_range(0..n - 2);
        let key = r.random_range(self.keys().start..self.keys().end);
        let value = r.random_range(self.values().start..self.values().end);
        toks[p] = key;
        toks[p + 1] = value;
        toks[n - 1] = self.marker();
        (toks, value)
    }

    pub fn batch(&self, size: usize, r: &mut impl Rng) -> (Vec<Vec<usize>>, Vec<usize>) {
        let mut toks = Vec::with_capacity(size);
        let mut labels = Vec::with_capacity(size);
        for _ in 0..size {
            let (t, l) = self.sample(r);
            toks.push(t);
            labels.push(l);
        }
        (toks, labels)
    }
}

#[derive(Debug, Clone)]
pub struct TrainParams {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            steps: 2000,
            lr: 0.5,
            batch_size: 16,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

/// Per-step loss and training-batch accuracy, and a held-out accuracy at
/// the end. `diverged` records the step at which the loss left the reals.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub final_accuracy: f64,
    pub diverged: Option<usize>,
}

/// SGD with global-norm clipping. Deterministic: batch t comes from
/// substream(seed, t), and evaluation from a dedicated substream.
pub fn train(model: &mut ToyModel, task: &RecallTask, params: &TrainParams) -> Result<TrainTrace> {
    if params.steps == 0 || params.batch_size == 0 {
        return Err(Error::InvalidArgument("steps and batch size must be positive".into()));
    }
    if task.seq_len != model.seq_len() || task.vocab != model.vocab {
        return Err(Error::ShapeMismatch(format!(
            "task ({}, vocab {}) does not fit model ({}, vocab {})",
            task.seq_len,
            task.vocab,
            model.seq_len(),
            model.vocab
        )));
    }
    let mut losses = Vec::with_capacity(params.steps);
    let mut accuracy = Vec::with_capacity(params.steps);
    let mut diverged = None;
    for step in 0..params.steps {
        let mut r = rng::substream(params.seed, step as u64);
        let (toks, labels) = task.batch(params.batch_size, &mut r);
        let (loss, logits, mut grads) = loss_and_grads(model, &toks, &labels)?;
        if !loss.is_finite() {
            diverged = Some(step);
            losses.push(loss);
            accuracy.push(0.0);
            break;
        }
        losses.push(loss);
        accuracy.push(batch_accuracy(&logits, &labels));
        let norm = grads.global_norm();
        if norm > params.clip_norm && norm > 0.0 {
            grads.scale(params.clip_norm / norm);
        }
        apply_sgd(model, &grads, params.lr);
    }
    let final_accuracy = if diverged.is_none() {
        evaluate_recall(model, task, 500, params.seed ^ 0x5eed_0e7a)?
    } else {
        0.0
    };
    Ok(TrainTrace {
        losses,
        accuracy,
        final_accuracy,
        diverged,
    })
}

fn batch_accuracy(logits: &DenseTensor, labels: &[usize]) -> f64 {
    let v = logits.shape()[1];
    let mut hits = 0usize;
    for (s, &label) in labels.iter().enumerate() {
        let row = &logits.data()[s * v..(s + 1) * v];
        let mut best = 0usize;
        for c in 1..v {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    hits as f64 / labels.len().max(1) as f64
}

fn apply_sgd(model: &mut ToyModel, grads: &ToyGrads, lr: f64) {
    let pairs = [
        (&mut model.embed, &grads.embed),
        (&mut model.w_q, &grads.w_q),
        (&mut model.w_k, &grads.w_k),
        (&mut model.w_v, &grads.w_v),
        (&mut model.w_out, &grads.w_out),
    ];
    for (p, g) in pairs {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
}

/// Held-out accuracy over fresh samples.
pub fn evaluate_recall(
    model: &ToyModel,
    task: &RecallTask,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut r = rng::substream(seed, 0);
    let (toks, labels) = task.batch(samples, &mut r);
    let (_, logits) = forward_loss(model, &toks, &labels)?;
    Ok(batch_accuracy(&logits, &labels))
}

/// CSV body: one row per training step.
pub fn trace_csv(trace: &TrainTrace) -> String {
    let mut out = String::from("step,loss,accuracy\n");
    for (i, (l, a)) in trace.losses.iter().zip(&trace.accuracy).enumerate() {
        out.push_str(&format!("{},{:.8},{:.4}\n", i, l, a));
    }
    out
}
