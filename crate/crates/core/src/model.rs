//! A miniature pre-norm decoder-only transformer with learned positional
//! embeddings and a separate output head.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Purpose};
use crate::tensor::{Graph, ParamVector, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub expansion_ratio: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            d_model: 64,
            n_heads: 2,
            expansion_ratio: 4,
            vocab_size: 64,
            seq_len: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_blocks", self.n_blocks),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("expansion_ratio", self.expansion_ratio),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model {} is not divisible by model.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size > u16::MAX as usize + 1 {
            return Err(Error::Config("model.vocab_size exceeds 16-bit token ids".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.expansion_ratio
    }

    /// Parameter shapes in canonical order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v, h) = (self.d_model, self.vocab_size, self.hidden());
        let mut out = vec![
            ("wte".to_string(), vec![v, d]),
            ("wpe".to_string(), vec![self.seq_len, d]),
        ];
        for b in 0..self.n_blocks {
            let p = |s: &str| format!("blocks.{b}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.qkv.weight"), vec![d, 3 * d]),
                (p("attn.qkv.bias"), vec![3 * d]),
                (p("attn.proj.weight"), vec![d, d]),
                (p("attn.proj.bias"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.fc.weight"), vec![d, h]),
                (p("mlp.fc.bias"), vec![h]),
                (p("mlp.proj.weight"), vec![h, d]),
                (p("mlp.proj.bias"), vec![d]),
            ]);
        }
        out.extend([
            ("ln_f.gain".to_string(), vec![d]),
            ("ln_f.bias".to_string(), vec![d]),
            ("head.weight".to_string(), vec![d, v]),
            ("head.bias".to_string(), vec![v]),
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// One mini-batch of next-token prediction windows, row-major `[batch × seq]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<u16>,
    pub targets: Vec<u16>,
}

impl Batch {
    /// Builds a batch from windows of `seq + 1` tokens each.
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a [u16]>) -> Result<Self> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut seq = None;
        let mut batch = 0;
        for w in windows {
            if w.len() < 2 {
                return Err(Error::Dimension("window shorter than two tokens".into()));
            }
            let s = w.len() - 1;
            if *seq.get_or_insert(s) != s {
                return Err(Error::Dimension("windows of differing length".into()));
            }
            inputs.extend_from_slice(&w[..s]);
            targets.extend_from_slice(&w[1..]);
            batch += 1;
        }
        let seq = seq.ok_or_else(|| Error::Dimension("empty batch".into()))?;
        Ok(Self {
            batch,
            seq,
            inputs,
            targets,
        })
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }
}

fn is_residual_projection(name: &str) -> bool {
    name.ends_with("attn.proj.weight") || name.ends_with("mlp.proj.weight")
}

/// Deterministic initialization: normal weights, unit gains, zero biases.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ParamVector> {
    config.validate()?;
    let mut rng = seed::rng(seed, Purpose::Init, &[]);
    let base = Normal::new(0.0, INIT_STD).expect("valid std");
    let residual =
        Normal::new(0.0, INIT_STD / (2.0 * config.n_blocks as f64).sqrt()).expect("valid std");
    let mut entries = Vec::new();
    for (name, shape) in config.shapes() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".gain") {
            vec![1.0; n]
        } else if name.ends_with(".bias") {
            vec![0.0; n]
        } else if is_residual_projection(&name) {
            (0..n).map(|_| residual.sample(&mut rng)).collect()
        } else {
            (0..n).map(|_| base.sample(&mut rng)).collect()
        };
        entries.push((name, Tensor::new(data, shape)?));
    }
    ParamVector::new(entries)
}

/// Output of a recorded forward pass.
pub struct Forward {
    pub graph: Graph,
    pub params: Vec<Var>,
    pub logits: Var,
    pub loss: Var,
}

fn check_params(config: &ModelConfig, params: &ParamVector) -> Result<()> {
    let shapes = config.shapes();
    if shapes.len() != params.num_entries() {
        return Err(Error::Contract(format!(
            "expected {} parameter tensors, got {}",
            shapes.len(),
            params.num_entries()
        )));
    }
    for ((name, shape), (pn, t)) in shapes.iter().zip(params.entries()) {
        if name != pn || shape.as_slice() != t.shape() {
            return Err(Error::Contract(format!(
                "parameter `{pn}` {:?} does not match model `{name}` {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Records the full forward pass on a fresh graph.
pub fn forward(
    config: &ModelConfig,
    params: &ParamVector,
    batch: &Batch,
    trainable: bool,
) -> Result<Forward> {
    config.validate()?;
    check_params(config, params)?;
    if batch.seq > config.seq_len {
        return Err(Error::Dimension(format!(
            "sequence length {} exceeds context of {}",
            batch.seq, config.seq_len
        )));
    }
    let vocab = config.vocab_size;
    if let Some(bad) = batch
        .inputs
        .iter()
        .chain(&batch.targets)
        .find(|&&t| t as usize >= vocab)
    {
        return Err(Error::Index(format!(
            "token {bad} outside vocabulary of {vocab}"
        )));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .entries()
        .iter()
        .map(|(_, t)| {
            if trainable {
                g.param(t.clone())
            } else {
                g.input(t.clone())
            }
        })
        .collect();
    let mut next = vars.iter().copied();
    let mut take = || next.next().expect("parameter order checked");

    let (b, s) = (batch.batch, batch.seq);
    let tokens: Vec<usize> = batch.inputs.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..b * s).map(|i| i % s).collect();

    let wte = take();
    let wpe = take();
    let tok = g.gather_rows(wte, &tokens)?;
    let pos = g.gather_rows(wpe, &positions)?;
    let mut x = g.add(tok, pos)?;

    for _ in 0..config.n_blocks {
        let (ln1_g, ln1_b) = (take(), take());
        let (qkv_w, qkv_b) = (take(), take());
        let (proj_w, proj_b) = (take(), take());
        let (ln2_g, ln2_b) = (take(), take());
        let (fc_w, fc_b) = (take(), take());
        let (out_w, out_b) = (take(), take());

        let h = g.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
        let qkv = g.matmul(h, qkv_w)?;
        let qkv = g.add_bias(qkv, qkv_b)?;
        let att = g.causal_attention(qkv, b, s, config.n_heads)?;
        let att = g.matmul(att, proj_w)?;
        let att = g.add_bias(att, proj_b)?;
        x = g.add(x, att)?;

        let h = g.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
        let f = g.matmul(h, fc_w)?;
        let f = g.add_bias(f, fc_b)?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, out_w)?;
        let f = g.add_bias(f, out_b)?;
        x = g.add(x, f)?;
    }

    let (lnf_g, lnf_b) = (take(), take());
    let (head_w, head_b) = (take(), take());
    let h = g.layer_norm(x, lnf_g, lnf_b, LN_EPS)?;
    let logits = g.matmul(h, head_w)?;
    let logits = g.add_bias(logits, head_b)?;
    let targets: Vec<usize> = batch.targets.iter().map(|&t| t as usize).collect();
    let loss = g.cross_entropy(logits, &targets)?;

    Ok(Forward {
        graph: g,
        params: vars,
        logits,
        loss,
    })
}

/// Mean token cross-entropy and logits shaped `[batch × seq × vocab]`.
pub fn forward_loss(
    config: &ModelConfig,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, Tensor)> {
    let fwd = forward(config, params, batch, false)?;
    let loss = fwd.graph.value(fwd.loss).data()[0];
    let logits = Tensor::new(
        fwd.graph.value(fwd.logits).data().to_vec(),
        vec![batch.batch, batch.seq, config.vocab_size],
    )?;
    Ok((loss, logits))
}

/// Loss and its gradient with respect to every parameter.
pub fn loss_and_grad(
    config: &ModelConfig,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, ParamVector)> {
    let mut fwd = forward(config, params, batch, true)?;
    let loss = fwd.graph.value(fwd.loss).data()[0];
    fwd.graph.backward(fwd.loss)?;
    let mut entries = Vec::with_capacity(fwd.params.len());
    for ((name, t), var) in params.entries().iter().zip(&fwd.params) {
        let grad = fwd
            .graph
            .take_grad(*var)
            .unwrap_or_else(|| vec![0.0; t.len()]);
        entries.push((name.clone(), Tensor::new(grad, t.shape().to_vec())?));
    }
    Ok((loss, ParamVector::new(entries)?))
}

/// `exp` of the token-weighted mean negative log-likelihood over all batches.
pub fn eval_perplexity(config: &ModelConfig, params: &ParamVector, batches: &[Batch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Usage("perplexity over an empty evaluation stream".into()));
    }
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for batch in batches {
        let (loss, _) = forward_loss(config, params, batch)?;
        nll += loss * batch.tokens() as f64;
        tokens += batch.tokens();
    }
    Ok((nll / tokens as f64).exp())
}
