use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TokenBatch;
use crate::autograd::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Shape of the toy decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Maximum sequence length (size of the learned position table).
    pub context: usize,
    /// Hidden width of the MLP; conventionally `4 * width`.
    pub mlp_hidden: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            layers: 2,
            width: 128,
            heads: 4,
            context: 128,
            mlp_hidden: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab", self.vocab),
            ("layers", self.layers),
            ("width", self.width),
            ("heads", self.heads),
            ("context", self.context),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model {name} must be positive")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.vocab > u16::MAX as usize + 1 || self.width > u16::MAX as usize || self.mlp_hidden > u16::MAX as usize {
            return Err(Error::config("dimensions must fit 16-bit column indices"));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.width, self.mlp_hidden);
        let mut out = vec![
            ("embed_tokens.weight".to_string(), vec![self.vocab, d]),
            ("embed_positions.weight".to_string(), vec![self.context, d]),
        ];
        for l in 0..self.layers {
            let p = format!("layers.{l}");
            out.push((format!("{p}.input_layernorm.weight"), vec![d]));
            for proj in ["q_proj", "k_proj", "v_proj", "o_proj"] {
                out.push((format!("{p}.self_attn.{proj}.weight"), vec![d, d]));
            }
            out.push((format!("{p}.post_attention_layernorm.weight"), vec![d]));
            out.push((format!("{p}.mlp.up_proj.weight"), vec![h, d]));
            out.push((format!("{p}.mlp.down_proj.weight"), vec![d, h]));
        }
        out.push(("norm.weight".to_string(), vec![d]));
        out.push(("lm_head.weight".to_string(), vec![self.vocab, d]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Whether a parameter is one of the projection matrices that get quantized
/// (and carry cherry columns). Embeddings, norms and the head stay in 16 bits.
pub fn is_quantizable(name: &str) -> bool {
    name.starts_with("layers.") && name.ends_with("_proj.weight")
}

/// Forward pass results. `linear_inputs` pairs each quantizable parameter
/// index with the graph node feeding it, for activation statistics.
#[derive(Debug, Clone)]
pub struct Forward {
    pub loss: Var,
    pub logits: Var,
    pub linear_inputs: Vec<(usize, Var)>,
}

/// Pre-norm decoder: learned token and position embeddings, `layers` blocks
/// of causal attention and a GELU MLP, a final RMSNorm and an untied head.
#[derive(Debug, Clone)]
pub struct ToyLm<T: Real = f32> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

const NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

impl<T: Real> ToyLm<T> {
    /// Random initialization: N(0, 0.02) for matrices and embeddings, with
    /// the residual output projections further scaled by `1/sqrt(2 * layers)`;
    /// norm gains start at one.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
        let resid = 1.0 / (2.0 * config.layers as f64).sqrt();
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.parameter_shapes() {
            let t = if name.ends_with("norm.weight") {
                Tensor::from_fn(shape, |_| T::one())?
            } else {
                let k = if name.ends_with("o_proj.weight") || name.ends_with("down_proj.weight") {
                    resid
                } else {
                    1.0
                };
                Tensor::from_fn(shape, |_| T::of(normal.sample(&mut rng) * k))?
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self { config, names, params })
    }

    /// Assembles a model from named tensors, which must match the
    /// configuration's parameter list exactly (names, order and shapes).
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != named.len() {
            return Err(Error::config(format!(
                "model needs {} parameters, got {}",
                expected.len(),
                named.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&named) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::config(format!(
                    "parameter mismatch: expected {en} {es:?}, got {n} {:?}",
                    t.shape()
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Self { config, names, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    /// Indices of the projection matrices subject to quantization.
    pub fn quantizable(&self) -> Vec<usize> {
        (0..self.names.len()).filter(|&i| is_quantizable(&self.names[i])).collect()
    }

    pub fn cast<U: Real>(&self) -> ToyLm<U> {
        ToyLm {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    /// Registers every parameter in `g`, in storage order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p)).collect()
    }

    /// Builds the forward graph for `batch` on top of already-bound parameter
    /// nodes. Callers may substitute any node (e.g. a fake-quantized weight)
    /// as long as its shape matches.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], batch: &TokenBatch) -> Result<Forward> {
        let c = &self.config;
        if vars.len() != self.params.len() {
            return Err(Error::config(format!("{} parameter nodes for {} parameters", vars.len(), self.params.len())));
        }
        if batch.seq > c.context {
            return Err(Error::config(format!("sequence length {} exceeds context {}", batch.seq, c.context)));
        }
        if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= c.vocab) {
            return Err(Error::config(format!("token id {bad} outside vocabulary {}", c.vocab)));
        }
        let n = batch.batch * batch.seq;
        let positions: Vec<usize> = (0..n).map(|i| i % batch.seq).collect();
        let tok = g.embedding(vars[0], &batch.tokens)?;
        let pos = g.embedding(vars[1], &positions)?;
        let mut x = g.add(tok, pos)?;
        let mut linear_inputs = Vec::with_capacity(6 * c.layers);
        let per_layer = 8;
        for l in 0..c.layers {
            let base = 2 + l * per_layer;
            let (ln1, wq, wk, wv, wo, ln2, up, down) = (
                base,
                base + 1,
                base + 2,
                base + 3,
                base + 4,
                base + 5,
                base + 6,
                base + 7,
            );
            let h = g.rms_norm(x, vars[ln1], NORM_EPS)?;
            let q = g.linear(h, vars[wq])?;
            let k = g.linear(h, vars[wk])?;
            let v = g.linear(h, vars[wv])?;
            linear_inputs.extend([(wq, h), (wk, h), (wv, h)]);
            let a = g.attention(q, k, v, batch.batch, batch.seq, c.heads)?;
            let o = g.linear(a, vars[wo])?;
            linear_inputs.push((wo, a));
            x = g.add(x, o)?;
            let h2 = g.rms_norm(x, vars[ln2], NORM_EPS)?;
            let u = g.linear(h2, vars[up])?;
            let u = g.gelu(u)?;
            let d = g.linear(u, vars[down])?;
            linear_inputs.extend([(up, h2), (down, u)]);
            x = g.add(x, d)?;
        }
        let last = vars.len() - 2;
        let f = g.rms_norm(x, vars[last], NORM_EPS)?;
        let logits = g.linear(f, vars[last + 1])?;
        let loss = g.cross_entropy(logits, &batch.targets())?;
        Ok(Forward {
            loss,
            logits,
            linear_inputs,
        })
    }

    /// Mean next-token NLL of `batch`, without keeping the graph.
    pub fn loss(&self, batch: &TokenBatch) -> Result<T> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let f = self.forward(&mut g, &vars, batch)?;
        Ok(g.scalar(f.loss))
    }

    /// Runs forward and backward on `batch`, leaving gradients in the
    /// parameter tensors. Returns the loss.
    pub fn loss_and_grad(&mut self, batch: &TokenBatch) -> Result<T> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let f = self.forward(&mut g, &vars, batch)?;
        g.backward(f.loss)?;
        for (p, v) in self.params.iter_mut().zip(&vars) {
            if let Some(gr) = g.grad(*v) {
                p.set_grad(gr.to_vec())?;
            }
        }
        Ok(g.scalar(f.loss))
    }
}
