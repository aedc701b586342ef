use serde::Serialize;

use super::{ToyLm, TokenBatch};
use crate::autograd::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Perplexity {
    pub perplexity: f64,
    pub mean_nll: f64,
    /// Number of predicted positions.
    pub tokens: usize,
}

/// Summed next-token NLL of a batch (nats) and the number of predictions.
pub fn batch_nll<T: Real>(model: &ToyLm<T>, batch: &TokenBatch) -> Result<(f64, usize)> {
    let mean = model.loss(batch)?.f64();
    let count = batch.predicted();
    Ok((mean * count as f64, count))
}

/// `exp(mean NLL)` over every prediction in `batches`. Batch totals are
/// accumulated in the order given.
pub fn perplexity<T: Real>(model: &ToyLm<T>, batches: &[TokenBatch]) -> Result<Perplexity> {
    if batches.is_empty() {
        return Err(Error::data("perplexity needs at least one batch"));
    }
    let mut total = 0.0f64;
    let mut tokens = 0usize;
    for b in batches {
        let (nll, n) = batch_nll(model, b)?;
        total += nll;
        tokens += n;
    }
    let mean_nll = total / tokens as f64;
    Ok(Perplexity {
        perplexity: mean_nll.exp(),
        mean_nll,
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let mut m = ToyLm::<f64>::new(ModelConfig {
            layers: 1,
            width: 8,
            heads: 2,
            context: 8,
            mlp_hidden: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        let head = m.params().len() - 1;
        m.params_mut()[head].data_mut().fill(0.0);
        let b = TokenBatch::new((0..16).collect(), 2, 8).unwrap();
        let p = perplexity(&m, &[b.clone(), b]).unwrap();
        assert!((p.perplexity - 256.0).abs() < 1e-9);
        assert_eq!(p.tokens, 28);
        assert!(perplexity(&m, &[]).is_err());
    }
}
