//! Dual encoder scoring a context against a response by dot product.
//!
//! Each side ("tower") mean-pools token embeddings, applies one affine map
//! and a tanh:
//!
//! ```text
//! u = mean_t E[t]        h = W·u + b        e = tanh(h)
//! score(c, r) = e_c · e_r
//! ```
//!
//! Gradients are derived by hand; see [`backward`].

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::binio::{ByteReader, ByteWriter};
use crate::corpus::{Context, Vocab};
use crate::error::{G2rError, Result};
use crate::rng::{rng_from_seed, sha256_hex};

const MAGIC: &[u8; 4] = b"G2RB";
const VERSION: u16 = 1;

/// Initialization half-width for embeddings and projections.
pub const INIT_SCALE: f64 = 0.1;

/// Parameters (or gradients) of one encoder side.
#[derive(Clone, Debug, PartialEq)]
pub struct Tower {
    /// `V × d`, row-major.
    pub embed: Vec<f64>,
    /// `d × d`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Tower {
    fn zeros(vocab_size: usize, dim: usize) -> Self {
        Tower {
            embed: vec![0.0; vocab_size * dim],
            weight: vec![0.0; dim * dim],
            bias: vec![0.0; dim],
        }
    }

    /// Returns the pooled input and the output embedding.
    fn forward(&self, ids: &[u32], dim: usize) -> (Vec<f64>, Vec<f64>) {
        let mut u = vec![0.0; dim];
        for &id in ids {
            let row = &self.embed[id as usize * dim..(id as usize + 1) * dim];
            for (a, b) in u.iter_mut().zip(row) {
                *a += b;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        u.iter_mut().for_each(|a| *a *= inv);
        let e = (0..dim)
            .map(|i| {
                let row = &self.weight[i * dim..(i + 1) * dim];
                let h: f64 = row.iter().zip(&u).map(|(w, x)| w * x).sum::<f64>() + self.bias[i];
                h.tanh()
            })
            .collect();
        (u, e)
    }

    /// Accumulates gradients for one input given `dL/de`.
    fn accumulate(&mut self, params: &Tower, ids: &[u32], u: &[f64], e: &[f64], de: &[f64], dim: usize) {
        let dh: Vec<f64> = e.iter().zip(de).map(|(e, g)| g * (1.0 - e * e)).collect();
        let mut du = vec![0.0; dim];
        for i in 0..dim {
            if dh[i] == 0.0 {
                continue;
            }
            self.bias[i] += dh[i];
            let wrow = &params.weight[i * dim..(i + 1) * dim];
            let grow = &mut self.weight[i * dim..(i + 1) * dim];
            for j in 0..dim {
                grow[j] += dh[i] * u[j];
                du[j] += wrow[j] * dh[i];
            }
        }
        let inv = 1.0 / ids.len() as f64;
        for &id in ids {
            let row = &mut self.embed[id as usize * dim..(id as usize + 1) * dim];
            for (g, d) in row.iter_mut().zip(&du) {
                *g += d * inv;
            }
        }
    }

    fn tensors(&self) -> [&Vec<f64>; 3] {
        [&self.embed, &self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.embed, &mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    dim: usize,
    vocab_size: usize,
    pub context: Tower,
    pub response: Tower,
}

/// Gradient of a scalar loss, shaped like [`EncoderParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub context: Tower,
    pub response: Tower,
}

impl GradientSet {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        GradientSet {
            context: Tower::zeros(params.vocab_size, params.dim),
            response: Tower::zeros(params.vocab_size, params.dim),
        }
    }

    /// Tensors in the declared order: context embed/weight/bias, then response.
    pub fn tensors(&self) -> [&Vec<f64>; 6] {
        let [a, b, c] = self.context.tensors();
        let [d, e, f] = self.response.tensors();
        [a, b, c, d, e, f]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        let [a, b, c] = self.context.tensors_mut();
        let [d, e, f] = self.response.tensors_mut();
        [a, b, c, d, e, f]
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= k);
        }
    }
}

/// Token ids for a batch of contexts and responses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenBatch {
    pub contexts: Vec<Vec<u32>>,
    pub responses: Vec<Vec<u32>>,
}

/// Dense row-major score matrix, contexts × responses.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ScoreMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl EncoderParams {
    /// Embeddings and projection weights uniform in `[-INIT_SCALE, INIT_SCALE]`, biases zero.
    pub fn init(vocab_size: usize, dim: usize, seed: u64) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(G2rError::invalid("vocab_size and dim must be positive"));
        }
        let mut rng = rng_from_seed(seed);
        let mut p = Self::zeros(vocab_size, dim);
        for t in [&mut p.context, &mut p.response] {
            for v in t.embed.iter_mut().chain(t.weight.iter_mut()) {
                *v = rng.random_range(-INIT_SCALE..=INIT_SCALE);
            }
        }
        Ok(p)
    }

    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        EncoderParams {
            dim,
            vocab_size,
            context: Tower::zeros(vocab_size, dim),
            response: Tower::zeros(vocab_size, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn tensors(&self) -> [&Vec<f64>; 6] {
        let [a, b, c] = self.context.tensors();
        let [d, e, f] = self.response.tensors();
        [a, b, c, d, e, f]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        let [a, b, c] = self.context.tensors_mut();
        let [d, e, f] = self.response.tensors_mut();
        [a, b, c, d, e, f]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(G2rError::Empty("cannot encode an empty token sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(G2rError::VocabMismatch(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn encode_context_ids(&self, ids: &[u32]) -> Result<Vec<f64>> {
        self.check_ids(ids)?;
        Ok(self.context.forward(ids, self.dim).1)
    }

    pub fn encode_response_ids(&self, ids: &[u32]) -> Result<Vec<f64>> {
        self.check_ids(ids)?;
        Ok(self.response.forward(ids, self.dim).1)
    }

    /// Entry `(i, j)` is `score(contexts[i], responses[j])`.
    pub fn score_batch(&self, batch: &TokenBatch) -> Result<ScoreMatrix> {
        if batch.contexts.is_empty() || batch.responses.is_empty() {
            return Err(G2rError::Empty("score batch needs contexts and responses".into()));
        }
        let ctx = batch
            .contexts
            .iter()
            .map(|c| self.encode_context_ids(c))
            .collect::<Result<Vec<_>>>()?;
        let resp = batch
            .responses
            .iter()
            .map(|r| self.encode_response_ids(r))
            .collect::<Result<Vec<_>>>()?;
        let mut m = ScoreMatrix::zeros(ctx.len(), resp.len());
        for (i, c) in ctx.iter().enumerate() {
            for (j, r) in resp.iter().enumerate() {
                *m.get_mut(i, j) = dot(c, r);
            }
        }
        Ok(m)
    }

    /// Gradient of `Σ_ij upstream[i,j] · score[i,j]` with respect to every parameter.
    ///
    /// With `G = upstream`, `dL/de_c[i] = Σ_j G[i,j]·e_r[j]` and
    /// `dL/de_r[j] = Σ_i G[i,j]·e_c[i]`; each side then backpropagates
    /// through tanh (`1 − e²`), the affine map and the mean pool.
    pub fn backward(&self, batch: &TokenBatch, upstream: &ScoreMatrix) -> Result<GradientSet> {
        if upstream.rows != batch.contexts.len() || upstream.cols != batch.responses.len() {
            return Err(G2rError::ShapeMismatch {
                expected: format!("{}x{}", batch.contexts.len(), batch.responses.len()),
                actual: format!("{}x{}", upstream.rows, upstream.cols),
            });
        }
        for ids in batch.contexts.iter().chain(&batch.responses) {
            self.check_ids(ids)?;
        }
        let d = self.dim;
        let ctx: Vec<_> = batch.contexts.iter().map(|c| self.context.forward(c, d)).collect();
        let resp: Vec<_> = batch.responses.iter().map(|r| self.response.forward(r, d)).collect();
        let mut grads = GradientSet::zeros_like(self);
        for (i, (u, e)) in ctx.iter().enumerate() {
            let mut de = vec![0.0; d];
            for (j, (_, er)) in resp.iter().enumerate() {
                let g = upstream.get(i, j);
                if g != 0.0 {
                    de.iter_mut().zip(er).for_each(|(a, b)| *a += g * b);
                }
            }
            grads.context.accumulate(&self.context, &batch.contexts[i], u, e, &de, d);
        }
        for (j, (u, e)) in resp.iter().enumerate() {
            let mut de = vec![0.0; d];
            for (i, (_, ec)) in ctx.iter().enumerate() {
                let g = upstream.get(i, j);
                if g != 0.0 {
                    de.iter_mut().zip(ec).for_each(|(a, b)| *a += g * b);
                }
            }
            grads.response.accumulate(&self.response, &batch.responses[j], u, e, &de, d);
        }
        Ok(grads)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(MAGIC, VERSION);
        w.u32(self.dim as u32);
        w.u32(self.vocab_size as u32);
        for t in self.tensors() {
            w.f64s(t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, _) = ByteReader::open(bytes, MAGIC, VERSION)?;
        let dim = r.u32()? as usize;
        let vocab_size = r.u32()? as usize;
        if dim == 0 || vocab_size == 0 {
            return Err(G2rError::Format("zero-sized encoder".into()));
        }
        let mut p = Self::zeros(vocab_size, dim);
        for t in p.tensors_mut() {
            let n = t.len();
            *t = r.f64s(n)?;
        }
        r.expect_end()?;
        Ok(p)
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| G2rError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| G2rError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn encode_context(params: &EncoderParams, vocab: &Vocab, context: &Context) -> Result<Vec<f64>> {
    params.encode_context_ids(&vocab.context_ids(context))
}

pub fn encode_response(params: &EncoderParams, vocab: &Vocab, response: &[String]) -> Result<Vec<f64>> {
    params.encode_response_ids(&vocab.ids(response))
}

pub fn score(params: &EncoderParams, vocab: &Vocab, context: &Context, response: &[String]) -> Result<f64> {
    Ok(dot(
        &encode_context(params, vocab, context)?,
        &encode_response(params, vocab, response)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch() -> TokenBatch {
        TokenBatch {
            contexts: vec![vec![0, 1, 1], vec![2]],
            responses: vec![vec![1], vec![2, 0], vec![0, 0, 2]],
        }
    }

    #[test]
    fn zero_tables_give_tanh_bias() {
        let mut p = EncoderParams::zeros(3, 2);
        p.context.bias = vec![0.3, -0.7];
        let e = p.encode_context_ids(&[0, 2]).unwrap();
        assert_eq!(e, vec![0.3f64.tanh(), (-0.7f64).tanh()]);
        p.response.bias = vec![-0.2, 0.5];
        assert_eq!(p.encode_response_ids(&[1]).unwrap(), vec![(-0.2f64).tanh(), 0.5f64.tanh()]);
    }

    #[test]
    fn single_token_and_hand_linear_algebra() {
        // d = 2, V = 3.
        let mut p = EncoderParams::zeros(3, 2);
        p.context.embed = vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0];
        p.context.weight = vec![0.1, 0.2, -0.3, 0.4];
        p.context.bias = vec![0.05, -0.05];
        // One token: tanh(W·E[1] + b) with E[1] = (0.5, -1).
        let one = p.encode_context_ids(&[1]).unwrap();
        assert!((one[0] - (-0.1f64).tanh()).abs() < 1e-15);
        assert!((one[1] - (-0.6f64).tanh()).abs() < 1e-15);
        // Mean of E[0] and E[2] is (0.5, 2.5); W·u + b = (0.6, 0.8).
        let two = p.encode_context_ids(&[0, 2]).unwrap();
        assert!((two[0] - 0.6f64.tanh()).abs() < 1e-15);
        assert!((two[1] - 0.8f64.tanh()).abs() < 1e-15);
        assert!(p.encode_context_ids(&[]).is_err());
        assert!(p.encode_context_ids(&[3]).is_err());
    }

    #[test]
    fn batch_entries_match_pairwise_scores() {
        let p = EncoderParams::init(3, 4, 1).unwrap();
        let b = batch();
        let m = p.score_batch(&b).unwrap();
        for (i, c) in b.contexts.iter().enumerate() {
            for (j, r) in b.responses.iter().enumerate() {
                let s = dot(&p.encode_context_ids(c).unwrap(), &p.encode_response_ids(r).unwrap());
                assert_eq!(m.get(i, j), s);
                assert!(s.abs() < p.dim() as f64);
            }
        }
        assert_eq!(p.score_batch(&b).unwrap(), m);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = EncoderParams::init(3, 4, 2).unwrap();
        let g = p.backward(&batch(), &ScoreMatrix::zeros(2, 3)).unwrap();
        assert_eq!(g.norm(), 0.0);
        assert!(p.backward(&batch(), &ScoreMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn params_file_round_trips() {
        let p = EncoderParams::init(5, 3, 4).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"G2RB");
        assert_eq!(EncoderParams::from_bytes(&bytes).unwrap(), p);
        assert!(EncoderParams::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let p = EncoderParams::init(10, 4, 9).unwrap();
        assert_eq!(p, EncoderParams::init(10, 4, 9).unwrap());
        assert!(p.context.embed.iter().all(|v| v.abs() <= INIT_SCALE));
        assert!(p.response.bias.iter().all(|&v| v == 0.0));
    }
}
