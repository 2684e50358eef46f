//! Pre-LayerNorm multi-head self-attention encoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};

/// RNG driving dropout masks. `None` wherever a function takes one means
/// evaluation mode.
pub type DropoutRng = ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;

/// Additive logit for masked attention slots.
pub(crate) const MASK_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub attn_dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |msg: String| Err(TensorError::Invalid { op: "encoder_config", msg });
        if self.d == 0 || self.heads == 0 || self.d_ff == 0 {
            return bad(format!("d = {}, heads = {}, d_ff = {} must be positive", self.d, self.heads, self.d_ff));
        }
        if self.d % self.heads != 0 {
            return bad(format!("d = {} not divisible by heads = {}", self.d, self.heads));
        }
        for (name, p) in [("dropout", self.dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d / self.heads
    }
}

/// `rows × cols` weight drawn from `uniform(±1/√fan_in)`.
pub fn uniform_weight<S: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

/// Indices of one layer's tensors inside a [`ParamStore`].
///
/// Projections act on row vectors: `Q = H·W_q` with `W_q: d × d`, heads
/// taking consecutive column blocks of width `d / heads`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderLayer {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
}

impl EncoderLayer {
    pub fn register<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let (d, f) = (cfg.d, cfg.d_ff);
        let mut w = |name: &str, r: usize, c: usize| store.push(format!("{prefix}.{name}"), uniform_weight(r, c, r, rng));
        let wq = w("wq", d, d);
        let wk = w("wk", d, d);
        let wv = w("wv", d, d);
        let wo = w("wo", d, d);
        let w1 = w("w1", d, f);
        let w2 = w("w2", f, d);
        let b1 = store.push(format!("{prefix}.b1"), Tensor::zeros(&[1, f]));
        let b2 = store.push(format!("{prefix}.b2"), Tensor::zeros(&[1, d]));
        let ln1_gain = store.push(format!("{prefix}.ln1.gain"), Tensor::full(&[1, d], S::one()));
        let ln1_bias = store.push(format!("{prefix}.ln1.bias"), Tensor::zeros(&[1, d]));
        let ln2_gain = store.push(format!("{prefix}.ln2.gain"), Tensor::full(&[1, d], S::one()));
        let ln2_bias = store.push(format!("{prefix}.ln2.bias"), Tensor::zeros(&[1, d]));
        Self {
            wq,
            wk,
            wv,
            wo,
            w1,
            b1,
            w2,
            b2,
            ln1_gain,
            ln1_bias,
            ln2_gain,
            ln2_bias,
        }
    }

    /// All parameter indices, in registration-independent field order.
    pub fn indices(&self) -> [usize; 12] {
        [
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.ln1_gain,
            self.ln1_bias,
            self.ln2_gain,
            self.ln2_bias,
        ]
    }
}

/// Self-attention result: the `n × d` output and each head's `n × n`
/// attention matrix (after softmax, before dropout).
pub struct Attention {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Builds a `1 × n` additive key mask, or `None` if nothing is masked or
/// every key would be.
pub(crate) fn key_mask<S: Scalar>(tape: &mut Tape<S>, keep: Option<&[bool]>) -> Option<Var> {
    let keep = keep?;
    if keep.iter().all(|&k| k) || !keep.iter().any(|&k| k) {
        return None;
    }
    let row = keep
        .iter()
        .map(|&k| if k { S::zero() } else { S::lit(MASK_LOGIT) })
        .collect();
    Some(tape.constant(Tensor::row_vector(row)))
}

/// Multi-head scaled dot-product self-attention over the rows of `h`.
pub fn msa<S: Scalar>(
    tape: &mut Tape<S>,
    p: &[Var],
    layer: &EncoderLayer,
    h: Var,
    cfg: &EncoderConfig,
    keep: Option<&[bool]>,
    mut rng: Option<&mut DropoutRng>,
) -> Result<Attention, TensorError> {
    let q = tape.matmul(h, p[layer.wq])?;
    let k = tape.matmul(h, p[layer.wk])?;
    let v = tape.matmul(h, p[layer.wv])?;
    let dk = cfg.d_head();
    let scale = S::lit(1.0 / (dk as f64).sqrt());
    let mask = key_mask(tape, keep);
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let qh = tape.slice_cols(q, i * dk, dk)?;
        let kh = tape.slice_cols(k, i * dk, dk)?;
        let vh = tape.slice_cols(v, i * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(scores, scale)?;
        if let Some(m) = mask {
            scores = tape.add_row(scores, m)?;
        }
        let a = tape.softmax_rows(scores)?;
        weights.push(a);
        let a = match rng.as_deref_mut() {
            Some(r) => tape.dropout(a, cfg.attn_dropout, r)?,
            None => a,
        };
        heads.push(tape.matmul(a, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let out = tape.matmul(cat, p[layer.wo])?;
    Ok(Attention { out, weights })
}

/// `H̃ = MSA(LN(H)) + H`, then `FFN(LN(H̃)) + H̃`, with
/// `FFN(x) = gelu(x·W₁ + b₁)·W₂ + b₂`.
pub fn encoder_layer<S: Scalar>(
    tape: &mut Tape<S>,
    p: &[Var],
    layer: &EncoderLayer,
    h: Var,
    cfg: &EncoderConfig,
    keep: Option<&[bool]>,
    mut rng: Option<&mut DropoutRng>,
) -> Result<Var, TensorError> {
    let x = tape.layer_norm(h, p[layer.ln1_gain], p[layer.ln1_bias], LN_EPS)?;
    let att = msa(tape, p, layer, x, cfg, keep, rng.as_deref_mut())?;
    let att = match rng.as_deref_mut() {
        Some(r) => tape.dropout(att.out, cfg.dropout, r)?,
        None => att.out,
    };
    let h1 = tape.add(att, h)?;
    let x = tape.layer_norm(h1, p[layer.ln2_gain], p[layer.ln2_bias], LN_EPS)?;
    let f = tape.matmul(x, p[layer.w1])?;
    let f = tape.add_row(f, p[layer.b1])?;
    let f = tape.gelu(f)?;
    let f = tape.matmul(f, p[layer.w2])?;
    let f = tape.add_row(f, p[layer.b2])?;
    let f = match rng.as_deref_mut() {
        Some(r) => tape.dropout(f, cfg.dropout, r)?,
        None => f,
    };
    tape.add(f, h1)
}

/// A stack of encoder layers applied in sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn register<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        num_layers: usize,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            layers: (0..num_layers)
                .map(|l| EncoderLayer::register(store, &format!("{prefix}.l{l}"), cfg, rng))
                .collect(),
        }
    }

    pub fn encode<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &[Var],
        h: Var,
        cfg: &EncoderConfig,
        keep: Option<&[bool]>,
        mut rng: Option<&mut DropoutRng>,
    ) -> Result<Var, TensorError> {
        if self.layers.is_empty() {
            return Err(TensorError::Invalid {
                op: "encode",
                msg: "encoder has no layers".into(),
            });
        }
        let mut h = h;
        for layer in &self.layers {
            h = encoder_layer(tape, p, layer, h, cfg, keep, rng.as_deref_mut())?;
        }
        Ok(h)
    }
}
