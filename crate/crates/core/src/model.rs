//! Two-level ring/type transformer producing one embedding per node.
//!
//! Tokens of each distance ring are encoded per type, read out into one
//! vector per ring with attention against the node's own representation,
//! and the ring vectors are encoded again and read out into the final
//! embedding.

use std::borrow::Cow;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{key_mask, uniform_weight, DropoutRng, Encoder, EncoderConfig};
use crate::rings::TokenTensor;
use crate::scalar::Scalar;
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token tensor shape {got:?} does not match model {want:?}")]
    TokenShape { got: [usize; 3], want: [usize; 3] },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("non-finite embedding for node {0}")]
    NonFinite(u32),
}

/// Which architecture variant runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Rings `1..=K` merged into one hop neighborhood.
    NoRing,
    /// Types merged within each ring; no type-level encoder.
    NoType,
    /// Mean readouts instead of attention readouts.
    NoAtt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoRing, Variant::NoType, Variant::NoAtt];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRing => "no_ring",
            Variant::NoType => "no_type",
            Variant::NoAtt => "no_att",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant {s:?} (expected full, no_ring, no_type or no_att)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Outermost ring index.
    pub k: usize,
    pub num_types: usize,
    pub d_in: usize,
    pub num_classes: usize,
    pub d: usize,
    pub heads: usize,
    pub type_layers: usize,
    pub ring_layers: usize,
    pub dropout: f64,
    pub attn_dropout: f64,
    /// Feed-forward width as a multiple of `d`.
    pub ff_mult: usize,
    pub variant: Variant,
    /// Exclude empty buckets and rings from attention.
    pub mask_empty: bool,
    /// Separate type-level encoder per ring instead of one shared stack.
    pub per_ring_type_encoder: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 2,
            num_types: 0,
            d_in: 0,
            num_classes: 0,
            d: 128,
            heads: 8,
            type_layers: 1,
            ring_layers: 1,
            dropout: 0.01,
            attn_dropout: 0.05,
            ff_mult: 2,
            variant: Variant::Full,
            mask_empty: false,
            per_ring_type_encoder: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d: self.d,
            heads: self.heads,
            d_ff: self.ff_mult * self.d,
            dropout: self.dropout,
            attn_dropout: self.attn_dropout,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.k == 0 {
            return bad("K must be >= 1".into());
        }
        if self.num_types == 0 || self.d_in == 0 || self.num_classes == 0 {
            return bad(format!(
                "num_types = {}, d_in = {}, num_classes = {} must be positive",
                self.num_types, self.d_in, self.num_classes
            ));
        }
        if self.type_layers == 0 || self.ring_layers == 0 {
            return bad("layer counts must be >= 1".into());
        }
        self.encoder().validate().map_err(|e| ModelError::Config(e.to_string()))
    }

    /// Shape `(K+1, T, d_in)` of the tokens this variant consumes.
    pub fn token_shape(&self) -> [usize; 3] {
        match self.variant {
            Variant::NoRing => [2, self.num_types, self.d_in],
            Variant::NoType => [self.k + 1, 1, self.d_in],
            _ => [self.k + 1, self.num_types, self.d_in],
        }
    }

    fn type_encoder_count(&self) -> usize {
        match (self.variant, self.per_ring_type_encoder) {
            (Variant::NoType, _) => 0,
            (Variant::NoRing, true) => 1,
            (_, true) => self.k,
            (_, false) => 1,
        }
    }
}

/// Parameter indices into the model's [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub in_w: usize,
    pub in_b: usize,
    pub h0_w1: usize,
    pub h0_b1: usize,
    pub h0_w2: usize,
    pub h0_b2: usize,
    pub type_encoders: Vec<Encoder>,
    pub ring_encoder: Encoder,
    /// `1 × 2d` ring readout projection.
    pub ring_attn: usize,
    pub head_w: usize,
    pub head_b: usize,
}

/// Each parameter group draws from its own ChaCha stream, so variants
/// that drop a group still share every other initial value for a seed.
fn group_rng(seed: u64, group: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in group.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Per-ring type-level values for one node (evaluation mode).
#[derive(Clone, Debug, PartialEq)]
pub struct TypeRing<S> {
    /// Encoded type tokens `T × d` (the raw projected token for `no_type`).
    pub tokens: Tensor<S>,
    /// Readout weights over types.
    pub alpha: Vec<S>,
    /// Ring readout `1 × d`.
    pub h: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TypeLevelOutput<S> {
    pub h0: Tensor<S>,
    /// Entry `k - 1` holds ring `k`.
    pub rings: Vec<TypeRing<S>>,
    /// Ring occupancy, index 0 included.
    pub ring_occupied: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RingLevelOutput<S> {
    /// Encoded ring tokens `(K+1) × d`, row 0 being the node itself.
    pub ring_tokens: Tensor<S>,
    /// Readout weights over rings `1..=K`.
    pub alpha: Vec<S>,
    /// Final embedding `1 × d`.
    pub z: Tensor<S>,
}

/// Tape handles from one node's type-level pass.
pub struct TypeLevelVars {
    pub h0: Var,
    pub tokens: Vec<Var>,
    pub alpha: Vec<Option<Var>>,
    pub h: Vec<Var>,
    pub ring_occupied: Vec<bool>,
}

/// Tape handles from one node's ring-level pass.
pub struct RingLevelVars {
    pub ring_tokens: Var,
    pub alpha: Option<Var>,
    pub z: Var,
}

pub struct NodeVars {
    pub type_level: TypeLevelVars,
    pub ring_level: RingLevelVars,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RingTypeTransformer<S> {
    cfg: ModelConfig,
    params: ParamStore<S>,
    layout: Layout,
}

impl<S: Scalar> RingTypeTransformer<S> {
    /// Fresh model initialized from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (d, enc) = (cfg.d, cfg.encoder());
        let mut store = ParamStore::new();
        let mut rng = group_rng(cfg.seed, "input");
        let in_w = store.push("input.w", uniform_weight(cfg.d_in, d, cfg.d_in, &mut rng));
        let in_b = store.push("input.b", Tensor::zeros(&[1, d]));
        let mut rng = group_rng(cfg.seed, "self_mlp");
        let h0_w1 = store.push("self_mlp.w1", uniform_weight(d, d, d, &mut rng));
        let h0_b1 = store.push("self_mlp.b1", Tensor::zeros(&[1, d]));
        let h0_w2 = store.push("self_mlp.w2", uniform_weight(d, d, d, &mut rng));
        let h0_b2 = store.push("self_mlp.b2", Tensor::zeros(&[1, d]));
        let type_encoders = (0..cfg.type_encoder_count())
            .map(|i| {
                let name = if cfg.per_ring_type_encoder { format!("type.r{}", i + 1) } else { "type".to_string() };
                Encoder::register(&mut store, &name, cfg.type_layers, &enc, &mut group_rng(cfg.seed, &name))
            })
            .collect();
        let ring_encoder = Encoder::register(&mut store, "ring", cfg.ring_layers, &enc, &mut group_rng(cfg.seed, "ring"));
        let mut rng = group_rng(cfg.seed, "ring_readout");
        let ring_attn = store.push("ring_readout.w", uniform_weight(1, 2 * d, 2 * d, &mut rng));
        let mut rng = group_rng(cfg.seed, "head");
        let head_w = store.push("head.w", uniform_weight(d, cfg.num_classes, d, &mut rng));
        let head_b = store.push("head.b", Tensor::zeros(&[1, cfg.num_classes]));
        Ok(Self {
            cfg,
            params: store,
            layout: Layout {
                in_w,
                in_b,
                h0_w1,
                h0_b1,
                h0_w2,
                h0_b2,
                type_encoders,
                ring_encoder,
                ring_attn,
                head_w,
                head_b,
            },
        })
    }

    /// Model with `cfg`'s layout and the given parameter values.
    pub fn from_params(cfg: ModelConfig, params: &ParamStore<S>) -> Result<Self, ModelError> {
        let mut m = Self::new(cfg)?;
        m.params.assign_from(params)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.d
    }

    pub fn cast<T: Scalar>(&self) -> RingTypeTransformer<T> {
        RingTypeTransformer {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Applies the variant's token view and checks the resulting shape.
    pub fn prepare<'a>(&self, tok: &'a TokenTensor) -> Result<Cow<'a, TokenTensor>, ModelError> {
        let want = [self.cfg.k + 1, self.cfg.num_types, self.cfg.d_in];
        if tok.shape() != want {
            return Err(ModelError::TokenShape { got: tok.shape(), want });
        }
        Ok(match self.cfg.variant {
            Variant::NoRing => Cow::Owned(tok.hop_collapsed()),
            Variant::NoType => Cow::Owned(tok.type_collapsed()),
            _ => Cow::Borrowed(tok),
        })
    }

    /// Type-level pass on a tape. `tok` must already be prepared.
    pub fn type_level_tape(
        &self,
        tape: &mut Tape<S>,
        p: &[Var],
        tok: &TokenTensor,
        mut rng: Option<&mut DropoutRng>,
    ) -> Result<TypeLevelVars, ModelError> {
        let l = &self.layout;
        let (rings, t_n, d_in) = (tok.num_rings(), tok.num_types(), tok.d_in());
        let x = Tensor::matrix(rings * t_n, d_in, tok.tokens().iter().map(|&v| S::of_f32(v)).collect())?;
        let x = tape.constant(x);
        let proj = tape.matmul(x, p[l.in_w])?;
        let proj = tape.add_row(proj, p[l.in_b])?;

        let self_slot = (0..t_n).find(|&t| tok.occupied(0, t)).unwrap_or(0);
        let x0 = tape.gather_rows(proj, &[self_slot])?;
        let h0 = tape.matmul(x0, p[l.h0_w1])?;
        let h0 = tape.add_row(h0, p[l.h0_b1])?;
        let h0 = tape.gelu(h0)?;
        let h0 = tape.matmul(h0, p[l.h0_w2])?;
        let h0 = tape.add_row(h0, p[l.h0_b2])?;

        let enc = self.cfg.encoder();
        let mask = self.cfg.mask_empty;
        let mut out = TypeLevelVars {
            h0,
            tokens: Vec::with_capacity(rings - 1),
            alpha: Vec::with_capacity(rings - 1),
            h: Vec::with_capacity(rings - 1),
            ring_occupied: (0..rings).map(|k| (0..t_n).any(|t| tok.occupied(k, t))).collect(),
        };
        for k in 1..rings {
            let rows: Vec<usize> = (k * t_n..(k + 1) * t_n).collect();
            let hk_in = tape.gather_rows(proj, &rows)?;
            if self.cfg.variant == Variant::NoType {
                out.tokens.push(hk_in);
                out.alpha.push(None);
                out.h.push(hk_in);
                continue;
            }
            let keep: Vec<bool> = (0..t_n).map(|t| tok.occupied(k, t)).collect();
            let keep = mask.then_some(keep.as_slice());
            let encoder = &l.type_encoders[(k - 1).min(l.type_encoders.len() - 1)];
            let hk = encoder.encode(tape, p, hk_in, &enc, keep, rng.as_deref_mut())?;
            out.tokens.push(hk);
            if self.cfg.variant == Variant::NoAtt {
                out.alpha.push(None);
                out.h.push(tape.mean_rows(hk)?);
                continue;
            }
            let hk_t = tape.transpose(hk)?;
            let mut logits = tape.matmul(h0, hk_t)?;
            if let Some(m) = key_mask(tape, keep) {
                logits = tape.add_row(logits, m)?;
            }
            let alpha = tape.softmax_rows(logits)?;
            out.alpha.push(Some(alpha));
            out.h.push(tape.matmul(alpha, hk)?);
        }
        Ok(out)
    }

    /// Ring-level pass over `[h0, h_1, ..., h_K]`.
    pub fn ring_level_tape(
        &self,
        tape: &mut Tape<S>,
        p: &[Var],
        tl: &TypeLevelVars,
        rng: Option<&mut DropoutRng>,
    ) -> Result<RingLevelVars, ModelError> {
        let l = &self.layout;
        let k = tl.h.len();
        let seq: Vec<Var> = std::iter::once(tl.h0).chain(tl.h.iter().copied()).collect();
        let seq = tape.concat_rows(&seq)?;
        let keep = self.cfg.mask_empty.then_some(tl.ring_occupied.as_slice());
        let zs = l.ring_encoder.encode(tape, p, seq, &self.cfg.encoder(), keep, rng)?;
        let z0 = tape.gather_rows(zs, &[0])?;
        let outer: Vec<usize> = (1..=k).collect();
        let zk = tape.gather_rows(zs, &outer)?;
        if self.cfg.variant == Variant::NoAtt {
            let mean = tape.mean_rows(zk)?;
            let z = tape.add(z0, mean)?;
            return Ok(RingLevelVars {
                ring_tokens: zs,
                alpha: None,
                z,
            });
        }
        let z0_rep = tape.gather_rows(zs, &vec![0; k])?;
        let pairs = tape.concat_cols(&[z0_rep, zk])?;
        let w_t = tape.transpose(p[l.ring_attn])?;
        let logits = tape.matmul(pairs, w_t)?;
        let mut logits = tape.transpose(logits)?;
        if let Some(m) = key_mask(tape, keep.map(|k| &k[1..])) {
            logits = tape.add_row(logits, m)?;
        }
        let alpha = tape.softmax_rows(logits)?;
        let mix = tape.matmul(alpha, zk)?;
        let z = tape.add(z0, mix)?;
        Ok(RingLevelVars {
            ring_tokens: zs,
            alpha: Some(alpha),
            z,
        })
    }

    /// Full forward pass for one node on a tape. `p` comes from binding
    /// this model's parameters to `tape`; `rng` enables dropout.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<S>,
        p: &[Var],
        tok: &TokenTensor,
        mut rng: Option<&mut DropoutRng>,
    ) -> Result<NodeVars, ModelError> {
        let tok = self.prepare(tok)?;
        let type_level = self.type_level_tape(tape, p, &tok, rng.as_deref_mut())?;
        let ring_level = self.ring_level_tape(tape, p, &type_level, rng)?;
        let logits = tape.matmul(ring_level.z, p[self.layout.head_w])?;
        let logits = tape.add_row(logits, p[self.layout.head_b])?;
        if !tape.value(ring_level.z).all_finite() || !tape.value(logits).all_finite() {
            return Err(ModelError::NonFinite(tok.target()));
        }
        Ok(NodeVars {
            type_level,
            ring_level,
            logits,
        })
    }

    /// Binds parameters as constants (no gradient bookkeeping).
    pub fn bind_constants(&self, tape: &mut Tape<S>) -> Vec<Var> {
        self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect()
    }

    pub fn type_level_forward(&self, tok: &TokenTensor) -> Result<TypeLevelOutput<S>, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind_constants(&mut tape);
        let tok = self.prepare(tok)?;
        let tl = self.type_level_tape(&mut tape, &p, &tok, None)?;
        Ok(self.type_level_values(&tape, &tl))
    }

    fn type_level_values(&self, tape: &Tape<S>, tl: &TypeLevelVars) -> TypeLevelOutput<S> {
        TypeLevelOutput {
            h0: tape.value(tl.h0).clone(),
            rings: (0..tl.h.len())
                .map(|i| TypeRing {
                    tokens: tape.value(tl.tokens[i]).clone(),
                    alpha: match tl.alpha[i] {
                        Some(a) => tape.value(a).data().to_vec(),
                        None => {
                            let t = tape.value(tl.tokens[i]).rows();
                            vec![S::one() / S::lit(t as f64); t]
                        }
                    },
                    h: tape.value(tl.h[i]).clone(),
                })
                .collect(),
            ring_occupied: tl.ring_occupied.clone(),
        }
    }

    pub fn ring_level_forward(&self, tl: &TypeLevelOutput<S>) -> Result<RingLevelOutput<S>, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind_constants(&mut tape);
        let vars = TypeLevelVars {
            h0: tape.constant(tl.h0.clone()),
            tokens: Vec::new(),
            alpha: Vec::new(),
            h: tl.rings.iter().map(|r| tape.constant(r.h.clone())).collect(),
            ring_occupied: tl.ring_occupied.clone(),
        };
        let rl = self.ring_level_tape(&mut tape, &p, &vars, None)?;
        Ok(self.ring_level_values(&tape, &rl))
    }

    fn ring_level_values(&self, tape: &Tape<S>, rl: &RingLevelVars) -> RingLevelOutput<S> {
        let k = tape.value(rl.ring_tokens).rows() - 1;
        RingLevelOutput {
            ring_tokens: tape.value(rl.ring_tokens).clone(),
            alpha: match rl.alpha {
                Some(a) => tape.value(a).data().to_vec(),
                None => vec![S::one() / S::lit(k as f64); k],
            },
            z: tape.value(rl.z).clone(),
        }
    }

    /// Evaluation-mode embedding `1 × d` and logits `1 × C`.
    pub fn forward(&self, tok: &TokenTensor) -> Result<(Tensor<S>, Tensor<S>), ModelError> {
        let mut tape = Tape::new();
        let p = self.bind_constants(&mut tape);
        let out = self.forward_tape(&mut tape, &p, tok, None)?;
        Ok((tape.value(out.ring_level.z).clone(), tape.value(out.logits).clone()))
    }

    /// Both levels' intermediate values for one node.
    pub fn trace(&self, tok: &TokenTensor) -> Result<(TypeLevelOutput<S>, RingLevelOutput<S>), ModelError> {
        let mut tape = Tape::new();
        let p = self.bind_constants(&mut tape);
        let out = self.forward_tape(&mut tape, &p, tok, None)?;
        Ok((
            self.type_level_values(&tape, &out.type_level),
            self.ring_level_values(&tape, &out.ring_level),
        ))
    }

    /// Evaluation-mode embeddings and logits for many nodes, in input
    /// order. Runs in parallel over fixed-size chunks.
    pub fn embed_batch(&self, toks: &[&TokenTensor]) -> Result<(Vec<Vec<S>>, Vec<Vec<S>>), ModelError> {
        const CHUNK: usize = 32;
        let parts = toks
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut tape = Tape::new();
                let p = self.bind_constants(&mut tape);
                let mut z = Vec::with_capacity(chunk.len());
                let mut y = Vec::with_capacity(chunk.len());
                for tok in chunk {
                    let out = self.forward_tape(&mut tape, &p, tok, None)?;
                    z.push(tape.value(out.ring_level.z).data().to_vec());
                    y.push(tape.value(out.logits).data().to_vec());
                }
                Ok((z, y))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let mut zs = Vec::with_capacity(toks.len());
        let mut ys = Vec::with_capacity(toks.len());
        for (z, y) in parts {
            zs.extend(z);
            ys.extend(y);
        }
        Ok((zs, ys))
    }

    /// Writes the parameter checkpoint and a JSON config sidecar.
    pub fn save(&self, checkpoint: &Path, config_json: &Path) -> Result<(), ModelError> {
        save_checkpoint(&self.params, checkpoint).map_err(|source| ModelError::Io {
            path: checkpoint.to_path_buf(),
            source,
        })?;
        let json = serde_json::to_string_pretty(&self.cfg)?;
        fs::write(config_json, json).map_err(|source| ModelError::Io {
            path: config_json.to_path_buf(),
            source,
        })
    }

    pub fn load(checkpoint: &Path, config_json: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(config_json).map_err(|source| ModelError::Io {
            path: config_json.to_path_buf(),
            source,
        })?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        let params = load_checkpoint(checkpoint).map_err(|source| ModelError::Io {
            path: checkpoint.to_path_buf(),
            source,
        })?;
        Self::from_params(cfg, &params)
    }
}
