//! Straight-line f64 re-implementation of the model forward pass with
//! nalgebra matrices. Reads parameters by name; shares no code with the
//! tape.

use nalgebra::DMatrix;
use ringformer::model::{ModelConfig, RingTypeTransformer, Variant};
use ringformer::rings::TokenTensor;

pub struct Oracle<'a> {
    model: &'a RingTypeTransformer<f64>,
}

pub struct OracleOutput {
    pub h0: DMatrix<f64>,
    pub h: Vec<DMatrix<f64>>,
    pub alpha_t: Vec<Vec<f64>>,
    pub z_tokens: DMatrix<f64>,
    pub alpha_k: Vec<f64>,
    pub z: DMatrix<f64>,
    pub logits: DMatrix<f64>,
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

impl<'a> Oracle<'a> {
    pub fn new(model: &'a RingTypeTransformer<f64>) -> Self {
        Self { model }
    }

    fn cfg(&self) -> &ModelConfig {
        self.model.config()
    }

    fn p(&self, name: &str) -> DMatrix<f64> {
        let store = self.model.params();
        let t = store.get(store.index_of(name).unwrap_or_else(|| panic!("missing {name}")));
        DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
    }

    fn layer_norm(&self, x: &DMatrix<f64>, prefix: &str) -> DMatrix<f64> {
        let g = self.p(&format!("{prefix}.gain"));
        let b = self.p(&format!("{prefix}.bias"));
        let d = x.ncols() as f64;
        let mut out = x.clone();
        for r in 0..x.nrows() {
            let mean = x.row(r).sum() / d;
            let var = x.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            for c in 0..x.ncols() {
                out[(r, c)] = (x[(r, c)] - mean) / (var + 1e-5).sqrt() * g[(0, c)] + b[(0, c)];
            }
        }
        out
    }

    fn add_bias(x: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                out[(r, c)] += b[(0, c)];
            }
        }
        out
    }

    fn layer(&self, h: &DMatrix<f64>, prefix: &str) -> DMatrix<f64> {
        let cfg = self.cfg();
        let dk = cfg.d / cfg.heads;
        let x = self.layer_norm(h, &format!("{prefix}.ln1"));
        let q = &x * self.p(&format!("{prefix}.wq"));
        let k = &x * self.p(&format!("{prefix}.wk"));
        let v = &x * self.p(&format!("{prefix}.wv"));
        let n = h.nrows();
        let mut cat = DMatrix::<f64>::zeros(n, cfg.d);
        for head in 0..cfg.heads {
            let c0 = head * dk;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..dk).map(|c| q[(i, c0 + c)] * k[(j, c0 + c)]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let a = softmax(&scores);
                for c in 0..dk {
                    cat[(i, c0 + c)] = (0..n).map(|j| a[j] * v[(j, c0 + c)]).sum::<f64>();
                }
            }
        }
        let h1 = &cat * self.p(&format!("{prefix}.wo")) + h;
        let x = self.layer_norm(&h1, &format!("{prefix}.ln2"));
        let f = Self::add_bias(&(&x * self.p(&format!("{prefix}.w1"))), &self.p(&format!("{prefix}.b1")));
        let f = f.map(gelu);
        let f = Self::add_bias(&(&f * self.p(&format!("{prefix}.w2"))), &self.p(&format!("{prefix}.b2")));
        f + h1
    }

    fn encode(&self, h: &DMatrix<f64>, prefix: &str, layers: usize) -> DMatrix<f64> {
        let mut h = h.clone();
        for l in 0..layers {
            h = self.layer(&h, &format!("{prefix}.l{l}"));
        }
        h
    }

    /// Full-variant forward with unmasked empty tokens.
    pub fn forward(&self, tok: &TokenTensor) -> OracleOutput {
        let cfg = self.cfg();
        assert_eq!(cfg.variant, Variant::Full);
        assert!(!cfg.mask_empty);
        let (t_n, d_in) = (tok.num_types(), tok.d_in());
        let w_in = self.p("input.w");
        let b_in = self.p("input.b");
        let project = |k: usize| {
            let x = DMatrix::from_row_slice(t_n, d_in, &tok.ring(k).iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
            Self::add_bias(&(x * &w_in), &b_in)
        };
        let ring0 = project(0);
        let slot = (0..t_n).find(|&t| tok.occupied(0, t)).unwrap();
        let x0 = ring0.rows(slot, 1).into_owned();
        let a = Self::add_bias(&(&x0 * self.p("self_mlp.w1")), &self.p("self_mlp.b1")).map(gelu);
        let h0 = Self::add_bias(&(&a * self.p("self_mlp.w2")), &self.p("self_mlp.b2"));

        let mut h = Vec::new();
        let mut alpha_t = Vec::new();
        for k in 1..=tok.k() {
            let prefix = if cfg.per_ring_type_encoder { format!("type.r{k}") } else { "type".to_string() };
            let hk = self.encode(&project(k), &prefix, cfg.type_layers);
            let logits: Vec<f64> = (0..t_n).map(|t| h0.row(0).dot(&hk.row(t))).collect();
            let a = softmax(&logits);
            let mut out = DMatrix::<f64>::zeros(1, cfg.d);
            for t in 0..t_n {
                out += hk.rows(t, 1) * a[t];
            }
            h.push(out);
            alpha_t.push(a);
        }

        let mut seq = DMatrix::<f64>::zeros(tok.k() + 1, cfg.d);
        seq.set_row(0, &h0.row(0));
        for (i, hk) in h.iter().enumerate() {
            seq.set_row(i + 1, &hk.row(0));
        }
        let zs = self.encode(&seq, "ring", cfg.ring_layers);
        let w = self.p("ring_readout.w");
        let logits: Vec<f64> = (1..=tok.k())
            .map(|k| (0..cfg.d).map(|c| zs[(0, c)] * w[(0, c)] + zs[(k, c)] * w[(0, cfg.d + c)]).sum())
            .collect();
        let alpha_k = softmax(&logits);
        let mut z = zs.rows(0, 1).into_owned();
        for k in 1..=tok.k() {
            z += zs.rows(k, 1) * alpha_k[k - 1];
        }
        let y = Self::add_bias(&(&z * self.p("head.w")), &self.p("head.b"));
        OracleOutput {
            h0,
            h,
            alpha_t,
            z_tokens: zs,
            alpha_k,
            z,
            logits: y,
        }
    }
}
