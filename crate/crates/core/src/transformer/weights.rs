use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::numkernel::{Tape, Tensor, Var};
use crate::rng::Rng;

/// Per-layer weights, generic over storage: [`Tensor`] for owned parameters,
/// [`Var`] once bound onto a tape.
///
/// `wq`/`wk`/`wv`/`wo` and the feed-forward and layer-norm weights serve both
/// activation streams of the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub ff_in: T,
    pub ff_in_bias: T,
    pub ff_out: T,
    pub ff_out_bias: T,
}

/// Token and position tables, layers and the final norm. The output
/// projection is tied to `tok_emb`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_gain: T,
    pub lnf_bias: T,
}

impl<T> LayerWeights<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> LayerWeights<U> {
        let mut g = |name: &str, t: &T| f(&format!("{prefix}.{name}"), t);
        LayerWeights {
            wq: g("wq", &self.wq),
            wk: g("wk", &self.wk),
            wv: g("wv", &self.wv),
            wo: g("wo", &self.wo),
            ln1_gain: g("ln1.gain", &self.ln1_gain),
            ln1_bias: g("ln1.bias", &self.ln1_bias),
            ln2_gain: g("ln2.gain", &self.ln2_gain),
            ln2_bias: g("ln2.bias", &self.ln2_bias),
            ff_in: g("ff.in", &self.ff_in),
            ff_in_bias: g("ff.in_bias", &self.ff_in_bias),
            ff_out: g("ff.out", &self.ff_out),
            ff_out_bias: g("ff.out_bias", &self.ff_out_bias),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        let mut g = |name: &str, t: &mut T| f(&format!("{prefix}.{name}"), t);
        g("wq", &mut self.wq);
        g("wk", &mut self.wk);
        g("wv", &mut self.wv);
        g("wo", &mut self.wo);
        g("ln1.gain", &mut self.ln1_gain);
        g("ln1.bias", &mut self.ln1_bias);
        g("ln2.gain", &mut self.ln2_gain);
        g("ln2.bias", &mut self.ln2_bias);
        g("ff.in", &mut self.ff_in);
        g("ff.in_bias", &mut self.ff_in_bias);
        g("ff.out", &mut self.ff_out);
        g("ff.out_bias", &mut self.ff_out_bias);
    }
}

impl<T> TransformerWeights<T> {
    /// Structure-preserving map; `f` sees each parameter's dotted name in a
    /// fixed order.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> TransformerWeights<U> {
        let tok_emb = f("tok_emb", &self.tok_emb);
        let pos_emb = f("pos_emb", &self.pos_emb);
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.map(&format!("layers.{i}"), &mut f))
            .collect();
        TransformerWeights {
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: f("lnf.gain", &self.lnf_gain),
            lnf_bias: f("lnf.bias", &self.lnf_bias),
        }
    }

    pub fn visit(&self, mut f: impl FnMut(&str, &T)) {
        self.map(|n, t| f(n, t));
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        f("tok_emb", &mut self.tok_emb);
        f("pos_emb", &mut self.pos_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layers.{i}"), &mut f);
        }
        f("lnf.gain", &mut self.lnf_gain);
        f("lnf.bias", &mut self.lnf_bias);
    }

    /// Rebuilds this structure from a flat list in visiting order.
    pub fn with_flat<U: Clone>(&self, flat: &[U]) -> TransformerWeights<U> {
        let mut it = flat.iter();
        let out = self.map(|n, _| it.next().unwrap_or_else(|| panic!("missing {n}")).clone());
        assert!(it.next().is_none(), "flat list longer than the structure");
        out
    }
}

impl TransformerWeights<Tensor> {
    /// Gaussian init with `cfg.init_std`; norms start at identity.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, cfg.init_std).expect("init_std must be finite and positive");
        let mut gauss = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).with_grad()
        };
        let d = cfg.d_model;
        let tok_emb = gauss(&[cfg.vocab_size, d]);
        let pos_emb = gauss(&[cfg.max_seq_len, d]);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                wq: gauss(&[d, d]),
                wk: gauss(&[d, d]),
                wv: gauss(&[d, d]),
                wo: gauss(&[d, d]),
                ln1_gain: Tensor::ones(&[d]).with_grad(),
                ln1_bias: Tensor::zeros(&[d]).with_grad(),
                ln2_gain: Tensor::ones(&[d]).with_grad(),
                ln2_bias: Tensor::zeros(&[d]).with_grad(),
                ff_in: gauss(&[d, cfg.d_ff]),
                ff_in_bias: Tensor::zeros(&[cfg.d_ff]).with_grad(),
                ff_out: gauss(&[cfg.d_ff, d]),
                ff_out_bias: Tensor::zeros(&[d]).with_grad(),
            })
            .collect();
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: Tensor::ones(&[d]).with_grad(),
            lnf_bias: Tensor::zeros(&[d]).with_grad(),
        }
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> TransformerWeights<Var> {
        self.map(|_, t| tape.param(t))
    }

    pub fn flat(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit(|_, t| out.push(t.clone()));
        out
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(|n, t| out.push((n.to_string(), t.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(|_, t| t.zero_grad());
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.visit_mut(|_, t| t.set_requires_grad(on));
    }

    /// Adds tape gradients for `bound` into each parameter's accumulator.
    pub fn accumulate(&mut self, bound: &TransformerWeights<Var>, grads: &crate::numkernel::Gradients) {
        let mut vars = Vec::new();
        bound.visit(|_, v| vars.push(*v));
        let mut it = vars.into_iter();
        self.visit_mut(|_, t| {
            let v = it.next().expect("bound structure matches");
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g);
            }
        });
    }

    pub fn grad_sq_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit(|_, t| s += t.grad_sq_norm());
        s
    }
}
