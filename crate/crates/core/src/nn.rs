//! Layers built on the autograd tape: affine maps, MLPs, a GRU sentence
//! encoder and the word vocabulary feeding it.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::glorot(fan_in, fan_out, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, fan_out)));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(fan_in, fan_out));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, fan_out)));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Feed-forward network with ReLU between layers and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x);
            if i + 1 < n {
                x = g.relu(x);
            }
        }
        x
    }

    /// Zeroes the output layer so the network starts at a constant output.
    pub fn zero_output(&self, store: &mut ParamStore) {
        let last = self.layers.last().expect("non-empty mlp");
        *store.get_mut(last.w) = Tensor::zeros(last.fan_in, last.fan_out);
        if let Some(b) = last.b {
            *store.get_mut(b) = Tensor::zeros(1, last.fan_out);
        }
    }
}

/// Single-direction GRU cell.
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    x_zr: Linear,
    h_zr: Linear,
    x_n: Linear,
    h_n: Linear,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        GruCell {
            x_zr: Linear::new(store, &format!("{name}.x_zr"), input, 2 * hidden, true, rng),
            h_zr: Linear::new(store, &format!("{name}.h_zr"), hidden, 2 * hidden, false, rng),
            x_n: Linear::new(store, &format!("{name}.x_n"), input, hidden, true, rng),
            h_n: Linear::new(store, &format!("{name}.h_n"), hidden, hidden, true, rng),
            hidden,
        }
    }

    /// `x` is `1 x input`, `h` is `1 x hidden`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let xzr = self.x_zr.forward(g, x);
        let hzr = self.h_zr.forward(g, h);
        let zr = g.add(xzr, hzr);
        let zr = g.sigmoid(zr);
        let z = g.slice_cols(zr, 0, hd);
        let r = g.slice_cols(zr, hd, hd);
        let hn = self.h_n.forward(g, h);
        let rhn = g.mul(r, hn);
        let xn = self.x_n.forward(g, x);
        let n = g.add(xn, rhn);
        let n = g.tanh(n);
        // h' = n + z * (h - n)
        let d = g.sub(h, n);
        let zd = g.mul(z, d);
        g.add(n, zd)
    }
}

/// Word embeddings followed by a bidirectional GRU. Token states are the
/// concatenation of forward and backward hidden states; the sentence
/// embedding is their mean.
#[derive(Debug, Clone, Copy)]
pub struct SentenceEncoder {
    embedding: ParamId,
    fwd: GruCell,
    bwd: GruCell,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl SentenceEncoder {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, embed_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let embedding = store.add(format!("{name}.embedding"), Tensor::normal(vocab, embed_dim, 0.5, rng));
        SentenceEncoder {
            embedding,
            fwd: GruCell::new(store, &format!("{name}.fwd"), embed_dim, hidden, rng),
            bwd: GruCell::new(store, &format!("{name}.bwd"), embed_dim, hidden, rng),
            embed_dim,
            hidden,
        }
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// `N x 2H` token states, or `None` for an empty sentence.
    pub fn token_states(&self, g: &mut Graph, tokens: &[usize]) -> Option<Var> {
        if tokens.is_empty() {
            return None;
        }
        let table = g.param(self.embedding);
        let emb = g.gather_rows(table, tokens);
        let xs: Vec<Var> = (0..tokens.len()).map(|i| g.slice_rows(emb, i, 1)).collect();
        let h0 = g.input(Tensor::zeros(1, self.hidden));
        let mut h = h0;
        let mut fwd = Vec::with_capacity(xs.len());
        for &x in &xs {
            h = self.fwd.step(g, x, h);
            fwd.push(h);
        }
        let mut h = h0;
        let mut bwd = vec![h0; xs.len()];
        for (i, &x) in xs.iter().enumerate().rev() {
            h = self.bwd.step(g, x, h);
            bwd[i] = h;
        }
        let f = g.concat_rows(&fwd);
        let b = g.concat_rows(&bwd);
        Some(g.concat_cols(&[f, b]))
    }

    /// Mean of the token states as a `1 x 2H` row; zeros for an empty
    /// sentence.
    pub fn encode(&self, g: &mut Graph, tokens: &[usize]) -> Var {
        match self.token_states(g, tokens) {
            Some(states) => g.mean_rows(states),
            None => g.input(Tensor::zeros(1, self.output_dim())),
        }
    }
}

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Lower-cased alphanumeric word vocabulary. Index 0 is the unknown token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn tokenize(text: &str) -> Vec<String> {
        text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
            .collect()
    }

    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let words: BTreeSet<String> = texts.into_iter().flat_map(Vocabulary::tokenize).collect();
        let words = std::iter::once(UNKNOWN_TOKEN.to_string()).chain(words).collect();
        Vocabulary::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Vocabulary {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        Vocabulary::tokenize(text)
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(0))
            .collect()
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(self) -> Vocabulary {
        Vocabulary::from_words(self.words)
    }
}
