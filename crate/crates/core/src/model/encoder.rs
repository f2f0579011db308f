use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ops::{self, NormCache};
use super::params::{zeros, Gradients, ParamId, ParamStore, Scalar};
use super::ModelError;
use crate::corpus::MaskedExample;
use crate::seed::{self, Rng};
use crate::token::{TokenId, TokenSequence, VOCAB_SIZE};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Dropout inside the encoder (embeddings, attention output, feed-forward output).
    pub dropout: f64,
    pub seed: u64,
    /// Reuse the token embedding table as the masked-token output projection.
    #[serde(default)]
    pub tie_mbm_weights: bool,
}

impl ModelConfig {
    /// 12 blocks, 12 heads, hidden 768, 512 positions.
    pub fn paper() -> Self {
        ModelConfig {
            layers: 12,
            hidden: 768,
            heads: 12,
            ffn_dim: 3072,
            vocab_size: VOCAB_SIZE,
            max_positions: 512,
            dropout: 0.1,
            seed: 0,
            tie_mbm_weights: false,
        }
    }

    /// Small enough to pre-train on one CPU core in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 2,
            ffn_dim: 256,
            vocab_size: VOCAB_SIZE,
            max_positions: 128,
            dropout: 0.1,
            seed: 0,
            tie_mbm_weights: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.hidden == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return bad("hidden, heads and ffn_dim must be positive");
        }
        if self.hidden % self.heads != 0 {
            return bad("hidden must be divisible by heads");
        }
        if self.vocab_size <= 4 {
            return bad("vocabulary must include bi-gram ids beyond the 4 specials");
        }
        if self.max_positions < 3 {
            return bad("max_positions must be at least 3");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Classification head shape: `segments` pooled vectors are concatenated
/// (1 for packet or stitched-flow inputs, M for concatenated-flow inputs).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub segments: usize,
}

#[derive(Debug, Clone)]
struct LayerIds {
    q_w: ParamId,
    q_b: ParamId,
    k_w: ParamId,
    k_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    o_w: ParamId,
    o_b: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: ParamId,
    pos: ParamId,
    seg: ParamId,
    emb_g: ParamId,
    emb_b: ParamId,
    layers: Vec<LayerIds>,
    pool_w: ParamId,
    pool_b: ParamId,
    mbm_w: Option<ParamId>,
    mbm_b: ParamId,
    sbp_w: ParamId,
    sbp_b: ParamId,
    cls: Option<(ParamId, ParamId)>,
}

/// Final-layer states plus the pooled `[CLS]` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<F> {
    pub hidden: Array2<F>,
    pub cls_pooled: Array1<F>,
}

struct LayerTape<F> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
    attn_drop: Option<Array2<F>>,
    ln1: NormCache<F>,
    h1: Array2<F>,
    u: Array2<F>,
    g: Array2<F>,
    ffn_drop: Option<Array2<F>>,
    ln2: NormCache<F>,
}

/// Everything the backward pass needs from one sequence's forward pass.
pub struct Tape<F> {
    ids: Vec<usize>,
    segs: Vec<usize>,
    emb_ln: Option<NormCache<F>>,
    emb_drop: Option<Array2<F>>,
    layers: Vec<LayerTape<F>>,
    pub hidden: Array2<F>,
    pub pooled: Array1<F>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objectives {
    pub mbm: bool,
    pub sbp: bool,
}

impl Default for Objectives {
    fn default() -> Self {
        Objectives { mbm: true, sbp: true }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLoss {
    pub mbm: f64,
    pub sbp: f64,
    pub total: f64,
}

/// Bidirectional Transformer encoder with pre-training and classification heads.
#[derive(Debug, Clone)]
pub struct Encoder<F: Scalar> {
    config: ModelConfig,
    head: Option<HeadConfig>,
    params: ParamStore<F>,
    ids: Layout,
}

fn outer_add<F: Scalar>(mut target: ndarray::ArrayViewMut2<F>, a: ArrayView1<F>, b: ArrayView1<F>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai != F::zero() {
            target.row_mut(i).scaled_add(ai, &b);
        }
    }
}

/// `c += a @ b`.
fn gemm_acc<F: Scalar>(a: &ArrayView2<F>, b: &ArrayView2<F>, c: &mut ndarray::ArrayViewMut2<F>) {
    general_mat_mul(F::one(), a, b, F::one(), c);
}

fn add_bias<F: Scalar>(mut x: Array2<F>, b: ArrayView1<F>) -> Array2<F> {
    for mut row in x.rows_mut() {
        row += &b;
    }
    x
}

fn truncated_normal(n: usize, rng: &mut Rng) -> Vec<f32> {
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            out.push(v as f32);
        }
    }
    out
}

impl<F: Scalar> Encoder<F> {
    /// Freshly initialized model: truncated-normal weights (std 0.02), zero
    /// biases, unit norm scales. Identical seeds give identical models.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        Self::build(config, None, true)
    }

    /// Same layout as `new`, every tensor zero; used when loading.
    pub(crate) fn zeroed(config: ModelConfig, head: Option<HeadConfig>) -> Result<Self, ModelError> {
        Self::build(config, head, false)
    }

    fn build(config: ModelConfig, head: Option<HeadConfig>, init: bool) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let h = config.hidden;
        let seed = config.seed;
        let mut next = 0u64;
        let mut weight = |store: &mut ParamStore<F>, name: String, shape: &[usize]| {
            let n: usize = shape.iter().product();
            let mut value = zeros::<F>(shape);
            if init {
                let vals = truncated_normal(n, &mut seed::rng(seed, "init", &[next]));
                for (dst, src) in value.iter_mut().zip(vals) {
                    *dst = F::of(src as f64);
                }
            }
            next += 1;
            store.add(name, value, true)
        };
        let bias = |store: &mut ParamStore<F>, name: String, n: usize| store.add(name, zeros::<F>(&[n]), false);
        let gamma = |store: &mut ParamStore<F>, name: String, n: usize| {
            let mut v = zeros::<F>(&[n]);
            if init {
                v.fill(F::one());
            }
            store.add(name, v, false)
        };

        let tok = weight(&mut store, "embeddings.token".into(), &[config.vocab_size, h]);
        let pos = weight(&mut store, "embeddings.position".into(), &[config.max_positions, h]);
        let seg = weight(&mut store, "embeddings.segment".into(), &[2, h]);
        let emb_g = gamma(&mut store, "embeddings.norm.gamma".into(), h);
        let emb_b = bias(&mut store, "embeddings.norm.beta".into(), h);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerIds {
                q_w: weight(&mut store, p("attention.query.weight"), &[h, h]),
                q_b: bias(&mut store, p("attention.query.bias"), h),
                k_w: weight(&mut store, p("attention.key.weight"), &[h, h]),
                k_b: bias(&mut store, p("attention.key.bias"), h),
                v_w: weight(&mut store, p("attention.value.weight"), &[h, h]),
                v_b: bias(&mut store, p("attention.value.bias"), h),
                o_w: weight(&mut store, p("attention.output.weight"), &[h, h]),
                o_b: bias(&mut store, p("attention.output.bias"), h),
                ln1_g: gamma(&mut store, p("attention.norm.gamma"), h),
                ln1_b: bias(&mut store, p("attention.norm.beta"), h),
                ff1_w: weight(&mut store, p("ffn.inner.weight"), &[h, config.ffn_dim]),
                ff1_b: bias(&mut store, p("ffn.inner.bias"), config.ffn_dim),
                ff2_w: weight(&mut store, p("ffn.output.weight"), &[config.ffn_dim, h]),
                ff2_b: bias(&mut store, p("ffn.output.bias"), h),
                ln2_g: gamma(&mut store, p("ffn.norm.gamma"), h),
                ln2_b: bias(&mut store, p("ffn.norm.beta"), h),
            });
        }
        let pool_w = weight(&mut store, "pooler.weight".into(), &[h, h]);
        let pool_b = bias(&mut store, "pooler.bias".into(), h);
        let mbm_w = if config.tie_mbm_weights {
            None
        } else {
            Some(weight(&mut store, "mbm.weight".into(), &[h, config.vocab_size]))
        };
        let mbm_b = bias(&mut store, "mbm.bias".into(), config.vocab_size);
        let sbp_w = weight(&mut store, "sbp.weight".into(), &[h, 2]);
        let sbp_b = bias(&mut store, "sbp.bias".into(), 2);
        let ids = Layout {
            tok,
            pos,
            seg,
            emb_g,
            emb_b,
            layers,
            pool_w,
            pool_b,
            mbm_w,
            mbm_b,
            sbp_w,
            sbp_b,
            cls: None,
        };
        let mut enc = Encoder {
            config,
            head: None,
            params: store,
            ids,
        };
        if let Some(head) = head {
            let seed = enc.config.seed;
            enc.attach_head(head, init, seed)?;
        }
        Ok(enc)
    }

    fn attach_head(&mut self, head: HeadConfig, init: bool, seed: u64) -> Result<(), ModelError> {
        if head.num_classes == 0 || head.segments == 0 {
            return Err(ModelError::InvalidConfig("classifier needs classes and segments".into()));
        }
        let rows = head.segments * self.config.hidden;
        let mut w = zeros::<F>(&[rows, head.num_classes]);
        if init {
            let vals = truncated_normal(w.len(), &mut seed::rng(seed, "classifier", &[]));
            for (dst, src) in w.iter_mut().zip(vals) {
                *dst = F::of(src as f64);
            }
        }
        let w = self.params.add("classifier.weight", w, true);
        let b = self.params.add("classifier.bias", zeros::<F>(&[head.num_classes]), false);
        self.ids.cls = Some((w, b));
        self.head = Some(head);
        Ok(())
    }

    /// Adds a freshly initialized classification head.
    pub fn with_classifier(self, head: HeadConfig) -> Result<Self, ModelError> {
        let seed = self.config.seed;
        self.with_classifier_seeded(head, seed)
    }

    /// Same as [`with_classifier`](Self::with_classifier) with the head
    /// weights drawn from `seed`.
    pub fn with_classifier_seeded(mut self, head: HeadConfig, seed: u64) -> Result<Self, ModelError> {
        if self.head.is_some() {
            return Err(ModelError::InvalidConfig("model already has a classifier".into()));
        }
        self.attach_head(head, true, seed)?;
        Ok(self)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> Option<&HeadConfig> {
        self.head.as_ref()
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// The same model in another float type.
    pub fn cast<G: Scalar>(&self) -> Encoder<G> {
        Encoder {
            config: self.config.clone(),
            head: self.head.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    /// Parameters that only serve pre-training heads.
    pub fn is_pretraining_head(name: &str) -> bool {
        name.starts_with("mbm.") || name.starts_with("sbp.")
    }

    fn check_input(&self, ids: &[TokenId], segs: &[u8]) -> Result<(), ModelError> {
        if ids.len() != segs.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} ids but {} segment ids",
                ids.len(),
                segs.len()
            )));
        }
        if ids.is_empty() {
            return Err(ModelError::ShapeMismatch("empty sequence".into()));
        }
        if ids.len() > self.config.max_positions {
            return Err(ModelError::PositionOutOfRange {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        if let Some(bad) = ids.iter().find(|t| t.index() >= self.config.vocab_size) {
            return Err(ModelError::IdOutOfRange {
                id: bad.0,
                vocab: self.config.vocab_size,
            });
        }
        if let Some(&bad) = segs.iter().find(|&&s| s > 1) {
            return Err(ModelError::ShapeMismatch(format!("segment id {bad} is not 0 or 1")));
        }
        Ok(())
    }

    fn embed_raw(&self, ids: &[usize], segs: &[usize]) -> Array2<F> {
        let tok = self.params.mat(self.ids.tok);
        let pos = self.params.mat(self.ids.pos);
        let seg = self.params.mat(self.ids.seg);
        let mut x = Array2::zeros((ids.len(), self.config.hidden));
        for (t, mut row) in x.rows_mut().into_iter().enumerate() {
            row.assign(&tok.row(ids[t]));
            row += &pos.row(t);
            row += &seg.row(segs[t]);
        }
        x
    }

    /// Summed token, position and segment embeddings after layer
    /// normalization (no dropout; evaluation mode).
    pub fn embed(&self, seq: &TokenSequence) -> Result<Array2<F>, ModelError> {
        self.check_input(&seq.ids, &seq.segments)?;
        let ids: Vec<usize> = seq.ids.iter().map(|t| t.index()).collect();
        let segs: Vec<usize> = seq.segments.iter().map(|&s| s as usize).collect();
        let x = self.embed_raw(&ids, &segs);
        let (y, _) = ops::layer_norm(&x, self.params.vec(self.ids.emb_g), self.params.vec(self.ids.emb_b));
        Ok(y)
    }

    /// Pre-normalization embedding sum; exposed for tests of the summation.
    pub fn embedding_sum(&self, seq: &TokenSequence) -> Result<Array2<F>, ModelError> {
        self.check_input(&seq.ids, &seq.segments)?;
        let ids: Vec<usize> = seq.ids.iter().map(|t| t.index()).collect();
        let segs: Vec<usize> = seq.segments.iter().map(|&s| s as usize).collect();
        Ok(self.embed_raw(&ids, &segs))
    }

    /// Runs the Transformer stack over already-embedded rows. `valid[t]` is
    /// false for PAD positions, which are excluded as attention keys.
    pub fn encode(&self, embedded: &Array2<F>, valid: &[bool]) -> Result<ForwardOutput<F>, ModelError> {
        if embedded.ncols() != self.config.hidden || embedded.nrows() != valid.len() || valid.is_empty() {
            return Err(ModelError::ShapeMismatch(format!(
                "embedded {:?} with {} mask entries, hidden {}",
                embedded.dim(),
                valid.len(),
                self.config.hidden
            )));
        }
        let mask = if valid.iter().all(|&v| v) { None } else { Some(valid) };
        let (hidden, _) = self.run_layers(embedded.clone(), mask, None);
        let pooled = self.pool(&hidden);
        Ok(ForwardOutput {
            hidden,
            cls_pooled: pooled,
        })
    }

    /// Full evaluation-mode forward pass over a padded sequence.
    pub fn forward(&self, seq: &TokenSequence) -> Result<ForwardOutput<F>, ModelError> {
        let embedded = self.embed(seq)?;
        let valid: Vec<bool> = (0..seq.max_len()).map(|t| t < seq.real_len).collect();
        self.encode(&embedded, &valid)
    }

    fn pool(&self, hidden: &Array2<F>) -> Array1<F> {
        let w = self.params.mat(self.ids.pool_w);
        let b = self.params.vec(self.ids.pool_b);
        (hidden.row(0).dot(&w) + b).mapv(|v| v.tanh())
    }

    fn run_layers(
        &self,
        mut x: Array2<F>,
        valid: Option<&[bool]>,
        mut rng: Option<&mut Rng>,
    ) -> (Array2<F>, Vec<LayerTape<F>>) {
        let mut tapes = Vec::with_capacity(self.config.layers);
        for layer in &self.ids.layers {
            let (y, tape) = self.layer_forward(layer, x, valid, rng.as_deref_mut());
            tapes.push(tape);
            x = y;
        }
        (x, tapes)
    }

    fn maybe_dropout(&self, x: &mut Array2<F>, rng: Option<&mut Rng>) -> Option<Array2<F>> {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let m = ops::dropout_mask(x.nrows(), x.ncols(), p, rng);
                *x *= &m;
                Some(m)
            }
            _ => None,
        }
    }

    fn layer_forward(
        &self,
        ids: &LayerIds,
        x: Array2<F>,
        valid: Option<&[bool]>,
        mut rng: Option<&mut Rng>,
    ) -> (Array2<F>, LayerTape<F>) {
        let p = &self.params;
        let dh = self.config.head_dim();
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let q = add_bias(x.dot(&p.mat(ids.q_w)), p.vec(ids.q_b));
        let k = add_bias(x.dot(&p.mat(ids.k_w)), p.vec(ids.k_b));
        let v = add_bias(x.dot(&p.mat(ids.v_w)), p.vec(ids.v_b));
        let mut ctx = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(self.config.heads);
        for a in 0..self.config.heads {
            let cols = s![.., a * dh..(a + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores.mapv_inplace(|s| s * scale);
            ops::softmax_rows(&mut scores, valid);
            ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let mut attn = add_bias(ctx.dot(&p.mat(ids.o_w)), p.vec(ids.o_b));
        let attn_drop = self.maybe_dropout(&mut attn, rng.as_deref_mut());
        let (h1, ln1) = ops::layer_norm(&(&x + &attn), p.vec(ids.ln1_g), p.vec(ids.ln1_b));
        let u = add_bias(h1.dot(&p.mat(ids.ff1_w)), p.vec(ids.ff1_b));
        let g = u.mapv(ops::gelu);
        let mut f = add_bias(g.dot(&p.mat(ids.ff2_w)), p.vec(ids.ff2_b));
        let ffn_drop = self.maybe_dropout(&mut f, rng);
        let (y, ln2) = ops::layer_norm(&(&h1 + &f), p.vec(ids.ln2_g), p.vec(ids.ln2_b));
        (
            y,
            LayerTape {
                x,
                q,
                k,
                v,
                probs,
                ctx,
                attn_drop,
                ln1,
                h1,
                u,
                g,
                ffn_drop,
                ln2,
            },
        )
    }

    /// Forward pass over the real (non-PAD) prefix of a sequence, recording
    /// what the backward pass needs. PAD rows never influence real rows, so
    /// dropping them leaves every loss unchanged.
    pub fn forward_tape(&self, seq: &TokenSequence, mut rng: Option<&mut Rng>) -> Result<Tape<F>, ModelError> {
        let n = seq.real_len;
        self.check_input(&seq.ids[..n], &seq.segments[..n])?;
        let ids: Vec<usize> = seq.ids[..n].iter().map(|t| t.index()).collect();
        let segs: Vec<usize> = seq.segments[..n].iter().map(|&s| s as usize).collect();
        let x = self.embed_raw(&ids, &segs);
        let (mut e, emb_ln) = ops::layer_norm(&x, self.params.vec(self.ids.emb_g), self.params.vec(self.ids.emb_b));
        let emb_drop = self.maybe_dropout(&mut e, rng.as_deref_mut());
        let (hidden, layers) = self.run_layers(e, None, rng);
        let pooled = self.pool(&hidden);
        Ok(Tape {
            ids,
            segs,
            emb_ln: Some(emb_ln),
            emb_drop,
            layers,
            hidden,
            pooled,
        })
    }

    /// Accumulates parameter gradients for one sequence given the upstream
    /// gradients of its final hidden states and pooled vector.
    pub fn backward_tape(&self, tape: &Tape<F>, mut d_hidden: Array2<F>, d_pooled: ArrayView1<F>, grads: &mut Gradients<F>) {
        let p = &self.params;
        let dz: Array1<F> = &d_pooled * &tape.pooled.mapv(|c| F::one() - c * c);
        outer_add(grads.mat_mut(self.ids.pool_w), tape.hidden.row(0), dz.view());
        grads.vec_mut(self.ids.pool_b).scaled_add(F::one(), &dz);
        let back = p.mat(self.ids.pool_w).dot(&dz);
        d_hidden.row_mut(0).scaled_add(F::one(), &back);

        let mut d = d_hidden;
        for (ids, lt) in self.ids.layers.iter().zip(&tape.layers).rev() {
            d = self.layer_backward(ids, lt, d, grads);
        }

        if let Some(m) = &tape.emb_drop {
            d *= m;
        }
        let emb_ln = tape.emb_ln.as_ref().expect("tape records the embedding norm");
        let (dg, db) = two_vec_mut(grads, self.ids.emb_g, self.ids.emb_b);
        let dx = ops::layer_norm_backward(&d, emb_ln, p.vec(self.ids.emb_g), dg, db);
        {
            let mut dtok = grads.mat_mut(self.ids.tok);
            for (t, &id) in tape.ids.iter().enumerate() {
                dtok.row_mut(id).scaled_add(F::one(), &dx.row(t));
            }
        }
        {
            let mut dpos = grads.mat_mut(self.ids.pos);
            for t in 0..tape.ids.len() {
                dpos.row_mut(t).scaled_add(F::one(), &dx.row(t));
            }
        }
        let mut dseg = grads.mat_mut(self.ids.seg);
        for (t, &s) in tape.segs.iter().enumerate() {
            dseg.row_mut(s).scaled_add(F::one(), &dx.row(t));
        }
    }

    fn layer_backward(&self, ids: &LayerIds, lt: &LayerTape<F>, dy: Array2<F>, grads: &mut Gradients<F>) -> Array2<F> {
        let p = &self.params;
        let dh = self.config.head_dim();
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let (dg2, db2) = two_vec_mut(grads, ids.ln2_g, ids.ln2_b);
        let dr2 = ops::layer_norm_backward(&dy, &lt.ln2, p.vec(ids.ln2_g), dg2, db2);
        let mut dh1 = dr2.clone();
        let mut df = dr2;
        if let Some(m) = &lt.ffn_drop {
            df *= m;
        }
        gemm_acc(&lt.g.t(), &df.view(), &mut grads.mat_mut(ids.ff2_w));
        grads.vec_mut(ids.ff2_b).scaled_add(F::one(), &df.sum_axis(Axis(0)));
        let mut du = df.dot(&p.mat(ids.ff2_w).t());
        ndarray::Zip::from(&mut du).and(&lt.u).for_each(|d, &u| *d = *d * ops::gelu_grad(u));
        gemm_acc(&lt.h1.t(), &du.view(), &mut grads.mat_mut(ids.ff1_w));
        grads.vec_mut(ids.ff1_b).scaled_add(F::one(), &du.sum_axis(Axis(0)));
        gemm_acc(&du.view(), &p.mat(ids.ff1_w).t(), &mut dh1.view_mut());

        let (dg1, db1) = two_vec_mut(grads, ids.ln1_g, ids.ln1_b);
        let dr1 = ops::layer_norm_backward(&dh1, &lt.ln1, p.vec(ids.ln1_g), dg1, db1);
        let mut dx = dr1.clone();
        let mut da = dr1;
        if let Some(m) = &lt.attn_drop {
            da *= m;
        }
        gemm_acc(&lt.ctx.t(), &da.view(), &mut grads.mat_mut(ids.o_w));
        grads.vec_mut(ids.o_b).scaled_add(F::one(), &da.sum_axis(Axis(0)));
        let dctx = da.dot(&p.mat(ids.o_w).t());

        let mut dq = Array2::zeros(lt.q.raw_dim());
        let mut dk = Array2::zeros(lt.k.raw_dim());
        let mut dv = Array2::zeros(lt.v.raw_dim());
        for (a, probs) in lt.probs.iter().enumerate() {
            let cols = s![.., a * dh..(a + 1) * dh];
            let dctx_h = dctx.slice(cols);
            let dp = dctx_h.dot(&lt.v.slice(cols).t());
            dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
            let mut ds = ops::softmax_rows_backward(probs.view(), &dp);
            ds.mapv_inplace(|x| x * scale);
            dq.slice_mut(cols).assign(&ds.dot(&lt.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lt.q.slice(cols)));
        }
        for (w, b, d) in [(ids.q_w, ids.q_b, &dq), (ids.k_w, ids.k_b, &dk), (ids.v_w, ids.v_b, &dv)] {
            gemm_acc(&lt.x.t(), &d.view(), &mut grads.mat_mut(w));
            grads.vec_mut(b).scaled_add(F::one(), &d.sum_axis(Axis(0)));
            gemm_acc(&d.view(), &p.mat(w).t(), &mut dx.view_mut());
        }
        dx
    }

    // ---- masked-BURST-model head ----

    fn mbm_weight(&self) -> ArrayView2<'_, F> {
        match self.ids.mbm_w {
            Some(id) => self.params.mat(id),
            None => self.params.mat(self.ids.tok).reversed_axes(),
        }
    }

    /// Vocabulary logits for each row of `rows`.
    pub fn mbm_logits(&self, rows: ArrayView2<F>) -> Array2<F> {
        add_bias(rows.dot(&self.mbm_weight()), self.params.vec(self.ids.mbm_b))
    }

    /// Mean negative log-likelihood of the original tokens at the masked
    /// positions.
    pub fn mbm_loss(&self, out: &ForwardOutput<F>, positions: &[usize], targets: &[TokenId]) -> Result<F, ModelError> {
        if positions.is_empty() {
            return Err(ModelError::EmptyMaskSet);
        }
        if positions.len() != targets.len() {
            return Err(ModelError::ShapeMismatch("positions and targets differ in length".into()));
        }
        let rows = gather_rows(&out.hidden, positions)?;
        let logits = self.mbm_logits(rows.view());
        let mut total = F::zero();
        for (row, t) in logits.rows().into_iter().zip(targets) {
            if t.index() >= self.config.vocab_size {
                return Err(ModelError::IdOutOfRange {
                    id: t.0,
                    vocab: self.config.vocab_size,
                });
            }
            total = total - ops::log_softmax_at(row, t.index());
        }
        Ok(total / F::of(positions.len() as f64))
    }

    /// Loss over a stack of rows plus the gradient of `scale * loss` with
    /// respect to those rows; head gradients are accumulated.
    fn mbm_rows_backward(
        &self,
        rows: &Array2<F>,
        targets: &[usize],
        scale: F,
        grads: Option<&mut Gradients<F>>,
    ) -> (f64, Option<Array2<F>>) {
        let mut logits = self.mbm_logits(rows.view());
        let coef = scale / F::of(targets.len() as f64);
        let loss = ops::softmax_nll_rows(&mut logits, targets, coef) / targets.len() as f64;
        let Some(grads) = grads else {
            return (loss, None);
        };
        let mut dlogits = logits;
        for (mut row, &t) in dlogits.rows_mut().into_iter().zip(targets) {
            row[t] = row[t] - coef;
        }
        grads.vec_mut(self.ids.mbm_b).scaled_add(F::one(), &dlogits.sum_axis(Axis(0)));
        match self.ids.mbm_w {
            Some(id) => gemm_acc(&rows.t(), &dlogits.view(), &mut grads.mat_mut(id)),
            None => gemm_acc(&dlogits.t(), &rows.view(), &mut grads.mat_mut(self.ids.tok)),
        }
        let drows = dlogits.dot(&self.mbm_weight().t());
        (loss, Some(drows))
    }

    // ---- same-origin BURST prediction head ----

    pub fn sbp_logits(&self, pooled: ArrayView1<F>) -> Array1<F> {
        pooled.dot(&self.params.mat(self.ids.sbp_w)) + self.params.vec(self.ids.sbp_b)
    }

    pub fn sbp_loss(&self, out: &ForwardOutput<F>, label: u8) -> Result<F, ModelError> {
        if label > 1 {
            return Err(ModelError::BadLabel(label as usize));
        }
        let logits = self.sbp_logits(out.cls_pooled.view());
        Ok(-ops::log_softmax_at(logits.view(), label as usize))
    }

    /// Returns the loss and the pooled-vector gradient of `coef * loss`.
    fn softmax_head_backward(
        &self,
        w: ParamId,
        b: ParamId,
        features: ArrayView1<F>,
        label: usize,
        coef: F,
        grads: &mut Gradients<F>,
    ) -> Array1<F> {
        let logits = features.dot(&self.params.mat(w)) + self.params.vec(b);
        let mut probs = logits.insert_axis(Axis(0));
        ops::softmax_rows(&mut probs, None);
        let mut d = probs.index_axis_move(Axis(0), 0);
        d[label] = d[label] - F::one();
        d.mapv_inplace(|v| v * coef);
        outer_add(grads.mat_mut(w), features, d.view());
        grads.vec_mut(b).scaled_add(F::one(), &d);
        self.params.mat(w).dot(&d)
    }

    // ---- batched objectives ----

    fn tapes(&self, seqs: &[&TokenSequence], dropout_seed: Option<u64>) -> Result<Vec<Tape<F>>, ModelError> {
        seqs.par_iter()
            .enumerate()
            .map(|(i, seq)| {
                let mut rng = dropout_seed.map(|s| seed::rng(s, "dropout", &[i as u64]));
                self.forward_tape(seq, rng.as_mut())
            })
            .collect()
    }

    /// Evaluation-mode pre-training loss of a batch (no dropout).
    pub fn pretrain_loss(&self, batch: &[MaskedExample], obj: Objectives) -> Result<PretrainLoss, ModelError> {
        Ok(self.pretrain_pass(batch, obj, None, F::one(), false)?.0)
    }

    /// Pre-training loss (`mbm + sbp`, each averaged over the batch) and the
    /// gradients of `scale * loss` for every parameter. `dropout_seed`
    /// enables dropout; `None` runs deterministically without it.
    pub fn pretrain_loss_and_grads(
        &self,
        batch: &[MaskedExample],
        obj: Objectives,
        dropout_seed: Option<u64>,
        scale: F,
    ) -> Result<(PretrainLoss, Gradients<F>), ModelError> {
        let (loss, grads) = self.pretrain_pass(batch, obj, dropout_seed, scale, true)?;
        Ok((loss, grads.expect("gradients requested")))
    }

    fn pretrain_pass(
        &self,
        batch: &[MaskedExample],
        obj: Objectives,
        dropout_seed: Option<u64>,
        scale: F,
        want_grads: bool,
    ) -> Result<(PretrainLoss, Option<Gradients<F>>), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::ShapeMismatch("empty batch".into()));
        }
        let seqs: Vec<&TokenSequence> = batch.iter().map(|ex| &ex.input).collect();
        let tapes = self.tapes(&seqs, dropout_seed)?;
        let mut grads = want_grads.then(|| Gradients::zeros_like(&self.params));
        let mut d_hidden: Vec<Array2<F>> = tapes.iter().map(|t| Array2::zeros(t.hidden.raw_dim())).collect();
        let mut d_pooled: Vec<Array1<F>> = tapes.iter().map(|t| Array1::zeros(t.pooled.raw_dim())).collect();
        let mut loss = PretrainLoss::default();

        if obj.mbm {
            let mut owners = Vec::new();
            let mut targets = Vec::new();
            for (i, ex) in batch.iter().enumerate() {
                if ex.mask_positions.is_empty() {
                    return Err(ModelError::EmptyMaskSet);
                }
                for (&p, &t) in ex.mask_positions.iter().zip(&ex.mask_targets) {
                    if p >= ex.input.real_len {
                        return Err(ModelError::ShapeMismatch(format!("mask position {p} beyond real length")));
                    }
                    if t.index() >= self.config.vocab_size {
                        return Err(ModelError::IdOutOfRange {
                            id: t.0,
                            vocab: self.config.vocab_size,
                        });
                    }
                    owners.push((i, p));
                    targets.push(t.index());
                }
            }
            let mut rows = Array2::zeros((owners.len(), self.config.hidden));
            for (mut row, &(i, p)) in rows.rows_mut().into_iter().zip(&owners) {
                row.assign(&tapes[i].hidden.row(p));
            }
            let (l, drows) = self.mbm_rows_backward(&rows, &targets, scale, grads.as_mut());
            loss.mbm = l;
            if let Some(drows) = drows {
                for (row, &(i, p)) in drows.rows().into_iter().zip(&owners) {
                    d_hidden[i].row_mut(p).scaled_add(F::one(), &row);
                }
            }
        }

        if obj.sbp {
            let coef = scale / F::of(batch.len() as f64);
            let mut total = 0.0;
            for (i, (ex, tape)) in batch.iter().zip(&tapes).enumerate() {
                if ex.sbp_label > 1 {
                    return Err(ModelError::BadLabel(ex.sbp_label as usize));
                }
                let logits = self.sbp_logits(tape.pooled.view());
                total -= ops::log_softmax_at(logits.view(), ex.sbp_label as usize).to_f64().unwrap();
                if let Some(g) = grads.as_mut() {
                    d_pooled[i] = self.softmax_head_backward(
                        self.ids.sbp_w,
                        self.ids.sbp_b,
                        tape.pooled.view(),
                        ex.sbp_label as usize,
                        coef,
                        g,
                    );
                }
            }
            loss.sbp = total / batch.len() as f64;
        }
        loss.total = total_loss(loss.mbm, loss.sbp);

        if let Some(g) = grads.as_mut() {
            for ((tape, dh), dp) in tapes.iter().zip(d_hidden).zip(&d_pooled) {
                self.backward_tape(tape, dh, dp.view(), g);
            }
        }
        Ok((loss, grads))
    }

    // ---- classification ----

    fn head_ids(&self) -> Result<(ParamId, ParamId, &HeadConfig), ModelError> {
        match (&self.ids.cls, &self.head) {
            (Some((w, b)), Some(h)) => Ok((*w, *b, h)),
            _ => Err(ModelError::UntrainedHead),
        }
    }

    fn head_features(&self, pooled: &[Array1<F>], slots: usize) -> Array1<F> {
        let h = self.config.hidden;
        let mut feat = Array1::zeros(slots * h);
        for (k, p) in pooled.iter().take(slots).enumerate() {
            feat.slice_mut(s![k * h..(k + 1) * h]).assign(p);
        }
        feat
    }

    /// Class probabilities for one example made of one or more sequences.
    pub fn classify(&self, units: &[TokenSequence]) -> Result<Array1<F>, ModelError> {
        let (w, b, head) = self.head_ids()?;
        if units.is_empty() {
            return Err(ModelError::ShapeMismatch("example has no sequences".into()));
        }
        let pooled = units
            .iter()
            .map(|u| Ok(self.forward_tape(u, None)?.pooled))
            .collect::<Result<Vec<_>, ModelError>>()?;
        let feat = self.head_features(&pooled, head.segments);
        let logits = feat.dot(&self.params.mat(w)) + self.params.vec(b);
        let mut probs = logits.insert_axis(Axis(0));
        ops::softmax_rows(&mut probs, None);
        Ok(probs.index_axis_move(Axis(0), 0))
    }

    /// Mean cross-entropy over a batch of labelled examples and the
    /// gradients of `scale * loss`. `head_dropout` applies to the pooled
    /// features feeding the classifier when `dropout_seed` is set.
    pub fn classification_loss_and_grads(
        &self,
        batch: &[(&[TokenSequence], usize)],
        head_dropout: f64,
        dropout_seed: Option<u64>,
        scale: F,
    ) -> Result<(f64, Gradients<F>), ModelError> {
        let (w, b, head) = self.head_ids()?;
        let slots = head.segments;
        if batch.is_empty() {
            return Err(ModelError::ShapeMismatch("empty batch".into()));
        }
        let mut seqs = Vec::new();
        let mut spans = Vec::with_capacity(batch.len());
        for (units, label) in batch {
            if *label >= head.num_classes {
                return Err(ModelError::BadLabel(*label));
            }
            if units.is_empty() {
                return Err(ModelError::ShapeMismatch("example has no sequences".into()));
            }
            let used = units.len().min(slots);
            spans.push((seqs.len(), used));
            seqs.extend(units[..used].iter());
        }
        let tapes = self.tapes(&seqs, dropout_seed)?;
        let mut grads = Gradients::zeros_like(&self.params);
        let coef = scale / F::of(batch.len() as f64);
        let mut total = 0.0;
        for (e, ((start, used), (_, label))) in spans.iter().zip(batch).enumerate() {
            let pooled: Vec<Array1<F>> = tapes[*start..start + used].iter().map(|t| t.pooled.clone()).collect();
            let mut feat = self.head_features(&pooled, slots);
            let mask = match dropout_seed {
                Some(s) if head_dropout > 0.0 => {
                    let mut rng = seed::rng(s, "head-dropout", &[e as u64]);
                    let m = ops::dropout_mask::<F>(1, feat.len(), head_dropout, &mut rng).index_axis_move(Axis(0), 0);
                    feat *= &m;
                    Some(m)
                }
                _ => None,
            };
            let logits = feat.dot(&self.params.mat(w)) + self.params.vec(b);
            total -= ops::log_softmax_at(logits.view(), *label).to_f64().unwrap();
            let mut dfeat = self.softmax_head_backward(w, b, feat.view(), *label, coef, &mut grads);
            if let Some(m) = mask {
                dfeat *= &m;
            }
            let h = self.config.hidden;
            for (k, tape) in tapes[*start..start + used].iter().enumerate() {
                let dp = dfeat.slice(s![k * h..(k + 1) * h]);
                self.backward_tape(tape, Array2::zeros(tape.hidden.raw_dim()), dp, &mut grads);
            }
        }
        Ok((total / batch.len() as f64, grads))
    }

    /// Evaluation-mode classification loss (no dropout).
    pub fn classification_loss(&self, batch: &[(&[TokenSequence], usize)]) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for (units, label) in batch {
            let probs = self.classify(units)?;
            if *label >= probs.len() {
                return Err(ModelError::BadLabel(*label));
            }
            total -= probs[*label].to_f64().unwrap().ln();
        }
        Ok(total / batch.len() as f64)
    }
}

/// `L = L_mbm + L_sbp`.
pub fn total_loss(mbm: f64, sbp: f64) -> f64 {
    mbm + sbp
}

fn gather_rows<F: Scalar>(hidden: &Array2<F>, positions: &[usize]) -> Result<Array2<F>, ModelError> {
    let mut rows = Array2::zeros((positions.len(), hidden.ncols()));
    for (mut row, &p) in rows.rows_mut().into_iter().zip(positions) {
        if p >= hidden.nrows() {
            return Err(ModelError::ShapeMismatch(format!("position {p} beyond sequence length")));
        }
        row.assign(&hidden.row(p));
    }
    Ok(rows)
}

fn two_vec_mut<F: Scalar>(
    grads: &mut Gradients<F>,
    a: ParamId,
    b: ParamId,
) -> (ndarray::ArrayViewMut1<'_, F>, ndarray::ArrayViewMut1<'_, F>) {
    assert!(a.0 < b.0, "parameter order");
    let (lo, hi) = grads.tensors.split_at_mut(b.0);
    (
        lo[a.0].view_mut().into_dimensionality().expect("rank-1 gradient"),
        hi[0].view_mut().into_dimensionality().expect("rank-1 gradient"),
    )
}
