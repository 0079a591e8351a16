//! A small post-LN BERT-style encoder.
//!
//! Writer prompts enter at the representation level: the input to layer
//! `l` is `[prompts_l ; token states]`. When layer `l + 1` supplies its own
//! prompts, the prompt-position outputs of layer `l` are replaced by them;
//! when it supplies none, those outputs flow on as ordinary positions.
//! Prompt positions are dropped from the final output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{CLS, PAD};
use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

/// Weight std for a linear map with `fan_in` inputs: the variance a
/// 768-wide layer gets from `INIT_STD`, rescaled to the actual width.
fn weight_std(fan_in: usize) -> f64 {
    INIT_STD * (768.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    /// Maximum input length in tokens (N_max).
    pub max_len: usize,
    /// Soft prompts per layer (M).
    pub prompt_len: usize,
    /// Width of the reparametrized prompt matrix (H′).
    pub prompt_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 {
            return fail("layers, hidden, heads and ffn must be positive");
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail("hidden must be divisible by heads");
        }
        if self.prompt_hidden > self.hidden {
            return fail("prompt_hidden must not exceed hidden");
        }
        if self.max_len < self.prompt_len + 2 {
            return fail("max_len must be at least prompt_len + 2");
        }
        if self.vocab_size <= crate::corpus::vocab::NUM_SPECIAL {
            return fail("vocab_size must exceed the special-token count");
        }
        Ok(())
    }

    /// Analytic parameter count of [`EncoderModel`].
    pub fn param_count(&self) -> usize {
        let (h, f, v, n) = (self.hidden, self.ffn, self.vocab_size, self.max_len);
        let embeddings = v * h + n * h + 2 * h;
        let per_layer = 4 * (h * h + h) + (h * f + f) + (f * h + h) + 4 * h;
        let mlm = h * h + h + 2 * h + v;
        embeddings + self.layers * per_layer + mlm
    }
}

/// Per-layer prompt vectors for one forward pass; `None` for layers that
/// receive no prompts.
pub type LayerPrompts = Vec<Option<Var>>;

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Final token states, prompt positions removed (I×H).
    pub hidden: Var,
    /// Attention probabilities, `[layer][head]`, each S×S.
    pub attention: Vec<Vec<Var>>,
    /// Attended sequence length per layer.
    pub seq_lens: Vec<usize>,
}

/// Token/position embeddings, transformer layers, and a tied MLM head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

struct LayerSlots {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

impl EncoderModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (h, f) = (config.hidden, config.ffn);
        let mut p = ParamStore::new();
        p.insert("tok_emb", Tensor::randn(&[config.vocab_size, h], INIT_STD, rng));
        p.insert("pos_emb", Tensor::randn(&[config.max_len, h], INIT_STD, rng));
        p.insert("emb_ln.g", Tensor::full(&[1, h], 1.0));
        p.insert("emb_ln.b", Tensor::zeros(&[1, h]));
        for l in 0..config.layers {
            for w in ["q", "k", "v", "o"] {
                p.insert(format!("l{l}.w{w}"), Tensor::randn(&[h, h], weight_std(h), rng));
                p.insert(format!("l{l}.b{w}"), Tensor::zeros(&[1, h]));
            }
            p.insert(format!("l{l}.ln1.g"), Tensor::full(&[1, h], 1.0));
            p.insert(format!("l{l}.ln1.b"), Tensor::zeros(&[1, h]));
            p.insert(format!("l{l}.w1"), Tensor::randn(&[h, f], weight_std(h), rng));
            p.insert(format!("l{l}.b1"), Tensor::zeros(&[1, f]));
            p.insert(format!("l{l}.w2"), Tensor::randn(&[f, h], weight_std(f), rng));
            p.insert(format!("l{l}.b2"), Tensor::zeros(&[1, h]));
            p.insert(format!("l{l}.ln2.g"), Tensor::full(&[1, h], 1.0));
            p.insert(format!("l{l}.ln2.b"), Tensor::zeros(&[1, h]));
        }
        p.insert("mlm.w", Tensor::randn(&[h, h], weight_std(h), rng));
        p.insert("mlm.b", Tensor::zeros(&[1, h]));
        p.insert("mlm.ln.g", Tensor::full(&[1, h], 1.0));
        p.insert("mlm.ln.b", Tensor::zeros(&[1, h]));
        p.insert("mlm.bias", Tensor::zeros(&[1, config.vocab_size]));
        Ok(Self { config, params: p })
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        model.params.copy_values_from(&params)?;
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn slot(&self, name: &str) -> usize {
        self.params
            .index_of(name)
            .unwrap_or_else(|| panic!("encoder parameter {name} missing"))
    }

    fn layer_slots(&self, l: usize) -> LayerSlots {
        let s = |n: &str| self.slot(&format!("l{l}.{n}"));
        LayerSlots {
            wq: s("wq"),
            bq: s("bq"),
            wk: s("wk"),
            bk: s("bk"),
            wv: s("wv"),
            bv: s("bv"),
            wo: s("wo"),
            bo: s("bo"),
            ln1_g: s("ln1.g"),
            ln1_b: s("ln1.b"),
            w1: s("w1"),
            b1: s("b1"),
            w2: s("w2"),
            b2: s("b2"),
            ln2_g: s("ln2.g"),
            ln2_b: s("ln2.b"),
        }
    }

    /// Prompt count per layer implied by `prompts`.
    fn prompt_counts(&self, tape: &Tape, prompts: Option<&LayerPrompts>) -> Result<Vec<usize>> {
        let l = self.config.layers;
        let Some(p) = prompts else {
            return Ok(vec![0; l]);
        };
        if p.len() != l {
            return Err(Error::Dimension {
                op: "layer prompts",
                lhs: vec![l],
                rhs: vec![p.len()],
            });
        }
        p.iter()
            .map(|v| match v {
                None => Ok(0),
                Some(v) => {
                    let (r, c) = tape.dims(*v);
                    if c != self.config.hidden {
                        return Err(Error::Dimension {
                            op: "prompt width",
                            lhs: vec![r, c],
                            rhs: vec![self.config.hidden],
                        });
                    }
                    Ok(r)
                }
            })
            .collect()
    }

    /// Runs the encoder over `tokens`. `key_mask` marks real (non-pad)
    /// token positions; prompt positions are always attendable.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[usize],
        prompts: Option<&LayerPrompts>,
        key_mask: Option<&[bool]>,
    ) -> Result<EncoderOutput> {
        let cfg = &self.config;
        let counts = self.prompt_counts(tape, prompts)?;
        let budget = cfg.max_len - counts.iter().copied().max().unwrap_or(0);
        if tokens.is_empty() {
            return Err(Error::contract("empty token sequence"));
        }
        if tokens.len() > budget {
            return Err(Error::Length {
                len: tokens.len(),
                max: budget,
            });
        }
        if let Some(m) = key_mask {
            if m.len() != tokens.len() {
                return Err(Error::Dimension {
                    op: "key mask",
                    lhs: vec![tokens.len()],
                    rhs: vec![m.len()],
                });
            }
        }
        let tok = tape.gather(bound.get(self.slot("tok_emb")), tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather(bound.get(self.slot("pos_emb")), &positions)?;
        let x = tape.add(tok, pos)?;
        let mut x = tape.layer_norm(
            x,
            bound.get(self.slot("emb_ln.g")),
            bound.get(self.slot("emb_ln.b")),
            LN_EPS,
        )?;

        // Number of leading prompt rows currently carried in `x`.
        let mut carried = 0;
        let mut attention = Vec::with_capacity(cfg.layers);
        let mut seq_lens = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            if counts[l] > 0 {
                let p = prompts.and_then(|p| p[l]).expect("counted prompt");
                let (rows, _) = tape.dims(x);
                let body = tape.slice_rows(x, carried, rows)?;
                x = tape.concat_rows(&[p, body])?;
                carried = counts[l];
            }
            let mask = key_mask.map(|m| {
                let mut full = vec![true; carried];
                full.extend_from_slice(m);
                full
            });
            seq_lens.push(tape.dims(x).0);
            let (y, probs) = self.layer(tape, bound, l, x, mask.as_deref())?;
            x = y;
            attention.push(probs);
        }
        let (rows, _) = tape.dims(x);
        let hidden = if carried > 0 {
            tape.slice_rows(x, carried, rows)?
        } else {
            x
        };
        Ok(EncoderOutput {
            hidden,
            attention,
            seq_lens,
        })
    }

    fn layer(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        l: usize,
        x: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let s = self.layer_slots(l);
        let g = |i: usize| bound.get(i);
        let h = self.config.hidden;
        let heads = self.config.heads;
        let d = h / heads;
        let q = tape.linear(x, g(s.wq), g(s.bq))?;
        let k = tape.linear(x, g(s.wk), g(s.bk))?;
        let v = tape.linear(x, g(s.wv), g(s.bv))?;
        let scale = 1.0 / (d as f64).sqrt();
        let mut ctx = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (a, b) = (hd * d, (hd + 1) * d);
            let qh = tape.slice_cols(q, a, b)?;
            let kh = tape.slice_cols(k, a, b)?;
            let vh = tape.slice_cols(v, a, b)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let p = tape.softmax_rows(scores, mask);
            ctx.push(tape.matmul(p, vh)?);
            probs.push(p);
        }
        let ctx = if heads == 1 { ctx[0] } else { tape.concat_cols(&ctx)? };
        let attn = tape.linear(ctx, g(s.wo), g(s.bo))?;
        let res = tape.add(x, attn)?;
        let x1 = tape.layer_norm(res, g(s.ln1_g), g(s.ln1_b), LN_EPS)?;
        let f = tape.linear(x1, g(s.w1), g(s.b1))?;
        let f = tape.gelu(f);
        let f = tape.linear(f, g(s.w2), g(s.b2))?;
        let res = tape.add(x1, f)?;
        let out = tape.layer_norm(res, g(s.ln2_g), g(s.ln2_b), LN_EPS)?;
        Ok((out, probs))
    }

    /// Final state of the leading `[CLS]` token (1×H).
    pub fn encode_cls(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[usize],
        prompts: Option<&LayerPrompts>,
    ) -> Result<Var> {
        if tokens.first() != Some(&CLS) {
            return Err(Error::contract("token sequence must start with [CLS]"));
        }
        let out = self.forward(tape, bound, tokens, prompts, None)?;
        tape.select_rows(out.hidden, &[0])
    }

    /// MLM logits at `positions` of `hidden` (|positions|×vocab). The output
    /// projection is the transposed token embedding table.
    pub fn mlm_logits(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        hidden: Var,
        positions: &[usize],
    ) -> Result<Var> {
        let (rows, _) = tape.dims(hidden);
        if let Some(&bad) = positions.iter().find(|&&p| p >= rows) {
            return Err(Error::Index {
                what: "mlm position",
                index: bad,
                bound: rows,
            });
        }
        if positions.is_empty() {
            return Ok(tape.constant_rows(Vec::new(), 0, self.config.vocab_size));
        }
        let g = |n: &str| bound.get(self.slot(n));
        let sel = tape.select_rows(hidden, positions)?;
        let t = tape.linear(sel, g("mlm.w"), g("mlm.b"))?;
        let t = tape.gelu(t);
        let t = tape.layer_norm(t, g("mlm.ln.g"), g("mlm.ln.b"), LN_EPS)?;
        let logits = tape.matmul_nt(t, g("tok_emb"))?;
        tape.add_row(logits, g("mlm.bias"))
    }

    /// Mean of final token states over non-pad positions, computed with a
    /// throwaway tape. Used as a sentence embedding.
    pub fn mean_pooled(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&self.params)?;
        let ids: Vec<usize> = tokens.iter().copied().filter(|&t| t != PAD).collect();
        let out = self.forward(&mut tape, &bound, &ids, None, None)?;
        let m = tape.mean_rows(out.hidden);
        Ok(tape.value(m).to_vec())
    }
}

/// Linear 3-way classifier over the `[CLS]` state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub params: ParamStore,
}

impl ClassifierHead {
    pub const CLASSES: usize = 3;

    pub fn new<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        params.insert("cls.w", Tensor::randn(&[hidden, Self::CLASSES], INIT_STD, rng));
        params.insert("cls.b", Tensor::zeros(&[1, Self::CLASSES]));
        Self { params }
    }

    pub fn logits(&self, tape: &mut Tape, bound: &Bound, cls: Var) -> Result<Var> {
        tape.linear(cls, bound.get(0), bound.get(1))
    }
}

/// Shared linear map applied to both sides of the dual encoder before the
/// inner product, initialized near a scaled identity so initial scores are
/// mean per-dimension products.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub params: ParamStore,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let mut w = Tensor::randn(&[hidden, hidden], INIT_STD, rng);
        let scale = (hidden as f64).powf(-0.25);
        for i in 0..hidden {
            w.data_mut()[i * hidden + i] += scale;
        }
        params.insert("proj.w", w);
        Self { params }
    }

    pub fn project(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.matmul(x, bound.get(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(prompt_len: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            ffn: 32,
            vocab_size: 30,
            max_len: 24,
            prompt_len,
            prompt_hidden: 4,
        }
    }

    fn model(cfg: ModelConfig, seed: u64) -> EncoderModel {
        EncoderModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn config_invariants() {
        let mut c = tiny(2);
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(30);
        assert!(c.validate().is_err());
        c.prompt_len = 2;
        c.prompt_hidden = 17;
        assert!(c.validate().is_err());
    }

    #[test]
    fn parameter_census_matches_formula() {
        for cfg in [tiny(0), ModelConfig { layers: 3, ffn: 20, ..tiny(4) }] {
            let m = model(cfg, 1);
            assert_eq!(m.param_count(), cfg.param_count());
        }
    }

    #[test]
    fn prompt_shapes() {
        let cfg = ModelConfig { prompt_len: 4, ..tiny(4) };
        let m = model(cfg, 2);
        let mut tape = Tape::new();
        let b = tape.bind(&m.params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prompts: LayerPrompts = (0..2)
            .map(|_| Some(tape.constant(&Tensor::randn(&[4, 16], 1.0, &mut rng)).unwrap()))
            .collect();
        let toks: Vec<usize> = std::iter::once(CLS).chain(10..19).collect();
        let out = m.forward(&mut tape, &b, &toks, Some(&prompts), None).unwrap();
        assert_eq!(out.seq_lens, vec![14, 14]);
        assert_eq!(tape.dims(out.hidden), (10, 16));
    }

    #[test]
    fn no_prompts_is_plain_forward() {
        let m = model(tiny(0), 4);
        let toks = [CLS, 7, 8, 9];
        let mut t1 = Tape::new();
        let b1 = t1.bind(&m.params).unwrap();
        let a = m.forward(&mut t1, &b1, &toks, None, None).unwrap();
        let mut t2 = Tape::new();
        let b2 = t2.bind(&m.params).unwrap();
        let empty: LayerPrompts = vec![None, None];
        let b = m.forward(&mut t2, &b2, &toks, Some(&empty), None).unwrap();
        assert_eq!(t1.value(a.hidden), t2.value(b.hidden));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = model(tiny(0), 5);
        let mut tape = Tape::new();
        let b = tape.bind(&m.params).unwrap();
        let out = m.forward(&mut tape, &b, &[CLS, 5, 6, 7, 8], None, Some(&[true, true, true, false, false])).unwrap();
        for layer in &out.attention {
            for &p in layer {
                let (r, c) = tape.dims(p);
                for row in tape.value(p).chunks(c) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                    assert_eq!(row[3], 0.0);
                    assert_eq!(row[4], 0.0);
                }
                assert_eq!(r, 5);
            }
        }
    }

    #[test]
    fn padded_positions_do_not_leak() {
        let m = model(tiny(0), 6);
        let mask = [true, true, true, false, false];
        let run = |toks: &[usize]| {
            let mut tape = Tape::new();
            let b = tape.bind(&m.params).unwrap();
            let out = m.forward(&mut tape, &b, toks, None, Some(&mask)).unwrap();
            tape.value(out.hidden)[..3 * 16].to_vec()
        };
        let a = run(&[CLS, 5, 6, PAD, PAD]);
        let b = run(&[CLS, 5, 6, 11, 20]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn over_length_and_bad_token() {
        let m = model(tiny(0), 7);
        let mut tape = Tape::new();
        let b = tape.bind(&m.params).unwrap();
        let long = vec![CLS; 25];
        assert!(matches!(m.forward(&mut tape, &b, &long, None, None), Err(Error::Length { .. })));
        assert!(matches!(m.forward(&mut tape, &b, &[CLS, 30], None, None), Err(Error::Index { .. })));
    }

    #[test]
    fn encode_cls_needs_cls_and_is_row_zero() {
        let m = model(tiny(0), 8);
        let mut tape = Tape::new();
        let b = tape.bind(&m.params).unwrap();
        assert!(m.encode_cls(&mut tape, &b, &[7, 8], None).is_err());
        let c = m.encode_cls(&mut tape, &b, &[CLS, 7, 8], None).unwrap();
        let out = m.forward(&mut tape, &b, &[CLS, 7, 8], None, None).unwrap();
        assert_eq!(tape.value(c), &tape.value(out.hidden)[..16]);
        let c2 = m.encode_cls(&mut tape, &b, &[CLS, 7, 8], None).unwrap();
        assert_eq!(tape.value(c), tape.value(c2));
        let c3 = m.encode_cls(&mut tape, &b, &[CLS, 9, 8], None).unwrap();
        assert_ne!(tape.value(c), tape.value(c3));
    }

    #[test]
    fn mlm_logit_shapes() {
        let cfg = ModelConfig { vocab_size: 1000, ..tiny(0) };
        let m = model(cfg, 9);
        let mut tape = Tape::new();
        let b = tape.bind(&m.params).unwrap();
        let out = m.forward(&mut tape, &b, &[CLS, 5, 6, 7, 8], None, None).unwrap();
        let l = m.mlm_logits(&mut tape, &b, out.hidden, &[]).unwrap();
        assert_eq!(tape.dims(l), (0, 1000));
        let l = m.mlm_logits(&mut tape, &b, out.hidden, &[1, 2, 4]).unwrap();
        assert_eq!(tape.dims(l), (3, 1000));
        assert!(m.mlm_logits(&mut tape, &b, out.hidden, &[5]).is_err());
    }
}
