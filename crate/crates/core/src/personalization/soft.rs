use rand::Rng;

use crate::encoder::{LayerPrompts, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

const P_INIT_STD: f64 = 0.02;

/// Writer prompts for every layer, produced as `P = MLP(P′)`.
///
/// `P′` has `L·M` rows per writer, laid out writer-major: writer `u` owns
/// rows `u·L·M .. (u+1)·L·M`, and within that block row `l·M + m` is the
/// `m`-th prompt of layer `l`. The MLP (H′ → 2H′ → H, tanh) is shared.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPromptStore {
    pub layers: usize,
    pub prompt_len: usize,
    pub hidden: usize,
    pub prompt_hidden: usize,
    writers: Vec<String>,
    pub params: ParamStore,
}

const P_PRIME: usize = 0;
const W1: usize = 1;
const B1: usize = 2;
const W2: usize = 3;
const B2: usize = 4;

impl SoftPromptStore {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, writers: &[String], rng: &mut R) -> Result<Self> {
        if cfg.prompt_len == 0 {
            return Err(Error::config("soft prompts need prompt_len >= 1"));
        }
        let (l, m, h, hp) = (cfg.layers, cfg.prompt_len, cfg.hidden, cfg.prompt_hidden.max(1));
        let mid = 2 * hp;
        let rows = l * m * writers.len();
        let mut params = ParamStore::new();
        params.insert("p_prime", Tensor::randn(&[rows, hp], P_INIT_STD, rng));
        params.insert("mlp.w1", Tensor::randn(&[hp, mid], 1.0 / (hp as f64).sqrt(), rng));
        params.insert("mlp.b1", Tensor::zeros(&[1, mid]));
        params.insert("mlp.w2", Tensor::randn(&[mid, h], 1.0 / (mid as f64).sqrt(), rng));
        params.insert("mlp.b2", Tensor::zeros(&[1, h]));
        Ok(Self {
            layers: l,
            prompt_len: m,
            hidden: h,
            prompt_hidden: hp,
            writers: writers.to_vec(),
            params,
        })
    }

    pub fn writers(&self) -> &[String] {
        &self.writers
    }

    pub fn writer_index(&self, writer: &str) -> Result<usize> {
        self.writers
            .iter()
            .position(|w| w == writer)
            .ok_or_else(|| Error::UnknownWriter(writer.to_string()))
    }

    pub fn rows_per_writer(&self) -> usize {
        self.layers * self.prompt_len
    }

    /// Row range of `P′` owned by `writer`.
    pub fn rows_of(&self, writer: &str) -> Result<std::ops::Range<usize>> {
        let u = self.writer_index(writer)?;
        let k = self.rows_per_writer();
        Ok(u * k..(u + 1) * k)
    }

    fn mlp(&self, tape: &mut Tape, bound: &Bound, rows: Var) -> Result<Var> {
        let h = tape.linear(rows, bound.get(W1), bound.get(B1))?;
        let h = tape.tanh(h);
        tape.linear(h, bound.get(W2), bound.get(B2))
    }

    fn split_layers(&self, tape: &mut Tape, block: Var) -> Result<LayerPrompts> {
        let m = self.prompt_len;
        (0..self.layers)
            .map(|l| tape.slice_rows(block, l * m, (l + 1) * m).map(Some))
            .collect()
    }

    /// Differentiable per-layer prompts for `writer`.
    pub fn layer_prompts(&self, tape: &mut Tape, bound: &Bound, writer: &str) -> Result<LayerPrompts> {
        let r = self.rows_of(writer)?;
        let rows = tape.slice_rows(bound.get(P_PRIME), r.start, r.end)?;
        let block = self.mlp(tape, bound, rows)?;
        self.split_layers(tape, block)
    }

    /// Prompts from `P′` rows drawn fresh from the initialization
    /// distribution, passed through the trained MLP.
    pub fn sampled_prompts<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        rng: &mut R,
    ) -> Result<LayerPrompts> {
        let fresh = Tensor::randn(&[self.rows_per_writer(), self.prompt_hidden], P_INIT_STD, rng);
        let rows = tape.constant(&fresh)?;
        let block = self.mlp(tape, bound, rows)?;
        self.split_layers(tape, block)
    }

    /// `writer`'s prompt block as an `L×M×H` tensor.
    pub fn materialize_block(&self, writer: &str) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&self.params)?;
        let r = self.rows_of(writer)?;
        let rows = tape.slice_rows(bound.get(P_PRIME), r.start, r.end)?;
        let block = self.mlp(&mut tape, &bound, rows)?;
        tape.to_tensor(block)
            .reshape(vec![self.layers, self.prompt_len, self.hidden])
    }

    /// The full transformed matrix `P` ((L·M·|U|)×H), the only prompt
    /// artifact that needs saving after training.
    pub fn materialize_all(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = tape.bind_frozen(&self.params)?;
        let p = self.mlp(&mut tape, &bound, bound.get(P_PRIME))?;
        Ok(tape.to_tensor(p))
    }
}

/// One trainable H-vector per writer, inserted at the input layer only.
#[derive(Debug, Clone, PartialEq)]
pub struct UserAdapterStore {
    pub layers: usize,
    pub hidden: usize,
    writers: Vec<String>,
    pub params: ParamStore,
}

impl UserAdapterStore {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, writers: &[String], rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        params.insert("adapter", Tensor::randn(&[writers.len(), cfg.hidden], P_INIT_STD, rng));
        Self {
            layers: cfg.layers,
            hidden: cfg.hidden,
            writers: writers.to_vec(),
            params,
        }
    }

    pub fn writers(&self) -> &[String] {
        &self.writers
    }

    pub fn writer_index(&self, writer: &str) -> Result<usize> {
        self.writers
            .iter()
            .position(|w| w == writer)
            .ok_or_else(|| Error::UnknownWriter(writer.to_string()))
    }

    pub fn params_per_writer(&self) -> usize {
        self.hidden
    }

    fn spread(&self, first: Var) -> LayerPrompts {
        let mut out: LayerPrompts = vec![None; self.layers];
        out[0] = Some(first);
        out
    }

    pub fn layer_prompts(&self, tape: &mut Tape, bound: &Bound, writer: &str) -> Result<LayerPrompts> {
        let u = self.writer_index(writer)?;
        let row = tape.slice_rows(bound.get(0), u, u + 1)?;
        Ok(self.spread(row))
    }

    pub fn sampled_prompts<R: Rng + ?Sized>(&self, tape: &mut Tape, rng: &mut R) -> Result<LayerPrompts> {
        let row = tape.constant(&Tensor::randn(&[1, self.hidden], P_INIT_STD, rng))?;
        Ok(self.spread(row))
    }

    /// Layer-0 vector of `writer`.
    pub fn vector(&self, writer: &str) -> Result<&[f64]> {
        let u = self.writer_index(writer)?;
        Ok(self.params.tensor(0).row(u))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn: 64,
            vocab_size: 40,
            max_len: 32,
            prompt_len: 4,
            prompt_hidden: 8,
        }
    }

    fn writers(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    #[test]
    fn block_shape_and_unknown_writer() {
        let s = SoftPromptStore::new(&cfg(), &writers(3), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s.materialize_block("w1").unwrap().shape(), &[2, 4, 64]);
        assert_eq!(s.params.get("p_prime").unwrap().shape(), &[2 * 4 * 3, 8]);
        assert_eq!(s.materialize_all().unwrap().shape(), &[24, 64]);
        assert!(matches!(s.materialize_block("nobody"), Err(Error::UnknownWriter(_))));
    }

    #[test]
    fn zero_rows_and_bias_give_zero_block() {
        let mut s = SoftPromptStore::new(&cfg(), &writers(2), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        s.params.tensor_mut(P_PRIME).data_mut().fill(0.0);
        let b = s.materialize_block("w0").unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blocks_partition_rows_and_are_writer_local() {
        let mut s = SoftPromptStore::new(&cfg(), &writers(3), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut covered = vec![0; 24];
        for w in s.writers().to_vec() {
            for r in s.rows_of(&w).unwrap() {
                covered[r] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
        let before = s.materialize_block("w0").unwrap();
        let r = s.rows_of("w2").unwrap();
        let hp = s.prompt_hidden;
        for v in &mut s.params.tensor_mut(P_PRIME).data_mut()[r.start * hp..r.end * hp] {
            *v += 0.5;
        }
        assert_eq!(before, s.materialize_block("w0").unwrap());
        assert_ne!(s.materialize_block("w2").unwrap(), before);
    }

    #[test]
    fn p_prime_gradient_matches_finite_differences() {
        let small = ModelConfig { hidden: 8, prompt_hidden: 3, prompt_len: 2, ..cfg() };
        let s = SoftPromptStore::new(&small, &writers(2), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let weights = Tensor::randn(&[2, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let loss_of = |store: &SoftPromptStore, tape: &mut Tape| -> (Bound, Var) {
            let bound = tape.bind(&store.params).unwrap();
            let p = store.layer_prompts(tape, &bound, "w1").unwrap();
            let w = tape.constant(&weights).unwrap();
            let a = tape.mul(p[0].unwrap(), w).unwrap();
            let b = tape.mul(p[1].unwrap(), p[1].unwrap()).unwrap();
            let a = tape.sum(a);
            let b = tape.sum(b);
            (bound, tape.add(a, b).unwrap())
        };
        let mut tape = Tape::new();
        let (bound, loss) = loss_of(&s, &mut tape);
        let grads = tape.backward(loss).unwrap();
        for slot in 0..s.params.len() {
            let g = grads.get(bound.get(slot)).unwrap().to_vec();
            for i in 0..g.len() {
                let eval = |d: f64| {
                    let mut p = s.clone();
                    p.params.tensor_mut(slot).data_mut()[i] += d;
                    let mut t = Tape::new();
                    let (_, l) = loss_of(&p, &mut t);
                    t.value(l)[0]
                };
                let h = 1e-5;
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (g[i] - num).abs() / num.abs().max(g[i].abs()).max(1e-3);
                assert!(err < 1e-4, "slot {slot}[{i}] {} vs {num}", g[i]);
            }
        }
    }

    #[test]
    fn adapter_only_layer_zero() {
        let a = UserAdapterStore::new(&cfg(), &writers(3), &mut ChaCha8Rng::seed_from_u64(6));
        let mut tape = Tape::new();
        let b = tape.bind(&a.params).unwrap();
        let p = a.layer_prompts(&mut tape, &b, "w2").unwrap();
        let counts: Vec<usize> = p.iter().map(|v| v.map_or(0, |v| tape.dims(v).0)).collect();
        assert_eq!(counts, vec![1, 0]);
        assert_eq!(a.params_per_writer(), 64);
        assert_eq!(a.params.count(), 3 * 64);
    }
}
