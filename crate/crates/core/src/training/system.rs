use std::collections::{BTreeMap, HashMap};

use crate::corpus::{Histories, Warning, WriterHistory};
use crate::encoder::{ClassifierHead, EncoderModel, LayerPrompts, ProjectionHead};
use crate::error::{Error, Result};
use crate::personalization::{
    build_static_hard_prompt, build_user_identifier, dynamic_context, extend_input, plain_input,
    EncoderEmbedder, HardPromptMode, HardPromptPlan, PromptCache, SoftPromptStore, TextEmbedder,
    UserAdapterStore,
};
use crate::seeding;
use crate::tensor::{Bound, ParamStore, Tape, Var};

use super::{Method, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum TaskHead {
    /// MLM-only systems.
    None,
    Classifier(ClassifierHead),
    Projection(ProjectionHead),
}

impl TaskHead {
    pub fn params(&self) -> Option<&ParamStore> {
        match self {
            TaskHead::None => None,
            TaskHead::Classifier(h) => Some(&h.params),
            TaskHead::Projection(h) => Some(&h.params),
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ParamStore> {
        match self {
            TaskHead::None => None,
            TaskHead::Classifier(h) => Some(&mut h.params),
            TaskHead::Projection(h) => Some(&mut h.params),
        }
    }
}

/// Token contexts for the hard-prompt methods.
#[derive(Debug, Clone)]
pub struct TokenContexts {
    pub plan: HardPromptPlan,
    /// Static contexts or identifiers of known writers.
    pub fixed: PromptCache,
    histories: Histories,
    /// Base-encoder embeddings of known writers' history texts.
    history_emb: BTreeMap<String, Vec<Vec<f64>>>,
    embedder: Option<EncoderModel>,
    dynamic_cache: HashMap<(String, Vec<usize>), Vec<usize>>,
    vocab_size: usize,
}

impl TokenContexts {
    fn history(&self, writer: &str) -> Result<&WriterHistory> {
        self.histories
            .get(writer)
            .ok_or_else(|| Error::UnknownWriter(writer.to_string()))
    }

    fn embed_history(&self, writer: &str) -> Result<Vec<Vec<f64>>> {
        if let Some(e) = self.history_emb.get(writer) {
            return Ok(e.clone());
        }
        let emb = EncoderEmbedder {
            model: self.embedder.as_ref().expect("dynamic contexts carry an embedder"),
        };
        self.history(writer)?.texts.iter().map(|t| emb.embed(t)).collect()
    }

    fn dynamic(&self, writer: &str, x: &[usize], skip: Option<usize>) -> Result<Vec<usize>> {
        if skip.is_none() {
            if let Some(c) = self.dynamic_cache.get(&(writer.to_string(), x.to_vec())) {
                return Ok(c.clone());
            }
        }
        let emb = EncoderEmbedder {
            model: self.embedder.as_ref().expect("dynamic contexts carry an embedder"),
        };
        let mut h = self.history(writer)?.clone();
        let mut e = self.embed_history(writer)?;
        if let Some(i) = skip {
            if i < h.texts.len() {
                h.texts.remove(i);
                e.remove(i);
            }
        }
        if h.texts.is_empty() {
            return Ok(Vec::new());
        }
        dynamic_context(&h, &e, &emb.embed(x)?, &self.plan)
    }

    /// Context for a known writer's own input.
    fn own(&self, writer: &str, x: &[usize], skip: Option<usize>) -> Result<Vec<usize>> {
        match self.plan.mode {
            HardPromptMode::Dynamic => self.dynamic(writer, x, skip),
            _ => self
                .fixed
                .get(writer)
                .map(<[usize]>::to_vec)
                .ok_or_else(|| Error::UnknownWriter(writer.to_string())),
        }
    }

    /// Context built on the fly for a writer never seen in training.
    fn fresh(&self, writer: &str, x: &[usize]) -> Result<Vec<usize>> {
        match self.plan.mode {
            HardPromptMode::Static => Ok(build_static_hard_prompt(self.history(writer)?, &self.plan).0),
            HardPromptMode::Dynamic => self.dynamic(writer, x, None),
            HardPromptMode::UserIdentifier => build_user_identifier(writer, &self.plan, self.vocab_size),
        }
    }

    /// Precomputes dynamic contexts for known-writer inputs.
    pub fn warm<'a, I>(&mut self, items: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a [usize])>,
    {
        if self.plan.mode != HardPromptMode::Dynamic {
            return Ok(());
        }
        for (w, x) in items {
            let key = (w.to_string(), x.to_vec());
            if !self.dynamic_cache.contains_key(&key) {
                let c = self.dynamic(w, x, None)?;
                self.dynamic_cache.insert(key, c);
            }
        }
        Ok(())
    }

    pub fn add_histories(&mut self, histories: &Histories) {
        for (w, h) in histories {
            self.histories.entry(w.clone()).or_insert_with(|| h.clone());
        }
    }
}

#[derive(Debug, Clone)]
pub enum Conditioning {
    None,
    Soft(SoftPromptStore),
    Adapter(UserAdapterStore),
    Tokens(TokenContexts),
}

/// Whose signal conditions an input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioned<'a> {
    /// A known writer's trained prompts or cached context.
    Writer(&'a str),
    /// A known writer's history text, with that text left out of its own
    /// dynamic context.
    History(&'a str, usize),
    /// No writer signal at all.
    Plain,
    /// A writer outside training: prompts built on the fly.
    Fresh(&'a str),
}

/// Encoder, task head and writer conditioning for one method.
#[derive(Debug, Clone)]
pub struct PersonalizedSystem {
    pub method: Method,
    pub encoder: EncoderModel,
    pub head: TaskHead,
    pub cond: Conditioning,
    pub seed: u64,
}

impl PersonalizedSystem {
    /// Builds the writer conditioning of `method` on top of `base`. Hard
    /// contexts come from `histories`; writers with an empty history get an
    /// empty context and a warning.
    pub fn new(
        method: Method,
        base: &EncoderModel,
        head: TaskHead,
        writers: &[String],
        histories: &Histories,
        train: &TrainConfig,
        seed: u64,
    ) -> Result<(Self, Vec<Warning>)> {
        let cfg = &base.config;
        let mut warnings = Vec::new();
        let mut rng = seeding::rng(seed, "prompts");
        let tokens = |mode| {
            let plan = HardPromptPlan {
                mode,
                per_text: train.per_text,
                prompt_token_length: train.prompt_token_length,
                seed,
            };
            plan.validate(cfg.max_len)?;
            let known: Histories = writers
                .iter()
                .map(|w| {
                    let h = histories.get(w).cloned().unwrap_or_else(|| WriterHistory {
                        writer: w.clone(),
                        texts: Vec::new(),
                    });
                    (w.clone(), h)
                })
                .collect();
            Ok::<_, Error>(TokenContexts {
                plan,
                fixed: PromptCache::default(),
                histories: known,
                history_emb: BTreeMap::new(),
                embedder: None,
                dynamic_cache: HashMap::new(),
                vocab_size: cfg.vocab_size,
            })
        };
        let cond = match method {
            Method::FineTuning => Conditioning::None,
            Method::SoftFix | Method::SoftUpdate => Conditioning::Soft(SoftPromptStore::new(cfg, writers, &mut rng)?),
            Method::UserAdapter => Conditioning::Adapter(UserAdapterStore::new(cfg, writers, &mut rng)),
            Method::HardStatic => {
                let mut t = tokens(HardPromptMode::Static)?;
                let (cache, w) = PromptCache::static_contexts(t.histories.values(), &t.plan);
                t.fixed = cache;
                warnings.extend(w);
                Conditioning::Tokens(t)
            }
            Method::HardDynamic => {
                let mut t = tokens(HardPromptMode::Dynamic)?;
                let emb = EncoderEmbedder { model: base };
                for (w, h) in &t.histories {
                    if h.texts.is_empty() {
                        warnings.push(Warning {
                            writer: w.clone(),
                            reason: "empty history".into(),
                        });
                    }
                    let e = h.texts.iter().map(|x| emb.embed(x)).collect::<Result<Vec<_>>>()?;
                    t.history_emb.insert(w.clone(), e);
                }
                t.embedder = Some(base.clone());
                Conditioning::Tokens(t)
            }
            Method::UserIdentifier => {
                let mut t = tokens(HardPromptMode::UserIdentifier)?;
                t.fixed = PromptCache::identifiers(writers, &t.plan, cfg.vocab_size)?;
                Conditioning::Tokens(t)
            }
        };
        let sys = Self {
            method,
            encoder: base.clone(),
            head,
            cond,
            seed,
        };
        Ok((sys, warnings))
    }

    pub fn prompt_params(&self) -> Option<&ParamStore> {
        match &self.cond {
            Conditioning::Soft(s) => Some(&s.params),
            Conditioning::Adapter(a) => Some(&a.params),
            _ => None,
        }
    }

    pub fn prompt_params_mut(&mut self) -> Option<&mut ParamStore> {
        match &mut self.cond {
            Conditioning::Soft(s) => Some(&mut s.params),
            Conditioning::Adapter(a) => Some(&mut a.params),
            _ => None,
        }
    }

    pub fn token_contexts(&self) -> Option<&TokenContexts> {
        match &self.cond {
            Conditioning::Tokens(t) => Some(t),
            _ => None,
        }
    }

    pub fn token_contexts_mut(&mut self) -> Option<&mut TokenContexts> {
        match &mut self.cond {
            Conditioning::Tokens(t) => Some(t),
            _ => None,
        }
    }

    /// A bare encoder with no head and no writer conditioning.
    pub fn plain(encoder: EncoderModel, seed: u64) -> Self {
        Self {
            method: Method::FineTuning,
            encoder,
            head: TaskHead::None,
            cond: Conditioning::None,
            seed,
        }
    }

    /// Encoder, head and prompt stores, in binding order.
    pub fn stores(&self) -> Vec<&ParamStore> {
        let mut v = vec![&self.encoder.params];
        v.extend(self.head.params());
        v.extend(self.prompt_params());
        v
    }

    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let prompts = match &mut self.cond {
            Conditioning::Soft(s) => Some(&mut s.params),
            Conditioning::Adapter(a) => Some(&mut a.params),
            _ => None,
        };
        let mut v = vec![&mut self.encoder.params];
        v.extend(self.head.params_mut());
        v.extend(prompts);
        v
    }

    /// Token context for `who`, `None` for methods without one.
    pub fn context(&self, who: Conditioned<'_>, x: &[usize]) -> Result<Option<Vec<usize>>> {
        let Conditioning::Tokens(t) = &self.cond else {
            return Ok(None);
        };
        Ok(Some(match who {
            Conditioned::Plain => Vec::new(),
            Conditioned::Writer(w) => t.own(w, x, None)?,
            Conditioned::History(w, i) => t.own(w, x, Some(i))?,
            Conditioned::Fresh(w) => t.fresh(w, x)?,
        }))
    }

    /// Size in bytes of the per-writer parameters that must be stored on top
    /// of one shared encoder.
    pub fn writer_param_bytes(&self) -> Result<usize> {
        Ok(match &self.cond {
            Conditioning::Soft(s) => s.materialize_all()?.len() * 8,
            Conditioning::Adapter(a) => a.params.count() * 8,
            Conditioning::Tokens(t) => t.fixed.len() * t.plan.prompt_token_length * 8,
            Conditioning::None => 0,
        })
    }

    pub fn full_param_bytes(&self) -> usize {
        self.stores().iter().map(|s| s.count() * 8).sum()
    }
}

/// One tape with the system's parameters bound on it.
pub struct Pass<'s> {
    sys: &'s PersonalizedSystem,
    pub tape: Tape,
    bounds: Vec<Bound>,
    head: Option<usize>,
    cond: Option<usize>,
    prompts: HashMap<String, LayerPrompts>,
}

impl<'s> Pass<'s> {
    /// `train` binds trainable parameters as differentiable leaves.
    pub fn new(sys: &'s PersonalizedSystem, train: bool) -> Result<Self> {
        let mut tape = Tape::new();
        let bounds = sys
            .stores()
            .into_iter()
            .map(|s| if train { tape.bind(s) } else { tape.bind_frozen(s) })
            .collect::<Result<Vec<_>>>()?;
        let head = sys.head.params().map(|_| 1);
        let cond = sys.prompt_params().map(|_| bounds.len() - 1);
        Ok(Self {
            sys,
            tape,
            bounds,
            head,
            cond,
            prompts: HashMap::new(),
        })
    }

    pub fn bounds(&self) -> &[Bound] {
        &self.bounds
    }

    /// The tape and bindings, for a backward sweep and an optimizer step.
    pub fn into_parts(self) -> (Tape, Vec<Bound>) {
        (self.tape, self.bounds)
    }

    fn cond_bound(&self) -> &Bound {
        &self.bounds[self.cond.expect("prompt store bound")]
    }

    fn head_bound(&self) -> Result<&Bound> {
        self.head
            .map(|i| &self.bounds[i])
            .ok_or_else(|| Error::contract("system has no task head"))
    }

    fn layer_prompts(&mut self, who: Conditioned<'_>) -> Result<Option<LayerPrompts>> {
        let key = match who {
            Conditioned::Plain => return Ok(None),
            Conditioned::Writer(w) | Conditioned::History(w, _) => format!("k/{w}"),
            Conditioned::Fresh(w) => format!("f/{w}"),
        };
        if let Some(p) = self.prompts.get(&key) {
            return Ok(Some(p.clone()));
        }
        let sys = self.sys;
        let fresh_rng = |w: &str| seeding::rng(sys.seed, &format!("fresh-prompts/{w}"));
        let p = match (&sys.cond, who) {
            (Conditioning::Soft(s), Conditioned::Fresh(w)) => {
                let b = self.cond_bound().clone();
                s.sampled_prompts(&mut self.tape, &b, &mut fresh_rng(w))?
            }
            (Conditioning::Soft(s), Conditioned::Writer(w) | Conditioned::History(w, _)) => {
                let b = self.cond_bound().clone();
                s.layer_prompts(&mut self.tape, &b, w)?
            }
            (Conditioning::Adapter(a), Conditioned::Fresh(w)) => a.sampled_prompts(&mut self.tape, &mut fresh_rng(w))?,
            (Conditioning::Adapter(a), Conditioned::Writer(w) | Conditioned::History(w, _)) => {
                let b = self.cond_bound().clone();
                a.layer_prompts(&mut self.tape, &b, w)?
            }
            _ => return Ok(None),
        };
        self.prompts.insert(key, p.clone());
        Ok(Some(p))
    }

    fn prompt_count(&self, prompts: &Option<LayerPrompts>) -> usize {
        prompts
            .as_ref()
            .map(|p| p.iter().flatten().map(|v| self.tape.dims(*v).0).max().unwrap_or(0))
            .unwrap_or(0)
    }

    /// Final token ids and prompts for input `x` (no specials) of `who`.
    pub fn input(&mut self, who: Conditioned<'_>, x: &[usize]) -> Result<(Vec<usize>, Option<LayerPrompts>)> {
        let max_len = self.sys.encoder.config.max_len;
        let prompts = self.layer_prompts(who)?;
        let ids = match self.sys.context(who, x)? {
            Some(ctx) => extend_input(x, &ctx, max_len)?,
            None => plain_input(x, max_len - self.prompt_count(&prompts))?,
        };
        Ok((ids, prompts))
    }

    pub fn forward_hidden(&mut self, ids: &[usize], prompts: Option<&LayerPrompts>) -> Result<Var> {
        Ok(self
            .sys
            .encoder
            .forward(&mut self.tape, &self.bounds[0], ids, prompts, None)?
            .hidden)
    }

    /// `[CLS]` state of `x` conditioned on `who` (1×H).
    pub fn cls(&mut self, who: Conditioned<'_>, x: &[usize]) -> Result<Var> {
        let (ids, prompts) = self.input(who, x)?;
        self.sys
            .encoder
            .encode_cls(&mut self.tape, &self.bounds[0], &ids, prompts.as_ref())
    }

    /// `[CLS]` state of an unconditioned, already wrapped sequence.
    pub fn cls_ids(&mut self, ids: &[usize]) -> Result<Var> {
        self.sys.encoder.encode_cls(&mut self.tape, &self.bounds[0], ids, None)
    }

    pub fn mlm_logits(&mut self, hidden: Var, positions: &[usize]) -> Result<Var> {
        self.sys
            .encoder
            .mlm_logits(&mut self.tape, &self.bounds[0], hidden, positions)
    }

    pub fn classify(&mut self, cls: Var) -> Result<Var> {
        let b = self.head_bound()?.clone();
        match &self.sys.head {
            TaskHead::Classifier(h) => h.logits(&mut self.tape, &b, cls),
            _ => Err(Error::contract("system has no classifier head")),
        }
    }

    pub fn project(&mut self, x: Var) -> Result<Var> {
        let b = self.head_bound()?.clone();
        match &self.sys.head {
            TaskHead::Projection(h) => h.project(&mut self.tape, &b, x),
            _ => Err(Error::contract("system has no projection head")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::{CLS, SEP};
    use crate::encoder::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(method: Method) -> PersonalizedSystem {
        let cfg = ModelConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            ffn: 32,
            vocab_size: 40,
            max_len: 32,
            prompt_len: 3,
            prompt_hidden: 4,
        };
        let enc = EncoderModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let head = TaskHead::Classifier(ClassifierHead::new(16, &mut ChaCha8Rng::seed_from_u64(2)));
        let writers = vec!["a".to_string(), "b".to_string()];
        let mut h = Histories::new();
        for w in &writers {
            h.insert(
                w.clone(),
                WriterHistory {
                    writer: w.clone(),
                    texts: vec![vec![10, 11, 12, 13, 14, 15], vec![20, 21, 22, 23, 24, 25]],
                },
            );
        }
        PersonalizedSystem::new(method, &enc, head, &writers, &h, &TrainConfig::default(), 5)
            .unwrap()
            .0
    }

    #[test]
    fn every_method_builds_inputs() {
        for m in Method::ALL {
            let sys = setup(m);
            let mut p = Pass::new(&sys, true).unwrap();
            let (ids, prompts) = p.input(Conditioned::Writer("a"), &[30, 31]).unwrap();
            assert_eq!(ids[0], CLS);
            assert_eq!(*ids.last().unwrap(), SEP);
            assert_eq!(prompts.is_some(), m.is_soft(), "{m:?}");
            if m.is_hard() {
                let ctx = sys.context(Conditioned::Writer("a"), &[30, 31]).unwrap().unwrap();
                let expected = if m == Method::UserIdentifier { 16 } else { 8 };
                assert_eq!(ctx.len(), expected, "{m:?}");
                assert_eq!(ids.len(), 2 + ctx.len() + 3, "{m:?}");
            } else {
                assert_eq!(ids, vec![CLS, 30, 31, SEP]);
            }
            let cls = p.cls(Conditioned::Writer("b"), &[30, 31]).unwrap();
            assert_eq!(p.tape.dims(cls), (1, 16));
            p.cls(Conditioned::Plain, &[30]).unwrap();
            assert!(p.cls(Conditioned::Writer("zz"), &[30]).is_err() || m == Method::FineTuning);
        }
    }

    #[test]
    fn stores_follow_method() {
        assert_eq!(setup(Method::FineTuning).stores().len(), 2);
        assert_eq!(setup(Method::HardStatic).stores().len(), 2);
        assert_eq!(setup(Method::SoftFix).stores().len(), 3);
        assert_eq!(setup(Method::UserAdapter).stores().len(), 3);
    }

    #[test]
    fn history_input_leaves_itself_out_of_dynamic_context() {
        let sys = setup(Method::HardDynamic);
        let x = vec![10, 11, 12, 13, 14, 15];
        let own = sys.context(Conditioned::Writer("a"), &x).unwrap().unwrap();
        assert_eq!(&own[..4], &[10, 11, 12, 13]);
        let held = sys.context(Conditioned::History("a", 0), &x).unwrap().unwrap();
        assert_eq!(held, vec![20, 21, 22, 23]);
    }
}
