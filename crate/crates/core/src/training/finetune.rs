use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, HashtagInventory, Splits, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::{macro_f1, rank_eval};
use crate::personalization::plain_input;
use crate::seeding;
use crate::tensor::Var;

use super::step::{batches, Stepper};
use super::{Conditioned, Method, Pass, PersonalizedSystem, TrainConfig};

/// The hashtag inventory with each tag wrapped as `[CLS] tag [SEP]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HashtagData {
    pub inventory: HashtagInventory,
    pub tag_ids: Vec<Vec<usize>>,
}

impl HashtagData {
    pub fn new(inventory: HashtagInventory, vocab: &Vocab, max_len: usize) -> Result<Self> {
        let tag_ids = (0..inventory.len())
            .map(|i| plain_input(&inventory.tokens(i, vocab), max_len))
            .collect::<Result<_>>()?;
        Ok(Self { inventory, tag_ids })
    }

    pub fn len(&self) -> usize {
        self.tag_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tag_ids.is_empty()
    }
}

/// `k` distinct tag ids drawn uniformly from `0..n_tags` without `gold`.
pub fn sample_negatives<R: Rng + ?Sized>(gold: usize, n_tags: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if gold >= n_tags {
        return Err(Error::Index {
            what: "gold hashtag",
            index: gold,
            bound: n_tags,
        });
    }
    if k > n_tags - 1 {
        return Err(Error::contract(format!(
            "cannot draw {k} negatives from an inventory of {n_tags}"
        )));
    }
    Ok(rand::seq::index::sample(rng, n_tags - 1, k)
        .into_iter()
        .map(|i| if i >= gold { i + 1 } else { i })
        .collect())
}

/// Dev score of one (learning rate, epoch count) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub epochs: usize,
    pub dev: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub system: PersonalizedSystem,
    pub best: GridPoint,
    pub grid: Vec<GridPoint>,
    /// Mean loss over the first batches before any update.
    pub initial_loss: f64,
    /// Per-epoch training loss of the winning learning rate.
    pub epoch_losses: Vec<f64>,
}

fn route(e: &Example) -> Conditioned<'_> {
    Conditioned::Writer(&e.writer)
}

fn warm(sys: &mut PersonalizedSystem, splits: &Splits) -> Result<()> {
    if let Some(t) = sys.token_contexts_mut() {
        let all = splits.train.iter().chain(&splits.dev).chain(&splits.test);
        t.warm(all.map(|e| (e.writer.as_str(), e.tokens.as_slice())))?;
    }
    Ok(())
}

/// Trains one copy of `init` per learning rate up to the largest epoch
/// count, scoring dev at every count in `epochs`. The first strictly best
/// cell wins.
fn grid_search<E, D>(
    init: &PersonalizedSystem,
    train: &TrainConfig,
    epochs: &[usize],
    mut epoch: E,
    mut dev: D,
) -> Result<(PersonalizedSystem, GridPoint, Vec<GridPoint>, Vec<f64>)>
where
    E: FnMut(&mut PersonalizedSystem, &mut Stepper, &str) -> Result<f64>,
    D: FnMut(&PersonalizedSystem) -> Result<f64>,
{
    let max_epochs = epochs.iter().copied().max().unwrap_or(0);
    let mut best: Option<(PersonalizedSystem, GridPoint, Vec<f64>)> = None;
    let mut grid = Vec::new();
    for (li, &lr) in train.learning_rates.iter().enumerate() {
        let mut sys = init.clone();
        let was_trainable: Vec<bool> = sys.encoder.params.iter().map(|(_, t)| t.requires_grad).collect();
        if sys.method.freezes_encoder() {
            sys.encoder.params.set_trainable(false);
        }
        let mut stepper = Stepper::new(&sys, lr, train.clip_norm);
        let mut losses = Vec::with_capacity(max_epochs);
        for e in 1..=max_epochs {
            losses.push(epoch(&mut sys, &mut stepper, &format!("lr{li}/epoch{e}"))?);
            if !epochs.contains(&e) {
                continue;
            }
            let point = GridPoint {
                lr,
                epochs: e,
                dev: dev(&sys)?,
            };
            grid.push(point);
            if best.as_ref().is_none_or(|(_, b, _)| point.dev > b.dev) {
                let mut snapshot = sys.clone();
                for ((_, t), &rg) in snapshot.encoder.params.iter_mut().zip(&was_trainable) {
                    t.requires_grad = rg;
                }
                best = Some((snapshot, point, losses.clone()));
            }
        }
    }
    let (system, point, losses) = best.ok_or_else(|| Error::config("empty hyperparameter grid"))?;
    Ok((system, point, grid, losses))
}

/// Class predictions for `examples`, each conditioned by `route`.
pub fn predict_sentiment<'e, F>(sys: &PersonalizedSystem, examples: &'e [Example], route: F) -> Result<Vec<usize>>
where
    F: Fn(&'e Example) -> Conditioned<'e>,
{
    examples
        .iter()
        .map(|e| {
            let mut pass = Pass::new(sys, false)?;
            let c = pass.cls(route(e), &e.tokens)?;
            let l = pass.classify(c)?;
            let v = pass.tape.value(l);
            Ok((0..v.len()).fold(0, |b, j| if v[j] > v[b] { j } else { b }))
        })
        .collect()
}

fn gold_classes(examples: &[Example]) -> Result<Vec<usize>> {
    examples
        .iter()
        .map(|e| {
            e.label
                .class()
                .map(|c| c.index())
                .ok_or_else(|| Error::contract("sentiment training needs class labels"))
        })
        .collect()
}

fn dev_f1(sys: &PersonalizedSystem, dev: &[Example], gold: &[usize]) -> Result<f64> {
    let pred = predict_sentiment(sys, dev, route)?;
    macro_f1(&pred, gold, 3)
}

/// Mean cross-entropy of one batch of sentiment examples, on `pass`.
fn sentiment_batch(pass: &mut Pass<'_>, items: &[&Example], gold: &[usize]) -> Result<Var> {
    let mut logits = Vec::with_capacity(items.len());
    for e in items {
        let c = pass.cls(route(e), &e.tokens)?;
        logits.push(pass.classify(c)?);
    }
    let all = pass.tape.concat_rows(&logits)?;
    pass.tape.cross_entropy(all, gold)
}

/// Classifier fine-tuning with dev macro-F1 model selection. `soft_fix`
/// trains only prompts and head; every other method trains everything.
pub fn finetune_sentiment(init: &PersonalizedSystem, splits: &Splits, train: &TrainConfig) -> Result<Trained> {
    train.validate()?;
    if splits.train.is_empty() {
        return Err(Error::contract("no training examples"));
    }
    let mut init = init.clone();
    warm(&mut init, splits)?;
    let gold = gold_classes(&splits.train)?;
    let dev_gold = gold_classes(&splits.dev)?;
    let seed = init.seed;

    let initial_loss = {
        let order = batches(gold.len(), train.batch_size, seed, "initial");
        let mut total = 0.0;
        let take = order.len().min(10);
        for b in &order[..take] {
            let items: Vec<&Example> = b.iter().map(|&i| &splits.train[i]).collect();
            let g: Vec<usize> = b.iter().map(|&i| gold[i]).collect();
            let mut pass = Pass::new(&init, false)?;
            let l = sentiment_batch(&mut pass, &items, &g)?;
            total += pass.tape.value(l)[0];
        }
        total / take as f64
    };

    let epoch = |sys: &mut PersonalizedSystem, stepper: &mut Stepper, label: &str| -> Result<f64> {
        let order = batches(gold.len(), train.batch_size, seed, label);
        let nb = order.len();
        let mut total = 0.0;
        for b in order {
            let items: Vec<&Example> = b.iter().map(|&i| &splits.train[i]).collect();
            let g: Vec<usize> = b.iter().map(|&i| gold[i]).collect();
            let view: &PersonalizedSystem = sys;
            let mut pass = Pass::new(view, true)?;
            let loss = sentiment_batch(&mut pass, &items, &g)?;
            let (tape, bounds) = pass.into_parts();
            total += stepper.step(sys, &tape, &bounds, loss)?;
        }
        Ok(total / nb as f64)
    };
    let dev = |sys: &PersonalizedSystem| {
        if splits.dev.is_empty() {
            Ok(0.0)
        } else {
            dev_f1(sys, &splits.dev, &dev_gold)
        }
    };
    let (system, best, grid, epoch_losses) = grid_search(&init, train, &train.epochs, epoch, dev)?;
    Ok(Trained {
        system,
        best,
        grid,
        initial_loss,
        epoch_losses,
    })
}

/// Softmax loss of one batch: each tweet against its gold tag and `k`
/// fresh negatives. Tags are encoded without writer conditioning, once per
/// batch.
fn hashtag_batch<R: Rng>(
    pass: &mut Pass<'_>,
    items: &[&Example],
    data: &HashtagData,
    k: usize,
    rng: &mut R,
) -> Result<Var> {
    let mut cands = Vec::with_capacity(items.len());
    for e in items {
        let gold = e
            .label
            .hashtag()
            .ok_or_else(|| Error::contract("hashtag training needs hashtag labels"))?;
        let mut ids = vec![gold];
        ids.extend(sample_negatives(gold, data.len(), k, rng)?);
        cands.push(ids);
    }
    let mut tags: HashMap<usize, Var> = HashMap::new();
    for &t in cands.iter().flatten() {
        if let std::collections::hash_map::Entry::Vacant(slot) = tags.entry(t) {
            let c = pass.cls_ids(&data.tag_ids[t])?;
            slot.insert(pass.project(c)?);
        }
    }
    let mut rows = Vec::with_capacity(items.len());
    for (e, ids) in items.iter().zip(&cands) {
        let c = pass.cls(route(e), &e.tokens)?;
        let q = pass.project(c)?;
        let sel: Vec<Var> = ids.iter().map(|t| tags[t]).collect();
        let t = pass.tape.concat_rows(&sel)?;
        rows.push(pass.tape.matmul_nt(q, t)?);
    }
    let scores = pass.tape.concat_rows(&rows)?;
    pass.tape.cross_entropy(scores, &vec![0; items.len()])
}

/// Dual-encoder hashtag training with `k_train` negatives per example and
/// dev nDCG@5 model selection.
pub fn train_hashtag(init: &PersonalizedSystem, splits: &Splits, data: &HashtagData, train: &TrainConfig) -> Result<Trained> {
    train.validate()?;
    if data.len() < train.k_train + 1 {
        return Err(Error::contract(format!(
            "hashtag training needs at least {} distinct tags, inventory has {}",
            train.k_train + 1,
            data.len()
        )));
    }
    if splits.train.is_empty() {
        return Err(Error::contract("no training examples"));
    }
    let mut init = init.clone();
    warm(&mut init, splits)?;
    let seed = init.seed;
    let n = splits.train.len();

    let initial_loss = {
        let order = batches(n, train.batch_size, seed, "initial");
        let take = order.len().min(10);
        let mut total = 0.0;
        for (bi, b) in order[..take].iter().enumerate() {
            let items: Vec<&Example> = b.iter().map(|&i| &splits.train[i]).collect();
            let mut rng = seeding::rng(seed, &format!("initial/neg/{bi}"));
            let mut pass = Pass::new(&init, false)?;
            let l = hashtag_batch(&mut pass, &items, data, train.k_train, &mut rng)?;
            total += pass.tape.value(l)[0];
        }
        total / take as f64
    };

    let epoch = |sys: &mut PersonalizedSystem, stepper: &mut Stepper, label: &str| -> Result<f64> {
        let order = batches(n, train.batch_size, seed, label);
        let nb = order.len();
        let mut total = 0.0;
        for (bi, b) in order.into_iter().enumerate() {
            let items: Vec<&Example> = b.iter().map(|&i| &splits.train[i]).collect();
            let mut rng = seeding::rng(seed, &format!("{label}/neg/{bi}"));
            let view: &PersonalizedSystem = sys;
            let mut pass = Pass::new(view, true)?;
            let loss = hashtag_batch(&mut pass, &items, data, train.k_train, &mut rng)?;
            let (tape, bounds) = pass.into_parts();
            total += stepper.step(sys, &tape, &bounds, loss)?;
        }
        Ok(total / nb as f64)
    };
    let dev_seed = seeding::derive(seed, "hashtag-dev");
    let dev = |sys: &PersonalizedSystem| {
        if splits.dev.is_empty() {
            return Ok(0.0);
        }
        Ok(rank_eval(sys, &splits.dev, data, train.k_eval, dev_seed, route)?.mean_ndcg5())
    };
    let (system, best, grid, epoch_losses) = grid_search(&init, train, &train.epochs, epoch, dev)?;
    Ok(Trained {
        system,
        best,
        grid,
        initial_loss,
        epoch_losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriterwiseResult {
    pub per_writer: BTreeMap<String, GridPoint>,
    pub skipped: Vec<String>,
    /// Macro-F1 over the pooled test predictions of all per-writer models.
    pub test_macro_f1: f64,
    pub predictions: Vec<usize>,
    pub golds: Vec<usize>,
    /// Bytes of one full checkpoint per writer.
    pub writerwise_bytes: usize,
}

/// Independent fine-tuning of a copy of `base` per writer on that writer's
/// own examples. Each copy's randomness is keyed by the writer, so the
/// order of `writers` has no effect on any model.
pub fn writerwise_finetune(
    base: &PersonalizedSystem,
    writers: &[String],
    splits: &Splits,
    train: &TrainConfig,
) -> Result<WriterwiseResult> {
    if base.method != Method::FineTuning {
        return Err(Error::config("writer-wise fine-tuning starts from a fine_tuning system"));
    }
    let of = |v: &[Example], w: &str| v.iter().filter(|e| e.writer == w).cloned().collect::<Vec<_>>();
    let mut order: Vec<&String> = writers.iter().collect();
    order.sort();
    order.dedup();
    let mut per_writer = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut predictions = Vec::new();
    let mut golds = Vec::new();
    for w in order {
        let sub = Splits {
            train: of(&splits.train, w),
            dev: of(&splits.dev, w),
            test: of(&splits.test, w),
            warnings: Vec::new(),
        };
        if sub.train.is_empty() {
            skipped.push(w.clone());
            continue;
        }
        let mut init = base.clone();
        init.seed = seeding::derive(base.seed, &format!("writer/{w}"));
        let t = finetune_sentiment(&init, &sub, train)?;
        predictions.extend(predict_sentiment(&t.system, &sub.test, route)?);
        golds.extend(gold_classes(&sub.test)?);
        per_writer.insert(w.clone(), t.best);
    }
    let test_macro_f1 = macro_f1(&predictions, &golds, 3)?;
    Ok(WriterwiseResult {
        writerwise_bytes: per_writer.len() * base.full_param_bytes(),
        per_writer,
        skipped,
        test_macro_f1,
        predictions,
        golds,
    })
}
