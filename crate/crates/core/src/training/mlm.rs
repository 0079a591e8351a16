use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{Vocab, MASK};
use crate::corpus::{Histories, Warning};
use crate::encoder::{EncoderModel, ModelConfig};
use crate::error::{Error, Result};
use crate::personalization::plain_input;
use crate::seeding;

use super::step::{batches, Stepper};
use super::{Conditioned, Pass, PersonalizedSystem, TrainConfig};

/// A sequence with some positions replaced by `[MASK]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Masked {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Replaces each non-special token with `[MASK]` with probability `p`.
/// When nothing is drawn, one maskable position is masked anyway so every
/// sequence contributes to the loss.
pub fn mask_tokens<R: Rng + ?Sized>(ids: &[usize], p: f64, rng: &mut R) -> Masked {
    let maskable: Vec<usize> = (0..ids.len()).filter(|&i| !Vocab::is_special(ids[i])).collect();
    let mut positions: Vec<usize> = maskable.iter().copied().filter(|_| rng.random_bool(p)).collect();
    if positions.is_empty() && !maskable.is_empty() {
        positions.push(maskable[rng.random_range(0..maskable.len())]);
    }
    let mut out = ids.to_vec();
    let targets = positions.iter().map(|&i| ids[i]).collect();
    for &i in &positions {
        out[i] = MASK;
    }
    Masked {
        ids: out,
        positions,
        targets,
    }
}

/// Mean masked-token cross-entropy and top-1 recovery over fixed masks.
fn mlm_eval(sys: &PersonalizedSystem, items: &[(Conditioned<'_>, &[usize])], mask_prob: f64, seed: u64) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (k, (who, x)) in items.iter().enumerate() {
        let mut pass = Pass::new(sys, false)?;
        let (ids, prompts) = pass.input(*who, x)?;
        let m = mask_tokens(&ids, mask_prob, &mut seeding::rng(seed, &format!("mlm-eval/{k}")));
        if m.positions.is_empty() {
            continue;
        }
        let h = pass.forward_hidden(&m.ids, prompts.as_ref())?;
        let logits = pass.mlm_logits(h, &m.positions)?;
        let ce = pass.tape.cross_entropy(logits, &m.targets)?;
        loss += pass.tape.value(ce)[0] * m.positions.len() as f64;
        let v = pass.tape.value(logits);
        let width = v.len() / m.positions.len();
        for (r, &t) in m.targets.iter().enumerate() {
            let row = &v[r * width..(r + 1) * width];
            let best = (0..width).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            hits += usize::from(best == t);
        }
        total += m.positions.len();
    }
    let n = total.max(1) as f64;
    Ok((loss / n, hits as f64 / n))
}

/// One epoch of masked-token training over `items`.
fn mlm_epoch(
    sys: &mut PersonalizedSystem,
    stepper: &mut Stepper,
    items: &[(Conditioned<'_>, &[usize])],
    train: &TrainConfig,
    label: &str,
) -> Result<f64> {
    let mut total = 0.0;
    let order = batches(items.len(), train.batch_size, sys.seed, label);
    let nb = order.len();
    for (b, batch) in order.into_iter().enumerate() {
        let mut rng = seeding::rng(sys.seed, &format!("{label}/mask/{b}"));
        let pass_sys: &PersonalizedSystem = sys;
        let mut pass = Pass::new(pass_sys, true)?;
        let mut logits = Vec::new();
        let mut targets = Vec::new();
        for &i in &batch {
            let (who, x) = items[i];
            let (ids, prompts) = pass.input(who, x)?;
            let m = mask_tokens(&ids, train.mask_prob, &mut rng);
            if m.positions.is_empty() {
                continue;
            }
            let h = pass.forward_hidden(&m.ids, prompts.as_ref())?;
            logits.push(pass.mlm_logits(h, &m.positions)?);
            targets.extend(m.targets);
        }
        if logits.is_empty() {
            continue;
        }
        let all = pass.tape.concat_rows(&logits)?;
        let loss = pass.tape.cross_entropy(all, &targets)?;
        let (tape, bounds) = pass.into_parts();
        total += stepper.step(sys, &tape, &bounds, loss)?;
    }
    Ok(total / nb.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub heldout_loss_before: f64,
    pub heldout_loss_after: f64,
    pub epoch_losses: Vec<f64>,
    /// Top-1 recovery of masked tokens on the training slice.
    pub train_recovery: f64,
    pub heldout_texts: usize,
}

/// Writer-agnostic MLM pretraining of a fresh encoder on plain texts.
/// A seeded twentieth of the texts (at least one, when there are two or
/// more) is held out to measure the loss.
pub fn pretrain_base(
    texts: &[Vec<usize>],
    config: ModelConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(EncoderModel, PretrainReport)> {
    let texts: Vec<&Vec<usize>> = texts.iter().filter(|t| !t.is_empty()).collect();
    if texts.is_empty() {
        return Err(Error::contract("pretraining corpus is empty"));
    }
    let encoder = EncoderModel::new(config, &mut seeding::rng(seed, "base-init"))?;
    let mut sys = PersonalizedSystem::plain(encoder, seed);
    let order = batches(texts.len(), 1, seed, "pretrain/holdout");
    let n_hold = if texts.len() >= 2 { (texts.len() / 20).max(1) } else { 0 };
    let wrap = |t: &Vec<usize>| plain_input(t, config.max_len);
    let mut held = Vec::new();
    let mut fit = Vec::new();
    for (k, i) in order.into_iter().flatten().enumerate() {
        let ids = wrap(texts[i])?;
        if k < n_hold {
            held.push(ids[1..ids.len() - 1].to_vec());
        } else {
            fit.push(ids[1..ids.len() - 1].to_vec());
        }
    }
    let refs = |v: &[Vec<usize>]| -> Vec<(Conditioned<'static>, Vec<usize>)> {
        v.iter().map(|t| (Conditioned::Plain, t.clone())).collect()
    };
    let held_items = refs(if held.is_empty() { &fit } else { &held });
    let fit_items = refs(&fit);
    let held_ref: Vec<(Conditioned<'_>, &[usize])> = held_items.iter().map(|(c, t)| (*c, t.as_slice())).collect();
    let fit_ref: Vec<(Conditioned<'_>, &[usize])> = fit_items.iter().map(|(c, t)| (*c, t.as_slice())).collect();

    let (before, _) = mlm_eval(&sys, &held_ref, train.mask_prob, seed)?;
    let mut stepper = Stepper::new(&sys, train.pretrain_lr, train.clip_norm);
    let mut epoch_losses = Vec::with_capacity(train.pretrain_epochs);
    for e in 0..train.pretrain_epochs {
        epoch_losses.push(mlm_epoch(&mut sys, &mut stepper, &fit_ref, train, &format!("pretrain/epoch/{e}"))?);
    }
    let (after, _) = mlm_eval(&sys, &held_ref, train.mask_prob, seed)?;
    let sample = &fit_ref[..fit_ref.len().min(200)];
    let (_, recovery) = mlm_eval(&sys, sample, train.mask_prob, seed ^ 1)?;
    let report = PretrainReport {
        heldout_loss_before: before,
        heldout_loss_after: after,
        epoch_losses,
        train_recovery: recovery,
        heldout_texts: held.len(),
    };
    Ok((sys.encoder, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriterLoss {
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermediateReport {
    pub epoch_losses: Vec<f64>,
    pub per_writer: BTreeMap<String, WriterLoss>,
    pub warnings: Vec<Warning>,
}

impl IntermediateReport {
    /// Share of writers whose masked-token loss went down.
    pub fn improved_share(&self) -> f64 {
        if self.per_writer.is_empty() {
            return 0.0;
        }
        let k = self.per_writer.values().filter(|l| l.after < l.before).count();
        k as f64 / self.per_writer.len() as f64
    }
}

/// Writer-conditioned MLM over `writers`' histories, using the system's
/// own prompts or contexts. Soft-prompt methods keep the encoder fixed;
/// hard-prompt methods mask the appended context like any other token.
pub fn intermediate_mlm(
    sys: &mut PersonalizedSystem,
    histories: &Histories,
    writers: &[String],
    train: &TrainConfig,
) -> Result<IntermediateReport> {
    if !sys.method.supports_intermediate() {
        return Err(Error::config(format!(
            "intermediate learning needs writer prompts; {} has none",
            sys.method.as_str()
        )));
    }
    let mut warnings = Vec::new();
    let mut items: Vec<(Conditioned<'_>, &[usize])> = Vec::new();
    let mut by_writer: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for w in writers {
        match histories.get(w).filter(|h| !h.texts.is_empty()) {
            None => warnings.push(Warning {
                writer: w.clone(),
                reason: "no history for intermediate learning".into(),
            }),
            Some(h) => {
                for (i, t) in h.texts.iter().enumerate() {
                    if t.is_empty() {
                        continue;
                    }
                    by_writer.entry(w.as_str()).or_default().push(items.len());
                    items.push((Conditioned::History(w, i), t.as_slice()));
                }
            }
        }
    }
    let seed = sys.seed;
    let loss_by_writer = |sys: &PersonalizedSystem| -> Result<BTreeMap<String, f64>> {
        by_writer
            .iter()
            .map(|(w, idx)| {
                let sel: Vec<_> = idx.iter().map(|&i| items[i]).collect();
                let (l, _) = mlm_eval(sys, &sel, train.mask_prob, seeding::derive(seed, &format!("inter-eval/{w}")))?;
                Ok((w.to_string(), l))
            })
            .collect()
    };
    let before = loss_by_writer(sys)?;

    let freeze = sys.method.is_soft();
    let was_trainable: Vec<bool> = sys.encoder.params.iter().map(|(_, t)| t.requires_grad).collect();
    if freeze {
        sys.encoder.params.set_trainable(false);
    }
    let mut stepper = Stepper::new(sys, train.intermediate_lr, train.clip_norm);
    let mut epoch_losses = Vec::new();
    let result = (0..train.intermediate_epochs).try_for_each(|e| {
        epoch_losses.push(mlm_epoch(sys, &mut stepper, &items, train, &format!("intermediate/epoch/{e}"))?);
        Ok::<_, Error>(())
    });
    if freeze {
        for ((_, t), rg) in sys.encoder.params.iter_mut().zip(was_trainable) {
            t.requires_grad = rg;
        }
    }
    result?;

    let after = loss_by_writer(sys)?;
    let per_writer = before
        .into_iter()
        .map(|(w, b)| {
            let a = after[&w];
            (w, WriterLoss { before: b, after: a })
        })
        .collect();
    Ok(IntermediateReport {
        epoch_losses,
        per_writer,
        warnings,
    })
}
