use std::collections::BTreeMap;
use std::ops::Range;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::numerics::{
    check_gradients, cross_entropy_row, ops, GradCheckConfig, GradCheckReport, OptimizerState, Real,
};
use crate::par::{self, Exec};
use crate::prompts::{coda_backward, match_loss_grad};

use super::model::{Model, Routing, Selection};

/// One training query: `[CLS]`-prefixed tokens and the gold docid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    pub gold: usize,
}

/// What the objective differentiates and how queries are routed.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub train_encoder: bool,
    /// Classifier rows that receive gradients.
    pub classifier_rows: Range<usize>,
    /// Adds `match_weight · L_match` (L2P and S-Prompt style pools).
    pub use_match: bool,
    pub match_weight: f64,
    pub routing: Routing,
    pub exec: Exec,
    /// Queries per parallel work unit. Partial results are always reduced
    /// in chunk order, so this does not change the numbers.
    pub chunk: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            train_encoder: false,
            classifier_rows: 0..0,
            use_match: false,
            match_weight: 1.0,
            routing: Routing::Select,
            exec: Exec::default(),
            chunk: 8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntryGrad<F> {
    pub prompt: Option<Vec<F>>,
    pub key: Option<Vec<F>>,
    pub attn: Option<Vec<F>>,
}

fn add_opt<F: Real>(dst: &mut Option<Vec<F>>, src: Vec<F>, scale: F) {
    match dst {
        Some(d) => d
            .iter_mut()
            .zip(&src)
            .for_each(|(a, &b)| *a = *a + scale * b),
        None => *dst = Some(src.into_iter().map(|v| v * scale).collect()),
    }
}

/// Gradients of the batch loss with respect to every trainable tensor.
#[derive(Debug, Clone)]
pub struct Grads<F> {
    pub encoder: Option<EncoderParams<F>>,
    pub classifier_rows: Range<usize>,
    /// `classifier_rows.len() × dim`, row-major.
    pub classifier: Vec<F>,
    pub pool: BTreeMap<usize, EntryGrad<F>>,
}

impl<F: Real> Grads<F> {
    fn zeros(model: &Model<F>, cfg: &LossConfig) -> Self {
        Grads {
            encoder: cfg
                .train_encoder
                .then(|| EncoderParams::zeros_like(&model.encoder.params)),
            classifier_rows: cfg.classifier_rows.clone(),
            classifier: vec![F::zero(); cfg.classifier_rows.len() * model.dim()],
            pool: BTreeMap::new(),
        }
    }

    fn merge(&mut self, other: Grads<F>) {
        if let (Some(a), Some(b)) = (self.encoder.as_mut(), other.encoder.as_ref()) {
            a.add_assign(b);
        }
        for (a, b) in self.classifier.iter_mut().zip(&other.classifier) {
            *a = *a + *b;
        }
        for (id, g) in other.pool {
            let e = self.pool.entry(id).or_default();
            for (dst, src) in [
                (&mut e.prompt, g.prompt),
                (&mut e.key, g.key),
                (&mut e.attn, g.attn),
            ] {
                if let Some(s) = src {
                    add_opt(dst, s, F::one());
                }
            }
        }
    }

    fn scale(&mut self, s: F) {
        if let Some(e) = self.encoder.as_mut() {
            e.scale(s);
        }
        self.classifier.iter_mut().for_each(|v| *v = *v * s);
        for g in self.pool.values_mut() {
            for v in [&mut g.prompt, &mut g.key, &mut g.attn]
                .into_iter()
                .flatten()
            {
                v.iter_mut().for_each(|x| *x = *x * s);
            }
        }
    }
}

/// Batch-mean loss and its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub ce: f64,
    pub match_loss: f64,
}

struct Partial<F> {
    ce: f64,
    match_loss: f64,
    grads: Grads<F>,
}

fn query_grad<F: Real>(
    model: &Model<F>,
    ex: &TrainExample,
    cfg: &LossConfig,
    acc: &mut Partial<F>,
) -> Result<()> {
    let docs = model.classifier.num_docs();
    if ex.gold >= docs {
        return Err(Error::Data(format!(
            "gold docid {} outside the {docs} registered docids",
            ex.gold
        )));
    }
    let enc = model.encode(&ex.tokens, &cfg.routing)?;
    let h = enc.h_q();
    let d = model.dim();
    let scores = model.classifier.scores(h);
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let (ce, dlogits) = cross_entropy_row(&scores, ex.gold);
    acc.ce += ce.f64();

    let rows = cfg.classifier_rows.clone();
    for (k, r) in rows.clone().enumerate() {
        ops::axpy(dlogits[r], h, &mut acc.grads.classifier[k * d..(k + 1) * d]);
    }

    let prompts_live = enc.selection.is_some();
    if !cfg.train_encoder && !prompts_live {
        return Ok(());
    }
    let mut dh = vec![F::zero(); d];
    ops::matmul(
        &dlogits,
        model.classifier.weights().data(),
        1,
        docs,
        d,
        &mut dh,
    );

    let pool = model.pool.as_ref();
    let lowest = pool.map_or(1, |p| p.layers[0]);
    let prefix_grads = model
        .encoder
        .backward(&enc.trace, &dh, acc.grads.encoder.as_mut(), lowest);

    let (Some(sel), Some(pool)) = (enc.selection.as_ref(), pool) else {
        return Ok(());
    };
    match sel {
        Selection::TopN(s) => {
            let split = pool.split_prefix_grads(s.ids.len(), &prefix_grads)?;
            for (&id, g) in s.ids.iter().zip(split) {
                if !pool.entry(id).prompt_frozen {
                    add_opt(
                        &mut acc.grads.pool.entry(id).or_default().prompt,
                        g,
                        F::one(),
                    );
                }
            }
            if cfg.use_match {
                acc.match_loss += s.match_loss.f64();
                let mg = match_loss_grad(&s.embedding, pool, s)?;
                let w = F::of(cfg.match_weight);
                for (id, g) in mg.keys {
                    add_opt(&mut acc.grads.pool.entry(id).or_default().key, g, w);
                }
            }
        }
        Selection::Coda(c) => {
            let dcomposed = pool.split_prefix_grads(1, &prefix_grads)?.remove(0);
            for g in coda_backward(&c.embedding, pool, c, &dcomposed)? {
                let e = acc.grads.pool.entry(g.id).or_default();
                if !g.prompt.is_empty() {
                    add_opt(&mut e.prompt, g.prompt, F::one());
                }
                if !g.key.is_empty() {
                    add_opt(&mut e.key, g.key, F::one());
                }
                if !g.attn.is_empty() {
                    add_opt(&mut e.attn, g.attn, F::one());
                }
            }
        }
    }
    Ok(())
}

/// Mean over the batch of `CE(all docids) [+ w · L_match]`, with gradients
/// for the encoder (when trainable), the configured classifier rows and
/// every unfrozen pool tensor that took part.
pub fn dsi_loss<F: Real>(
    model: &Model<F>,
    batch: &[TrainExample],
    cfg: &LossConfig,
) -> Result<(LossValue, Grads<F>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    if cfg.train_encoder && model.encoder.frozen {
        return Err(Error::FreezeViolation("encoder is frozen".into()));
    }
    if cfg.train_encoder && model.pool.as_ref().is_some_and(|p| !p.is_empty()) {
        return Err(Error::Contract(
            "prompts are trained only on top of a frozen encoder".into(),
        ));
    }
    if cfg.classifier_rows.end > model.classifier.num_docs() {
        return Err(Error::Contract(
            "trainable rows exceed the classifier".into(),
        ));
    }
    let partials = par::map_chunks(cfg.exec, batch, cfg.chunk, |chunk| -> Result<Partial<F>> {
        let mut acc = Partial {
            ce: 0.0,
            match_loss: 0.0,
            grads: Grads::zeros(model, cfg),
        };
        for ex in chunk {
            query_grad(model, ex, cfg, &mut acc)?;
        }
        Ok(acc)
    });
    let mut total: Option<Partial<F>> = None;
    for p in partials {
        let p = p?;
        match total.as_mut() {
            None => total = Some(p),
            Some(t) => {
                t.ce += p.ce;
                t.match_loss += p.match_loss;
                t.grads.merge(p.grads);
            }
        }
    }
    let mut t = total.expect("nonempty batch");
    let b = batch.len() as f64;
    t.grads.scale(F::of(1.0 / b));
    let ce = t.ce / b;
    let ml = t.match_loss / b;
    let value = LossValue {
        total: ce + cfg.match_weight * ml,
        ce,
        match_loss: ml,
    };
    if !value.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", value.total)));
    }
    Ok((value, t.grads))
}

/// One AdamW step on every tensor with a gradient. Gradients for frozen
/// tensors are refused.
pub fn apply_grads<F: Real>(
    model: &mut Model<F>,
    grads: &Grads<F>,
    opt: &mut OptimizerState<F>,
) -> Result<()> {
    if grads.encoder.is_some() && model.encoder.frozen {
        return Err(Error::FreezeViolation(
            "gradient for the frozen encoder".into(),
        ));
    }
    let rows = grads.classifier_rows.clone();
    if let Some(r) = rows.clone().find(|&r| model.classifier.is_row_frozen(r)) {
        return Err(Error::FreezeViolation(format!(
            "classifier row {r} is frozen"
        )));
    }
    if let Some(pool) = &model.pool {
        for (&id, g) in &grads.pool {
            let e = pool.entry(id);
            if (g.prompt.is_some() || g.attn.is_some()) && e.prompt_frozen {
                return Err(Error::FreezeViolation(format!("prompt {id} is frozen")));
            }
            if g.key.is_some() && e.key_frozen {
                return Err(Error::FreezeViolation(format!("key {id} is frozen")));
            }
        }
    } else if !grads.pool.is_empty() {
        return Err(Error::Contract("pool gradients without a pool".into()));
    }

    opt.begin_step();
    if let Some(g) = &grads.encoder {
        for ((name, p), (_, gp)) in model.encoder.params.named_mut().into_iter().zip(g.named()) {
            opt.update(&name, p.data_mut(), gp.data())?;
        }
    }
    if !rows.is_empty() {
        let name = format!("classifier.rows{}-{}", rows.start, rows.end);
        opt.update(&name, model.classifier.rows_mut(rows), &grads.classifier)?;
    }
    if let Some(pool) = model.pool.as_mut() {
        for (&id, g) in &grads.pool {
            let e = pool.entry_mut(id);
            if let Some(v) = &g.prompt {
                opt.update(&format!("pool.{id}.prompt"), e.prompt.data_mut(), v)?;
            }
            if let Some(v) = &g.key {
                opt.update(&format!("pool.{id}.key"), e.key.data_mut(), v)?;
            }
            if let (Some(v), Some(a)) = (&g.attn, e.attn.as_mut()) {
                opt.update(&format!("pool.{id}.attn"), a.data_mut(), v)?;
            }
        }
    }
    Ok(())
}

/// Forward-only batch loss, equal to the value part of [`dsi_loss`].
pub fn batch_loss<F: Real>(
    model: &Model<F>,
    batch: &[TrainExample],
    cfg: &LossConfig,
) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let mut ce = 0.0;
    let mut ml = 0.0;
    for ex in batch {
        let enc = model.encode(&ex.tokens, &cfg.routing)?;
        let scores = model.classifier.scores(enc.h_q());
        if ex.gold >= scores.len() {
            return Err(Error::Data(format!(
                "gold docid {} outside the registry",
                ex.gold
            )));
        }
        ce += cross_entropy_row(&scores, ex.gold).0.f64();
        if cfg.use_match {
            if let Some(Selection::TopN(s)) = &enc.selection {
                ml += s.match_loss.f64();
            }
        }
    }
    let b = batch.len() as f64;
    Ok(LossValue {
        total: ce / b + cfg.match_weight * ml / b,
        ce: ce / b,
        match_loss: ml / b,
    })
}

/// Central-difference check of every tensor that [`dsi_loss`] returns a
/// gradient for.
pub fn check_model_gradients(
    model: &Model<f64>,
    batch: &[TrainExample],
    cfg: &LossConfig,
    gc: &GradCheckConfig,
) -> Result<Vec<GradCheckReport>> {
    let (_, grads) = dsi_loss(model, batch, cfg)?;
    let mut m = model.clone();
    let f = |m: &Model<f64>| batch_loss(m, batch, cfg).map_or(f64::NAN, |v| v.total);
    let mut reports = Vec::new();
    if let Some(g) = &grads.encoder {
        for (i, (name, gt)) in g.named().into_iter().enumerate() {
            reports.push(check_gradients(
                &name,
                &mut m,
                gt.data(),
                |m| {
                    m.encoder
                        .params
                        .named_mut()
                        .into_iter()
                        .nth(i)
                        .unwrap()
                        .1
                        .data_mut()
                },
                f,
                gc,
            )?);
        }
    }
    if !grads.classifier_rows.is_empty() {
        let rows = grads.classifier_rows.clone();
        reports.push(check_gradients(
            &format!("classifier.rows{}-{}", rows.start, rows.end),
            &mut m,
            &grads.classifier,
            |m| m.classifier.rows_mut(rows.clone()),
            f,
            gc,
        )?);
    }
    for (&id, g) in &grads.pool {
        let parts: [(&str, &Option<Vec<f64>>); 3] =
            [("prompt", &g.prompt), ("key", &g.key), ("attn", &g.attn)];
        for (which, grad) in parts {
            let Some(grad) = grad else { continue };
            reports.push(check_gradients(
                &format!("pool.{id}.{which}"),
                &mut m,
                grad,
                |m| {
                    let e = m.pool.as_mut().unwrap().entry_mut(id);
                    match which {
                        "prompt" => e.prompt.data_mut(),
                        "key" => e.key.data_mut(),
                        _ => e.attn.as_mut().unwrap().data_mut(),
                    }
                },
                f,
                gc,
            )?);
        }
    }
    Ok(reports)
}
