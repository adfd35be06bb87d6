use std::collections::BTreeMap;

use crate::attention::{attend, attend_fused};
use crate::cache_sharing::{reconstruct, FusionWeights, Granularity, LayerCache, Reconstruction};
use crate::error::{Error, Result};
use crate::numerics::{ops, Objective, Real, Tape, Tensor, Var};

use super::params::Model;

/// One training sequence. `loss_mask[t]` says whether predicting `tokens[t]`
/// from the tokens before it counts towards the loss; entry 0 is ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl Example {
    /// Every next-token prediction counts.
    pub fn dense(tokens: Vec<usize>) -> Self {
        let loss_mask = vec![true; tokens.len()];
        Example { tokens, loss_mask }
    }
}

/// Nodes of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub loss: Var,
    /// One leaf per model parameter, in model order.
    pub params: Vec<Var>,
    /// Post-RoPE `(keys, values)` of every storage layer, per example.
    pub caches: Vec<BTreeMap<usize, (Var, Var)>>,
    /// `[s × vocab]` logits per example.
    pub logits: Vec<Var>,
}

/// Mean next-token cross-entropy over every position of every sequence.
pub fn forward_loss<T: Real>(model: &Model<T>, batch: &[Vec<usize>]) -> Result<T> {
    let examples: Vec<Example> = batch.iter().cloned().map(Example::dense).collect();
    let mut tape = Tape::new();
    let trace = model.trace(&mut tape, &examples)?;
    Ok(tape.value(trace.loss).data()[0])
}

/// Training loss of a model on fixed examples, evaluable at any precision
/// for [`grad_check_extended`](crate::numerics::grad_check_extended).
pub struct LossObjective<'a> {
    pub model: &'a Model,
    pub examples: &'a [Example],
}

impl Objective for LossObjective<'_> {
    fn eval<U: Real>(&self, tape: &mut Tape<U>, params: &[Var]) -> Result<Var> {
        Ok(self.model.cast::<U>().trace_with(tape, params, self.examples)?.loss)
    }
}

impl<T: Real> Model<T> {
    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::Input(format!("token {t} outside vocabulary of {}", self.cfg.vocab)));
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds the context of {}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        Ok(())
    }

    fn check_examples(&self, examples: &[Example]) -> Result<usize> {
        if examples.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut counted = 0;
        for ex in examples {
            self.check_tokens(&ex.tokens)?;
            if ex.tokens.len() < 2 {
                return Err(Error::Input("sequence has no next-token pairs".into()));
            }
            if ex.loss_mask.len() != ex.tokens.len() {
                return Err(Error::Input(format!(
                    "loss mask of length {} for {} tokens",
                    ex.loss_mask.len(),
                    ex.tokens.len()
                )));
            }
            counted += ex.loss_mask[1..].iter().filter(|&&m| m).count();
        }
        if counted == 0 {
            return Err(Error::Input("loss mask selects no positions".into()));
        }
        Ok(counted)
    }

    /// Records the loss on a fresh set of parameter leaves.
    pub fn trace(&self, tape: &mut Tape<T>, examples: &[Example]) -> Result<Trace> {
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        self.trace_with(tape, &params, examples)
    }

    /// Records the loss reading parameters from `params`, which must mirror
    /// [`Model::params`].
    pub fn trace_with(&self, tape: &mut Tape<T>, params: &[Var], examples: &[Example]) -> Result<Trace> {
        if params.len() != self.params.len() {
            return Err(Error::Input(format!(
                "expected {} parameter nodes, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let counted = self.check_examples(examples)?;
        let norm = T::of(counted as f64);
        let mut total: Option<Var> = None;
        let mut caches = Vec::with_capacity(examples.len());
        let mut all_logits = Vec::with_capacity(examples.len());
        for ex in examples {
            let (logits, cache) = self.sequence_logits(tape, params, &ex.tokens)?;
            let s = ex.tokens.len();
            // Row t predicts token t+1; the last row has no target.
            let mut targets: Vec<usize> = ex.tokens[1..].to_vec();
            targets.push(0);
            let mut weights: Vec<T> = ex.loss_mask[1..].iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
            weights.push(T::zero());
            debug_assert_eq!(targets.len(), s);
            tape.set_scope(None);
            let ce = tape.cross_entropy(logits, &targets, &weights, norm)?;
            total = Some(match total {
                None => ce,
                Some(acc) => tape.add(acc, ce)?,
            });
            caches.push(cache);
            all_logits.push(logits);
        }
        Ok(Trace {
            loss: total.expect("batch is nonempty"),
            params: params.to_vec(),
            caches,
            logits: all_logits,
        })
    }

    fn fusion_term(&self, tape: &mut Tape<T>, x: Var, w: Var, g: Granularity, key: bool) -> Result<Var> {
        match (g, key) {
            (Granularity::Scalar, _) => tape.mul_scalar(x, w),
            (Granularity::Vector, true) => {
                let full = tape.pair_expand(w)?;
                tape.mul_last(x, full)
            }
            (Granularity::Vector, false) => tape.mul_last(x, w),
        }
    }

    fn fused(&self, tape: &mut Tape<T>, terms: &[(Var, Var)], g: Granularity, key: bool) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(x, w) in terms {
            let t = self.fusion_term(tape, x, w, g, key)?;
            acc = Some(match acc {
                None => t,
                Some(a) => tape.add(a, t)?,
            });
        }
        acc.ok_or_else(|| Error::Input("fusion rule without sources".into()))
    }

    fn sequence_logits(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        tokens: &[usize],
    ) -> Result<(Var, BTreeMap<usize, (Var, Var)>)> {
        let lay = &self.layout;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let (hq, hkv) = (self.attn.q_heads, self.attn.kv_heads);
        let scale = self.attn.scale::<T>();

        tape.set_scope(None);
        let mut x = tape.gather(p[lay.embed], tokens)?;
        let mut stored: BTreeMap<usize, (Var, Var)> = BTreeMap::new();
        for (li, slots) in lay.layers.iter().enumerate() {
            let i = li + 1;
            tape.set_scope(Some(i));
            let h = tape.rmsnorm(x, p[slots.attn_norm])?;
            let q = tape.matmul(h, p[slots.wq])?;
            let q = tape.split_heads(q, hq)?;
            let q = tape.rope(q, &positions, &self.rope)?;

            let (k, v) = match (slots.wk, slots.wv) {
                (Some(wk), Some(wv)) => {
                    let k = tape.matmul(h, p[wk])?;
                    let k = tape.split_heads(k, hkv)?;
                    let k = tape.rope(k, &positions, &self.rope)?;
                    let v = tape.matmul(h, p[wv])?;
                    let v = tape.split_heads(v, hkv)?;
                    stored.insert(i, (k, v));
                    (k, v)
                }
                _ => {
                    let rule = self
                        .plan
                        .rule(i)
                        .ok_or_else(|| Error::Input(format!("layer {i} has neither projections nor a rule")))?;
                    let get = |j: usize| {
                        stored.get(&j).copied().ok_or(Error::MissingSource {
                            target: i,
                            source_layer: j,
                        })
                    };
                    match rule.kind {
                        Reconstruction::DirectReuse => (get(rule.key_sources[0])?.0, get(rule.value_sources[0])?.1),
                        Reconstruction::WeightedFusion(g) => {
                            let kt = rule
                                .key_sources
                                .iter()
                                .map(|&j| Ok((get(j)?.0, p[lay.fusion_key[&(i, j)]])))
                                .collect::<Result<Vec<_>>>()?;
                            let vt = rule
                                .value_sources
                                .iter()
                                .map(|&j| Ok((get(j)?.1, p[lay.fusion_value[&(i, j)]])))
                                .collect::<Result<Vec<_>>>()?;
                            (self.fused(tape, &kt, g, true)?, self.fused(tape, &vt, g, false)?)
                        }
                    }
                }
            };

            let kh: Vec<Var> = (0..hkv).map(|g| tape.head(k, g)).collect::<Result<_>>()?;
            let vh: Vec<Var> = (0..hkv).map(|g| tape.head(v, g)).collect::<Result<_>>()?;
            let mut outs = Vec::with_capacity(hq);
            for hh in 0..hq {
                let g = self.attn.kv_head_for(hh);
                let qh = tape.head(q, hh)?;
                let scores = tape.matmul_bt(qh, kh[g])?;
                let probs = tape.softmax_causal(scores, scale)?;
                outs.push(tape.matmul(probs, vh[g])?);
            }
            let o = tape.stack(&outs)?;
            let o = tape.merge_heads(o)?;
            let o = tape.matmul(o, p[slots.wo])?;
            x = tape.add(x, o)?;

            let m = tape.rmsnorm(x, p[slots.mlp_norm])?;
            let up = tape.matmul(m, p[slots.w_up])?;
            let act = tape.swiglu(up)?;
            let down = tape.matmul(act, p[slots.w_down])?;
            x = tape.add(x, down)?;
        }
        tape.set_scope(None);
        let xf = tape.rmsnorm(x, p[lay.final_norm])?;
        let logits = tape.matmul(xf, p[lay.lm_head])?;
        Ok((logits, stored))
    }

    /// Loss and one gradient per parameter (zeros where no path exists).
    pub fn loss_and_grads(&self, examples: &[Example]) -> Result<(T, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let trace = self.trace(&mut tape, examples)?;
        let loss = tape.value(trace.loss).data()[0];
        let mut grads = tape.backward(trace.loss)?;
        let out = trace
            .params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        Ok((loss, out))
    }

    /// Full-sequence logits `[s × vocab]` from the differentiable path.
    pub fn tape_logits(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Err(Error::Input("empty sequence".into()));
        }
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let (logits, _) = self.sequence_logits(&mut tape, &params, tokens)?;
        Ok(tape.value(logits).clone())
    }

    /// Runs `tokens` at positions `start..` against the persistent caches,
    /// appending to the storage-layer entries. Reconstruction layers are
    /// rebuilt from their sources on every call and never stored.
    pub fn extend(
        &self,
        tokens: &[usize],
        start: usize,
        caches: &mut BTreeMap<usize, LayerCache<T>>,
        fusion: &FusionWeights<T>,
    ) -> Result<Tensor<T>> {
        let lay = &self.layout;
        let p = &self.params;
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let (hq, hkv) = (self.attn.q_heads, self.attn.kv_heads);

        let mut x = ops::gather_rows(&p[lay.embed], tokens)?;
        for (li, slots) in lay.layers.iter().enumerate() {
            let i = li + 1;
            let h = ops::rmsnorm(&x, &p[slots.attn_norm])?;
            let q = ops::split_heads(&ops::matmul(&h, &p[slots.wq])?, hq)?;
            let q = self.rope.rotate(&q, &positions, false)?;

            let o = match (slots.wk, slots.wv) {
                (Some(wk), Some(wv)) => {
                    let k = ops::split_heads(&ops::matmul(&h, &p[wk])?, hkv)?;
                    let k = self.rope.rotate(&k, &positions, false)?;
                    let v = ops::split_heads(&ops::matmul(&h, &p[wv])?, hkv)?;
                    match caches.get_mut(&i) {
                        Some(c) => c.append(&k, &v)?,
                        None => {
                            caches.insert(i, LayerCache::starting_at(i, k, v, start)?);
                        }
                    }
                    attend(&q, &caches[&i], &self.attn, &positions)?
                }
                _ => {
                    let rule = self
                        .plan
                        .rule(i)
                        .ok_or_else(|| Error::Input(format!("layer {i} has neither projections nor a rule")))?;
                    match rule.kind {
                        Reconstruction::DirectReuse => {
                            let cache = reconstruct(&self.plan, fusion, caches, i)?;
                            attend(&q, &cache, &self.attn, &positions)?
                        }
                        Reconstruction::WeightedFusion(_) => {
                            let missing = |j| Error::MissingSource {
                                target: i,
                                source_layer: j,
                            };
                            let no_weight = |j| Error::Input(format!("no fusion weight for ({i}, {j})"));
                            let kt = rule
                                .key_sources
                                .iter()
                                .map(|&j| {
                                    Ok((
                                        caches.get(&j).ok_or_else(|| missing(j))?,
                                        fusion.key(i, j).ok_or_else(|| no_weight(j))?,
                                    ))
                                })
                                .collect::<Result<Vec<_>>>()?;
                            let vt = rule
                                .value_sources
                                .iter()
                                .map(|&j| {
                                    Ok((
                                        caches.get(&j).ok_or_else(|| missing(j))?,
                                        fusion.value(i, j).ok_or_else(|| no_weight(j))?,
                                    ))
                                })
                                .collect::<Result<Vec<_>>>()?;
                            attend_fused(&q, &kt, &vt, &self.attn, &positions)?
                        }
                    }
                }
            };
            let o = ops::matmul(&ops::merge_heads(&o)?, &p[slots.wo])?;
            x = x.add(&o)?;
            let m = ops::rmsnorm(&x, &p[slots.mlp_norm])?;
            let act = ops::swiglu(&ops::matmul(&m, &p[slots.w_up])?)?;
            x = x.add(&ops::matmul(&act, &p[slots.w_down])?)?;
        }
        let xf = ops::rmsnorm(&x, &p[lay.final_norm])?;
        ops::matmul(&xf, &p[lay.lm_head])
    }

    /// Full-sequence logits through the cached inference path.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Err(Error::Input("empty sequence".into()));
        }
        let fusion = self.fusion_weights()?;
        self.extend(tokens, 0, &mut BTreeMap::new(), &fusion)
    }
}

/// Result of greedy generation.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput<T: Real = f64> {
    /// Newly generated tokens.
    pub tokens: Vec<usize>,
    /// `[prompt × vocab]` logits of the prefill pass.
    pub prompt_logits: Tensor<T>,
    /// Logits each generated token was chosen from.
    pub step_logits: Vec<Vec<T>>,
    /// Largest number of cache elements held at once.
    pub peak_cache_elements: usize,
    /// Number of layers with a persistent cache.
    pub persistent_layers: usize,
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Prefills `prompt`, then greedily generates `new_tokens` tokens one at a
/// time. Only storage layers keep caches between steps.
pub fn decode<T: Real>(model: &Model<T>, prompt: &[usize], new_tokens: usize) -> Result<DecodeOutput<T>> {
    if prompt.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    let total = prompt.len() + new_tokens;
    if total > model.cfg.max_seq {
        return Err(Error::Input(format!(
            "prompt {} plus {new_tokens} new tokens overflows the context of {}",
            prompt.len(),
            model.cfg.max_seq
        )));
    }
    model.check_tokens(prompt)?;
    let fusion = model.fusion_weights()?;
    let mut caches = BTreeMap::new();
    let prompt_logits = model.extend(prompt, 0, &mut caches, &fusion)?;
    let held = |c: &BTreeMap<usize, LayerCache<T>>| c.values().map(LayerCache::elements).sum::<usize>();
    let mut peak = held(&caches);

    let mut tokens = Vec::with_capacity(new_tokens);
    let mut step_logits = Vec::with_capacity(new_tokens);
    let mut last = prompt_logits.row(prompt.len() - 1).to_vec();
    for step in 0..new_tokens {
        let next = argmax(&last);
        tokens.push(next);
        step_logits.push(last);
        if step + 1 == new_tokens {
            break;
        }
        let out = model.extend(&[next], prompt.len() + step, &mut caches, &fusion)?;
        peak = peak.max(held(&caches));
        last = out.row(0).to_vec();
    }
    Ok(DecodeOutput {
        tokens,
        prompt_logits,
        step_logits,
        peak_cache_elements: peak,
        persistent_layers: caches.len(),
    })
}
