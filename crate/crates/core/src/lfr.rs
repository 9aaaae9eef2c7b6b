//! Auxiliary-layer selection and last-layer-centric gated recombination.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureStack;
use crate::error::{Error, Result};
use crate::numerics::{dot, Tape, Tensor, Var};
use crate::params::{normal_init, Binding, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    #[default]
    MinimalSimilarity,
    MaximalSimilarity,
    NodeDegree,
    LearnedScores,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 4] = [
        SelectionStrategy::MinimalSimilarity,
        SelectionStrategy::MaximalSimilarity,
        SelectionStrategy::NodeDegree,
        SelectionStrategy::LearnedScores,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionStrategy::MinimalSimilarity => "minimal_similarity",
            SelectionStrategy::MaximalSimilarity => "maximal_similarity",
            SelectionStrategy::NodeDegree => "node_degree",
            SelectionStrategy::LearnedScores => "learned_scores",
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown selection strategy {s:?}")))
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

fn mean_cosine(anchor: &[f64], tokens: &Tensor, layer: usize, what: &str) -> Result<f64> {
    let n = tokens.rows();
    let mut total = 0.0;
    for i in 0..n {
        total += cosine(anchor, tokens.row(i)).ok_or_else(|| {
            Error::Degenerate(format!("zero-norm vector: {what} or token {i} of layer {layer}"))
        })?;
    }
    Ok(total / n as f64)
}

fn check_eligible(stack: &FeatureStack, l: usize) -> Result<()> {
    if l == 0 || l >= stack.depth() {
        return Err(Error::domain(
            "select_layers",
            format!("layer {l} outside eligible range 1..{}", stack.depth() - 1),
        ));
    }
    Ok(())
}

/// Mean cosine similarity between the last layer's class token and the
/// image tokens of layer `l`.
pub fn avg_cls_similarity(stack: &FeatureStack, l: usize) -> Result<f64> {
    check_eligible(stack, l)?;
    let last = stack.depth();
    mean_cosine(stack.cls(last).data(), stack.tokens(l), l, "last class token")
}

/// Mean cosine similarity between layer `l`'s own class token and its image
/// tokens.
pub fn node_degree(stack: &FeatureStack, l: usize) -> Result<f64> {
    check_eligible(stack, l)?;
    mean_cosine(stack.cls(l).data(), stack.tokens(l), l, "class token")
}

/// Linear score of each eligible layer's class token.
pub fn learned_scores(stack: &FeatureStack, w: &Tensor, bias: f64) -> Result<Vec<f64>> {
    let c = stack.width();
    if w.numel() != c {
        return Err(Error::dim("learned_scores", w.shape(), &[c, 1]));
    }
    Ok((1..stack.depth())
        .map(|l| dot(stack.cls(l).data(), w.data()) + bias)
        .collect())
}

/// Indices (1-based, ascending) of the `k` best-scoring layers. `scores[i]`
/// belongs to layer `i + 1`; ties go to the deeper layer.
pub fn top_k(scores: &[f64], k: usize, smallest: bool) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Config(format!(
            "K = {k} but {} layers are eligible",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = if smallest {
            scores[a].total_cmp(&scores[b])
        } else {
            scores[b].total_cmp(&scores[a])
        };
        by_score.then(b.cmp(&a))
    });
    let mut chosen: Vec<usize> = order[..k].iter().map(|i| i + 1).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Selects `k` auxiliary layers from `1..L-1`. `scorer` carries the linear
/// scorer weights and bias, required for [`SelectionStrategy::LearnedScores`].
pub fn select_layers(
    stack: &FeatureStack,
    strategy: SelectionStrategy,
    k: usize,
    scorer: Option<(&Tensor, f64)>,
) -> Result<Vec<usize>> {
    let eligible = stack.depth() - 1;
    if k == 0 || k > eligible {
        return Err(Error::Config(format!("K = {k} but {eligible} layers are eligible")));
    }
    let scores: Vec<f64> = match strategy {
        SelectionStrategy::MinimalSimilarity | SelectionStrategy::MaximalSimilarity => {
            (1..=eligible).map(|l| avg_cls_similarity(stack, l)).collect::<Result<_>>()?
        }
        SelectionStrategy::NodeDegree => (1..=eligible).map(|l| node_degree(stack, l)).collect::<Result<_>>()?,
        SelectionStrategy::LearnedScores => {
            let (w, b) = scorer.ok_or_else(|| Error::Config("learned_scores needs scorer parameters".into()))?;
            learned_scores(stack, w, b)?
        }
    };
    let smallest = !matches!(
        strategy,
        SelectionStrategy::MaximalSimilarity | SelectionStrategy::LearnedScores
    );
    top_k(&scores, k, smallest)
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterSlot {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
    pub gate: ParamId,
}

/// `K` adapter slots plus the linear layer scorer.
#[derive(Clone, Debug)]
pub struct Lfr {
    pub strategy: SelectionStrategy,
    pub slots: Vec<AdapterSlot>,
    pub scorer_w: ParamId,
    pub scorer_b: ParamId,
    width: usize,
}

/// Recomposed features of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RecombinedSet {
    pub tokens: Vec<Tensor>,
    pub cls: Vec<Tensor>,
    pub selected: Vec<usize>,
    pub gates: Vec<f64>,
}

impl Lfr {
    /// Registers `k` slots of width `c` with bottleneck `bottleneck`. Gates
    /// start at zero, so the initial recombination is the identity on the
    /// last layer.
    pub fn init(
        c: usize,
        k: usize,
        bottleneck: usize,
        strategy: SelectionStrategy,
        rng: &mut impl Rng,
        store: &mut ParamStore,
    ) -> Result<Self> {
        if bottleneck == 0 || k == 0 {
            return Err(Error::Config("adapter bottleneck and K must be positive".into()));
        }
        let mut slots = Vec::with_capacity(k);
        let down_std = 1.0 / ((2 * c) as f64).sqrt();
        let up_std = 1.0 / (bottleneck as f64).sqrt();
        for s in 1..=k {
            let name = |x: &str| format!("lfr.slot{s}.{x}");
            slots.push(AdapterSlot {
                down_w: store.add(name("down.w"), ParamGroup::Adapter, normal_init(rng, &[2 * c, bottleneck], down_std)),
                down_b: store.add(name("down.b"), ParamGroup::Adapter, Tensor::zeros(&[bottleneck])),
                up_w: store.add(name("up.w"), ParamGroup::Adapter, normal_init(rng, &[bottleneck, c], up_std)),
                up_b: store.add(name("up.b"), ParamGroup::Adapter, Tensor::zeros(&[c])),
                gate: store.add(name("gate"), ParamGroup::Gate, Tensor::zeros(&[1])),
            });
        }
        let scorer_w = store.add("lfr.scorer.w", ParamGroup::Scorer, normal_init(rng, &[c, 1], 0.02));
        let scorer_b = store.add("lfr.scorer.b", ParamGroup::Scorer, Tensor::zeros(&[1]));
        Ok(Self {
            strategy,
            slots,
            scorer_w,
            scorer_b,
            width: c,
        })
    }

    pub fn k(&self) -> usize {
        self.slots.len()
    }

    pub fn select(&self, store: &ParamStore, stack: &FeatureStack) -> Result<Vec<usize>> {
        self.select_with(store, stack, self.strategy)
    }

    pub fn select_with(
        &self,
        store: &ParamStore,
        stack: &FeatureStack,
        strategy: SelectionStrategy,
    ) -> Result<Vec<usize>> {
        let scorer = (store.get(self.scorer_w), store.get(self.scorer_b).data()[0]);
        select_layers(stack, strategy, self.k(), Some(scorer))
    }

    /// `tanh(g)·up(gelu(down([aux ‖ last]))) + last`, applied row-wise to
    /// `(N+1)×C` sequences, so class tokens share the slot's adapter and gate.
    pub fn recombine(&self, tape: &mut Tape, b: &Binding, slot: usize, aux: Var, last: Var) -> Result<Var> {
        let p = &self.slots[slot];
        if tape.shape(aux).last() != Some(&self.width) || tape.shape(last).last() != Some(&self.width) {
            return Err(Error::dim("recombine", tape.shape(aux), tape.shape(last)));
        }
        let x = tape.concat_cols(aux, last)?;
        let h = tape.matmul(x, b.var(p.down_w))?;
        let h = tape.add_row(h, b.var(p.down_b))?;
        let h = tape.gelu(h)?;
        let a = tape.matmul(h, b.var(p.up_w))?;
        let a = tape.add_row(a, b.var(p.up_b))?;
        let g = tape.tanh(b.var(p.gate))?;
        let a = tape.mul_scalar(a, g)?;
        tape.add(a, last)
    }

    /// Scorer logit of one class token (`1×C`), as a `1×1` variable.
    pub fn score(&self, tape: &mut Tape, b: &Binding, cls: Var) -> Result<Var> {
        let s = tape.matmul(cls, b.var(self.scorer_w))?;
        tape.add_row(s, b.var(self.scorer_b))
    }

    /// Selection plus recombination of one sample, outside any training graph.
    pub fn run(&self, store: &ParamStore, stack: &FeatureStack) -> Result<RecombinedSet> {
        let selected = self.select(store, stack)?;
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, |_| false);
        let last = stack.depth();
        let seq = |tape: &mut Tape, l: usize| -> Result<Var> {
            let cls = tape.constant(stack.cls(l).clone());
            let tok = tape.constant(stack.tokens(l).clone());
            tape.concat_rows(cls, tok)
        };
        let x_last = seq(&mut tape, last)?;
        let n = stack.num_tokens();
        let mut out = RecombinedSet {
            tokens: Vec::with_capacity(self.k()),
            cls: Vec::with_capacity(self.k()),
            selected: selected.clone(),
            gates: self.slots.iter().map(|s| store.get(s.gate).data()[0].tanh()).collect(),
        };
        for (slot, &l) in selected.iter().enumerate() {
            let x_a = seq(&mut tape, l)?;
            let r = self.recombine(&mut tape, &b, slot, x_a, x_last)?;
            let r = tape.value(r);
            out.cls.push(r.slice_rows(0, 1)?);
            out.tokens.push(r.slice_rows(1, n)?);
        }
        Ok(out)
    }
}

/// Per-layer selection frequencies over a set of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionHistogram {
    pub strategy: SelectionStrategy,
    pub k: usize,
    pub samples: usize,
    pub layers: Vec<LayerFrequency>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFrequency {
    pub layer: usize,
    pub fraction: f64,
}

impl SelectionHistogram {
    /// Fractions for layers `1..L-1`; they sum to `k`.
    pub fn from_selections(strategy: SelectionStrategy, k: usize, depth: usize, selections: &[Vec<usize>]) -> Self {
        let mut counts = vec![0usize; depth.saturating_sub(1)];
        for sel in selections {
            for &l in sel {
                counts[l - 1] += 1;
            }
        }
        let samples = selections.len();
        Self {
            strategy,
            k,
            samples,
            layers: counts
                .iter()
                .enumerate()
                .map(|(i, &c)| LayerFrequency {
                    layer: i + 1,
                    fraction: if samples == 0 { 0.0 } else { c as f64 / samples as f64 },
                })
                .collect(),
        }
    }
}
