//! Exhaustive properness checks for the target losses on tiny discrete
//! worlds.
//!
//! A world is a set of at most eight instances, each carrying two binary
//! concept labels. A candidate predictor assigns every instance, for each of
//! the two heads, a class-1 probability from the finite grid
//! {0, 1/denom, ..., 1}. A target loss is proper on a world when the
//! ground-truth predictor (each head outputs its concept exactly) attains the
//! global minimum over all candidates, up to [`PROPERNESS_TOL`].
//!
//! The candidate space has (denom+1)^(2N) elements, so raw enumeration is
//! only viable for toy sizes. Each loss admits an exact reduction:
//!
//! * the disagreement loss is a mean of per-instance terms, so instances are
//!   minimized independently;
//! * the mutual-information loss depends on a candidate only through the
//!   integer sums (sum k1, sum k2, sum k1*k2) of the grid numerators, so a
//!   layered reachability pass over that statistic covers every candidate;
//! * the top-k pseudo-label loss at fixed selection sets is separable over
//!   instances, giving a lower bound per pair of selection sets; the bound
//!   is attained by an assembled candidate whose actual loss is re-evaluated
//!   through the direct definition, which certifies the minimum exactly.
//!
//! Every strategy first estimates its enumeration effort and refuses with
//! [`CoreError::GridTooLarge`] beyond [`ENUMERATION_LIMIT`]. Losses here are
//! written against the grid directly and share nothing with the training
//! implementations, so the two sides can be cross-checked.

use serde::Serialize;

use crate::error::{CoreError, Result};

/// A candidate must undercut the truth by more than this to break properness.
pub const PROPERNESS_TOL: f64 = 1e-9;

/// Refusal threshold on a strategy's estimated enumeration size.
pub const ENUMERATION_LIMIT: f64 = 1e7;

/// Probability clamp inside logs; matches the training-side clamp so
/// verdicts transfer to the optimized losses.
const CLAMP: f64 = 1e-12;

fn nll(p: f64) -> f64 {
    -p.max(CLAMP).ln()
}

/// Instances with two binary concept labels each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteWorld {
    labels: Vec<[u8; 2]>,
}

impl DiscreteWorld {
    pub fn new(labels: Vec<[u8; 2]>) -> Result<Self> {
        if labels.is_empty() || labels.len() > 8 {
            return Err(CoreError::config(
                "discrete worlds hold between one and eight instances",
            ));
        }
        if labels.iter().any(|l| l[0] > 1 || l[1] > 1) {
            return Err(CoreError::config("concept labels must be binary"));
        }
        Ok(DiscreteWorld { labels })
    }

    /// Instances grouped by label pair, ordered (0,0), (0,1), (1,0), (1,1).
    pub fn from_group_counts(counts: [usize; 4]) -> Result<Self> {
        let mut labels = Vec::new();
        for (g, &c) in counts.iter().enumerate() {
            let pair = [(g >> 1) as u8, (g & 1) as u8];
            labels.extend(std::iter::repeat(pair).take(c));
        }
        DiscreteWorld::new(labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[[u8; 2]] {
        &self.labels
    }

    pub fn group_counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for l in &self.labels {
            counts[(l[0] as usize) * 2 + l[1] as usize] += 1;
        }
        counts
    }

    /// Fraction of instances whose concepts disagree.
    pub fn disagreement_rate(&self) -> f64 {
        let c = self.group_counts();
        (c[1] + c[2]) as f64 / self.len() as f64
    }

    /// The predictor that outputs each concept exactly.
    pub fn truth(&self, denom: u32) -> GridPredictor {
        GridPredictor {
            denom,
            q: self
                .labels
                .iter()
                .map(|l| [u32::from(l[0]) * denom, u32::from(l[1]) * denom])
                .collect(),
        }
    }
}

/// Per-instance class-1 probabilities for both heads, as grid numerators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GridPredictor {
    pub denom: u32,
    /// `q[i][head]` over `denom`.
    pub q: Vec<[u32; 2]>,
}

impl GridPredictor {
    pub fn prob1(&self, i: usize, head: usize) -> f64 {
        f64::from(self.q[i][head]) / f64::from(self.denom)
    }
}

/// Which target loss to check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum LossTag {
    /// Mutual information between the heads' batch-level joint.
    DivDis,
    /// Mean cross-prediction disagreement term.
    Dbat,
    /// Top-k pseudo-label loss with per-group lower bounds for the
    /// disagreement groups (0,1) and (1,0). Budgets are floor(N * bound).
    AceTopK { bounds: [f64; 2] },
}

impl LossTag {
    fn validate(&self) -> Result<()> {
        if let LossTag::AceTopK { bounds } = self {
            if bounds.iter().any(|b| !(0.0..=1.0).contains(b)) {
                return Err(CoreError::config("group bounds must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    fn budgets(&self, n: usize) -> [usize; 2] {
        match self {
            LossTag::AceTopK { bounds } => {
                [0, 1].map(|g| (n as f64 * bounds[g]).floor() as usize)
            }
            _ => [0, 0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Strategy {
    /// Every candidate in the grid product space.
    FullEnumeration,
    /// Independent per-instance minimization (disagreement loss only).
    PerInstance,
    /// Reachability over the integer sufficient statistic (mutual
    /// information only).
    SufficientStatistics,
    /// Lower bounds over pairs of selection sets plus witness certification
    /// (top-k loss only).
    MaskPairs,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub is_proper: bool,
    pub truth_loss: f64,
    pub min_loss: f64,
    /// A global minimizer. When the loss is not proper this is the witness
    /// undercutting the truth.
    pub minimizer: GridPredictor,
    /// How many loss evaluations (or reachable states) the check visited.
    pub evaluations: f64,
    pub strategy: Strategy,
}

/// The loss value a candidate assigns to a world. Truth labels only enter
/// through the truth predictor; the target losses themselves are label-free.
pub fn target_loss(tag: &LossTag, pred: &GridPredictor) -> Result<f64> {
    tag.validate()?;
    if pred.denom == 0 || pred.q.iter().any(|q| q[0] > pred.denom || q[1] > pred.denom) {
        return Err(CoreError::config("predictor entries must lie on the grid"));
    }
    Ok(match tag {
        LossTag::DivDis => divdis_of(pred),
        LossTag::Dbat => dbat_of(pred),
        LossTag::AceTopK { .. } => ace_of(pred, tag.budgets(pred.q.len())),
    })
}

fn divdis_of(pred: &GridPredictor) -> f64 {
    let d = u64::from(pred.denom);
    let (mut sa, mut sb, mut sab) = (0u64, 0u64, 0u64);
    for q in &pred.q {
        sa += u64::from(q[0]);
        sb += u64::from(q[1]);
        sab += u64::from(q[0]) * u64::from(q[1]);
    }
    mutual_information(pred.q.len() as u64, d, sa, sb, sab)
}

/// Exact mutual information of the 2x2 joint built from the integer sums of
/// grid numerators. Cell numerators are over N * denom^2.
fn mutual_information(n: u64, d: u64, sa: u64, sb: u64, sab: u64) -> f64 {
    let total = n * d * d;
    let j11 = sab;
    let j10 = sa * d - sab;
    let j01 = sb * d - sab;
    let j00 = total + sab - sa * d - sb * d;
    let row1 = sa * d;
    let row0 = total - row1;
    let col1 = sb * d;
    let col0 = total - col1;
    let cell = |j: u64, row: u64, col: u64| -> f64 {
        if j == 0 {
            return 0.0;
        }
        let p = j as f64 / total as f64;
        // j <= min(row, col), so positive cells have positive marginals.
        p * ((j as f64 * total as f64) / (row as f64 * col as f64)).ln()
    };
    cell(j11, row1, col1) + cell(j10, row1, col0) + cell(j01, row0, col1) + cell(j00, row0, col0)
}

fn dbat_of(pred: &GridPredictor) -> f64 {
    let d = f64::from(pred.denom);
    let mut sum = 0.0;
    for q in &pred.q {
        let (k1, k2) = (f64::from(q[0]), f64::from(q[1]));
        sum += nll(((d - k1) * k2 + k1 * (d - k2)) / (d * d));
    }
    sum / pred.q.len() as f64
}

/// Group probability numerators over denom^2 for the disagreement groups.
fn group_numerators(q: [u32; 2], d: u32) -> [u32; 2] {
    [(d - q[0]) * q[1], q[0] * (d - q[1])]
}

/// Pseudo-label NLL an instance contributes when selected for a group.
fn group_nll(q: [u32; 2], d: u32, group: usize) -> f64 {
    let df = f64::from(d);
    match group {
        0 => nll(f64::from(d - q[0]) / df) + nll(f64::from(q[1]) / df),
        _ => nll(f64::from(q[0]) / df) + nll(f64::from(d - q[1]) / df),
    }
}

fn ace_of(pred: &GridPredictor, k: [usize; 2]) -> f64 {
    let n = pred.q.len();
    let d = pred.denom;
    let mut loss = 0.0;
    for g in 0..2 {
        if k[g] == 0 {
            continue;
        }
        // Selection: group probability descending, instance index ascending.
        // Integer numerators make ties exact.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            group_numerators(pred.q[b], d)[g]
                .cmp(&group_numerators(pred.q[a], d)[g])
                .then(a.cmp(&b))
        });
        let sum: f64 = order[..k[g]]
            .iter()
            .map(|&i| group_nll(pred.q[i], d, g))
            .sum();
        loss += sum / k[g] as f64;
    }
    loss
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut out = 1.0;
    for i in 0..k {
        out = out * (n - i) as f64 / (i + 1) as f64;
    }
    out
}

/// Estimated enumeration effort for a strategy on a world.
pub fn estimate(world: &DiscreteWorld, denom: u32, tag: &LossTag, strategy: Strategy) -> f64 {
    let n = world.len();
    let g = denom as f64 + 1.0;
    match strategy {
        Strategy::FullEnumeration => g.powi(2 * n as i32),
        Strategy::PerInstance => n as f64 * g * g,
        Strategy::SufficientStatistics => {
            let a = (n as u64 * u64::from(denom) + 1) as f64;
            let b = (n as u64 * u64::from(denom) * u64::from(denom) + 1) as f64;
            a * a * b
        }
        Strategy::MaskPairs => {
            let k = tag.budgets(n);
            binomial(n, k[0]).max(1.0) * binomial(n, k[1]).max(1.0) * n as f64 * g * g
        }
    }
}

fn default_strategy(tag: &LossTag) -> Strategy {
    match tag {
        LossTag::DivDis => Strategy::SufficientStatistics,
        LossTag::Dbat => Strategy::PerInstance,
        LossTag::AceTopK { .. } => Strategy::MaskPairs,
    }
}

/// Check whether the truth predictor minimizes the loss, using each loss's
/// exact reduction.
pub fn verify_proper(world: &DiscreteWorld, denom: u32, tag: &LossTag) -> Result<Verdict> {
    verify_proper_with(world, denom, tag, default_strategy(tag))
}

/// [`verify_proper`] with an explicit strategy, for cross-checking the
/// reductions against raw enumeration.
pub fn verify_proper_with(
    world: &DiscreteWorld,
    denom: u32,
    tag: &LossTag,
    strategy: Strategy,
) -> Result<Verdict> {
    tag.validate()?;
    if denom < 2 {
        return Err(CoreError::config("probability grids need denom >= 2"));
    }
    match (tag, strategy) {
        (_, Strategy::FullEnumeration) => {}
        (LossTag::Dbat, Strategy::PerInstance) => {}
        (LossTag::DivDis, Strategy::SufficientStatistics) => {}
        (LossTag::AceTopK { .. }, Strategy::MaskPairs) => {}
        _ => {
            return Err(CoreError::config(
                "strategy does not apply to this loss",
            ))
        }
    }
    let est = estimate(world, denom, tag, strategy);
    if est > ENUMERATION_LIMIT {
        return Err(CoreError::GridTooLarge {
            estimate: est,
            limit: ENUMERATION_LIMIT,
        });
    }

    let truth = world.truth(denom);
    let truth_loss = target_loss(tag, &truth)?;
    let (min_loss, minimizer, evaluations) = match strategy {
        Strategy::FullEnumeration => full_enumeration(world, denom, tag)?,
        Strategy::PerInstance => per_instance_min(world, denom),
        Strategy::SufficientStatistics => statistic_reachability(world, denom),
        Strategy::MaskPairs => mask_pair_min(world, denom, tag)?,
    };

    Ok(Verdict {
        is_proper: min_loss >= truth_loss - PROPERNESS_TOL,
        truth_loss,
        min_loss,
        minimizer,
        evaluations,
        strategy,
    })
}

fn full_enumeration(
    world: &DiscreteWorld,
    denom: u32,
    tag: &LossTag,
) -> Result<(f64, GridPredictor, f64)> {
    let n = world.len();
    let mut current = GridPredictor {
        denom,
        q: vec![[0, 0]; n],
    };
    let mut best = (f64::INFINITY, current.clone());
    let mut count = 0.0;
    loop {
        let loss = target_loss(tag, &current)?;
        count += 1.0;
        if loss < best.0 {
            best = (loss, current.clone());
        }
        // Odometer over the 2N grid digits.
        let mut pos = 0;
        loop {
            if pos == 2 * n {
                return Ok((best.0, best.1, count));
            }
            let slot = &mut current.q[pos / 2][pos % 2];
            if *slot < denom {
                *slot += 1;
                break;
            }
            *slot = 0;
            pos += 1;
        }
    }
}

fn per_instance_min(world: &DiscreteWorld, denom: u32) -> (f64, GridPredictor, f64) {
    let d = f64::from(denom);
    let n = world.len();
    let mut q = Vec::with_capacity(n);
    let mut total = 0.0;
    for _ in 0..n {
        let mut best = (f64::INFINITY, [0u32, 0u32]);
        for k1 in 0..=denom {
            for k2 in 0..=denom {
                let (a, b) = (f64::from(k1), f64::from(k2));
                let term = nll(((d - a) * b + a * (d - b)) / (d * d));
                if term < best.0 {
                    best = (term, [k1, k2]);
                }
            }
        }
        total += best.0;
        q.push(best.1);
    }
    let evals = n as f64 * (d + 1.0) * (d + 1.0);
    (total / n as f64, GridPredictor { denom, q }, evals)
}

/// Layered reachability over (sum k1, sum k2, sum k1*k2). Every candidate
/// maps to a final state and every final state is realized by a candidate,
/// so the minimum over reachable states is the minimum over candidates.
fn statistic_reachability(world: &DiscreteWorld, denom: u32) -> (f64, GridPredictor, f64) {
    let n = world.len();
    let d = denom as usize;
    let a_dim = n * d + 1;
    let b_dim = n * d * d + 1;
    let size = a_dim * a_dim * b_dim;
    let words = (size + 63) / 64;

    let idx = |sa: usize, sb: usize, sab: usize| (sa * a_dim + sb) * b_dim + sab;
    let deltas: Vec<usize> = (0..=d)
        .flat_map(|k1| (0..=d).map(move |k2| idx(k1, k2, k1 * k2)))
        .collect();

    let mut layers: Vec<Vec<u64>> = Vec::with_capacity(n + 1);
    let mut layer = vec![0u64; words];
    layer[0] |= 1;
    layers.push(layer);
    for _ in 0..n {
        let prev = layers.last().unwrap();
        let mut next = vec![0u64; words];
        for (w, &word) in prev.iter().enumerate() {
            if word == 0 {
                continue;
            }
            let mut bits = word;
            while bits != 0 {
                let bit = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let state = w * 64 + bit;
                for &delta in &deltas {
                    let t = state + delta;
                    next[t / 64] |= 1 << (t % 64);
                }
            }
        }
        layers.push(next);
    }

    // Scan final states in index order; ties keep the first.
    let last = layers.last().unwrap();
    let mut best = (f64::INFINITY, 0usize);
    let mut evals = 0.0;
    for (w, &word) in last.iter().enumerate() {
        let mut bits = word;
        while bits != 0 {
            let bit = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            let state = w * 64 + bit;
            let sab = state % b_dim;
            let sb = (state / b_dim) % a_dim;
            let sa = state / (b_dim * a_dim);
            let mi = mutual_information(
                n as u64,
                u64::from(denom),
                sa as u64,
                sb as u64,
                sab as u64,
            );
            evals += 1.0;
            if mi < best.0 {
                best = (mi, state);
            }
        }
    }

    // Backtrack one realization of the best state.
    let mut q = vec![[0u32, 0u32]; n];
    let mut state = best.1;
    for t in (1..=n).rev() {
        let prev_layer = &layers[t - 1];
        'choice: for k1 in 0..=d {
            for k2 in 0..=d {
                let delta = idx(k1, k2, k1 * k2);
                if delta > state {
                    continue;
                }
                let p = state - delta;
                // The flat index subtraction must decompose consistently.
                let (psab, psb, psa) = (p % b_dim, (p / b_dim) % a_dim, p / (b_dim * a_dim));
                let (sab, sb, sa) = (
                    state % b_dim,
                    (state / b_dim) % a_dim,
                    state / (b_dim * a_dim),
                );
                if psa + k1 != sa || psb + k2 != sb || psab + k1 * k2 != sab {
                    continue;
                }
                if prev_layer[p / 64] & (1 << (p % 64)) != 0 {
                    q[t - 1] = [k1 as u32, k2 as u32];
                    state = p;
                    break 'choice;
                }
            }
        }
    }
    (best.0, GridPredictor { denom, q }, evals)
}

/// Minimum of the top-k loss via lower bounds over selection-set pairs.
///
/// For a fixed pair (S01, S10) the loss is separable over instances, and the
/// per-instance minimum depends only on membership: unselected instances and
/// instances selected for one group reach zero, instances selected for both
/// reach a positive hedging constant. The pair bound is therefore
/// |S01 and S10| * hedge. A candidate assembled from the per-instance
/// minimizers realizes the best bound, which the direct loss confirms.
fn mask_pair_min(
    world: &DiscreteWorld,
    denom: u32,
    tag: &LossTag,
) -> Result<(f64, GridPredictor, f64)> {
    let n = world.len();
    let k = tag.budgets(n);
    let evals = estimate(world, denom, tag, Strategy::MaskPairs);
    if k[0] == 0 && k[1] == 0 {
        // No selection budget: every candidate scores zero.
        let q = vec![[denom, denom]; n];
        return Ok((0.0, GridPredictor { denom, q }, evals));
    }
    if k[0] > n || k[1] > n {
        return Err(CoreError::config("group budget exceeds the world size"));
    }

    // Hedging constant for doubly selected instances: both heads balance the
    // two groups' pseudo-labels. Separable in the two heads.
    let mut hedge = 0.0;
    let mut hedge_q = [0u32, 0u32];
    if k[0] > 0 && k[1] > 0 {
        let (a, b) = (1.0 / k[0] as f64, 1.0 / k[1] as f64);
        let mut best = (f64::INFINITY, [0u32, 0u32]);
        for u in 0..=denom {
            for v in 0..=denom {
                let q = [u, v];
                let c = a * group_nll(q, denom, 0) + b * group_nll(q, denom, 1);
                if c < best.0 {
                    best = (c, q);
                }
            }
        }
        hedge = best.0;
        hedge_q = best.1;
    }

    // Exhaustive pass over pairs confirms the minimal overlap bound.
    let masks = |count: usize| -> Vec<u32> {
        (0u32..1 << n).filter(|m| m.count_ones() as usize == count).collect()
    };
    let (m1s, m2s) = (masks(k[0]), masks(k[1]));
    let mut best_bound = f64::INFINITY;
    let mut best_pair = (0u32, 0u32);
    for &m1 in &m1s {
        for &m2 in &m2s {
            let overlap = (m1 & m2).count_ones() as f64;
            let bound = if k[0] > 0 && k[1] > 0 { overlap * hedge } else { 0.0 };
            if bound < best_bound {
                best_bound = bound;
                best_pair = (m1, m2);
            }
        }
    }

    let assemble = |m1: u32, m2: u32| -> GridPredictor {
        let q = (0..n)
            .map(|i| match (m1 >> i & 1 == 1, m2 >> i & 1 == 1) {
                (false, false) => [denom, denom],
                (true, false) => [0, denom],
                (false, true) => [denom, 0],
                (true, true) => hedge_q,
            })
            .collect();
        GridPredictor { denom, q }
    };

    // Certify: the assembled candidate's directly evaluated loss must meet
    // the bound, otherwise the bound was not tight for this pair.
    let witness = assemble(best_pair.0, best_pair.1);
    let direct = ace_of(&witness, k);
    if (direct - best_bound).abs() > 1e-9 {
        return Err(CoreError::state(format!(
            "selection-set bound {best_bound} not certified (witness scores {direct})"
        )));
    }
    Ok((direct, witness, evals))
}
