//! Training objectives over per-head probabilities.
//!
//! Every loss here takes the ensemble's head probabilities for a batch and
//! returns a scalar; the `*_grad` variants additionally return the gradient
//! with respect to the head logits, ready for
//! [`EnsembleModel::backward`](crate::nn::EnsembleModel::backward).
//!
//! The ACE target loss is a coordinate-descent objective: given the current
//! probabilities, a hard top-k mask selects the instances most confidently
//! assigned to each disagreement group, then the masked instances are pushed
//! toward that group's concept labels. The mask is a constant inside the
//! gradient; it is recomputed from fresh probabilities every batch.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{nll, softmax2_backward, HeadProbs, LogitGrads, PROB_EPS};

/// One concept tuple, e.g. (0, 1) for "concept 1 low, concept 2 high".
pub type GroupLabels = Vec<u8>;

/// Is any pair of concepts in disagreement?
pub fn is_disagreement(labels: &[u8]) -> bool {
    labels.iter().any(|&b| b != labels[0])
}

/// All disagreement tuples for F concepts, in ascending bit order.
pub fn disagreement_groups(f: usize) -> Vec<GroupLabels> {
    (0..(1usize << f))
        .map(|g| (0..f).map(|j| ((g >> (f - 1 - j)) & 1) as u8).collect::<Vec<u8>>())
        .filter(|c| is_disagreement(c))
        .collect()
}

/// Mask aggregation: independent per-group top-k budgets, or one global
/// budget over (instance, group) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    PerGroup,
    GroupAggregated,
}

/// Mix-rate assumptions driving the top-k selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixRateConfig {
    /// Total lower bound on the disagreement frequency.
    pub lower_bound: f64,
    /// Per-group lower bounds, aligned with `active_groups`. `None` splits
    /// `lower_bound` evenly across the active groups.
    pub group_bounds: Option<Vec<f64>>,
    /// Epochs over which the effective bound ramps from 0 to its full value
    /// when scheduling is enabled.
    pub schedule_epochs: usize,
    pub aggregation: Aggregation,
    /// Disagreement groups the target loss drives. Usually all of them;
    /// settings where only one conflict direction exists can restrict it.
    pub active_groups: Vec<GroupLabels>,
    /// Per-group loss weights, aligned with `active_groups`; `None` means 1.
    pub group_weights: Option<Vec<f64>>,
}

impl MixRateConfig {
    /// Balanced config over every disagreement group of `f` concepts.
    pub fn balanced(f: usize, lower_bound: f64) -> Self {
        MixRateConfig {
            lower_bound,
            group_bounds: None,
            schedule_epochs: 0,
            aggregation: Aggregation::PerGroup,
            active_groups: disagreement_groups(f),
            group_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lower_bound) {
            return Err(CoreError::config("lower_bound must lie in [0, 1]"));
        }
        if self.active_groups.is_empty() {
            return Err(CoreError::config("need at least one active group"));
        }
        let f = self.active_groups[0].len();
        for g in &self.active_groups {
            if g.len() != f || g.iter().any(|&b| b > 1) {
                return Err(CoreError::config("malformed group labels"));
            }
            if !is_disagreement(g) {
                return Err(CoreError::config(format!(
                    "group {g:?} is an agreement group; only disagreement groups carry target loss"
                )));
            }
        }
        if let Some(bounds) = &self.group_bounds {
            if bounds.len() != self.active_groups.len() {
                return Err(CoreError::config("group_bounds length must match active_groups"));
            }
            if bounds.iter().any(|&b| !(0.0..=1.0).contains(&b)) {
                return Err(CoreError::config("group bounds must lie in [0, 1]"));
            }
            let sum: f64 = bounds.iter().sum();
            if sum > self.lower_bound + 1e-9 {
                return Err(CoreError::config(format!(
                    "group bounds sum {sum} exceeds total lower bound {}",
                    self.lower_bound
                )));
            }
        }
        if let Some(w) = &self.group_weights {
            if w.len() != self.active_groups.len() || w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(CoreError::config("group weights must be nonnegative, one per group"));
            }
        }
        Ok(())
    }

    /// Effective per-group bounds: explicit ones, or the total split evenly.
    pub fn effective_group_bounds(&self) -> Vec<f64> {
        match &self.group_bounds {
            Some(b) => b.clone(),
            None => {
                let k = self.active_groups.len() as f64;
                vec![self.lower_bound / k; self.active_groups.len()]
            }
        }
    }

    pub fn weight(&self, group_idx: usize) -> f64 {
        self.group_weights.as_ref().map_or(1.0, |w| w[group_idx])
    }
}

/// Linear mix-rate ramp: the effective bound at epoch `t` of a horizon of
/// `schedule_epochs`, capped at the full bound.
pub fn schedule_lower_bound(t: usize, schedule_epochs: usize, lower_bound: f64) -> f64 {
    if schedule_epochs == 0 {
        return lower_bound;
    }
    (t as f64 / schedule_epochs as f64 * lower_bound).min(lower_bound)
}

/// Mean over instances of the summed per-head NLL against that head's label:
/// (1/N) sum_i sum_j -log p_j(y_ij | x_i).
pub fn source_loss(probs: &HeadProbs, labels_per_head: &[Vec<usize>]) -> Result<f64> {
    check_labels(probs, labels_per_head)?;
    let n = probs[0].len();
    let mut total = 0.0;
    for (head, labels) in probs.iter().zip(labels_per_head) {
        for (p, &y) in head.iter().zip(labels) {
            total += nll(p[y]);
        }
    }
    Ok(total / n as f64)
}

/// [`source_loss`] plus its gradient on the logits.
pub fn source_loss_grad(probs: &HeadProbs, labels_per_head: &[Vec<usize>]) -> Result<(f64, LogitGrads)> {
    check_labels(probs, labels_per_head)?;
    let n = probs[0].len();
    let inv_n = 1.0 / n as f64;
    let mut grads: LogitGrads = Vec::with_capacity(probs.len());
    for (head, labels) in probs.iter().zip(labels_per_head) {
        let mut g = Vec::with_capacity(n);
        for (p, &y) in head.iter().zip(labels) {
            // d(NLL)/dz through the softmax is p - onehot(y); the clamp only
            // binds when p[y] underflows, where the pull stays saturated.
            let mut d = [p[0] * inv_n, p[1] * inv_n];
            d[y] -= inv_n;
            g.push(d);
        }
        grads.push(g);
    }
    Ok((source_loss(probs, labels_per_head)?, grads))
}

fn check_labels(probs: &HeadProbs, labels_per_head: &[Vec<usize>]) -> Result<()> {
    if probs.is_empty() || probs[0].is_empty() {
        return Err(CoreError::shape("empty batch"));
    }
    let n = probs[0].len();
    if labels_per_head.len() != probs.len() {
        return Err(CoreError::shape("one label vector per head required"));
    }
    for (h, labels) in labels_per_head.iter().enumerate() {
        if labels.len() != n {
            return Err(CoreError::shape(format!("head {h} labels length != batch")));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(CoreError::shape(format!("head {h} has out-of-range label")));
        }
    }
    Ok(())
}

/// Probability each instance belongs to `group`: the product over heads of
/// that head's probability for the group's label.
pub fn group_probs(probs: &HeadProbs, group: &[u8]) -> Result<Vec<f64>> {
    if group.len() != probs.len() {
        return Err(CoreError::shape("group labels must have one entry per head"));
    }
    if !is_disagreement(group) {
        return Err(CoreError::config(
            "group probabilities are only used for disagreement groups",
        ));
    }
    let n = probs[0].len();
    let mut out = vec![1.0; n];
    for (head, &c) in probs.iter().zip(group) {
        for (o, p) in out.iter_mut().zip(head) {
            *o *= p[c as usize];
        }
    }
    Ok(out)
}

/// Group probabilities for every active group: `probs[instance][group]`.
#[derive(Debug, Clone)]
pub struct GroupProbTable {
    pub n: usize,
    pub groups: Vec<GroupLabels>,
    /// Row-major n x groups.
    pub probs: Vec<f64>,
}

pub fn group_prob_table(probs: &HeadProbs, cfg: &MixRateConfig) -> Result<GroupProbTable> {
    let n = probs.first().map_or(0, |h| h.len());
    let mut table = vec![0.0; n * cfg.active_groups.len()];
    for (gi, group) in cfg.active_groups.iter().enumerate() {
        let col = group_probs(probs, group)?;
        for (i, v) in col.into_iter().enumerate() {
            table[i * cfg.active_groups.len() + gi] = v;
        }
    }
    Ok(GroupProbTable {
        n,
        groups: cfg.active_groups.clone(),
        probs: table,
    })
}

impl GroupProbTable {
    pub fn prob(&self, i: usize, g: usize) -> f64 {
        self.probs[i * self.groups.len() + g]
    }
}

/// Hard top-k selection per group: `selected[g]` lists the chosen instance
/// indices, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMask {
    pub n: usize,
    pub selected: Vec<Vec<usize>>,
}

impl GroupMask {
    pub fn is_set(&self, i: usize, g: usize) -> bool {
        self.selected[g].binary_search(&i).is_ok()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.len()).collect()
    }

    pub fn empty(n: usize, groups: usize) -> Self {
        GroupMask {
            n,
            selected: vec![Vec::new(); groups],
        }
    }
}

/// Build the top-k mask from a group-probability table.
///
/// `bound_scale` multiplies every bound, implementing the schedule (1.0 when
/// unscheduled). Per-group budgets are floor(N * r_g); the aggregated budget
/// is ceil(N * r_total), spent greedily on the best (instance, group) pairs
/// with at most one group per instance.
pub fn topk_mask(table: &GroupProbTable, cfg: &MixRateConfig, bound_scale: f64) -> Result<GroupMask> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&bound_scale) {
        return Err(CoreError::config("bound scale must lie in [0, 1]"));
    }
    let n = table.n;
    let n_groups = table.groups.len();
    if n_groups != cfg.active_groups.len() {
        return Err(CoreError::shape("table groups do not match config"));
    }

    // Sort key shared by both modes: probability descending, then instance
    // ascending, then group ascending. The loss is insensitive to how ties
    // are broken within a group (tied group probability implies tied NLL),
    // but a fixed order keeps masks reproducible.
    match cfg.aggregation {
        Aggregation::PerGroup => {
            let bounds = cfg.effective_group_bounds();
            let mut selected = Vec::with_capacity(n_groups);
            for (g, &b) in bounds.iter().enumerate() {
                let k = (n as f64 * b * bound_scale).floor() as usize;
                if k > n {
                    return Err(CoreError::config(format!(
                        "group {g} budget {k} exceeds batch size {n}"
                    )));
                }
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &bidx| {
                    table
                        .prob(bidx, g)
                        .partial_cmp(&table.prob(a, g))
                        .unwrap()
                        .then(a.cmp(&bidx))
                });
                let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
                chosen.sort_unstable();
                selected.push(chosen);
            }
            Ok(GroupMask { n, selected })
        }
        Aggregation::GroupAggregated => {
            let k = (n as f64 * cfg.lower_bound * bound_scale).ceil() as usize;
            if k > n {
                return Err(CoreError::config(format!(
                    "aggregated budget {k} exceeds batch size {n}"
                )));
            }
            let mut pairs: Vec<(usize, usize)> = (0..n)
                .flat_map(|i| (0..n_groups).map(move |g| (i, g)))
                .collect();
            pairs.sort_by(|&(i1, g1), &(i2, g2)| {
                table
                    .prob(i2, g2)
                    .partial_cmp(&table.prob(i1, g1))
                    .unwrap()
                    .then(i1.cmp(&i2))
                    .then(g1.cmp(&g2))
            });
            // An instance can be pseudo-labeled with only one group; on a
            // conflict the higher-probability pair wins and the budget moves
            // to the next-best pair.
            let mut taken = vec![false; n];
            let mut selected = vec![Vec::new(); n_groups];
            let mut count = 0;
            for (i, g) in pairs {
                if count == k {
                    break;
                }
                if !taken[i] {
                    taken[i] = true;
                    selected[g].push(i);
                    count += 1;
                }
            }
            for s in selected.iter_mut() {
                s.sort_unstable();
            }
            Ok(GroupMask { n, selected })
        }
    }
}

/// ACE pseudo-label loss at a fixed mask:
/// sum_g (w_g / |S_g|) sum_{i in S_g} sum_j -log p_j(c^g_j | x_i).
/// Groups with an empty selection contribute nothing.
pub fn ace_target_loss(probs: &HeadProbs, mask: &GroupMask, cfg: &MixRateConfig) -> Result<f64> {
    check_mask(probs, mask, cfg)?;
    let mut total = 0.0;
    for (g, group) in cfg.active_groups.iter().enumerate() {
        let sel = &mask.selected[g];
        if sel.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for &i in sel {
            for (head, &c) in probs.iter().zip(group) {
                acc += nll(head[i][c as usize]);
            }
        }
        total += cfg.weight(g) * acc / sel.len() as f64;
    }
    Ok(total)
}

/// [`ace_target_loss`] plus its logit gradient. The mask is a constant:
/// gradients flow only through the per-head probabilities.
pub fn ace_target_loss_grad(
    probs: &HeadProbs,
    mask: &GroupMask,
    cfg: &MixRateConfig,
) -> Result<(f64, LogitGrads)> {
    check_mask(probs, mask, cfg)?;
    let n = probs[0].len();
    let mut grads: LogitGrads = probs.iter().map(|_| vec![[0.0, 0.0]; n]).collect();
    for (g, group) in cfg.active_groups.iter().enumerate() {
        let sel = &mask.selected[g];
        if sel.is_empty() {
            continue;
        }
        let scale = cfg.weight(g) / sel.len() as f64;
        for &i in sel {
            for (j, &c) in group.iter().enumerate() {
                let p = probs[j][i];
                let y = c as usize;
                let mut d = [p[0] * scale, p[1] * scale];
                d[y] -= scale;
                grads[j][i][0] += d[0];
                grads[j][i][1] += d[1];
            }
        }
    }
    Ok((ace_target_loss(probs, mask, cfg)?, grads))
}

fn check_mask(probs: &HeadProbs, mask: &GroupMask, cfg: &MixRateConfig) -> Result<()> {
    if probs.is_empty() {
        return Err(CoreError::shape("empty ensemble"));
    }
    let n = probs[0].len();
    if mask.n != n {
        return Err(CoreError::shape("mask batch size does not match probabilities"));
    }
    if mask.selected.len() != cfg.active_groups.len() {
        return Err(CoreError::shape("mask group count does not match config"));
    }
    for group in &cfg.active_groups {
        if group.len() != probs.len() {
            return Err(CoreError::shape("group labels do not match head count"));
        }
    }
    if mask
        .selected
        .iter()
        .any(|s| s.iter().any(|&i| i >= n))
    {
        return Err(CoreError::shape("mask indexes outside the batch"));
    }
    Ok(())
}

/// DivDis mutual-information objective: for each pair of heads, the KL
/// divergence between the batch-estimated joint distribution (mean of
/// per-instance outer products) and the product of its marginals. F = 2 gives
/// the single-pair loss.
pub fn divdis_loss(probs: &HeadProbs) -> Result<f64> {
    let tables = pair_tables(probs)?;
    Ok(tables.iter().map(|t| t.mi()).sum())
}

/// [`divdis_loss`] plus its logit gradient.
pub fn divdis_loss_grad(probs: &HeadProbs) -> Result<(f64, LogitGrads)> {
    let tables = pair_tables(probs)?;
    let n = probs[0].len();
    let inv_n = 1.0 / n as f64;
    let mut dprob: Vec<Vec<[f64; 2]>> = probs.iter().map(|_| vec![[0.0, 0.0]; n]).collect();
    let mut loss = 0.0;
    for t in &tables {
        loss += t.mi();
        // dL/dJ[u][v] = log(J/(a b)) - 1; J = (1/N) sum_i p_i ⊗ q_i.
        let mut dj = [[0.0; 2]; 2];
        for u in 0..2 {
            for v in 0..2 {
                let j = t.joint[u][v].max(PROB_EPS);
                let a = t.marg_a[u].max(PROB_EPS);
                let b = t.marg_b[v].max(PROB_EPS);
                dj[u][v] = (j / (a * b)).ln() - 1.0;
            }
        }
        for i in 0..n {
            let p = probs[t.a][i];
            let q = probs[t.b][i];
            for u in 0..2 {
                for v in 0..2 {
                    dprob[t.a][i][u] += inv_n * dj[u][v] * q[v];
                    dprob[t.b][i][v] += inv_n * dj[u][v] * p[u];
                }
            }
        }
    }
    let grads: LogitGrads = probs
        .iter()
        .enumerate()
        .map(|(h, head)| {
            head.iter()
                .zip(&dprob[h])
                .map(|(p, dp)| softmax2_backward(*p, *dp))
                .collect()
        })
        .collect();
    Ok((loss, grads))
}

struct PairTable {
    a: usize,
    b: usize,
    joint: [[f64; 2]; 2],
    marg_a: [f64; 2],
    marg_b: [f64; 2],
}

impl PairTable {
    fn mi(&self) -> f64 {
        let mut acc = 0.0;
        for u in 0..2 {
            for v in 0..2 {
                let j = self.joint[u][v];
                if j > 0.0 {
                    let a = self.marg_a[u].max(PROB_EPS);
                    let b = self.marg_b[v].max(PROB_EPS);
                    acc += j * (j.max(PROB_EPS) / (a * b)).ln();
                }
            }
        }
        acc
    }
}

fn pair_tables(probs: &HeadProbs) -> Result<Vec<PairTable>> {
    if probs.len() < 2 {
        return Err(CoreError::shape("mutual information needs at least two heads"));
    }
    let n = probs[0].len();
    if n == 0 {
        return Err(CoreError::shape("empty batch"));
    }
    let inv_n = 1.0 / n as f64;
    let mut out = Vec::new();
    for a in 0..probs.len() {
        for b in a + 1..probs.len() {
            let mut joint = [[0.0; 2], [0.0; 2]];
            for i in 0..n {
                let p = probs[a][i];
                let q = probs[b][i];
                for u in 0..2 {
                    for v in 0..2 {
                        joint[u][v] += inv_n * p[u] * q[v];
                    }
                }
            }
            let marg_a = [joint[0][0] + joint[0][1], joint[1][0] + joint[1][1]];
            let marg_b = [joint[0][0] + joint[1][0], joint[0][1] + joint[1][1]];
            out.push(PairTable {
                a,
                b,
                joint,
                marg_a,
                marg_b,
            });
        }
    }
    Ok(out)
}

/// D-BAT disagreement objective against a frozen first head:
/// mean_i -log( p_frozen(0) q(1) + p_frozen(1) q(0) ).
pub fn dbat_loss(frozen: &[[f64; 2]], training: &[[f64; 2]]) -> Result<f64> {
    if frozen.len() != training.len() || frozen.is_empty() {
        return Err(CoreError::shape("frozen/training batches must match and be nonempty"));
    }
    let mut total = 0.0;
    for (p, q) in frozen.iter().zip(training) {
        let d = p[0] * q[1] + p[1] * q[0];
        total += nll(d);
    }
    Ok(total / frozen.len() as f64)
}

/// [`dbat_loss`] plus its gradient on the training head's logits. The frozen
/// head's probabilities are constants.
pub fn dbat_loss_grad(frozen: &[[f64; 2]], training: &[[f64; 2]]) -> Result<(f64, Vec<[f64; 2]>)> {
    let loss = dbat_loss(frozen, training)?;
    let n = frozen.len() as f64;
    let grads = frozen
        .iter()
        .zip(training)
        .map(|(p, q)| {
            let d = p[0] * q[1] + p[1] * q[0];
            if d <= PROB_EPS {
                // Inside the clamp the loss is flat.
                return [0.0, 0.0];
            }
            let dq = [-p[1] / (d * n), -p[0] / (d * n)];
            softmax2_backward(*q, dq)
        })
        .collect();
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn uniform_probs(heads: usize, n: usize) -> HeadProbs {
        vec![vec![[0.5, 0.5]; n]; heads]
    }

    #[test]
    fn source_loss_is_zero_for_perfect_predictions() {
        let probs: HeadProbs = vec![vec![[1.0, 0.0], [0.0, 1.0]]; 2];
        let labels = vec![vec![0, 1], vec![0, 1]];
        assert_eq!(source_loss(&probs, &labels).unwrap(), 0.0);
    }

    #[test]
    fn source_loss_of_uniform_two_head_instance() {
        // Both heads (0.5, 0.5) on one instance: 2 log 2.
        let probs = uniform_probs(2, 1);
        let labels = vec![vec![1], vec![1]];
        let l = source_loss(&probs, &labels).unwrap();
        assert_relative_eq!(l, 2.0 * std::f64::consts::LN_2, max_relative = 1e-12);
        assert_relative_eq!(l, 1.3863, epsilon = 1e-4);
    }

    #[test]
    fn source_loss_clamps_certain_wrong_predictions() {
        let probs: HeadProbs = vec![vec![[1.0, 0.0]]];
        let labels = vec![vec![1]];
        let l = source_loss(&probs, &labels).unwrap();
        assert_relative_eq!(l, -PROB_EPS.ln(), max_relative = 1e-12);
    }

    #[test]
    fn group_probs_of_uniform_heads() {
        let probs = uniform_probs(2, 3);
        let gp = group_probs(&probs, &[0, 1]).unwrap();
        for v in gp {
            assert_relative_eq!(v, 0.25, max_relative = 1e-15);
        }
    }

    #[test]
    fn group_probs_certain_membership() {
        let probs: HeadProbs = vec![vec![[1.0, 0.0]], vec![[0.0, 1.0]]];
        let gp = group_probs(&probs, &[0, 1]).unwrap();
        assert_eq!(gp[0], 1.0);
        let gp_other = group_probs(&probs, &[1, 0]).unwrap();
        assert_eq!(gp_other[0], 0.0);
    }

    #[test]
    fn agreement_group_probs_are_rejected() {
        let probs = uniform_probs(2, 1);
        assert!(group_probs(&probs, &[0, 0]).is_err());
        assert!(group_probs(&probs, &[1, 1]).is_err());
    }

    fn table_from(cols: &[Vec<f64>]) -> GroupProbTable {
        let n = cols[0].len();
        let g = cols.len();
        let mut probs = vec![0.0; n * g];
        for (gi, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                probs[i * g + gi] = v;
            }
        }
        GroupProbTable {
            n,
            groups: disagreement_groups(2),
            probs,
        }
    }

    #[test]
    fn topk_selects_highest_probabilities() {
        // Per-group: probs [0.9, 0.1, 0.8, 0.2], k = 2 -> {0, 2}.
        let table = table_from(&[vec![0.9, 0.1, 0.8, 0.2], vec![0.0, 0.0, 0.0, 0.0]]);
        let mut cfg = MixRateConfig::balanced(2, 1.0);
        cfg.group_bounds = Some(vec![0.5, 0.0]);
        let mask = topk_mask(&table, &cfg, 1.0).unwrap();
        assert_eq!(mask.selected[0], vec![0, 2]);
        assert!(mask.selected[1].is_empty());
    }

    #[test]
    fn zero_budget_gives_empty_mask() {
        let table = table_from(&[vec![0.9, 0.8], vec![0.7, 0.6]]);
        let cfg = MixRateConfig::balanced(2, 0.0);
        let mask = topk_mask(&table, &cfg, 1.0).unwrap();
        assert!(mask.selected.iter().all(|s| s.is_empty()));
    }

    #[test]
    fn aggregated_topk_resolves_instance_conflicts() {
        // Pairs: (i0,g0)=0.9, (i0,g1)=0.85, (i1,g1)=0.3; k=2 keeps (i0,g0)
        // and moves on to (i1,g1).
        let table = table_from(&[vec![0.9, 0.0], vec![0.85, 0.3]]);
        let mut cfg = MixRateConfig::balanced(2, 1.0);
        cfg.aggregation = Aggregation::GroupAggregated;
        cfg.lower_bound = 1.0;
        let mask = topk_mask(&table, &cfg, 1.0).unwrap();
        assert_eq!(mask.selected[0], vec![0]);
        assert_eq!(mask.selected[1], vec![1]);
    }

    #[test]
    fn budgets_larger_than_batch_are_rejected() {
        let table = table_from(&[vec![0.5; 3], vec![0.5; 3]]);
        let mut cfg = MixRateConfig::balanced(2, 1.0);
        cfg.group_bounds = Some(vec![0.9, 0.1]);
        // floor(3 * 0.9) = 2 fine; force overflow via scale 1 and bound > 1
        // is rejected by validation, so use an aggregated budget instead.
        cfg.aggregation = Aggregation::GroupAggregated;
        cfg.lower_bound = 1.0;
        assert!(topk_mask(&table, &cfg, 1.0).is_ok());
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(schedule_lower_bound(0, 10, 0.4), 0.0);
        assert_relative_eq!(schedule_lower_bound(5, 10, 0.4), 0.2, max_relative = 1e-15);
        assert_relative_eq!(schedule_lower_bound(10, 10, 0.4), 0.4, max_relative = 1e-15);
        assert_relative_eq!(schedule_lower_bound(25, 10, 0.4), 0.4, max_relative = 1e-15);
    }

    #[test]
    fn ace_loss_on_uniform_heads_is_twice_log_two_per_group() {
        // Single selected instance per group, both heads uniform: each group
        // term is 2 log 2.
        let probs = uniform_probs(2, 4);
        let cfg = MixRateConfig::balanced(2, 0.5);
        let mask = GroupMask {
            n: 4,
            selected: vec![vec![0], vec![1]],
        };
        let l = ace_target_loss(&probs, &mask, &cfg).unwrap();
        assert_relative_eq!(l, 4.0 * std::f64::consts::LN_2, max_relative = 1e-12);
    }

    #[test]
    fn ace_loss_empty_mask_is_zero() {
        let probs = uniform_probs(2, 4);
        let cfg = MixRateConfig::balanced(2, 0.0);
        let mask = GroupMask::empty(4, 2);
        assert_eq!(ace_target_loss(&probs, &mask, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn ace_loss_expands_into_per_group_means() {
        // Hand expansion for F=2: the loss must equal
        //   w0/|S01| sum_{S01} [nll(p1(0)) + nll(p2(1))]
        // + w1/|S10| sum_{S10} [nll(p1(1)) + nll(p2(0))].
        let mut rng = crate::rng::Rng::new(40);
        let n = 8;
        let probs: HeadProbs = (0..2)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        let p = rng.uniform_in(0.05, 0.95);
                        [p, 1.0 - p]
                    })
                    .collect()
            })
            .collect();
        let mut cfg = MixRateConfig::balanced(2, 0.5);
        cfg.group_weights = Some(vec![1.25, 0.75]);
        let mask = GroupMask {
            n,
            selected: vec![vec![0, 3, 5], vec![1, 2]],
        };
        let l = ace_target_loss(&probs, &mask, &cfg).unwrap();

        let mut expect = 0.0;
        let s01: f64 = [0usize, 3, 5]
            .iter()
            .map(|&i| nll(probs[0][i][0]) + nll(probs[1][i][1]))
            .sum();
        expect += 1.25 * s01 / 3.0;
        let s10: f64 = [1usize, 2]
            .iter()
            .map(|&i| nll(probs[0][i][1]) + nll(probs[1][i][0]))
            .sum();
        expect += 0.75 * s10 / 2.0;
        assert_relative_eq!(l, expect, max_relative = 1e-12);
    }

    #[test]
    fn divdis_is_zero_when_joint_factorizes() {
        // Four instances hitting each label combination with certainty:
        // joint = uniform = product of marginals.
        let probs: HeadProbs = vec![
            vec![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]],
            vec![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]],
        ];
        let l = divdis_loss(&probs).unwrap();
        assert!(l.abs() < 1e-12, "loss {l}");
    }

    #[test]
    fn divdis_of_deterministic_agreeing_heads_is_log_two() {
        // Heads always agree, half the batch in each class: joint is
        // diagonal(0.5, 0.5), marginals uniform -> KL = log 2.
        let probs: HeadProbs = vec![
            vec![[1.0, 0.0], [0.0, 1.0]],
            vec![[1.0, 0.0], [0.0, 1.0]],
        ];
        let l = divdis_loss(&probs).unwrap();
        assert_relative_eq!(l, std::f64::consts::LN_2, max_relative = 1e-9);
    }

    #[test]
    fn divdis_invariant_to_relabeling_heads() {
        let mut rng = crate::rng::Rng::new(41);
        let n = 16;
        let mk = |rng: &mut crate::rng::Rng| -> Vec<[f64; 2]> {
            (0..n)
                .map(|_| {
                    let p = rng.uniform_in(0.01, 0.99);
                    [p, 1.0 - p]
                })
                .collect()
        };
        let h1 = mk(&mut rng);
        let h2 = mk(&mut rng);
        let base = divdis_loss(&vec![h1.clone(), h2.clone()]).unwrap();
        let flip = |h: &[[f64; 2]]| h.iter().map(|p| [p[1], p[0]]).collect::<Vec<_>>();
        let flipped = divdis_loss(&vec![flip(&h1), h2.clone()]).unwrap();
        assert_relative_eq!(base, flipped, max_relative = 1e-9);
        let swapped = divdis_loss(&vec![h2, h1]).unwrap();
        assert_relative_eq!(base, swapped, max_relative = 1e-9);
    }

    #[test]
    fn dbat_certain_disagreement_is_zero() {
        let frozen = vec![[1.0, 0.0], [0.0, 1.0]];
        let training = vec![[0.0, 1.0], [1.0, 0.0]];
        assert_relative_eq!(dbat_loss(&frozen, &training).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn dbat_uniform_heads_give_log_two() {
        let frozen = vec![[0.5, 0.5]; 3];
        let training = vec![[0.5, 0.5]; 3];
        assert_relative_eq!(
            dbat_loss(&frozen, &training).unwrap(),
            std::f64::consts::LN_2,
            max_relative = 1e-12
        );
    }

    #[test]
    fn dbat_certain_agreement_hits_the_clamp() {
        let frozen = vec![[1.0, 0.0]];
        let training = vec![[1.0, 0.0]];
        assert_relative_eq!(
            dbat_loss(&frozen, &training).unwrap(),
            -PROB_EPS.ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn config_validation_rejects_bad_bounds() {
        let mut cfg = MixRateConfig::balanced(2, 0.4);
        cfg.group_bounds = Some(vec![0.3, 0.3]);
        assert!(cfg.validate().is_err());
        cfg.group_bounds = Some(vec![0.2, 0.2]);
        cfg.validate().unwrap();
        let mut bad_group = MixRateConfig::balanced(2, 0.4);
        bad_group.active_groups = vec![vec![0, 0]];
        assert!(bad_group.validate().is_err());
    }

    proptest! {
        /// Raising one instance's group probability never evicts it from
        /// that group's selection.
        #[test]
        fn topk_mask_is_monotone(probs in proptest::collection::vec(0.0f64..1.0, 6), idx in 0usize..6, bump in 0.0f64..1.0) {
            let other: Vec<f64> = probs.iter().map(|p| 1.0 - p).collect();
            let table = table_from(&[probs.clone(), other.clone()]);
            let cfg = MixRateConfig::balanced(2, 0.6);
            let mask = topk_mask(&table, &cfg, 1.0).unwrap();
            let mut bumped = probs.clone();
            bumped[idx] = (bumped[idx] + bump).min(1.0);
            let table2 = table_from(&[bumped, other]);
            let mask2 = topk_mask(&table2, &cfg, 1.0).unwrap();
            if mask.is_set(idx, 0) {
                prop_assert!(mask2.is_set(idx, 0));
            }
        }

        /// The ACE loss value is invariant to permuting the batch (ties in
        /// group probability carry tied NLL contributions).
        #[test]
        fn ace_loss_permutation_invariant(seed in 0u64..1000) {
            let mut rng = crate::rng::Rng::new(seed);
            let n = 10;
            let probs: HeadProbs = (0..2).map(|_| (0..n).map(|_| {
                let p = rng.uniform_in(0.05, 0.95);
                [p, 1.0 - p]
            }).collect()).collect();
            let cfg = MixRateConfig::balanced(2, 0.4);
            let table = group_prob_table(&probs, &cfg).unwrap();
            let mask = topk_mask(&table, &cfg, 1.0).unwrap();
            let base = ace_target_loss(&probs, &mask, &cfg).unwrap();

            // Rotate the batch by a derived offset.
            let shift = (seed as usize % (n - 1)) + 1;
            let rotate = |h: &Vec<[f64;2]>| -> Vec<[f64;2]> {
                (0..n).map(|i| h[(i + shift) % n]).collect()
            };
            let probs2: HeadProbs = probs.iter().map(rotate).collect();
            let table2 = group_prob_table(&probs2, &cfg).unwrap();
            let mask2 = topk_mask(&table2, &cfg, 1.0).unwrap();
            let rotated = ace_target_loss(&probs2, &mask2, &cfg).unwrap();
            prop_assert!((base - rotated).abs() < 1e-9, "{base} vs {rotated}");
        }

        /// Scheduled budgets never shrink as epochs advance.
        #[test]
        fn schedule_is_monotone(t1 in 0usize..200, t2 in 0usize..200, horizon in 1usize..100, bound in 0.0f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(schedule_lower_bound(lo, horizon, bound) <= schedule_lower_bound(hi, horizon, bound) + 1e-15);
        }

        /// Both target losses are nonnegative on arbitrary probabilities.
        #[test]
        fn losses_are_nonnegative(seed in 0u64..500) {
            let mut rng = crate::rng::Rng::new(seed);
            let n = 7;
            let probs: HeadProbs = (0..2).map(|_| (0..n).map(|_| {
                let p = rng.uniform();
                [p, 1.0 - p]
            }).collect()).collect();
            prop_assert!(divdis_loss(&probs).unwrap() >= -1e-12);
            let cfg = MixRateConfig::balanced(2, 0.5);
            let table = group_prob_table(&probs, &cfg).unwrap();
            let mask = topk_mask(&table, &cfg, 1.0).unwrap();
            prop_assert!(ace_target_loss(&probs, &mask, &cfg).unwrap() >= 0.0);
            prop_assert!(dbat_loss(&probs[0], &probs[1]).unwrap() >= 0.0);
        }
    }
}
