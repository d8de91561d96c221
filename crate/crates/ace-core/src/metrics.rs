//! Evaluation with oracle head-to-concept assignment.
//!
//! Heads are unordered: which head ends up tracking which concept depends on
//! the seed. Evaluation therefore scores every head against every concept and
//! picks the assignment (a permutation) maximizing total accuracy, then
//! reports per-concept accuracy, group breakdowns, and the diverse
//! generalization error under that assignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::nn::{Batch, EnsembleModel, HeadProbs};

/// argmax prediction of a binary distribution; exact ties resolve to class 0.
pub fn predict(p: [f64; 2]) -> usize {
    usize::from(p[1] > p[0])
}

/// Hard predictions per head for a dataset.
pub fn head_predictions(model: &EnsembleModel, data: &Dataset) -> Result<Vec<Vec<usize>>> {
    let (n, feats) = data.features();
    let batch = Batch::new(n, data.dim, feats)?;
    let fwd = model.forward(&batch)?;
    Ok(fwd
        .probs
        .iter()
        .map(|head| head.iter().map(|&p| predict(p)).collect())
        .collect())
}

/// Accuracy matrix: `acc[head][concept]` over the whole dataset.
pub fn accuracy_matrix(preds: &[Vec<usize>], data: &Dataset) -> Result<Vec<Vec<f64>>> {
    if preds.is_empty() {
        return Err(CoreError::shape("no heads"));
    }
    let n = data.len();
    if n == 0 || preds.iter().any(|p| p.len() != n) {
        return Err(CoreError::shape("prediction length does not match dataset"));
    }
    let f = data.f;
    let mut acc = vec![vec![0.0; f]; preds.len()];
    for (h, hp) in preds.iter().enumerate() {
        for c in 0..f {
            let correct = hp
                .iter()
                .zip(&data.points)
                .filter(|(&p, pt)| p == pt.c[c] as usize)
                .count();
            acc[h][c] = correct as f64 / n as f64;
        }
    }
    Ok(acc)
}

/// Oracle assignment: the permutation `pi` (head -> concept) maximizing
/// `sum_h acc[h][pi(h)]`, found by exhaustive search over permutations.
/// Practical for the ensemble sizes used here (F <= 4).
pub fn assign_heads(acc: &[Vec<f64>]) -> Result<Vec<usize>> {
    let f = acc.len();
    if f == 0 || acc.iter().any(|row| row.len() != f) {
        return Err(CoreError::shape("accuracy matrix must be square"));
    }
    if f > 4 {
        return Err(CoreError::config(
            "exhaustive assignment is limited to at most 4 heads",
        ));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    permutations(f, &mut |perm| {
        let score: f64 = perm.iter().enumerate().map(|(h, &c)| acc[h][c]).sum();
        match &best {
            Some((s, _)) if *s >= score => {}
            _ => best = Some((score, perm.to_vec())),
        }
    });
    Ok(best.unwrap().1)
}

fn permutations(f: usize, visit: &mut impl FnMut(&[usize])) {
    let mut items: Vec<usize> = (0..f).collect();
    heap_permute(&mut items, f, visit);
}

fn heap_permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == 1 {
        visit(items);
        return;
    }
    for i in 0..k {
        heap_permute(items, k - 1, visit);
        if k % 2 == 0 {
            items.swap(i, k - 1);
        } else {
            items.swap(0, k - 1);
        }
    }
}

/// Diverse generalization error: the summed per-head error against the
/// assigned concepts, `sum_h P(c_{pi(h)} != prediction_h)`.
pub fn diverse_gen_error(acc: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(h, &c)| 1.0 - acc[h][c])
        .sum()
}

/// Full evaluation summary at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    /// Head assigned to each concept (inverse of the head->concept map).
    pub assignment: Vec<usize>,
    /// Accuracy of the assigned head on each concept.
    pub per_concept_accuracy: Vec<f64>,
    /// Accuracy on concept 1 restricted to each nonempty group, keyed by the
    /// group's label string (e.g. "01").
    pub per_group_accuracy: BTreeMap<String, f64>,
    /// Groups present in the config universe but absent from the test set.
    pub empty_groups: Vec<String>,
    pub worst_group_accuracy: f64,
    /// Mean of the assigned heads' accuracies.
    pub multilabel_mean: f64,
    /// Fraction of instances where every assigned head is simultaneously
    /// correct.
    pub multilabel_joint: f64,
    pub diverse_gen_error: f64,
}

/// Evaluate a model on a labeled test set.
pub fn evaluate(model: &EnsembleModel, data: &Dataset) -> Result<TestMetrics> {
    let preds = head_predictions(model, data)?;
    evaluate_predictions(&preds, data)
}

/// Metrics from precomputed hard predictions.
pub fn evaluate_predictions(preds: &[Vec<usize>], data: &Dataset) -> Result<TestMetrics> {
    let acc = accuracy_matrix(preds, data)?;
    let head_to_concept = assign_heads(&acc)?;
    let f = data.f;

    // Invert: concept -> head.
    let mut concept_to_head = vec![0usize; f];
    for (h, &c) in head_to_concept.iter().enumerate() {
        concept_to_head[c] = h;
    }
    let per_concept_accuracy: Vec<f64> = (0..f)
        .map(|c| acc[concept_to_head[c]][c])
        .collect();

    // Group breakdown: concept-1 accuracy of its assigned head, per group.
    let gt_head = concept_to_head[0];
    let mut group_counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (pt, &p) in data.points.iter().zip(&preds[gt_head]) {
        let entry = group_counts.entry(pt.group()).or_insert((0, 0));
        entry.0 += 1;
        if p == pt.c[0] as usize {
            entry.1 += 1;
        }
    }
    let label_of = |g: usize| -> String {
        (0..f).map(|j| char::from(b'0' + ((g >> (f - 1 - j)) & 1) as u8)).collect()
    };
    let mut per_group_accuracy = BTreeMap::new();
    for (&g, &(n, correct)) in &group_counts {
        per_group_accuracy.insert(label_of(g), correct as f64 / n as f64);
    }
    let empty_groups: Vec<String> = (0..(1usize << f))
        .filter(|g| !group_counts.contains_key(g))
        .map(label_of)
        .collect();
    let worst_group_accuracy = per_group_accuracy
        .values()
        .fold(f64::INFINITY, |a, &b| a.min(b));

    let multilabel_mean = per_concept_accuracy.iter().sum::<f64>() / f as f64;
    let n = data.len();
    let joint = data
        .points
        .iter()
        .enumerate()
        .filter(|(i, pt)| {
            (0..f).all(|c| preds[concept_to_head[c]][*i] == pt.c[c] as usize)
        })
        .count();
    let multilabel_joint = joint as f64 / n as f64;

    Ok(TestMetrics {
        assignment: concept_to_head,
        per_concept_accuracy,
        per_group_accuracy,
        empty_groups,
        worst_group_accuracy,
        multilabel_mean,
        multilabel_joint,
        diverse_gen_error: diverse_gen_error(&acc, &head_to_concept),
    })
}

/// Plain accuracy of per-head probabilities against per-head labels, averaged
/// over heads. Used for source-validation model selection.
pub fn mean_head_accuracy(probs: &HeadProbs, labels_per_head: &[Vec<usize>]) -> Result<f64> {
    if probs.len() != labels_per_head.len() || probs.is_empty() {
        return Err(CoreError::shape("labels must match heads"));
    }
    let n = probs[0].len();
    let mut acc = 0.0;
    for (head, labels) in probs.iter().zip(labels_per_head) {
        if head.len() != n || labels.len() != n {
            return Err(CoreError::shape("ragged accuracy input"));
        }
        let correct = head
            .iter()
            .zip(labels)
            .filter(|&(&p, &y)| predict(p) == y)
            .count();
        acc += correct as f64 / n as f64;
    }
    Ok(acc / probs.len() as f64)
}

/// Difference in a metric against a baseline run (method minus baseline).
pub fn accuracy_gain(method_value: f64, baseline_value: f64) -> f64 {
    method_value - baseline_value
}
