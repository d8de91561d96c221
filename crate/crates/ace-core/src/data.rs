//! Synthetic concept-labeled benchmarks.
//!
//! Both generators produce points carrying a full tuple of binary concept
//! labels plus a training label `y` (the first concept by default). The
//! source distribution keeps the concepts correlated; the target distribution
//! mixes in disagreement groups at a configurable rate.
//!
//! Group convention, F = 2: a group is the concept tuple (c1, c2), indexed as
//! `2*c1 + c2`, i.e. (0,0)=0, (0,1)=1, (1,0)=2, (1,1)=3. Groups 1 and 2 are
//! the disagreement groups; the mix rate is their combined frequency.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::Rng;

/// One instance: features, the full concept tuple, and the training label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptLabeledPoint {
    pub x: Vec<f64>,
    /// Binary concept labels, length F.
    pub c: Vec<u8>,
    /// Training label; equals `c[0]` for every generator here.
    pub y: u8,
}

impl ConceptLabeledPoint {
    /// Group index: concepts read as a big-endian bit string.
    pub fn group(&self) -> usize {
        self.c.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize)
    }

    pub fn is_disagreement(&self) -> bool {
        self.c.iter().any(|&b| b != self.c[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Number of concepts per point.
    pub f: usize,
    pub dim: usize,
    pub points: Vec<ConceptLabeledPoint>,
}

impl Dataset {
    pub fn new(f: usize, dim: usize, points: Vec<ConceptLabeledPoint>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if p.x.len() != dim || p.c.len() != f {
                return Err(CoreError::shape(format!("point {i} has inconsistent shape")));
            }
            if p.c.iter().any(|&b| b > 1) || p.y > 1 {
                return Err(CoreError::config(format!("point {i} has non-binary labels")));
            }
        }
        Ok(Dataset { f, dim, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Feature rows flattened for the network.
    pub fn features(&self) -> (usize, Vec<f64>) {
        let mut data = Vec::with_capacity(self.len() * self.dim);
        for p in &self.points {
            data.extend_from_slice(&p.x);
        }
        (self.len(), data)
    }

    /// Label targets for head `j`: concept labels when `concept_labels` is
    /// set, the shared `y` otherwise.
    pub fn head_labels(&self, head: usize, concept_labels: bool) -> Vec<usize> {
        self.points
            .iter()
            .map(|p| {
                if concept_labels {
                    p.c[head] as usize
                } else {
                    p.y as usize
                }
            })
            .collect()
    }

    /// CSV with header `x0,...,x{dim-1},c1,...,cF,y`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for i in 0..self.dim {
            out.push_str(&format!("x{i},"));
        }
        for j in 0..self.f {
            out.push_str(&format!("c{},", j + 1));
        }
        out.push_str("y\n");
        for p in &self.points {
            for v in &p.x {
                out.push_str(&format!("{v},"));
            }
            for c in &p.c {
                out.push_str(&format!("{c},"));
            }
            out.push_str(&format!("{}\n", p.y));
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let f = std::fs::File::open(path)?;
        let mut lines = BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| CoreError::config("empty dataset csv"))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let dim = cols.iter().filter(|c| c.starts_with('x')).count();
        let n_concepts = cols.iter().filter(|c| c.starts_with('c')).count();
        if dim == 0 || n_concepts == 0 || cols.last() != Some(&"y") {
            return Err(CoreError::config(format!("unrecognized dataset header: {header}")));
        }
        let mut points = Vec::new();
        for (ln, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != dim + n_concepts + 1 {
                return Err(CoreError::config(format!("row {} has {} fields", ln + 2, fields.len())));
            }
            let parse_f = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|e| CoreError::config(format!("row {}: bad float {s}: {e}", ln + 2)))
            };
            let parse_b = |s: &str| -> Result<u8> {
                match s {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    _ => Err(CoreError::config(format!("row {}: bad label {s}", ln + 2))),
                }
            };
            let x = fields[..dim].iter().map(|s| parse_f(s)).collect::<Result<_>>()?;
            let c = fields[dim..dim + n_concepts]
                .iter()
                .map(|s| parse_b(s))
                .collect::<Result<_>>()?;
            let y = parse_b(fields[dim + n_concepts])?;
            points.push(ConceptLabeledPoint { x, c, y });
        }
        Dataset::new(n_concepts, dim, points)
    }
}

/// Frequencies over the 2^F concept groups, indexed by group bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFreqs(pub Vec<f64>);

impl GroupFreqs {
    pub fn f(&self) -> usize {
        self.0.len().trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.0.len().is_power_of_two() || self.0.len() < 4 {
            return Err(CoreError::config("group frequencies must cover 2^F groups, F >= 2"));
        }
        if self.0.iter().any(|&p| !(0.0..=1.0).contains(&p) || !p.is_finite()) {
            return Err(CoreError::config("group frequencies must lie in [0, 1]"));
        }
        let total: f64 = self.0.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CoreError::config(format!("group frequencies sum to {total}, expected 1")));
        }
        Ok(())
    }

    pub fn is_disagreement_group(f: usize, g: usize) -> bool {
        let first = (g >> (f - 1)) & 1;
        (0..f).any(|j| (g >> (f - 1 - j)) & 1 != first)
    }

    /// Combined frequency of the disagreement groups.
    pub fn mix_rate(&self) -> f64 {
        let f = self.f();
        self.0
            .iter()
            .enumerate()
            .filter(|(g, _)| Self::is_disagreement_group(f, *g))
            .map(|(_, &p)| p)
            .sum()
    }

    /// Rescale so the disagreement groups sum to `r`, preserving the relative
    /// ratios inside both the disagreement and agreement blocks.
    pub fn with_mix_rate(&self, r: f64) -> Result<GroupFreqs> {
        if !(0.0..=1.0).contains(&r) {
            return Err(CoreError::config(format!("mix rate {r} outside [0, 1]")));
        }
        let f = self.f();
        let cur_dis = self.mix_rate();
        let cur_agr = 1.0 - cur_dis;
        let mut out = self.0.clone();
        for (g, p) in out.iter_mut().enumerate() {
            if Self::is_disagreement_group(f, g) {
                *p = if cur_dis > 0.0 {
                    *p / cur_dis * r
                } else if r > 0.0 {
                    // No template ratios available: split the requested mass
                    // evenly across disagreement groups.
                    r / ((1 << f) - 2) as f64
                } else {
                    0.0
                };
            } else {
                *p = if cur_agr > 0.0 {
                    *p / cur_agr * (1.0 - r)
                } else {
                    (1.0 - r) / 2.0
                };
            }
        }
        let out = GroupFreqs(out);
        out.validate()?;
        Ok(out)
    }
}

/// Sampling spec shared by both generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Group frequencies on the source. Disagreement groups must be zero
    /// unless `incomplete_rate` is positive.
    pub source_freqs: GroupFreqs,
    pub target_freqs: GroupFreqs,
    pub n_source: usize,
    pub n_target: usize,
    /// Fraction of source draws replaced by disagreement-group instances
    /// (incomplete correlation). Zero for the fully correlated regime.
    pub incomplete_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "name")]
pub enum DatasetKind {
    /// Four isotropic Gaussians at the corners (+-0.5, +-0.5); concept 1 is
    /// the sign of x1, concept 2 the sign of x2.
    ToyGrid { sigma: f64 },
    /// Concatenated feature blocks: a near-separable "simple" block encoding
    /// concept 2 and a rotated, noisier "complex" block encoding concept 1.
    Dominoes(DominoesSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominoesSpec {
    pub d_simple: usize,
    pub d_complex: usize,
    /// Distance of the simple block's class means from the origin.
    pub margin_simple: f64,
    pub noise_simple: f64,
    pub noise_complex: f64,
    /// Probability that the complex block encodes the flipped concept,
    /// capping how predictive it can be. This is the "simplicity gap" knob.
    pub label_noise_complex: f64,
    /// Apply a fixed random rotation to the complex block so the concept is
    /// not axis-aligned.
    pub rotate: bool,
}

impl DominoesSpec {
    pub fn default_gap(gap: f64) -> Self {
        DominoesSpec {
            d_simple: 4,
            d_complex: 8,
            margin_simple: 3.0,
            noise_simple: 0.1,
            noise_complex: 0.35,
            label_noise_complex: 0.02 * gap,
            rotate: true,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.source_freqs.validate()?;
        self.target_freqs.validate()?;
        if self.source_freqs.0.len() != self.target_freqs.0.len() {
            return Err(CoreError::config("source/target group counts differ"));
        }
        if !(0.0..=1.0).contains(&self.incomplete_rate) {
            return Err(CoreError::config("incomplete_rate must lie in [0, 1]"));
        }
        if self.incomplete_rate == 0.0 && self.source_freqs.mix_rate() > 0.0 {
            return Err(CoreError::config(
                "source has disagreement-group mass but incomplete correlation is off",
            ));
        }
        match &self.kind {
            DatasetKind::ToyGrid { sigma } => {
                if *sigma <= 0.0 {
                    return Err(CoreError::config("toy grid sigma must be positive"));
                }
            }
            DatasetKind::Dominoes(spec) => {
                if spec.d_simple == 0 || spec.d_complex == 0 {
                    return Err(CoreError::config("dominoes blocks need at least one dimension"));
                }
                if spec.margin_simple <= 0.0 || spec.noise_simple < 0.0 || spec.noise_complex < 0.0 {
                    return Err(CoreError::config("dominoes margin/noise parameters out of range"));
                }
                if !(0.0..=0.5).contains(&spec.label_noise_complex) {
                    return Err(CoreError::config("complex label noise must lie in [0, 0.5]"));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            DatasetKind::ToyGrid { .. } => 2,
            DatasetKind::Dominoes(s) => s.d_simple + s.d_complex,
        }
    }
}

/// Generate the (source, target) pair described by `config`.
pub fn generate(config: &DatasetConfig) -> Result<(Dataset, Dataset)> {
    generate_structured(config, config.seed)
}

/// As `generate`, but with the painter's structural randomness (the dominoes
/// rotation) pinned to `structure_seed`, so splits drawn under different
/// point seeds still share one feature map.
fn generate_structured(
    config: &DatasetConfig,
    structure_seed: u64,
) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let mut src_rng = root.derive(0x50);
    let mut tgt_rng = root.derive(0x54);
    let painter = Painter::new(&config.kind, &Rng::new(structure_seed).derive(0x57))?;

    let src_freqs = source_draw_freqs(config);
    let source = draw(config, &painter, &src_freqs, config.n_source, &mut src_rng)?;
    let target = draw(config, &painter, &config.target_freqs, config.n_target, &mut tgt_rng)?;
    Ok((source, target))
}

/// Effective source group frequencies after incomplete-correlation mixing:
/// with rate rho, a draw comes from the disagreement groups (proportioned
/// like the target's disagreement mass) instead of the configured source
/// groups.
fn source_draw_freqs(config: &DatasetConfig) -> GroupFreqs {
    let rho = config.incomplete_rate;
    if rho == 0.0 {
        return config.source_freqs.clone();
    }
    let f = config.source_freqs.f();
    let tgt_dis = config.target_freqs.mix_rate();
    let n_dis = ((1usize << f) - 2) as f64;
    let mut out = vec![0.0; config.source_freqs.0.len()];
    for (g, slot) in out.iter_mut().enumerate() {
        if GroupFreqs::is_disagreement_group(f, g) {
            let rel = if tgt_dis > 0.0 {
                config.target_freqs.0[g] / tgt_dis
            } else {
                1.0 / n_dis
            };
            *slot = config.source_freqs.0[g] * (1.0 - rho) + rho * rel;
        } else {
            *slot = config.source_freqs.0[g] * (1.0 - rho);
        }
    }
    GroupFreqs(out)
}

/// Feature synthesizer for a fixed group label.
enum Painter {
    ToyGrid {
        sigma: f64,
    },
    Dominoes {
        spec: DominoesSpec,
        /// Row-major d_complex x d_complex orthogonal matrix.
        rotation: Option<Vec<f64>>,
    },
}

impl Painter {
    fn new(kind: &DatasetKind, structure_rng: &Rng) -> Result<Self> {
        match kind {
            DatasetKind::ToyGrid { sigma } => Ok(Painter::ToyGrid { sigma: *sigma }),
            DatasetKind::Dominoes(spec) => {
                let rotation = if spec.rotate {
                    Some(random_rotation(spec.d_complex, &mut structure_rng.clone()))
                } else {
                    None
                };
                Ok(Painter::Dominoes {
                    spec: spec.clone(),
                    rotation,
                })
            }
        }
    }

    fn paint(&self, c1: u8, c2: u8, rng: &mut Rng) -> Vec<f64> {
        match self {
            Painter::ToyGrid { sigma } => {
                let cx = if c1 == 1 { 0.5 } else { -0.5 };
                let cy = if c2 == 1 { 0.5 } else { -0.5 };
                vec![cx + sigma * rng.normal(), cy + sigma * rng.normal()]
            }
            Painter::Dominoes { spec, rotation } => {
                let mut x = Vec::with_capacity(spec.d_simple + spec.d_complex);
                // Simple block: concept 2 along the first axis, large margin.
                let sign2 = if c2 == 1 { 1.0 } else { -1.0 };
                x.push(sign2 * spec.margin_simple + spec.noise_simple * rng.normal());
                for _ in 1..spec.d_simple {
                    x.push(spec.noise_simple * rng.normal());
                }
                // Complex block: concept 1 along the first axis before
                // rotation, with occasional label-noise flips.
                let flip = rng.uniform() < spec.label_noise_complex;
                let enc1 = if flip { 1 - c1 } else { c1 };
                let sign1 = if enc1 == 1 { 1.0 } else { -1.0 };
                let mut z = Vec::with_capacity(spec.d_complex);
                z.push(sign1 + spec.noise_complex * rng.normal());
                for _ in 1..spec.d_complex {
                    z.push(spec.noise_complex * rng.normal());
                }
                match rotation {
                    Some(rot) => {
                        let d = spec.d_complex;
                        for r in 0..d {
                            let mut acc = 0.0;
                            for (k, zv) in z.iter().enumerate() {
                                acc += rot[r * d + k] * zv;
                            }
                            x.push(acc);
                        }
                    }
                    None => x.extend_from_slice(&z),
                }
                x
            }
        }
    }
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
fn random_rotation(d: usize, rng: &mut Rng) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for prev in &rows {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (vi, pi) in v.iter_mut().zip(prev) {
                *vi -= dot * pi;
            }
        }
        let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // degenerate draw; try again
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        rows.push(v);
    }
    rows.into_iter().flatten().collect()
}

fn draw(
    config: &DatasetConfig,
    painter: &Painter,
    freqs: &GroupFreqs,
    n: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    let f = freqs.f();
    if f != 2 {
        return Err(CoreError::config("generators currently produce F = 2 concepts"));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let g = rng.categorical(&freqs.0);
        let c1 = ((g >> 1) & 1) as u8;
        let c2 = (g & 1) as u8;
        let x = painter.paint(c1, c2, rng);
        // Concepts are functions of the features. For the toy grid the
        // sampled group and the sign of the coordinate provably agree
        // (Box-Muller deviations are bounded well below the 0.5 offset), but
        // the labels are still read off the features.
        let (c1, c2) = match painter {
            Painter::ToyGrid { .. } => ((x[0] > 0.0) as u8, (x[1] > 0.0) as u8),
            Painter::Dominoes { .. } => (c1, c2),
        };
        points.push(ConceptLabeledPoint {
            x,
            c: vec![c1, c2],
            y: c1,
        });
    }
    Dataset::new(f, config.dim(), points)
}

/// Empirical mix rate: the fraction of points whose concepts disagree, plus
/// the per-group breakdown over disagreement groups.
pub fn mix_rate(points: &[ConceptLabeledPoint]) -> (f64, Vec<(usize, f64)>) {
    if points.is_empty() {
        return (0.0, Vec::new());
    }
    let f = points[0].c.len();
    let n_groups = 1usize << f;
    let mut counts = vec![0usize; n_groups];
    for p in points {
        counts[p.group()] += 1;
    }
    let n = points.len() as f64;
    let mut per_group = Vec::new();
    let mut total = 0.0;
    for (g, &cnt) in counts.iter().enumerate() {
        if GroupFreqs::is_disagreement_group(f, g) {
            let rate = cnt as f64 / n;
            per_group.push((g, rate));
            total += rate;
        }
    }
    (total, per_group)
}

/// Mix rate at which the DivDis independence objective is exactly calibrated,
/// given the source marginals of the two concepts:
/// r* = p1 * (1 - p2) + (1 - p1) * p2 where pj = P(Cj = 0).
pub fn divdis_optimal_mix_rate(p1_zero: f64, p2_zero: f64) -> Result<f64> {
    for p in [p1_zero, p2_zero] {
        if !(0.0..=1.0).contains(&p) {
            return Err(CoreError::config(format!("marginal {p} outside [0, 1]")));
        }
    }
    Ok(p1_zero * (1.0 - p2_zero) + (1.0 - p1_zero) * p2_zero)
}

/// Splits used by the trainer: labeled source train/val, unlabeled target
/// train/val, and a labeled test set drawn from the target distribution.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub source_train: Dataset,
    pub source_val: Dataset,
    pub target_train: Dataset,
    pub target_val: Dataset,
    pub test: Dataset,
}

/// Split sizes for [`generate_bundle`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            source_train: 1024,
            source_val: 512,
            target_train: 2048,
            target_val: 512,
            test: 2048,
        }
    }
}

/// Draw all five splits from one config. Each split gets its own derived
/// seed; the test split follows the target distribution.
pub fn generate_bundle(config: &DatasetConfig, sizes: &SplitSizes) -> Result<DatasetBundle> {
    let root = Rng::new(config.seed);
    let mk = |tag: u64, n_source: usize, n_target: usize| -> Result<(Dataset, Dataset)> {
        let mut cfg = config.clone();
        cfg.seed = root.derive(tag).seed();
        cfg.n_source = n_source;
        cfg.n_target = n_target;
        // Splits draw fresh points but must share the feature map, so the
        // painter structure stays keyed to the bundle seed.
        generate_structured(&cfg, config.seed)
    };
    let (source_train, target_train) = mk(1, sizes.source_train, sizes.target_train)?;
    let (source_val, target_val) = mk(2, sizes.source_val, sizes.target_val)?;
    let (_, test) = mk(3, 1, sizes.test)?;
    Ok(DatasetBundle {
        source_train,
        source_val,
        target_train,
        target_val,
        test,
    })
}

/// Balanced toy-grid config: source mass on the agreement corners, target
/// mass split evenly between agreement and disagreement per `mix`.
pub fn toy_grid_config(mix: f64, seed: u64) -> Result<DatasetConfig> {
    let target = GroupFreqs(vec![0.25, 0.25, 0.25, 0.25]).with_mix_rate(mix)?;
    let cfg = DatasetConfig {
        kind: DatasetKind::ToyGrid { sigma: 0.01 },
        source_freqs: GroupFreqs(vec![0.5, 0.0, 0.0, 0.5]),
        target_freqs: target,
        n_source: 0,
        n_target: 0,
        incomplete_rate: 0.0,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Dominoes config. `conflict_ratio` sets the relative mass of group (0,1)
/// within the disagreement block: 0.5 is balanced; 0.8 reproduces the
/// imbalanced 4:1 profile (e.g. frequencies 0.4 / 0.1 at mix rate 0.5).
pub fn dominoes_config(mix: f64, conflict_ratio: f64, gap: f64, seed: u64) -> Result<DatasetConfig> {
    if !(0.0..=1.0).contains(&conflict_ratio) {
        return Err(CoreError::config("conflict_ratio must lie in [0, 1]"));
    }
    let base = GroupFreqs(vec![
        0.25,
        0.5 * conflict_ratio,
        0.5 * (1.0 - conflict_ratio),
        0.25,
    ]);
    let target = base.with_mix_rate(mix)?;
    let cfg = DatasetConfig {
        kind: DatasetKind::Dominoes(DominoesSpec::default_gap(gap)),
        source_freqs: GroupFreqs(vec![0.5, 0.0, 0.0, 0.5]),
        target_freqs: target,
        n_source: 0,
        n_target: 0,
        incomplete_rate: 0.0,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}
