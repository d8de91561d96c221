use serde::{Deserialize, Serialize};

use super::{HeadProbs, LogitGrads};
use crate::error::{CoreError, Result};
use crate::rng::Rng;

/// Network shape. `classes` is fixed at 2 throughout the experiments but kept
/// explicit so shapes are visible at call sites.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input_dim: usize,
    /// Hidden layer widths; empty means heads read the raw input (a linear
    /// probe ensemble).
    pub hidden: Vec<usize>,
    pub heads: usize,
    pub classes: usize,
}

impl Arch {
    pub fn new(input_dim: usize, hidden: Vec<usize>, heads: usize) -> Self {
        Arch {
            input_dim,
            hidden,
            heads,
            classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(CoreError::config("input_dim must be positive"));
        }
        if self.heads == 0 {
            return Err(CoreError::config("need at least one head"));
        }
        if self.classes != 2 {
            return Err(CoreError::config("only binary heads are supported"));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(CoreError::config("hidden widths must be positive"));
        }
        Ok(())
    }

    /// Width of the representation the heads consume.
    pub fn trunk_out(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }
}

/// Dense layer, weights row-major `[out][in]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    /// Scaled-uniform fan-in init: U(-1/sqrt(in), 1/sqrt(in)) weights, zero
    /// biases. Draw order is row-major and fixed.
    fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        Dense {
            in_dim,
            out_dim,
            w,
            b: vec![0.0; out_dim],
        }
    }

    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }

    /// y = W x + b for each row of `x` (n × in_dim), written into `out`.
    fn affine(&self, x: &[f64], n: usize, out: &mut Vec<f64>) {
        out.clear();
        out.reserve(n * self.out_dim);
        for i in 0..n {
            let xi = &x[i * self.in_dim..(i + 1) * self.in_dim];
            for o in 0..self.out_dim {
                let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = self.b[o];
                for (wv, xv) in row.iter().zip(xi) {
                    acc += wv * xv;
                }
                out.push(acc);
            }
        }
    }
}

/// Gradient block matching one [`Dense`] layer.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LayerGrad {
    fn zeros_like(layer: &Dense) -> Self {
        LayerGrad {
            w: vec![0.0; layer.w.len()],
            b: vec![0.0; layer.b.len()],
        }
    }
}

/// Parameter gradients for the whole ensemble.
#[derive(Debug, Clone)]
pub struct Grads {
    pub trunk: Vec<LayerGrad>,
    pub heads: Vec<LayerGrad>,
}

impl Grads {
    /// self += scale * other. Shapes must match.
    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        let add = |dst: &mut [LayerGrad], src: &[LayerGrad]| {
            for (d, s) in dst.iter_mut().zip(src) {
                for (a, b) in d.w.iter_mut().zip(&s.w) {
                    *a += scale * b;
                }
                for (a, b) in d.b.iter_mut().zip(&s.b) {
                    *a += scale * b;
                }
            }
        };
        add(&mut self.trunk, &other.trunk);
        add(&mut self.heads, &other.heads);
    }
}

/// Row-major batch of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn new(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * dim {
            return Err(CoreError::shape(format!(
                "batch data length {} != n {} * dim {}",
                data.len(),
                n,
                dim
            )));
        }
        Ok(Batch { n, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Activations cached by [`EnsembleModel::forward`] for the matching
/// backward pass. `version` ties the cache to the parameter state it was
/// computed from.
#[derive(Debug, Clone)]
pub struct Forward {
    version: u64,
    input: Batch,
    /// Post-ReLU activations per trunk layer, each n × width.
    trunk_acts: Vec<Vec<f64>>,
    pub logits: Vec<Vec<[f64; 2]>>,
    pub probs: HeadProbs,
}

impl Forward {
    pub fn n(&self) -> usize {
        self.input.n
    }

    /// Gate state of every trunk ReLU, flattened over layers and instances.
    /// Finite-difference checks compare patterns between perturbed forwards
    /// to detect steps that cross a gate boundary, where the loss is only
    /// one-sided differentiable and central differences are invalid.
    pub fn relu_gates(&self) -> Vec<bool> {
        self.trunk_acts
            .iter()
            .flat_map(|layer| layer.iter().map(|&a| a > 0.0))
            .collect()
    }
}

/// Shared-trunk ensemble. Heads are plain linear layers over the trunk
/// output; every head sees the same representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleModel {
    arch: Arch,
    trunk: Vec<Dense>,
    heads: Vec<Dense>,
    /// Bumped on every parameter mutation; forward caches carry the version
    /// they were computed under.
    version: u64,
}

impl EnsembleModel {
    pub fn new(arch: Arch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut trunk = Vec::with_capacity(arch.hidden.len());
        let mut in_dim = arch.input_dim;
        for &width in &arch.hidden {
            trunk.push(Dense::init(in_dim, width, rng));
            in_dim = width;
        }
        let heads = (0..arch.heads)
            .map(|_| Dense::init(in_dim, arch.classes, rng))
            .collect();
        Ok(EnsembleModel {
            arch,
            trunk,
            heads,
            version: 0,
        })
    }

    /// All-zero parameters; with no signal every head outputs (0.5, 0.5).
    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        let mut trunk = Vec::new();
        let mut in_dim = arch.input_dim;
        for &width in &arch.hidden {
            trunk.push(Dense::zeros(in_dim, width));
            in_dim = width;
        }
        let heads = (0..arch.heads)
            .map(|_| Dense::zeros(in_dim, arch.classes))
            .collect();
        Ok(EnsembleModel {
            arch,
            trunk,
            heads,
            version: 0,
        })
    }

    pub fn arch(&self) -> &Arch {
        self.arch_ref()
    }

    fn arch_ref(&self) -> &Arch {
        &self.arch
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub(crate) fn from_parts(arch: Arch, trunk: Vec<Dense>, heads: Vec<Dense>) -> Result<Self> {
        arch.validate()?;
        let mut in_dim = arch.input_dim;
        for (i, layer) in trunk.iter().enumerate() {
            if layer.in_dim != in_dim
                || layer.w.len() != layer.in_dim * layer.out_dim
                || layer.b.len() != layer.out_dim
            {
                return Err(CoreError::shape(format!("trunk layer {i} inconsistent")));
            }
            in_dim = layer.out_dim;
        }
        for (i, head) in heads.iter().enumerate() {
            if head.in_dim != in_dim || head.out_dim != arch.classes {
                return Err(CoreError::shape(format!("head {i} inconsistent")));
            }
        }
        if trunk.len() != arch.hidden.len() || heads.len() != arch.heads {
            return Err(CoreError::shape("layer counts do not match arch"));
        }
        Ok(EnsembleModel {
            arch,
            trunk,
            heads,
            version: 0,
        })
    }

    pub(crate) fn parts(&self) -> (&Arch, &[Dense], &[Dense]) {
        (&self.arch, &self.trunk, &self.heads)
    }

    /// Forward pass over a batch. Returns per-head probabilities plus the
    /// cache needed by [`Self::backward`]. Output shape is
    /// heads × n × classes; each row sums to 1 up to rounding.
    pub fn forward(&self, input: &Batch) -> Result<Forward> {
        if input.dim != self.arch.input_dim {
            return Err(CoreError::shape(format!(
                "input dim {} != model input dim {}",
                input.dim, self.arch.input_dim
            )));
        }
        let n = input.n;
        let mut trunk_acts: Vec<Vec<f64>> = Vec::with_capacity(self.trunk.len());
        let mut scratch = Vec::new();
        let mut cur: &[f64] = &input.data;
        for layer in &self.trunk {
            layer.affine(cur, n, &mut scratch);
            for v in scratch.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            trunk_acts.push(scratch.clone());
            cur = trunk_acts.last().unwrap();
        }

        let mut logits: Vec<Vec<[f64; 2]>> = Vec::with_capacity(self.heads.len());
        let mut probs: HeadProbs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            head.affine(cur, n, &mut scratch);
            let mut hl = Vec::with_capacity(n);
            let mut hp = Vec::with_capacity(n);
            for i in 0..n {
                let z = [scratch[2 * i], scratch[2 * i + 1]];
                hl.push(z);
                hp.push(softmax2(z));
            }
            logits.push(hl);
            probs.push(hp);
        }

        Ok(Forward {
            version: self.version,
            input: input.clone(),
            trunk_acts,
            logits,
            probs,
        })
    }

    /// Backpropagate per-head logit gradients into parameter gradients.
    ///
    /// `dlogits` must have shape heads × n × 2 and come from a loss evaluated
    /// on `fwd.probs`. The forward cache must have been produced by this
    /// model at its current parameter version.
    pub fn backward(&self, fwd: &Forward, dlogits: &LogitGrads) -> Result<Grads> {
        if fwd.version != self.version {
            return Err(CoreError::state(format!(
                "forward cache is stale: computed at version {}, model is at {}",
                fwd.version, self.version
            )));
        }
        let n = fwd.input.n;
        if dlogits.len() != self.heads.len() || dlogits.iter().any(|h| h.len() != n) {
            return Err(CoreError::shape(
                "dlogits shape does not match heads x batch".to_string(),
            ));
        }

        let trunk_out_dim = self.arch.trunk_out();
        let trunk_out: &[f64] = match self.trunk.len() {
            0 => &fwd.input.data,
            k => &fwd.trunk_acts[k - 1],
        };

        let mut head_grads = Vec::with_capacity(self.heads.len());
        // d(loss)/d(trunk output), accumulated over heads.
        let mut d_trunk_out = vec![0.0; n * trunk_out_dim];
        for (head, dh) in self.heads.iter().zip(dlogits) {
            let mut g = LayerGrad::zeros_like(head);
            for i in 0..n {
                let h = &trunk_out[i * trunk_out_dim..(i + 1) * trunk_out_dim];
                let dz = dh[i];
                for c in 0..2 {
                    g.b[c] += dz[c];
                    let row = &mut g.w[c * trunk_out_dim..(c + 1) * trunk_out_dim];
                    for (gw, hv) in row.iter_mut().zip(h) {
                        *gw += dz[c] * hv;
                    }
                    let wrow = &head.w[c * trunk_out_dim..(c + 1) * trunk_out_dim];
                    let dto = &mut d_trunk_out[i * trunk_out_dim..(i + 1) * trunk_out_dim];
                    for (dv, wv) in dto.iter_mut().zip(wrow) {
                        *dv += dz[c] * wv;
                    }
                }
            }
            head_grads.push(g);
        }

        // Walk the trunk backwards.
        let mut trunk_grads: Vec<LayerGrad> = self.trunk.iter().map(LayerGrad::zeros_like).collect();
        let mut delta = d_trunk_out;
        for li in (0..self.trunk.len()).rev() {
            let layer = &self.trunk[li];
            let acts = &fwd.trunk_acts[li];
            // ReLU gate: gradient passes only where the activation is
            // strictly positive.
            for (d, a) in delta.iter_mut().zip(acts) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            let below: &[f64] = if li == 0 {
                &fwd.input.data
            } else {
                &fwd.trunk_acts[li - 1]
            };
            let g = &mut trunk_grads[li];
            let mut d_below = vec![0.0; n * layer.in_dim];
            for i in 0..n {
                let x = &below[i * layer.in_dim..(i + 1) * layer.in_dim];
                let drow = &delta[i * layer.out_dim..(i + 1) * layer.out_dim];
                for o in 0..layer.out_dim {
                    let d = drow[o];
                    if d == 0.0 {
                        continue;
                    }
                    g.b[o] += d;
                    let gw = &mut g.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (gv, xv) in gw.iter_mut().zip(x) {
                        *gv += d * xv;
                    }
                    let wrow = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                    let db = &mut d_below[i * layer.in_dim..(i + 1) * layer.in_dim];
                    for (bv, wv) in db.iter_mut().zip(wrow) {
                        *bv += d * wv;
                    }
                }
            }
            delta = d_below;
        }

        Ok(Grads {
            trunk: trunk_grads,
            heads: head_grads,
        })
    }

    pub fn param_count(&self) -> usize {
        self.trunk
            .iter()
            .chain(&self.heads)
            .map(|l| l.w.len() + l.b.len())
            .sum()
    }

    /// Flat parameter snapshot in a fixed order (trunk layers then heads,
    /// weights before biases). Used by tests and finite differencing.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.trunk.iter().chain(&self.heads) {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    /// Overwrite parameters from a flat snapshot (inverse of
    /// [`Self::flat_params`]). Bumps the version.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(CoreError::shape(format!(
                "flat param length {} != param count {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut pos = 0;
        for l in self.trunk.iter_mut().chain(self.heads.iter_mut()) {
            let (nw, nb) = (l.w.len(), l.b.len());
            l.w.copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            l.b.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        self.version += 1;
        Ok(())
    }

    /// Mutable access for the optimizer; bumps the version exactly once.
    pub(crate) fn layers_mut(&mut self) -> (&mut Vec<Dense>, &mut Vec<Dense>) {
        self.version += 1;
        (&mut self.trunk, &mut self.heads)
    }
}

/// Numerically stable two-way softmax.
pub fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Chain rule from a gradient on the two class probabilities to the logits:
/// dL/dz_k = p_k (dL/dp_k - sum_j dL/dp_j p_j).
pub fn softmax2_backward(p: [f64; 2], dp: [f64; 2]) -> [f64; 2] {
    let dot = dp[0] * p[0] + dp[1] * p[1];
    [p[0] * (dp[0] - dot), p[1] * (dp[1] - dot)]
}
