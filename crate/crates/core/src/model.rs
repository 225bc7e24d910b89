//! GLU-expert sparse mixture-of-experts layers and their forward pass.

use std::collections::BTreeMap;

use crate::error::{check_dim, DernError, Result};
use crate::linalg::{dot_f64, Matrix};

pub(crate) fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// One GLU expert: `down (silu(gate x) * (up x))`.
///
/// `gate` and `up` are `h x d`, `down` is `d x h`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    pub gate: Matrix,
    pub up: Matrix,
    pub down: Matrix,
}

impl ExpertWeights {
    pub fn new(gate: Matrix, up: Matrix, down: Matrix) -> Result<Self> {
        let (h, d) = gate.shape();
        if h == 0 || d == 0 {
            return Err(DernError::ShapeMismatch(format!(
                "expert needs h >= 1 and d >= 1, got {h}x{d}"
            )));
        }
        if up.shape() != (h, d) || down.shape() != (d, h) {
            return Err(DernError::ShapeMismatch(format!(
                "gate {:?}, up {:?}, down {:?} are inconsistent",
                gate.shape(),
                up.shape(),
                down.shape()
            )));
        }
        Ok(Self { gate, up, down })
    }

    pub fn zeros(h: usize, d: usize) -> Self {
        Self {
            gate: Matrix::zeros(h, d),
            up: Matrix::zeros(h, d),
            down: Matrix::zeros(d, h),
        }
    }

    pub fn hidden(&self) -> usize {
        self.gate.rows()
    }

    pub fn dim(&self) -> usize {
        self.gate.cols()
    }

    pub fn param_count(&self) -> usize {
        3 * self.hidden() * self.dim()
    }

    /// Gate, up and down weights concatenated row-major.
    pub fn flatten(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(self.gate.data());
        v.extend_from_slice(self.up.data());
        v.extend_from_slice(self.down.data());
        v
    }

    pub fn is_finite(&self) -> bool {
        self.gate.is_finite() && self.up.is_finite() && self.down.is_finite()
    }

    pub(crate) fn forward_f64(&self, x: &[f32]) -> Result<Vec<f64>> {
        let g = self.gate.matvec_f64(x)?;
        let u = self.up.matvec_f64(x)?;
        let hidden: Vec<f32> = g
            .iter()
            .zip(&u)
            .map(|(&gi, &ui)| (silu(gi) * ui) as f32)
            .collect();
        self.down.matvec_f64(&hidden)
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(self.forward_f64(x)?.into_iter().map(|v| v as f32).collect())
    }
}

pub fn expert_forward(expert: &ExpertWeights, x: &[f32]) -> Result<Vec<f32>> {
    expert.forward(x)
}

/// Router matrix; row `i` yields the logit of expert `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterWeights {
    pub gate: Matrix,
}

impl RouterWeights {
    pub fn new(gate: Matrix) -> Self {
        Self { gate }
    }

    pub fn experts(&self) -> usize {
        self.gate.rows()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.gate.row(i)
    }
}

/// Top-k experts for one token, with their (un-renormalized) softmax weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Routing {
    /// Weights rescaled to sum to one over the active set.
    pub fn normalized(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub experts: Vec<ExpertWeights>,
    pub router: RouterWeights,
    pub top_k: usize,
}

impl MoeLayer {
    pub fn new(experts: Vec<ExpertWeights>, router: RouterWeights, top_k: usize) -> Result<Self> {
        let n = experts.len();
        if n == 0 {
            return Err(DernError::ShapeMismatch("layer has no experts".into()));
        }
        if router.experts() != n {
            return Err(DernError::ShapeMismatch(format!(
                "router has {} rows for {n} experts",
                router.experts()
            )));
        }
        if top_k == 0 || top_k > n {
            return Err(DernError::InvalidArgument(format!(
                "top_k {top_k} outside 1..={n}"
            )));
        }
        let d = router.gate.cols();
        for (i, e) in experts.iter().enumerate() {
            if e.dim() != d {
                return Err(DernError::ShapeMismatch(format!(
                    "expert {i} has d={} but router has d={d}",
                    e.dim()
                )));
            }
        }
        Ok(Self {
            experts,
            router,
            top_k,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn dim(&self) -> usize {
        self.router.gate.cols()
    }

    pub fn param_count(&self) -> usize {
        self.router.gate.data().len() + self.experts.iter().map(|e| e.param_count()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.router.gate.is_finite() && self.experts.iter().all(ExpertWeights::is_finite)
    }

    /// Softmax over all logits, then the `top_k` largest weights. Ties go
    /// to the lower expert index.
    pub fn route(&self, x: &[f32]) -> Result<Routing> {
        check_dim(self.dim(), x.len())?;
        let logits: Vec<f64> = (0..self.num_experts())
            .map(|i| dot_f64(self.router.row(i), x))
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();

        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        order.truncate(self.top_k);
        let weights = order.iter().map(|&i| probs[i]).collect();
        Ok(Routing {
            experts: order,
            weights,
        })
    }

    pub(crate) fn forward_f64(&self, x: &[f32]) -> Result<Vec<f64>> {
        let routing = self.route(x)?;
        let mut out = vec![0.0f64; self.dim()];
        for (&e, w) in routing.experts.iter().zip(routing.normalized()) {
            let y = self.experts[e].forward_f64(x)?;
            for (o, v) in out.iter_mut().zip(y) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    /// Weighted sum of the routed experts' outputs, weights renormalized
    /// over the active set.
    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(self.forward_f64(x)?.into_iter().map(|v| v as f32).collect())
    }
}

pub fn route(layer: &MoeLayer, x: &[f32]) -> Result<Routing> {
    layer.route(x)
}

pub fn layer_forward(layer: &MoeLayer, x: &[f32]) -> Result<Vec<f32>> {
    layer.forward(x)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MoeModel {
    pub layers: Vec<MoeLayer>,
    pub meta: BTreeMap<String, String>,
}

impl MoeModel {
    pub fn new(layers: Vec<MoeLayer>, meta: BTreeMap<String, String>) -> Result<Self> {
        if let Some(first) = layers.first() {
            let d = first.dim();
            for (i, l) in layers.iter().enumerate() {
                if l.dim() != d {
                    return Err(DernError::ShapeMismatch(format!(
                        "layer {i} has d={} but layer 0 has d={d}",
                        l.dim()
                    )));
                }
            }
        }
        Ok(Self { layers, meta })
    }

    pub fn dim(&self) -> Option<usize> {
        self.layers.first().map(MoeLayer::dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(MoeLayer::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(MoeLayer::is_finite)
    }

    /// Residual stack: `x <- x + layer(x)` for each layer in order.
    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            let y = layer.forward_f64(&h)?;
            h = h
                .iter()
                .zip(y)
                .map(|(&a, b)| (f64::from(a) + b) as f32)
                .collect();
        }
        Ok(h)
    }
}

pub fn param_count(model: &MoeModel) -> usize {
    model.param_count()
}
