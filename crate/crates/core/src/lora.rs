//! Low-rank adapters over frozen (possibly dequantised) linear maps.
//!
//! The adapted map is `W₀ + (α/r)·B·A` with `B ∈ ℝ^{d×r}`, `A ∈ ℝ^{r×k}`.
//! `A` starts Gaussian and `B` starts at zero, so a fresh adapter leaves the
//! base map untouched. The low-rank path always runs in full precision next to
//! the base product; `W₀` itself is never written.

use std::collections::BTreeMap;

use crate::error::{dim_err, invalid, Result};
use crate::tensor::{gaussian_fill, matmul, Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
    alpha: f32,
}

/// Gradients of an upstream loss with respect to `A`, `B` and the layer input.
#[derive(Debug, Clone)]
pub struct LoraGrads {
    pub ga: Matrix,
    pub gb: Matrix,
    pub gx: Matrix,
}

fn check_rank(d: usize, k_dim: usize, r: usize) -> Result<()> {
    if r == 0 || 2 * r > d.min(k_dim) {
        return Err(invalid!(
            "rank {r} must satisfy 1 <= r <= min({d}, {k_dim})/2"
        ));
    }
    Ok(())
}

impl LoraAdapter {
    /// Fresh adapter: `A ~ N(0, 1/r)`, `B = 0`.
    pub fn init(d: usize, k_dim: usize, r: usize, alpha: f32, rng: &mut Rng) -> Result<Self> {
        check_rank(d, k_dim, r)?;
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid!("alpha must be positive, got {alpha}"));
        }
        let std = (1.0 / r as f64).sqrt() as f32;
        let a = gaussian_fill(Matrix::zeros(r, k_dim), 0.0, std, rng)?;
        Ok(Self {
            a,
            b: Matrix::zeros(d, r),
            alpha,
        })
    }

    pub fn from_parts(a: Matrix, b: Matrix, alpha: f32) -> Result<Self> {
        let r = a.rows();
        if b.cols() != r {
            return Err(dim_err!(
                "B is {}x{} but A has rank {r}",
                b.rows(),
                b.cols()
            ));
        }
        check_rank(b.rows(), a.cols(), r)?;
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid!("alpha must be positive, got {alpha}"));
        }
        Ok(Self { a, b, alpha })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    /// `(A, B)` for in-place updates.
    pub(crate) fn factors_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.a, &mut self.b)
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    /// Effective multiplier `α/r`.
    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank() as f32
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `(α/r)·B·A`.
    pub fn delta_weight(&self) -> Result<Matrix> {
        matmul(&self.b, &self.a)?.scale(self.scaling())
    }

    fn check_base(&self, w0: &Matrix) -> Result<()> {
        if w0.shape() != (self.out_dim(), self.in_dim()) {
            return Err(dim_err!(
                "adapter is {}x{} but base weight is {}x{}",
                self.out_dim(),
                self.in_dim(),
                w0.rows(),
                w0.cols()
            ));
        }
        Ok(())
    }
}

/// `y = W₀·x + (α/r)·B·(A·x)`, with `x` holding one input per column.
pub fn lora_forward(w0: &Matrix, ad: &LoraAdapter, x: &Matrix) -> Result<Matrix> {
    ad.check_base(w0)?;
    let mut y = matmul(w0, x)?;
    if ad.b.is_zero() {
        return Ok(y);
    }
    let low = matmul(&ad.b, &matmul(&ad.a, x)?)?;
    let s = ad.scaling();
    for (yi, li) in y.data_mut().iter_mut().zip(low.data()) {
        *yi += s * li;
    }
    Ok(y)
}

/// `W₀ + (α/r)·B·A`.
pub fn merge(w0: &Matrix, ad: &LoraAdapter) -> Result<Matrix> {
    ad.check_base(w0)?;
    if ad.b.is_zero() {
        return Ok(w0.clone());
    }
    w0.add(&ad.delta_weight()?)
}

/// Gradients through the adapted map given the upstream gradient `gy`.
/// No gradient is produced for `W₀`.
pub fn lora_backward(w0: &Matrix, ad: &LoraAdapter, x: &Matrix, gy: &Matrix) -> Result<LoraGrads> {
    ad.check_base(w0)?;
    check_io(ad, x, gy)?;
    let (ga, gb, bt_gy) = adapter_grads(ad, x, gy)?;
    let mut gx = matmul(&w0.transpose(), gy)?;
    let low = matmul(&ad.a.transpose(), &bt_gy)?;
    let s = ad.scaling();
    for (g, l) in gx.data_mut().iter_mut().zip(low.data()) {
        *g += s * l;
    }
    Ok(LoraGrads { ga, gb, gx })
}

fn check_io(ad: &LoraAdapter, x: &Matrix, gy: &Matrix) -> Result<()> {
    if x.rows() != ad.in_dim() || gy.rows() != ad.out_dim() || x.cols() != gy.cols() {
        return Err(dim_err!(
            "adapter {}x{} got input {:?} and upstream gradient {:?}",
            ad.out_dim(),
            ad.in_dim(),
            x.shape(),
            gy.shape()
        ));
    }
    Ok(())
}

/// `(gA, gB, Bᵀ·gy)`; the last term is reused for the input gradient.
pub(crate) fn adapter_grads(
    ad: &LoraAdapter,
    x: &Matrix,
    gy: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    check_io(ad, x, gy)?;
    let s = ad.scaling();
    let ax = matmul(&ad.a, x)?;
    let bt_gy = matmul(&ad.b.transpose(), gy)?;
    let gb = matmul(gy, &ax.transpose())?.scale(s)?;
    let ga = matmul(&bt_gy, &x.transpose())?.scale(s)?;
    Ok((ga, gb, bt_gy))
}

/// Input-gradient contribution of the low-rank path: `(α/r)·Aᵀ·(Bᵀ·gy)`.
pub(crate) fn adapter_input_grad(ad: &LoraAdapter, bt_gy: &Matrix) -> Result<Matrix> {
    matmul(&ad.a.transpose(), bt_gy)?.scale(ad.scaling())
}

/// Trainable adapter parameters for `l_lora` square `d_model × d_model`
/// attach points: `2 · l_lora · d_model · r`.
pub fn param_count(l_lora: usize, d_model: usize, r: usize) -> usize {
    2 * l_lora * d_model * r
}

/// General form for non-square attach points: `r·(d + k)` per layer.
pub fn param_count_for_shapes(shapes: &[(usize, usize)], r: usize) -> usize {
    shapes.iter().map(|(d, k)| r * (d + k)).sum()
}

/// One speaker's adapters, keyed by layer id.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub speaker: String,
    pub adapters: BTreeMap<String, LoraAdapter>,
}

impl AdapterSet {
    pub fn new(speaker: impl Into<String>) -> Self {
        Self {
            speaker: speaker.into(),
            adapters: BTreeMap::new(),
        }
    }

    pub fn get(&self, layer: &str) -> Option<&LoraAdapter> {
        self.adapters.get(layer)
    }

    pub fn num_params(&self) -> usize {
        self.adapters.values().map(LoraAdapter::num_params).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// Copy of these adapters relabelled for another speaker.
    pub fn for_speaker(&self, speaker: impl Into<String>) -> Self {
        Self {
            speaker: speaker.into(),
            adapters: self.adapters.clone(),
        }
    }
}
